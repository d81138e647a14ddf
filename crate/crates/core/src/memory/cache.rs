use serde::{Deserialize, Serialize};

pub const LINE_WORDS: usize = 8;
pub const LINE_BYTES: u32 = (LINE_WORDS * 4) as u32;
/// Number of stored tag bits (line address bits of a 32-bit address).
pub const TAG_BITS: u32 = 27;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheConfig {
    pub line_count: u32,
    pub fill_cycles_per_line: u32,
    pub hit_cycles: u32,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            line_count: 64,
            fill_cycles_per_line: 8 + 4,
            hit_cycles: 1,
        }
    }
}

impl CacheConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !self.line_count.is_power_of_two() {
            return Err("line_count must be a power of two".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Line {
    pub valid: bool,
    /// Line address (`addr >> 5`).
    pub tag: u32,
    pub data: [u32; LINE_WORDS],
    pub data_error: bool,
    pub tag_error: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lookup {
    Hit,
    Miss,
    /// Tag RAM parity error: handled as a miss.
    TagError,
    /// Data RAM parity error on a matching line.
    DataError,
}

/// Direct-mapped cache with fixed 8-word lines.
#[derive(Debug, Clone)]
pub struct Cache {
    pub config: CacheConfig,
    lines: Vec<Line>,
}

pub fn line_base(addr: u32) -> u32 {
    addr & !(LINE_BYTES - 1)
}

impl Cache {
    pub fn new(config: CacheConfig) -> Cache {
        Cache {
            config,
            lines: vec![Line::default(); config.line_count as usize],
        }
    }

    pub fn index_of(&self, addr: u32) -> usize {
        ((addr >> 5) & (self.config.line_count - 1)) as usize
    }

    pub fn line(&self, index: usize) -> &Line {
        &self.lines[index]
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn lookup(&self, addr: u32) -> Lookup {
        let line = &self.lines[self.index_of(addr)];
        if !line.valid {
            return Lookup::Miss;
        }
        if line.tag_error {
            return Lookup::TagError;
        }
        if line.tag != addr >> 5 {
            return Lookup::Miss;
        }
        if line.data_error {
            Lookup::DataError
        } else {
            Lookup::Hit
        }
    }

    pub fn fill(&mut self, addr: u32, data: [u32; LINE_WORDS]) {
        let idx = self.index_of(addr);
        self.lines[idx] = Line {
            valid: true,
            tag: addr >> 5,
            data,
            data_error: false,
            tag_error: false,
        };
    }

    pub fn invalidate_at(&mut self, addr: u32) {
        let idx = self.index_of(addr);
        self.lines[idx] = Line::default();
    }

    pub fn invalidate_all(&mut self) {
        self.lines.iter_mut().for_each(|l| *l = Line::default());
    }

    /// Word from a line known to hit.
    pub fn word(&self, addr: u32) -> u32 {
        self.lines[self.index_of(addr)].data[((addr >> 2) & 7) as usize]
    }

    /// Write-through update; returns whether the line was present.
    pub fn update_word(&mut self, addr: u32, value: u32) -> bool {
        if self.lookup(addr) != Lookup::Hit {
            return false;
        }
        let idx = self.index_of(addr);
        self.lines[idx].data[((addr >> 2) & 7) as usize] = value;
        true
    }

    /// Flips one data bit of a valid line and marks its parity shadow.
    pub fn flip_data_bit(&mut self, index: usize, word: usize, bit: u32) -> bool {
        let line = &mut self.lines[index];
        if !line.valid {
            return false;
        }
        line.data[word] ^= 1 << bit;
        line.data_error = true;
        true
    }

    pub fn flip_tag_bit(&mut self, index: usize, bit: u32) -> bool {
        let line = &mut self.lines[index];
        if !line.valid {
            return false;
        }
        line.tag ^= 1 << bit;
        line.tag_error = true;
        true
    }

    /// Line indices that currently hold any address in `[start, end)`.
    pub fn valid_lines_in(&self, start: u32, end: u32) -> Vec<usize> {
        let mut out = Vec::new();
        let mut a = line_base(start);
        while a < end {
            let idx = self.index_of(a);
            if self.lookup(a) == Lookup::Hit && !out.contains(&idx) {
                out.push(idx);
            }
            match a.checked_add(LINE_BYTES) {
                Some(n) => a = n,
                None => break,
            }
        }
        out
    }
}

/// Number of distinct cache lines touched by `words` consecutive words
/// starting at `addr`.
pub fn lines_spanned(addr: u32, words: u32) -> u32 {
    if words == 0 {
        return 0;
    }
    let first = addr >> 5;
    let last = (addr + 4 * (words - 1)) >> 5;
    last - first + 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_words_from_word_seven_span_three_lines() {
        assert_eq!(lines_spanned(7 * 4, 10), 3);
        assert_eq!(lines_spanned(0, 10), 2);
        assert_eq!(lines_spanned(0, 8), 1);
    }

    #[test]
    fn aligned_ldm_of_at_most_eight_words_touches_one_line() {
        for words in 1..=8 {
            for line in 0..4u32 {
                assert_eq!(lines_spanned(line * LINE_BYTES, words), 1);
            }
        }
    }

    #[test]
    fn ten_word_transfer_never_touches_more_than_three_lines() {
        for offset in 0..8u32 {
            let n = lines_spanned(0x1000 + offset * 4, 10);
            assert!(n == 2 || n == 3);
        }
    }

    #[test]
    fn fill_lookup_and_errors() {
        let mut c = Cache::new(CacheConfig {
            line_count: 4,
            ..CacheConfig::default()
        });
        assert_eq!(c.lookup(0x40), Lookup::Miss);
        c.fill(0x40, [1, 2, 3, 4, 5, 6, 7, 8]);
        assert_eq!(c.lookup(0x44), Lookup::Hit);
        assert_eq!(c.word(0x48), 3);
        // Same index, different tag.
        assert_eq!(c.lookup(0x40 + 4 * 32), Lookup::Miss);
        let idx = c.index_of(0x40);
        assert!(c.flip_data_bit(idx, 2, 0));
        assert_eq!(c.lookup(0x48), Lookup::DataError);
        c.fill(0x40, [0; 8]);
        assert!(c.flip_tag_bit(idx, 3));
        assert_eq!(c.lookup(0x40), Lookup::TagError);
        assert!(!c.flip_data_bit(0, 0, 0), "line 0 is invalid");
    }
}
