use serde::{Deserialize, Serialize};

/// Flash interface timing. Instruction fetches that continue the current
/// stream are cheap; anything else restarts the stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlashTiming {
    pub sequential_cycles: u32,
    pub nonsequential_cycles: u32,
    /// Bytes delivered per flash access.
    pub fetch_width: u32,
}

impl Default for FlashTiming {
    fn default() -> Self {
        FlashTiming {
            sequential_cycles: 1,
            nonsequential_cycles: 4,
            fetch_width: 4,
        }
    }
}

impl FlashTiming {
    pub fn validate(&self) -> Result<(), String> {
        if self.sequential_cycles < 1 {
            return Err("sequential_cycles must be >= 1".into());
        }
        if self.nonsequential_cycles < self.sequential_cycles {
            return Err("nonsequential_cycles must be >= sequential_cycles".into());
        }
        if ![2, 4, 8, 16].contains(&self.fetch_width) {
            return Err("fetch_width must be 2, 4, 8 or 16".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamAccess {
    pub cycles: u32,
    pub sequential: bool,
}

#[derive(Debug, Clone)]
pub struct FlashModel {
    pub timing: FlashTiming,
    stream_pos: Option<u32>,
}

impl FlashModel {
    pub fn new(timing: FlashTiming) -> FlashModel {
        FlashModel {
            timing,
            stream_pos: None,
        }
    }

    pub fn stream_pos(&self) -> Option<u32> {
        self.stream_pos
    }

    /// Accounts one transfer of `len` bytes at `addr`. The first beat is
    /// sequential iff `addr` is where the stream left off; further beats
    /// (when `len` exceeds the fetch width) always continue the stream.
    pub fn access(&mut self, addr: u32, len: u32) -> StreamAccess {
        let sequential = self.stream_pos == Some(addr);
        let beats = len.div_ceil(self.timing.fetch_width).max(1);
        let first = if sequential {
            self.timing.sequential_cycles
        } else {
            self.timing.nonsequential_cycles
        };
        self.stream_pos = Some(addr.wrapping_add(len));
        StreamAccess {
            cycles: first + (beats - 1) * self.timing.sequential_cycles,
            sequential,
        }
    }

    pub fn reset_stream(&mut self) {
        self.stream_pos = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_sequential_fetches_after_stream_start() {
        let mut f = FlashModel::new(FlashTiming::default());
        let start = f.access(0x100, 2);
        assert!(!start.sequential);
        assert_eq!(start.cycles, 4);
        let rest: u32 = (1..=4).map(|i| f.access(0x100 + 2 * i, 2).cycles).sum();
        assert_eq!(rest, 4);
    }

    #[test]
    fn data_read_breaks_stream() {
        let mut f = FlashModel::new(FlashTiming::default());
        f.access(0x100, 2);
        f.access(0x102, 2);
        // Literal-pool read elsewhere in flash.
        assert_eq!(f.access(0x200, 4).cycles, 4);
        let resumed = f.access(0x104, 2);
        assert!(!resumed.sequential);
        assert_eq!(resumed.cycles, 4);
    }

    #[test]
    fn narrow_fetch_width_costs_extra_beats() {
        let mut f = FlashModel::new(FlashTiming {
            fetch_width: 2,
            ..FlashTiming::default()
        });
        assert_eq!(f.access(0, 4).cycles, 4 + 1);
        assert_eq!(f.access(4, 4).cycles, 2);
    }

    #[test]
    fn timing_validation() {
        assert!(FlashTiming::default().validate().is_ok());
        let bad = FlashTiming {
            sequential_cycles: 5,
            nonsequential_cycles: 4,
            fetch_width: 4,
        };
        assert!(bad.validate().is_err());
    }
}
