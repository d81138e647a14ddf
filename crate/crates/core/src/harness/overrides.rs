//! `path=value` overrides applied to a configuration document before it is
//! deserialized. Paths are dotted keys with optional `[index]` suffixes
//! (`memory.flash.nonsequential_cycles`, `stimuli[1].at_cycle`). Values are
//! TOML literals; anything that does not parse as one is taken as a string.

use super::ConfigError;

#[derive(Debug, Clone, PartialEq, Eq)]
enum Step {
    Key(String),
    Index(usize),
}

fn parse_path(path: &str) -> Result<Vec<Step>, ConfigError> {
    let bad = || ConfigError::new(path, "malformed override path");
    let mut steps = Vec::new();
    for part in path.split('.') {
        let (key, mut rest) = match part.find('[') {
            Some(i) => (&part[..i], &part[i..]),
            None => (part, ""),
        };
        if key.is_empty() {
            return Err(bad());
        }
        steps.push(Step::Key(key.to_string()));
        while !rest.is_empty() {
            let close = rest.find(']').ok_or_else(bad)?;
            let idx = rest[1..close].trim().parse().map_err(|_| bad())?;
            steps.push(Step::Index(idx));
            rest = &rest[close + 1..];
            if !rest.is_empty() && !rest.starts_with('[') {
                return Err(bad());
            }
        }
    }
    Ok(steps)
}

/// Splits `path=value` and parses the value.
pub fn parse_override(text: &str) -> Result<(String, toml::Value), ConfigError> {
    let (path, raw) = text
        .split_once('=')
        .ok_or_else(|| ConfigError::new(text, "override must look like path=value"))?;
    let path = path.trim().to_string();
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    Ok((path, value))
}

pub fn apply_override(
    root: &mut toml::Table,
    path: &str,
    value: toml::Value,
) -> Result<(), ConfigError> {
    let steps = parse_path(path)?;
    let mut doc = toml::Value::Table(std::mem::take(root));
    let result = set(&mut doc, &steps, value);
    if let toml::Value::Table(t) = doc {
        *root = t;
    }
    result
}

fn set(doc: &mut toml::Value, steps: &[Step], value: toml::Value) -> Result<(), ConfigError> {
    let mut value = Some(value);
    let mut cur = doc;
    let mut shown = String::new();
    for (n, step) in steps.iter().enumerate() {
        let last = n + 1 == steps.len();
        shown.push_str(&show(step));
        let here = shown.trim_start_matches('.').to_string();
        cur = match (step, cur) {
            (Step::Key(k), toml::Value::Table(t)) => {
                if last {
                    t.insert(k.clone(), value.take().unwrap());
                    return Ok(());
                }
                t.entry(k.clone())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            }
            (Step::Index(i), toml::Value::Array(a)) => {
                let len = a.len();
                let slot = a.get_mut(*i).ok_or_else(|| {
                    ConfigError::new(&here, format!("index {i} out of range ({len} entries)"))
                })?;
                if last {
                    *slot = value.take().unwrap();
                    return Ok(());
                }
                slot
            }
            _ => {
                return Err(ConfigError::new(
                    here,
                    "does not match the document's shape",
                ))
            }
        };
    }
    unreachable!("parse_path yields at least one step")
}

fn show(s: &Step) -> String {
    match s {
        Step::Key(k) => format!(".{k}"),
        Step::Index(i) => format!("[{i}]"),
    }
}

pub fn apply_overrides(root: &mut toml::Table, overrides: &[String]) -> Result<(), ConfigError> {
    for o in overrides {
        let (path, value) = parse_override(o)?;
        apply_override(root, &path, value)?;
    }
    Ok(())
}
