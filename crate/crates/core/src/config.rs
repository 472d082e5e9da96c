//! Plain-text `key = value` files with optional `[section]` headers.
//!
//! Blank lines and lines starting with `#` are ignored. Keys before the
//! first header belong to the unnamed section `""`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvFile {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl KvFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str, what: &str) -> Result<Self> {
        let mut out = Self::default();
        let mut current = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::format(what, lineno + 1, "unterminated section header"))?;
                current = name.trim().to_string();
                out.sections.entry(current.clone()).or_default();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(what, lineno + 1, format!("expected key = value, got '{line}'")))?;
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::format(what, lineno + 1, "empty key"));
            }
            out.sections
                .entry(current.clone())
                .or_default()
                .insert(key.to_string(), v.trim().to_string());
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl ToString) {
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.sections.contains_key(section)
    }

    pub fn section(&self, section: &str) -> Option<&BTreeMap<String, String>> {
        self.sections.get(section)
    }

    /// Parse `section.key` if present.
    pub fn parse_opt<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>> {
        match self.get(section, key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| {
                Error::InvalidConfig(format!("[{section}] {key}: cannot parse '{v}'"))
            }),
        }
    }

    pub fn require<T: FromStr>(&self, section: &str, key: &str) -> Result<T> {
        self.parse_opt(section, key)?
            .ok_or_else(|| Error::InvalidConfig(format!("[{section}] {key} is required")))
    }

    /// Reject keys outside `allowed` so typos do not pass silently.
    pub fn check_keys(&self, section: &str, allowed: &[&str]) -> Result<()> {
        if let Some(map) = self.sections.get(section) {
            for k in map.keys() {
                if !allowed.contains(&k.as_str()) {
                    return Err(Error::InvalidConfig(format!(
                        "unknown key '{k}' in [{section}]; expected one of {}",
                        allowed.join(", ")
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (name, map) in &self.sections {
            if !name.is_empty() {
                if !s.is_empty() {
                    s.push('\n');
                }
                let _ = writeln!(s, "[{name}]");
            }
            for (k, v) in map {
                let _ = writeln!(s, "{k} = {v}");
            }
        }
        s
    }
}

/// Comma-separated floats, e.g. `0.5, 0.5, 0.5`.
pub fn parse_floats<const N: usize>(s: &str) -> Result<[f64; N]> {
    let vals: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidConfig(format!("expected {N} comma-separated numbers, got '{s}'")))?;
    vals.try_into()
        .map_err(|_| Error::InvalidConfig(format!("expected {N} comma-separated numbers, got '{s}'")))
}

pub fn format_floats(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_comments() {
        let text = "seed = 7\n# note\n[train]\nmode = curious\nlr=1e-4\n\n[world]\nname = circles\n";
        let kv = KvFile::parse(text, "t").unwrap();
        assert_eq!(kv.get("", "seed"), Some("7"));
        assert_eq!(kv.parse_opt::<f64>("train", "lr").unwrap(), Some(1e-4));
        assert_eq!(kv.get("world", "name"), Some("circles"));
        assert_eq!(KvFile::parse(&kv.to_text(), "t").unwrap(), kv);
    }

    #[test]
    fn reports_the_offending_line() {
        let err = KvFile::parse("a = 1\nnonsense\n", "cfg").unwrap_err();
        assert!(matches!(err, Error::Format { index: 2, .. }), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let kv = KvFile::parse("[train]\nlearning_rate = 1\n", "t").unwrap();
        assert!(kv.check_keys("train", &["lr"]).is_err());
    }

    #[test]
    fn float_lists_round_trip() {
        let v = [0.1 + 0.2, -3.0, 1e-300];
        assert_eq!(parse_floats::<3>(&format_floats(&v)).unwrap(), v);
        assert!(parse_floats::<2>("1, 2, 3").is_err());
    }
}
