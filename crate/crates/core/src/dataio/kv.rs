use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// `key=value` lines. Blank lines and lines starting with `#` are ignored;
/// keys must be unique and free of whitespace.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |msg: String| Error::Parse { line: i + 1, msg };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected key=value, got '{line}'")))?;
            let key = k.trim();
            if key.is_empty() || key.chars().any(char::is_whitespace) {
                return Err(parse_err(format!("invalid key '{key}'")));
            }
            if entries.insert(key.to_string(), (i + 1, v.trim().to_string())).is_some() {
                return Err(parse_err(format!("duplicate key '{key}'")));
            }
        }
        Ok(KeyValues { entries })
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    /// Inserts or replaces a value (later sources override earlier ones).
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), (0, value.into()));
    }

    /// Rejects any key outside `valid`, listing the valid ones.
    pub fn check_known(&self, valid: &[&str]) -> Result<()> {
        for (key, (line, _)) in &self.entries {
            if !valid.contains(&key.as_str()) {
                return Err(at(
                    *line,
                    format!("unknown key '{key}' (valid keys: {})", valid.join(", ")),
                ));
            }
        }
        Ok(())
    }

    pub fn optional<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|e| at(*line, format!("bad value for '{key}': {e}"))),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.optional(key)?
            .ok_or_else(|| Error::invalid(format!("missing key '{key}'")))
    }

    /// A comma-separated list; an empty value is an empty list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        let Some((line, v)) = self.entries.get(key) else {
            return Ok(None);
        };
        if v.is_empty() {
            return Ok(Some(Vec::new()));
        }
        v.split(',')
            .map(|item| {
                item.trim()
                    .parse()
                    .map_err(|e| at(*line, format!("bad item '{item}' in '{key}': {e}")))
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }
}

/// A parse error at a file line, or a plain error for values set in code
/// (line 0).
fn at(line: usize, msg: String) -> Error {
    if line == 0 {
        Error::Invalid(msg)
    } else {
        Error::Parse { line, msg }
    }
}

/// Joins values with commas using their shortest round-trip formatting.
pub fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_lists_and_errors() {
        let kv = KeyValues::parse("# c\n a = 1 \n\nb=1.5,2\nc=\n").unwrap();
        assert_eq!(kv.require::<u32>("a").unwrap(), 1);
        assert_eq!(kv.list::<f64>("b").unwrap().unwrap(), vec![1.5, 2.0]);
        assert_eq!(kv.list::<f64>("c").unwrap().unwrap(), Vec::<f64>::new());
        assert!(kv.require::<u32>("zz").is_err());
        assert!(kv.require::<u32>("b").is_err());
        assert!(KeyValues::parse("a=1\na=2").is_err());
        assert!(KeyValues::parse("novalue").is_err());
        let err = kv.check_known(&["a", "b"]).unwrap_err().to_string();
        assert!(err.contains("'c'") && err.contains("a, b"), "{err}");
    }
}
