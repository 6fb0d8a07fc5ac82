//! Flat `key = value` text used by volume headers, shape-model headers and
//! run configuration files. Arrays are space-separated; `#` starts a comment.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Ordered list of key/value pairs. Later entries override earlier ones.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: Vec<(String, String)>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str, module: &'static str) -> Result<Self> {
        let mut kv = KeyValues::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::invalid(
                    module,
                    format!("line {}: expected `key = value`, got {raw:?}", lineno + 1),
                ));
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::invalid(module, format!("line {}: empty key", lineno + 1)));
            }
            kv.set(key, value.trim());
        }
        Ok(kv)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        let value = value.into();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.get(key).is_some()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Merges `other` into `self`; `other` wins on conflicts.
    pub fn merge(&mut self, other: &KeyValues) {
        for (k, v) in other.iter() {
            self.set(k, v);
        }
    }

    pub fn require(&self, key: &str, module: &'static str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::invalid(module, format!("missing key `{key}`")))
    }

    pub fn parse_value<T: FromStr>(&self, key: &str, module: &'static str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::invalid(module, format!("`{key}`: cannot parse {v:?}"))),
        }
    }

    pub fn parse_array<T: FromStr, const N: usize>(
        &self,
        key: &str,
        module: &'static str,
    ) -> Result<Option<[T; N]>> {
        let Some(v) = self.get(key) else {
            return Ok(None);
        };
        let items: Vec<T> = v
            .split_whitespace()
            .map(|s| s.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::invalid(module, format!("`{key}`: cannot parse {v:?}")))?;
        let n = items.len();
        items
            .try_into()
            .map(Some)
            .map_err(|_| Error::invalid(module, format!("`{key}`: expected {N} values, got {n}")))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

/// Formats an array as space-separated values.
pub(crate) fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_arrays_and_overrides() {
        let kv = KeyValues::parse("# header\na = 1\nb = 1 2 3  # trailing\n\na = 4\n", "t").unwrap();
        assert_eq!(kv.get("a"), Some("4"));
        assert_eq!(kv.parse_array::<u32, 3>("b", "t").unwrap(), Some([1, 2, 3]));
        assert!(kv.parse_array::<u32, 2>("b", "t").is_err());
        assert!(kv.parse_value::<f64>("missing", "t").unwrap().is_none());
        assert!(KeyValues::parse("no equals sign", "t").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut kv = KeyValues::new();
        kv.set("x", "0.1 0.2");
        kv.set("y", "abc");
        assert_eq!(KeyValues::parse(&kv.to_text(), "t").unwrap(), kv);
    }
}
