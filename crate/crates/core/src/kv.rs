//! Flat `key = value` configuration text.
//!
//! One assignment per line; `#` starts a comment when it is the first non-blank character;
//! blank lines are ignored; keys are unique. Values keep inner whitespace but are trimmed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum KvError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("key {key:?}: cannot parse {value:?}: {message}")]
    BadValue { key: String, value: String, message: String },
}

/// Parsed assignments, ordered by key.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((k, v)) = trimmed.split_once('=') else {
                return Err(KvError::Syntax { line, message: "expected `key = value`".into() });
            };
            let key = k.trim();
            let valid = !key.is_empty()
                && key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '-');
            if !valid {
                return Err(KvError::Syntax { line, message: format!("invalid key {key:?}") });
            }
            if entries.insert(key.to_string(), v.trim().to_string()).is_some() {
                return Err(KvError::Syntax { line, message: format!("duplicate key {key:?}") });
            }
        }
        Ok(Self { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Overlays `other` on top of `self`.
    pub fn merge(&mut self, other: &KvMap) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    /// Parses `key` into `slot` if present.
    pub fn read<T>(&self, key: &str, slot: &mut T) -> Result<(), KvError>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.get(key) {
            *slot = v.parse().map_err(|e: T::Err| KvError::BadValue {
                key: key.into(),
                value: v.into(),
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Fails on any key not listed in `known` and not starting with one of `prefixes`.
    pub fn check_keys(&self, known: &[&str], prefixes: &[&str]) -> Result<(), KvError> {
        for k in self.entries.keys() {
            if !known.contains(&k.as_str()) && !prefixes.iter().any(|p| k.starts_with(p)) {
                return Err(KvError::UnknownKey(k.clone()));
            }
        }
        Ok(())
    }

    /// Entries under `prefix`, with the prefix removed.
    pub fn section(&self, prefix: &str) -> KvMap {
        let entries = self
            .entries
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|rest| (rest.to_string(), v.clone())))
            .collect();
        Self { entries }
    }

    /// Adds every entry of `other` with `prefix` prepended to its key.
    pub fn nest(&mut self, prefix: &str, other: &KvMap) {
        for (k, v) in &other.entries {
            self.entries.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            writeln!(out, "{k} = {v}").expect("write to string");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_comments_and_blanks() {
        let m = KvMap::parse("# comment\n\nalpha_kl = 0.8\n  epochs=10  \nname = a b\n").unwrap();
        assert_eq!(m.get("alpha_kl"), Some("0.8"));
        assert_eq!(m.get("epochs"), Some("10"));
        assert_eq!(m.get("name"), Some("a b"));
        let mut e = 0usize;
        m.read("epochs", &mut e).unwrap();
        assert_eq!(e, 10);
    }

    #[test]
    fn sections_and_nesting() {
        let m = KvMap::parse("corpus.seed = 3\ncorpus.sigma = 0.5\ndistill.epochs = 2\n").unwrap();
        let c = m.section("corpus.");
        assert_eq!(c.render(), "seed = 3\nsigma = 0.5\n");
        let mut back = KvMap::default();
        back.nest("corpus.", &c);
        back.nest("distill.", &m.section("distill."));
        assert_eq!(back, m);
    }

    #[test]
    fn reports_line_numbers() {
        assert_eq!(
            KvMap::parse("a = 1\nnot an assignment\n"),
            Err(KvError::Syntax { line: 2, message: "expected `key = value`".into() })
        );
        assert!(matches!(KvMap::parse("a = 1\na = 2"), Err(KvError::Syntax { line: 2, .. })));
        assert!(matches!(KvMap::parse(" = 2"), Err(KvError::Syntax { line: 1, .. })));
    }

    #[test]
    fn bad_values_and_unknown_keys() {
        let m = KvMap::parse("epochs = ten").unwrap();
        let mut e = 0usize;
        assert!(matches!(m.read("epochs", &mut e), Err(KvError::BadValue { .. })));
        assert_eq!(m.check_keys(&["seed"], &[]), Err(KvError::UnknownKey("epochs".into())));
        assert!(m.check_keys(&[], &["ep"]).is_ok());
    }

    proptest! {
        #[test]
        fn render_round_trips(entries in proptest::collection::btree_map("[a-z_.]{1,8}", "[^\\n\\r=#]{0,12}", 0..8)) {
            let mut m = KvMap::default();
            for (k, v) in &entries {
                m.set(k.clone(), v.trim());
            }
            prop_assert_eq!(KvMap::parse(&m.render()).unwrap(), m);
        }
    }
}
