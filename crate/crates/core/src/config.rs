//! Sectioned `key = value` text used for experiment configs, dataset
//! snapshots and checkpoint headers.
//!
//! ```text
//! # comment
//! [training]
//! lr = 0.0001
//! ```

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{CastError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    /// 1-based source line, 0 for entries built in memory.
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SectionText {
    pub name: String,
    pub line: usize,
    pub entries: Vec<Entry>,
}

/// Splits text into sections. Entries before the first header land in a
/// section with an empty name.
pub fn parse_sections(text: &str) -> Result<Vec<SectionText>> {
    let mut sections = vec![SectionText { name: String::new(), line: 0, entries: Vec::new() }];
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        if let Some(rest) = s.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| CastError::ConfigParse { line, msg: format!("malformed section header `{s}`") })?
                .trim();
            if sections.iter().any(|sec| sec.name == name) {
                return Err(CastError::ConfigParse { line, msg: format!("duplicate section [{name}]") });
            }
            sections.push(SectionText { name: name.to_string(), line, entries: Vec::new() });
            continue;
        }
        let (key, value) = s
            .split_once('=')
            .ok_or_else(|| CastError::ConfigParse { line, msg: format!("expected `key = value`, got `{s}`") })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(CastError::ConfigParse { line, msg: "empty key".into() });
        }
        let current = sections.last_mut().expect("at least one section");
        if current.entries.iter().any(|e| e.key == key) {
            return Err(CastError::ConfigParse { line, msg: format!("duplicate key `{key}`") });
        }
        current.entries.push(Entry { key: key.to_string(), value: value.trim().to_string(), line });
    }
    if sections[0].entries.is_empty() {
        sections.remove(0);
    }
    Ok(sections)
}

/// A typed configuration block that can be filled from and rendered to
/// `key = value` lines.
pub trait KvSection: Default {
    const NAME: &'static str;

    /// Applies one key. `Ok(false)` means the key is unknown.
    fn set(&mut self, key: &str, value: &str) -> std::result::Result<bool, String>;

    /// Canonical entries, in a fixed order.
    fn entries(&self) -> Vec<(&'static str, String)>;

    /// Checks cross-field invariants after all keys were applied.
    fn validate(&self) -> Result<()> {
        Ok(())
    }

    fn apply(&mut self, entries: &[Entry]) -> Result<()> {
        for e in entries {
            match self.set(&e.key, &e.value) {
                Ok(true) => {}
                Ok(false) => {
                    return Err(CastError::ConfigParse {
                        line: e.line,
                        msg: format!("unknown key `{}` in [{}]", e.key, Self::NAME),
                    })
                }
                Err(msg) => return Err(CastError::ConfigParse { line: e.line, msg: format!("key `{}`: {msg}", e.key) }),
            }
        }
        self.validate()
    }

    fn from_entries(entries: &[Entry]) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(entries)?;
        Ok(cfg)
    }

    fn render(&self) -> String {
        let mut s = format!("[{}]\n", Self::NAME);
        for (k, v) in self.entries() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    /// Parses text holding exactly this one section.
    fn parse(text: &str) -> Result<Self> {
        let sections = parse_sections(text)?;
        match &sections[..] {
            [only] if only.name == Self::NAME => Self::from_entries(&only.entries),
            _ => Err(CastError::config(format!("expected a single [{}] section", Self::NAME))),
        }
    }
}

pub fn parse_value<T: FromStr>(value: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    value.parse::<T>().map_err(|e| format!("invalid value `{value}`: {e}"))
}

pub fn parse_list<T: FromStr>(value: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|p| parse_value(p.trim())).collect()
}

pub fn render_list<T: Display>(values: &[T]) -> String {
    values.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}
