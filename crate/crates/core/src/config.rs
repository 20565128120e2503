//! Flat INI-style configuration: `[section]` headers and `key = value`
//! lines. `#` and `;` start comment lines.

use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("[{section}] {key}: {msg}")]
    Value { section: String, key: String, msg: String },
    #[error("unknown key [{section}] {key}")]
    UnknownKey { section: String, key: String },
    #[error("unknown section [{0}]")]
    UnknownSection(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Ini {
    sections: Vec<(String, Vec<(String, String)>)>,
}

impl Ini {
    pub fn new() -> Self {
        Ini::default()
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut ini = Ini::new();
        let mut current: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let syntax = |msg: &str| ConfigError::Syntax {
                line: n + 1,
                msg: msg.to_string(),
            };
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| syntax("unterminated section header"))?;
                let name = name.trim();
                if name.is_empty() {
                    return Err(syntax("empty section name"));
                }
                ini.section_mut(name);
                current = Some(name.to_string());
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| syntax("expected key = value"))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(syntax("empty key"));
            }
            let section = current.as_deref().ok_or_else(|| syntax("key outside of any section"))?;
            if ini.get(section, key).is_some() {
                return Err(syntax(&format!("duplicate key '{key}'")));
            }
            ini.set(section, key, value.trim());
        }
        Ok(ini)
    }

    fn section_mut(&mut self, name: &str) -> &mut Vec<(String, String)> {
        let pos = match self.sections.iter().position(|(s, _)| s == name) {
            Some(p) => p,
            None => {
                self.sections.push((name.to_string(), Vec::new()));
                self.sections.len() - 1
            }
        };
        &mut self.sections[pos].1
    }

    /// Inserts or replaces a value.
    pub fn set(&mut self, section: &str, key: &str, value: impl Into<String>) {
        let entries = self.section_mut(section);
        let value = value.into();
        match entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections
            .iter()
            .find(|(s, _)| s == section)
            .and_then(|(_, e)| e.iter().find(|(k, _)| k == key))
            .map(|(_, v)| v.as_str())
    }

    pub fn section_names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|(s, _)| s.as_str())
    }

    pub fn entries(&self, section: &str) -> &[(String, String)] {
        self.sections
            .iter()
            .find(|(s, _)| s == section)
            .map_or(&[], |(_, e)| e.as_slice())
    }

    /// Parses a value with `FromStr`; `None` when the key is absent.
    pub fn parsed<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.get(section, key)
            .map(|v| {
                v.parse::<T>().map_err(|e| ConfigError::Value {
                    section: section.into(),
                    key: key.into(),
                    msg: format!("cannot parse '{v}': {e}"),
                })
            })
            .transpose()
    }

    /// Whitespace-separated list of numbers.
    pub fn floats(&self, section: &str, key: &str) -> Result<Option<Vec<f64>>, ConfigError> {
        self.get(section, key)
            .map(|v| {
                v.split_whitespace()
                    .map(|x| {
                        x.parse::<f64>().map_err(|e| ConfigError::Value {
                            section: section.into(),
                            key: key.into(),
                            msg: format!("cannot parse '{x}': {e}"),
                        })
                    })
                    .collect()
            })
            .transpose()
    }

    /// Three whitespace-separated numbers.
    pub fn vec3(&self, section: &str, key: &str) -> Result<Option<[f64; 3]>, ConfigError> {
        match self.floats(section, key)? {
            None => Ok(None),
            Some(v) if v.len() == 3 => Ok(Some([v[0], v[1], v[2]])),
            Some(v) => Err(ConfigError::Value {
                section: section.into(),
                key: key.into(),
                msg: format!("expected 3 numbers, got {}", v.len()),
            }),
        }
    }

    /// Rejects sections and keys outside `allowed`. Keys given as
    /// `prefix.*` accept any key starting with `prefix.`.
    pub fn check_known(&self, allowed: &[(&str, &[&str])]) -> Result<(), ConfigError> {
        for (section, entries) in &self.sections {
            let Some((_, keys)) = allowed.iter().find(|(s, _)| s == section) else {
                return Err(ConfigError::UnknownSection(section.clone()));
            };
            for (key, _) in entries {
                let ok = keys.iter().any(|k| match k.strip_suffix('*') {
                    Some(prefix) => key.starts_with(prefix),
                    None => k == key,
                });
                if !ok {
                    return Err(ConfigError::UnknownKey {
                        section: section.clone(),
                        key: key.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, (section, entries)) in self.sections.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let _ = writeln!(out, "[{section}]");
            for (k, v) in entries {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }
}
