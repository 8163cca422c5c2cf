//! Flat `key=value` documents: one pair per line, `#` starts a comment.

use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvDoc {
    entries: Vec<(usize, String, String)>,
}

impl KvDoc {
    /// Parses a document. Blank lines and comments are skipped; repeated keys
    /// and lines without `=` are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(usize, String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let Some((k, v)) = body.split_once('=') else {
                return Err(Error::Config {
                    line,
                    msg: format!("expected key=value, got `{body}`"),
                });
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config {
                    line,
                    msg: "empty key".into(),
                });
            }
            if entries.iter().any(|(_, ek, _)| ek == k) {
                return Err(Error::Config {
                    line,
                    msg: format!("duplicate key `{k}`"),
                });
            }
            entries.push((line, k.to_string(), v.to_string()));
        }
        Ok(KvDoc { entries })
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        let line = self.entries.len() + 1;
        self.entries
            .push((line, key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(_, k, _)| k == key)
            .map(|(_, _, v)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(_, k, _)| k.as_str())
    }

    /// Parses `key` if present.
    pub fn parse_value<V: FromStr>(&self, key: &str) -> Result<Option<V>>
    where
        V::Err: std::fmt::Display,
    {
        let Some((line, _, v)) = self.entries.iter().find(|(_, k, _)| k == key) else {
            return Ok(None);
        };
        v.parse().map(Some).map_err(|e| Error::Config {
            line: *line,
            msg: format!("bad value for `{key}`: {e}"),
        })
    }

    /// Fails on the first key outside `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        match self
            .entries
            .iter()
            .find(|(_, k, _)| !allowed.contains(&k.as_str()))
        {
            Some((line, k, _)) => Err(Error::Config {
                line: *line,
                msg: format!("unknown key `{k}`"),
            }),
            None => Ok(()),
        }
    }

    pub fn render(&self) -> String {
        self.entries
            .iter()
            .map(|(_, k, v)| format!("{k}={v}\n"))
            .collect()
    }
}
