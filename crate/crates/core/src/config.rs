//! Line-oriented `key = value` configuration with `[section]` headers.
//!
//! Keys before the first header belong to the empty section. Environment
//! variables named `ENGINE_<SECTION>_<KEY>` (upper case) override file
//! values; `ENGINE_<KEY>` addresses the empty section.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const ENV_PREFIX: &str = "ENGINE_";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl Config {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::new();
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::format(format!("config line {}: unterminated section header", n + 1)))?;
                section = name.trim().to_ascii_lowercase();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(format!("config line {}: expected `key = value`", n + 1)))?;
            let key = k.trim().to_ascii_lowercase();
            if key.is_empty() {
                return Err(Error::format(format!("config line {}: empty key", n + 1)));
            }
            cfg.set(&section, &key, v.trim());
        }
        Ok(cfg)
    }

    pub fn set(&mut self, section: &str, key: &str, value: &str) {
        self.sections.entry(section.to_string()).or_default().insert(key.to_string(), value.to_string());
    }

    pub fn raw(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }

    /// Keys present in `section`, sorted.
    pub fn keys(&self, section: &str) -> Vec<&str> {
        self.sections.get(section).map(|kv| kv.keys().map(String::as_str).collect()).unwrap_or_default()
    }

    /// Section names present, sorted; the empty section is `""`.
    pub fn sections(&self) -> Vec<&str> {
        self.sections.keys().map(String::as_str).collect()
    }

    /// Parsed value, if present.
    pub fn get<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>> {
        match self.raw(section, key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| Error::validation(format!("config [{section}] {key}: cannot parse `{v}`"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T> {
        Ok(self.get(section, key)?.unwrap_or(default))
    }

    /// Applies `ENGINE_*` overrides from `vars`. A variable matches the
    /// longest known section name after the prefix; unknown sections are
    /// treated as part of the key in the empty section.
    pub fn apply_env<I>(&mut self, vars: I, known_sections: &[&str])
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut known: Vec<&str> = known_sections.to_vec();
        known.sort_by_key(|s| std::cmp::Reverse(s.len()));
        for (name, value) in vars {
            let Some(rest) = name.strip_prefix(ENV_PREFIX) else { continue };
            let lower = rest.to_ascii_lowercase();
            let hit = known.iter().find_map(|s| lower.strip_prefix(&format!("{s}_")).map(|k| (s.to_string(), k.to_string())));
            let (section, key) = hit.unwrap_or_else(|| (String::new(), lower.clone()));
            self.set(&section, &key, &value);
        }
    }

    pub fn apply_process_env(&mut self, known_sections: &[&str]) {
        self.apply_env(std::env::vars(), known_sections);
    }

    /// Canonical text form, sorted by section then key.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (sec, kv) in &self.sections {
            if !sec.is_empty() {
                s.push_str(&format!("[{sec}]\n"));
            }
            for (k, v) in kv {
                s.push_str(&format!("{k} = {v}\n"));
            }
        }
        s
    }
}
