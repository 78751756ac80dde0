//! Run manifests: `[section]` headers followed by `key = value` lines. A
//! manifest carries the full config, seeds, losses, stage log and artifact
//! hashes of one run.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub sections: Vec<(String, Vec<(String, String)>)>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends `key = value` to `section`, creating it at the end if needed.
    pub fn push(&mut self, section: &str, key: impl Into<String>, value: impl ToString) {
        let entry = match self.sections.iter().position(|(s, _)| s == section) {
            Some(i) => &mut self.sections[i].1,
            None => {
                self.sections.push((section.to_string(), Vec::new()));
                &mut self.sections.last_mut().expect("just pushed").1
            }
        };
        entry.push((key.into(), value.to_string()));
    }

    pub fn push_config(&mut self, cfg: &RunConfig) {
        for (key, _) in crate::config::KEYS {
            self.push("config", *key, cfg.get(key).expect("listed key"));
        }
    }

    pub fn section(&self, name: &str) -> Option<&[(String, String)]> {
        self.sections.iter().find(|(s, _)| s == name).map(|(_, e)| e.as_slice())
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.section(section)?
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Values of one section in insertion order.
    pub fn values(&self, section: &str) -> Vec<&str> {
        self.section(section)
            .map(|e| e.iter().map(|(_, v)| v.as_str()).collect())
            .unwrap_or_default()
    }

    /// The run config recorded in the `config` section.
    pub fn config(&self) -> Result<RunConfig> {
        let entries = self
            .section("config")
            .ok_or_else(|| Error::InvalidArgument("manifest has no config section".into()))?;
        let mut cfg = RunConfig::default();
        for (k, v) in entries {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, (name, entries)) in self.sections.iter().enumerate() {
            if i > 0 {
                s.push('\n');
            }
            let _ = writeln!(s, "[{name}]");
            for (k, v) in entries {
                let _ = writeln!(s, "{k} = {v}");
            }
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |n: usize, m: &str| Error::Format {
            path: path.to_path_buf(),
            message: format!("line {}: {m}", n + 1),
        };
        let mut m = Manifest::new();
        let mut current: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim_end();
            if line.trim().is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                m.sections.push((name.to_string(), Vec::new()));
                current = Some(name.to_string());
                continue;
            }
            let section = current.as_deref().ok_or_else(|| bad(n, "entry before any section"))?;
            let (k, v) = line.split_once('=').ok_or_else(|| bad(n, "expected key = value"))?;
            m.push(section, k.trim(), v.trim());
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(p) = path.parent() {
            std::fs::create_dir_all(p)?;
        }
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::parse(&std::fs::read_to_string(path)?, path)
    }
}

/// Lower-case hex SHA-256 of a file's bytes.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}
