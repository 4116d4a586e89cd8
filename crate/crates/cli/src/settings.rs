//! Flag / config-file / default resolution.
//!
//! The config file is a flat TOML table whose keys are the long flag names
//! with `-` replaced by `_`. Every value a command ends up using is recorded,
//! and the record is written out as `config.toml` next to the command's
//! outputs. Feeding that snapshot back through `--config` reproduces the run.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::failure::Failure;

pub struct Resolver {
    file: toml::Table,
    known: BTreeSet<String>,
    snapshot: toml::Table,
}

impl Resolver {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let file = match path {
            None => toml::Table::new(),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Failure::config(format!("config file {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Failure::config(format!("config file {}: {e}", p.display())))?
            }
        };
        if let Some((k, _)) = file.iter().find(|(_, v)| v.is_table()) {
            return Err(Failure::config(format!("config key {k}: nested tables are not supported")));
        }
        Ok(Self {
            file,
            known: BTreeSet::new(),
            snapshot: toml::Table::new(),
        })
    }

    /// Flag, then file, then `default`. The result is recorded.
    pub fn resolve<T>(&mut self, key: &str, flag: Option<T>, default: Option<T>) -> Result<Option<T>, Failure>
    where
        T: Serialize + DeserializeOwned,
    {
        self.known.insert(key.to_owned());
        let from_file = match (&flag, self.file.get(key)) {
            (None, Some(raw)) => Some(
                raw.clone()
                    .try_into::<T>()
                    .map_err(|e| Failure::config(format!("config key {key}: {e}")))?,
            ),
            _ => None,
        };
        let v = flag.or(from_file).or(default);
        if let Some(v) = &v {
            self.record(key, v)?;
        }
        Ok(v)
    }

    pub fn optional<T: Serialize + DeserializeOwned>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, Failure> {
        self.resolve(key, flag, None)
    }

    pub fn value<T: Serialize + DeserializeOwned>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, Failure> {
        Ok(self.resolve(key, flag, Some(default))?.expect("default supplied"))
    }

    pub fn required<T: Serialize + DeserializeOwned>(&mut self, key: &str, flag: Option<T>) -> Result<T, Failure> {
        self.optional(key, flag)?
            .ok_or_else(|| Failure::config(format!("missing --{}", key.replace('_', "-"))))
    }

    /// Boolean switches: a present flag means true.
    pub fn switch(&mut self, key: &str, flag: bool) -> Result<bool, Failure> {
        self.value(key, flag.then_some(true), false)
    }

    /// Comma lists: an empty flag counts as absent.
    pub fn list<T>(&mut self, key: &str, flag: Vec<T>, default: Vec<T>) -> Result<Vec<T>, Failure>
    where
        T: Serialize + DeserializeOwned,
    {
        self.value(key, (!flag.is_empty()).then_some(flag), default)
    }

    /// Records a value derived after resolution, e.g. a width that depends on the data.
    pub fn record<T: Serialize>(&mut self, key: &str, v: &T) -> Result<(), Failure> {
        let tv = toml::Value::try_from(v).map_err(|e| Failure::config(format!("config key {key}: {e}")))?;
        self.snapshot.insert(key.to_owned(), tv);
        Ok(())
    }

    /// Rejects file keys the command never asked about.
    pub fn finish(&self) -> Result<(), Failure> {
        let unknown: Vec<&str> = self
            .file
            .keys()
            .filter(|k| !self.known.contains(k.as_str()))
            .map(String::as_str)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Failure::config(format!("unknown config keys: {}", unknown.join(", "))))
        }
    }

    pub fn write_snapshot(&self, path: &Path) -> Result<(), Failure> {
        let text = toml::to_string(&self.snapshot).map_err(|e| Failure::config(format!("snapshot: {e}")))?;
        fs::write(path, text)?;
        Ok(())
    }
}

/// `<out>.config.toml` for commands whose output is a single file.
pub fn snapshot_beside(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".config.toml");
    out.with_file_name(name)
}

pub fn require_file(path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::data("IoError", format!("{}: no such file", path.display())))
    }
}
