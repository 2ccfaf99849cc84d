//! Flat `key = value` configuration merged with command-line flags.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use tgdd::data::parse_kv;
use tgdd::{Error, Result};

pub const ECHO_FILE: &str = "tgdd_config.txt";

/// Resolves settings with precedence flag, then config file, then default,
/// and records every resolved value for the config echo.
pub struct Settings {
    file: Vec<(String, String)>,
    used: BTreeSet<String>,
    echo: Vec<(String, String)>,
}

impl Settings {
    pub fn new(config: Option<&Path>) -> Result<Self> {
        let file = match config {
            None => Vec::new(),
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                    path: path.to_path_buf(),
                    source: e,
                })?;
                parse_kv(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
                    .into_iter()
                    .map(|(k, v)| (k.replace('-', "_"), v))
                    .collect()
            }
        };
        Ok(Settings {
            file,
            used: BTreeSet::new(),
            echo: Vec::new(),
        })
    }

    fn from_file<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        self.used.insert(key.to_string());
        match self.file.iter().rev().find(|(k, _)| k == key) {
            None => Ok(None),
            Some((_, v)) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("config key `{key}` has invalid value `{v}`"))),
        }
    }

    pub fn get<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        let value = match flag {
            Some(v) => {
                self.used.insert(key.to_string());
                v
            }
            None => self.from_file(key)?.unwrap_or(default),
        };
        self.echo.push((key.to_string(), value.to_string()));
        Ok(value)
    }

    pub fn optional<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>> {
        let value = match flag {
            Some(v) => {
                self.used.insert(key.to_string());
                Some(v)
            }
            None => self.from_file(key)?,
        };
        if let Some(v) = &value {
            self.echo.push((key.to_string(), v.to_string()));
        }
        Ok(value)
    }

    pub fn required<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<T> {
        self.optional(key, flag)?
            .ok_or_else(|| Error::Config(format!("missing required setting `{key}`")))
    }

    /// A switch set by either its flag or a true value in the file.
    pub fn switch(&mut self, key: &str, flag: bool, default: bool) -> Result<bool> {
        self.get(key, flag.then_some(!default), default)
    }

    pub fn path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf> {
        let s = self.required(key, flag.map(|p| p.display().to_string()))?;
        Ok(PathBuf::from(s))
    }

    /// Keys present in the config file that no setting asked for.
    pub fn unused(&self) -> Vec<&str> {
        self.file
            .iter()
            .map(|(k, _)| k.as_str())
            .filter(|k| !self.used.contains(*k))
            .collect()
    }

    pub fn echo(&self) -> String {
        self.echo.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Writes the echo into `dir`, creating it if needed.
    pub fn write_echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let path = dir.join(ECHO_FILE);
        std::fs::write(&path, self.echo()).map_err(|e| Error::Io { path, source: e })
    }
}
