//! `key = value` config files. Command-line flags take precedence over file
//! values; keys a command does not read are rejected.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::CliError;

#[derive(Debug, Default)]
pub struct ConfigFile {
    path: Option<PathBuf>,
    entries: BTreeMap<String, (String, usize)>,
}

fn normalize(key: &str) -> String {
    key.trim().replace('_', "-")
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(ConfigFile::default());
        };
        let text =
            fs::read_to_string(path).map_err(|e| CliError(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, CliError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError(format!(
                    "{}:{}: expected `key = value`",
                    path.display(),
                    i + 1
                )));
            };
            let key = normalize(key);
            if entries
                .insert(key.clone(), (value.trim().to_string(), i + 1))
                .is_some()
            {
                return Err(CliError(format!(
                    "{}:{}: duplicate key `{key}`",
                    path.display(),
                    i + 1
                )));
            }
        }
        Ok(ConfigFile {
            path: Some(path.to_path_buf()),
            entries,
        })
    }

    /// The flag value if given, else the file value for `key`.
    pub fn pick<T>(&mut self, flag: Option<T>, key: &str) -> Result<Option<T>, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        let from_file = self.entries.remove(key);
        if flag.is_some() {
            return Ok(flag);
        }
        match from_file {
            None => Ok(None),
            Some((value, line)) => value.parse().map(Some).map_err(|e| {
                let path = self.path.as_deref().unwrap_or(Path::new("config"));
                CliError(format!(
                    "{}:{line}: bad value for `{key}`: {e}",
                    path.display()
                ))
            }),
        }
    }

    /// Fails on the first key no one picked.
    pub fn finish(self) -> Result<(), CliError> {
        match self.entries.into_iter().min_by_key(|(_, (_, line))| *line) {
            None => Ok(()),
            Some((key, (_, line))) => {
                let path = self.path.unwrap_or_default();
                Err(CliError(format!(
                    "{}:{line}: unknown key `{key}`",
                    path.display()
                )))
            }
        }
    }
}
