//! INI config files. Sections mirror the library modules (`synth`,
//! `signal-prep`, `ica`, `pipeline`, `contrastive`, `cli`); command-line
//! flags take precedence over file values, which take precedence over
//! built-in defaults.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ini::Ini;

/// Bad arguments or configuration. Maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

const SECTIONS: [&str; 6] = ["synth", "signal-prep", "ica", "pipeline", "contrastive", "cli"];

#[derive(Default)]
pub struct Config {
    ini: Option<Ini>,
}

impl Config {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Config> {
        let Some(path) = path else {
            return Ok(Config::default());
        };
        let ini = Ini::load_from_file(path).map_err(|e| usage(format!("config {}: {e}", path.display())))?;
        for (section, _) in ini.iter() {
            if let Some(s) = section {
                if !SECTIONS.contains(&s) {
                    return Err(usage(format!(
                        "config {}: unknown section [{s}], expected one of {}",
                        path.display(),
                        SECTIONS.join(", ")
                    )));
                }
            }
        }
        Ok(Config { ini: Some(ini) })
    }

    fn raw(&self, section: &str, key: &str) -> Option<&str> {
        self.ini.as_ref()?.section(Some(section))?.get(key)
    }

    /// `flag`, else the file value, else `default`.
    pub fn pick<T>(&self, flag: Option<T>, section: &str, key: &str, default: T) -> anyhow::Result<T>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.raw(section, key) {
            Some(s) => s
                .trim()
                .parse()
                .map_err(|e| usage(format!("config [{section}] {key} = {s:?}: {e}"))),
            None => Ok(default),
        }
    }

    pub fn pick_opt<T>(&self, flag: Option<T>, section: &str, key: &str) -> anyhow::Result<Option<T>>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        self.raw(section, key)
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e| usage(format!("config [{section}] {key} = {s:?}: {e}")))
            })
            .transpose()
    }

    /// A switch is on if the flag is given or the file sets it to true.
    pub fn switch(&self, flag: bool, section: &str, key: &str) -> anyhow::Result<bool> {
        Ok(flag || self.pick(None, section, key, false)?)
    }
}
