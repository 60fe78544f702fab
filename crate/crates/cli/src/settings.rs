//! Flat `key = value` settings with flag overrides.
//!
//! Every value a command reads is recorded in resolved form, defaults
//! included, so the recorded set can be written out as a manifest and fed
//! back through `--config` to repeat the run.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt::{self, Display};
use std::path::Path;
use std::str::FromStr;

use crate::error::CliError;

#[derive(Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
    resolved: RefCell<BTreeMap<String, String>>,
}

impl Settings {
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (idx, line) in text.lines().enumerate() {
            let body = line.trim();
            if body.is_empty() || body.starts_with('#') {
                continue;
            }
            let Some((key, value)) = body.split_once('=') else {
                return Err(CliError::Usage(format!("{origin}:{}: expected `key = value`, found `{body}`", idx + 1)));
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(CliError::Usage(format!("{origin}:{}: empty key", idx + 1)));
            }
            if values.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(CliError::Config { key: key.into(), message: format!("set twice in {origin}") });
            }
        }
        Ok(Settings { values, ..Settings::default() })
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Settings::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                Settings::parse(&text, &p.display().to_string())
            }
        }
    }

    /// Applies `key=value` overrides from `--set`.
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<(), CliError> {
        for pair in pairs {
            let Some((k, v)) = pair.split_once('=') else {
                return Err(CliError::Usage(format!("--set expects key=value, found `{pair}`")));
            };
            self.set(k.trim(), v.trim());
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn set_opt<T: ToString>(&mut self, key: &str, value: Option<T>) {
        if let Some(v) = value {
            self.set(key, v);
        }
    }

    /// Reads `key`, falling back to `default`.
    pub fn get<T>(&self, key: &str, default: T) -> Result<T, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        Ok(self.opt(key)?.unwrap_or_else(|| {
            self.record(key, &default);
            default
        }))
    }

    pub fn opt<T>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let Some(raw) = self.values.get(key) else { return Ok(None) };
        let v = raw
            .parse::<T>()
            .map_err(|e| CliError::Config { key: key.into(), message: format!("`{raw}`: {e}") })?;
        self.record(key, &v);
        Ok(Some(v))
    }

    pub fn require<T>(&self, key: &str) -> Result<T, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        self.opt(key)?.ok_or_else(|| CliError::Config { key: key.into(), message: "is required".into() })
    }

    fn record(&self, key: &str, v: &dyn Display) {
        self.resolved.borrow_mut().insert(key.to_string(), v.to_string());
    }

    /// Fails on the first key that no reader asked for.
    pub fn finish(&self) -> Result<(), CliError> {
        let resolved = self.resolved.borrow();
        match self.values.keys().find(|k| !resolved.contains_key(*k)) {
            Some(k) => Err(CliError::Config { key: k.clone(), message: "unknown key for this command".into() }),
            None => Ok(()),
        }
    }

    /// Every value read so far, sorted by key.
    pub fn resolved(&self) -> BTreeMap<String, String> {
        self.resolved.borrow().clone()
    }
}

/// Two comma-separated numbers, such as a velocity or a position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pair(pub f64, pub f64);

impl FromStr for Pair {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, b) = s.split_once(',').ok_or("expected two comma-separated numbers")?;
        let num = |x: &str| x.trim().parse::<f64>().map_err(|e| format!("`{}`: {e}", x.trim()));
        Ok(Pair(num(a)?, num(b)?))
    }
}

impl Display for Pair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.0, self.1)
    }
}

/// Sensor size written `WxH`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Size(pub u16, pub u16);

impl FromStr for Size {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (w, h) = s.split_once('x').ok_or("expected WIDTHxHEIGHT")?;
        let num = |x: &str| x.trim().parse::<u16>().map_err(|e| format!("`{}`: {e}", x.trim()));
        Ok(Size(num(w)?, num(h)?))
    }
}

impl Display for Size {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.0, self.1)
    }
}

/// A path setting; `Display` gives the lossy UTF-8 form.
#[derive(Debug, Clone, PartialEq)]
pub struct PathArg(pub std::path::PathBuf);

impl FromStr for PathArg {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(PathArg(s.into()))
    }
}

impl Display for PathArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0.display())
    }
}
