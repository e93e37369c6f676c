//! Flat config file support.
//!
//! The file is a TOML table of `flag-name = value` pairs (underscores and
//! dashes are interchangeable). Its entries are spliced into the argument
//! list right after the subcommand, so any flag given on the command line
//! overrides them; entries whose `TSEM_` variable is set are dropped so the
//! environment overrides them too.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{ArgAction, CommandFactory};
use tsem::Error;

use crate::args::Cli;

fn config_path(argv: &[OsString]) -> Option<PathBuf> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--" {
            break;
        }
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(v));
        }
    }
    std::env::var_os("TSEM_CONFIG").map(PathBuf::from)
}

fn scalar(key: &str, v: &toml::Value) -> Result<String, Error> {
    Ok(match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Float(f) => f.to_string(),
        toml::Value::Boolean(b) => b.to_string(),
        toml::Value::Array(items) => items
            .iter()
            .map(|i| scalar(key, i))
            .collect::<Result<Vec<_>, _>>()?
            .join(","),
        _ => {
            return Err(Error::Config(format!(
                "config key `{key}` must be a scalar"
            )))
        }
    })
}

/// Returns `argv` with the config file's entries inserted after the
/// subcommand name. Without a config file or subcommand, `argv` is returned
/// unchanged.
pub fn merge_config_file(mut argv: Vec<OsString>) -> Result<Vec<OsString>, Error> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let root = Cli::command();
    let Some((pos, sub)) = argv.iter().enumerate().skip(1).find_map(|(i, a)| {
        root.find_subcommand(a.to_string_lossy().as_ref())
            .map(|s| (i, s.clone()))
    }) else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", path.display())))?;
    let table: toml::Table = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))?;

    let mut extra = Vec::new();
    for (key, value) in &table {
        let long = key.replace('_', "-");
        if long == "config" {
            return Err(Error::Config(
                "a config file cannot name another config file".into(),
            ));
        }
        let arg = sub
            .get_arguments()
            .chain(root.get_arguments())
            .find(|a| a.get_long() == Some(long.as_str()))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown config key `{key}` for `{}` (keys are its long flag names)",
                    sub.get_name()
                ))
            })?;
        if arg
            .get_env()
            .is_some_and(|env| std::env::var_os(env).is_some())
        {
            continue;
        }
        let value = scalar(key, value)?;
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            match value.as_str() {
                "true" => extra.push(OsString::from(format!("--{long}"))),
                "false" => {}
                _ => {
                    return Err(Error::Config(format!(
                        "config key `{key}` must be true or false"
                    )))
                }
            }
        } else {
            extra.push(OsString::from(format!("--{long}={value}")));
        }
    }
    argv.splice(pos + 1..pos + 1, extra);
    Ok(argv)
}
