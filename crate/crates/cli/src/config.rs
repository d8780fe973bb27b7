//! Config-file support: a TOML file whose keys are long flag names.
//!
//! Top-level keys apply to every subcommand that accepts the flag; a
//! `[train]`, `[eval]`, ... table applies to that subcommand only. The
//! file's values are spliced into the argument list ahead of the user's own
//! flags, so flags on the command line win.

use std::ffi::OsString;
use std::path::Path;

use clap::{ArgAction, Command};

use crate::Failure;

/// Keys handled outside the argument splice.
pub const GLOBAL_KEYS: [&str; 2] = ["config", "threads"];

/// Position of the subcommand and the `--config` path, found without a
/// full parse (the file may supply otherwise required flags).
pub fn scan(args: &[OsString]) -> (Option<usize>, Option<OsString>) {
    let (mut sub, mut config) = (None, None);
    let mut i = 1;
    while i < args.len() {
        let a = args[i].to_string_lossy();
        if a == "--" {
            break;
        }
        if a == "--config" || a == "--threads" {
            if a == "--config" {
                config = args.get(i + 1).cloned();
            }
            i += 2;
            continue;
        }
        if let Some(v) = a.strip_prefix("--config=") {
            config = Some(v.into());
        } else if sub.is_none() && !a.starts_with('-') {
            sub = Some(i);
        }
        i += 1;
    }
    (sub, config)
}

pub struct FileConfig {
    pub table: toml::Table,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::user(format!("config file {}: {e}", path.display())))?;
        let table: toml::Table = text
            .parse()
            .map_err(|e| Failure::user(format!("config file {}: {e}", path.display())))?;
        Ok(Self { table })
    }

    pub fn threads(&self) -> Result<Option<usize>, Failure> {
        match self.table.get("threads") {
            None => Ok(None),
            Some(toml::Value::Integer(n)) if *n > 0 => Ok(Some(*n as usize)),
            Some(v) => Err(Failure::user(format!("config file: threads must be a positive integer, got {v}"))),
        }
    }

    /// Flags contributed to subcommand `sub`, checked against the command
    /// definition.
    pub fn flags_for(&self, cmd: &Command, sub: &str) -> Result<Vec<OsString>, Failure> {
        let mut out = Vec::new();
        for (key, value) in &self.table {
            if GLOBAL_KEYS.contains(&key.as_str()) {
                continue;
            }
            match value {
                toml::Value::Table(t) => {
                    let sc = cmd
                        .find_subcommand(key)
                        .ok_or_else(|| Failure::user(format!("config file: no subcommand [{key}]")))?;
                    let mut flags = Vec::new();
                    for (k, v) in t {
                        flags.extend(to_flags(sc, k, v).ok_or_else(|| Failure::user(format!("config file: [{key}] has no option {k:?}")))??);
                    }
                    if key == sub {
                        out.extend(flags);
                    }
                }
                v => {
                    let mut known = false;
                    for sc in cmd.get_subcommands() {
                        if let Some(flags) = to_flags(sc, key, v) {
                            known = true;
                            if sc.get_name() == sub {
                                out.extend(flags?);
                            }
                        }
                    }
                    if !known {
                        return Err(Failure::user(format!("config file: no subcommand takes option {key:?}")));
                    }
                }
            }
        }
        Ok(out)
    }
}

fn to_flags(cmd: &Command, key: &str, value: &toml::Value) -> Option<Result<Vec<OsString>, Failure>> {
    let long = key.replace('_', "-");
    let arg = cmd.get_arguments().find(|a| a.get_long() == Some(long.as_str()))?;
    let flag = OsString::from(format!("--{long}"));
    let scalar = |v: &toml::Value| match v {
        toml::Value::String(s) => Ok(s.clone()),
        toml::Value::Integer(i) => Ok(i.to_string()),
        toml::Value::Float(f) => Ok(f.to_string()),
        other => Err(Failure::user(format!("config file: {key} has unsupported value {other}"))),
    };
    Some((|| {
        Ok(match (arg.get_action(), value) {
            (ArgAction::SetTrue, toml::Value::Boolean(true)) => vec![flag],
            (ArgAction::SetTrue, toml::Value::Boolean(false)) => vec![],
            (ArgAction::SetTrue, other) => return Err(Failure::user(format!("config file: {key} must be a boolean, got {other}"))),
            (_, toml::Value::Array(items)) => {
                let parts = items.iter().map(scalar).collect::<Result<Vec<_>, _>>()?;
                vec![flag, parts.join(",").into()]
            }
            (_, v) => vec![flag, scalar(v)?.into()],
        })
    })())
}
