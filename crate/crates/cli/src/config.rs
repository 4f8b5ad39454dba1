//! `--config FILE`: `key = value` lines that stand in for flags not given on
//! the command line.

use std::collections::BTreeMap;
use std::ffi::OsString;

use crate::CliError;

pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("config line {}: expected key=value", k + 1)))?;
        let key = key.trim().replace('_', "-");
        if key.is_empty() || key == "config" {
            return Err(CliError::usage(format!("config line {}: invalid key", k + 1)));
        }
        out.insert(key, value.trim().to_string());
    }
    Ok(out)
}

/// Appends config entries to `args`, skipping keys the command line already
/// sets. Every flag is accepted after the subcommand, wherever `--config` sits. Boolean flags take `true`/`false`.
pub fn merge_config(args: Vec<OsString>, switches: &[&str]) -> Result<Vec<OsString>, CliError> {
    let strs: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let Some(pos) = strs.iter().position(|a| a == "--config" || a.starts_with("--config=")) else {
        return Ok(args);
    };
    let path = match strs[pos].strip_prefix("--config=") {
        Some(p) => p.to_string(),
        None => strs
            .get(pos + 1)
            .cloned()
            .ok_or_else(|| CliError::usage("--config needs a file".into()))?,
    };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::usage(format!("cannot read config file `{path}`: {e}")))?;
    let entries = parse_config(&text)?;
    let given = |key: &str| {
        let flag = format!("--{key}");
        strs.iter().any(|a| *a == flag || a.starts_with(&format!("{flag}=")))
    };
    let mut extra = Vec::new();
    for (key, value) in entries {
        if given(&key) {
            continue;
        }
        if switches.contains(&key.as_str()) {
            match value.as_str() {
                "true" => extra.push(format!("--{key}")),
                "false" => {}
                other => return Err(CliError::usage(format!("config key `{key}` expects true or false, got `{other}`"))),
            }
        } else {
            extra.push(format!("--{key}={value}"));
        }
    }
    let mut out = args;
    out.extend(extra.into_iter().map(OsString::from));
    Ok(out)
}
