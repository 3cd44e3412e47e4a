//! Merges a flat `key=value` config file into the command line.
//!
//! Each key becomes `--key=value` (underscores turned into dashes) placed
//! right after the subcommand name, ahead of the user's own flags, so an
//! explicit flag always wins. Keys the subcommand does not know are skipped.

use std::ffi::OsString;

use anyhow::{Context, Result};
use clap::CommandFactory;

use crate::Cli;

fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(v.into());
        }
    }
    None
}

pub fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let cmd = Cli::command();
    let Some((pos, sub)) = args.iter().enumerate().skip(1).find_map(|(k, a)| {
        cmd.find_subcommand(a.to_string_lossy().as_ref()).map(|s| (k, s))
    }) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("reading config {}", path.to_string_lossy()))?;
    let entries = incvol_core::io::parse_key_values(&text, &path.to_string_lossy())?;
    let mut inserted = Vec::new();
    for (key, value) in entries {
        let long = key.replace('_', "-");
        if long == "config" {
            continue;
        }
        if sub.get_arguments().any(|a| a.get_long() == Some(long.as_str())) {
            inserted.push(OsString::from(format!("--{long}={value}")));
        } else {
            log::debug!("config key `{key}` does not apply to `{}`", sub.get_name());
        }
    }
    let mut out = args[..=pos].to_vec();
    out.extend(inserted);
    out.extend_from_slice(&args[pos + 1..]);
    Ok(out)
}
