//! `key=value` config files merged beneath command-line flags.
//!
//! Entries become `--key=value` arguments placed before the user's own
//! flags, so an explicit flag always wins.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::CommandFactory;

use crate::Cli;

/// Parses `key=value` lines. Blank lines and `#` comments are skipped.
pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("config line {}: expected key=value", n + 1);
        };
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            bail!("config line {}: empty key", n + 1);
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

fn long_names(cmd: &clap::Command) -> BTreeSet<String> {
    cmd.get_arguments()
        .filter_map(|a| a.get_long().map(str::to_string))
        .collect()
}

/// Rewrites `args` so config entries precede the subcommand's own flags.
/// Keys unknown to every subcommand are rejected; keys belonging to other
/// subcommands are ignored.
pub fn merge(args: Vec<OsString>, config: &Path) -> Result<Vec<OsString>> {
    let text = fs::read_to_string(config).with_context(|| format!("cannot read config {}", config.display()))?;
    let entries = parse(&text)?;
    let root = Cli::command();
    let subcommands: Vec<&clap::Command> = root.get_subcommands().collect();
    let Some(pos) = args
        .iter()
        .position(|a| subcommands.iter().any(|s| a.to_str() == Some(s.get_name())))
    else {
        return Ok(args);
    };
    let sub = subcommands
        .iter()
        .find(|s| args[pos].to_str() == Some(s.get_name()))
        .expect("position found by name");
    let own = long_names(sub);
    let known: BTreeSet<String> = subcommands.iter().flat_map(|s| long_names(s)).collect();
    let mut injected = Vec::new();
    for (key, value) in entries {
        if key == "config" {
            continue;
        }
        if own.contains(&key) {
            injected.push(OsString::from(format!("--{key}={value}")));
        } else if !known.contains(&key) {
            bail!("unknown config key `{key}`");
        }
    }
    let mut out = args[..=pos].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[pos + 1..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_underscores() {
        let e = parse("# c\nbits = 24\n\nlambda_1=0\n").unwrap();
        assert_eq!(e, vec![("bits".into(), "24".into()), ("lambda-1".into(), "0".into())]);
        assert!(parse("novalue\n").is_err());
    }

    #[test]
    fn flags_follow_config_entries() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.conf");
        fs::write(&cfg, "seed=4\nclasses=3\nepochs=9\n").unwrap();
        let args: Vec<OsString> = ["gpq", "synth", "--seed", "7"].iter().map(OsString::from).collect();
        let merged = merge(args, &cfg).unwrap();
        let merged: Vec<&str> = merged.iter().map(|a| a.to_str().unwrap()).collect();
        assert_eq!(merged, ["gpq", "synth", "--seed=4", "--classes=3", "--seed", "7"]);
        fs::write(&cfg, "sead=4\n").unwrap();
        let args: Vec<OsString> = ["gpq", "synth"].iter().map(OsString::from).collect();
        assert!(merge(args, &cfg).is_err());
    }
}
