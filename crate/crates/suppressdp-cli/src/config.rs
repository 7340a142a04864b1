//! Flat `key=value` config files. Keys are long flag names; values given on
//! the command line take precedence.

use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::parser::ValueSource;
use clap::{ArgMatches, Command};

/// Parses `key=value` lines. Blank lines and lines starting with `#` are
/// skipped; a leading `--` on the key is accepted.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("config line {}: expected key=value, got {line:?}", i + 1);
        };
        let key = k.trim().trim_start_matches("--");
        if key.is_empty() {
            bail!("config line {}: empty key", i + 1);
        }
        out.push((key.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_config(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    parse_config(&text)
}

/// The `--config` value, if present, found without a full parse.
pub fn config_path(args: &[OsString]) -> Option<OsString> {
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

/// Extra command-line tokens for the config entries that the command line
/// left unset. Entries for flags the selected subcommand lacks are errors.
pub fn tokens_for_unset(
    root: &Command,
    matches: &ArgMatches,
    entries: &[(String, String)],
) -> Result<Vec<OsString>> {
    let mut cmd = root;
    let mut m = matches;
    let mut path = vec![root.get_name().to_string()];
    while let Some((name, sub)) = m.subcommand() {
        cmd = cmd
            .find_subcommand(name)
            .expect("matched subcommand exists");
        m = sub;
        path.push(name.to_string());
    }
    let mut tokens = Vec::new();
    for (key, value) in entries {
        let Some(arg) = cmd
            .get_arguments()
            .chain(root.get_arguments())
            .find(|a| a.get_long() == Some(key.as_str()))
        else {
            bail!("config key {key:?} is not a flag of `{}`", path.join(" "));
        };
        let id = arg.get_id().as_str();
        if m.value_source(id) == Some(ValueSource::CommandLine) {
            continue;
        }
        if arg.get_action().takes_values() {
            tokens.push(format!("--{key}").into());
            tokens.push(value.into());
        } else {
            match value.as_str() {
                "true" | "1" | "yes" => tokens.push(format!("--{key}").into()),
                "false" | "0" | "no" => {}
                _ => bail!("config key {key:?} is a switch; expected true or false, got {value:?}"),
            }
        }
    }
    Ok(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_prefixes() {
        let e = parse_config("# c\n\n--seed = 4\nformat=csv\n").unwrap();
        assert_eq!(
            e,
            vec![("seed".into(), "4".into()), ("format".into(), "csv".into())]
        );
        assert!(parse_config("seed").is_err());
        assert!(parse_config("=3").is_err());
    }

    #[test]
    fn finds_config_path() {
        let a: Vec<OsString> = ["x", "run", "--config", "c.txt"].map(Into::into).to_vec();
        assert_eq!(config_path(&a), Some("c.txt".into()));
        let b: Vec<OsString> = ["x", "--config=d.txt"].map(Into::into).to_vec();
        assert_eq!(config_path(&b), Some("d.txt".into()));
        assert_eq!(config_path(&a[..2]), None);
    }
}
