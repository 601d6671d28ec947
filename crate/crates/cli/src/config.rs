//! Flat `key = value` config files. Keys are the long flag names of the
//! subcommand; flags given on the command line take precedence.

use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::{ArgAction, ArgMatches, Command};

/// File written next to every run's outputs; passing it back through
/// `--config` reproduces the run.
pub const RUN_CONFIG_FILE: &str = "run.cfg";

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

pub fn parse(text: &str) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let Some((k, v)) = body.split_once('=') else {
            bail!("line {}: expected `key = value`", i + 1);
        };
        let key = k.trim();
        if key.is_empty() {
            bail!("line {}: empty key", i + 1);
        }
        out.push(Entry { line: i + 1, key: key.to_string(), value: v.trim().to_string() });
    }
    Ok(out)
}

fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(p.into());
        }
    }
    None
}

fn given_on_command_line(args: &[OsString], long: &str) -> bool {
    let flag = format!("--{long}");
    let prefix = format!("--{long}=");
    args.iter().any(|a| {
        let s = a.to_string_lossy();
        s == flag.as_str() || s.starts_with(&prefix)
    })
}

/// Insert the settings of the `--config` file (if any) into `args` as flags,
/// skipping every key already present on the command line.
pub fn expand(args: Vec<OsString>, cmd: &Command) -> Result<Vec<OsString>> {
    let Some(sub_pos) = args.iter().skip(1).position(|a| !a.to_string_lossy().starts_with('-')).map(|p| p + 1) else {
        return Ok(args);
    };
    let Some(sub) = cmd.find_subcommand(args[sub_pos].to_string_lossy().as_ref()) else {
        return Ok(args);
    };
    let Some(path) = config_path(&args[sub_pos..]) else {
        return Ok(args);
    };
    let path = Path::new(&path);
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let entries = parse(&text).with_context(|| format!("config {}", path.display()))?;
    let mut extra: Vec<OsString> = Vec::new();
    for e in entries {
        let Some(arg) = sub.get_arguments().find(|a| a.get_long() == Some(e.key.as_str())) else {
            bail!("config {} line {}: unknown key `{}` for `{}`", path.display(), e.line, e.key, sub.get_name());
        };
        if e.key == "config" || given_on_command_line(&args[sub_pos..], &e.key) {
            continue;
        }
        if arg.get_action().takes_values() {
            extra.push(format!("--{}", e.key).into());
            extra.push(e.value.into());
        } else {
            match e.value.as_str() {
                "true" => extra.push(format!("--{}", e.key).into()),
                "false" => {}
                v => bail!("config {} line {}: `{}` is a switch; expected true or false, got `{v}`", path.display(), e.line, e.key),
            }
        }
    }
    let mut out = args;
    let tail = out.split_off(sub_pos + 1);
    out.extend(extra);
    out.extend(tail);
    Ok(out)
}

/// Every setting of a parsed subcommand, defaults included, in config-file
/// form.
pub fn effective(sub: &Command, matches: &ArgMatches) -> String {
    let mut s = format!("# cstep {}\n", sub.get_name());
    for arg in sub.get_arguments() {
        let Some(long) = arg.get_long() else { continue };
        let id = arg.get_id().as_str();
        if long == "config" || long == "help" {
            continue;
        }
        match arg.get_action() {
            ArgAction::SetTrue => {
                let on = matches.get_flag(id);
                s.push_str(&format!("{long} = {on}\n"));
            }
            _ => {
                if let Some(vals) = matches.get_raw(id) {
                    for v in vals {
                        s.push_str(&format!("{long} = {}\n", v.to_string_lossy()));
                    }
                }
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_reports_lines() {
        let e = parse("# c\n a = 1 \n\nb=x y # tail\n").unwrap();
        assert_eq!(e, vec![
            Entry { line: 2, key: "a".into(), value: "1".into() },
            Entry { line: 4, key: "b".into(), value: "x y".into() },
        ]);
        let err = parse("a = 1\nnot a pair\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }
}
