//! TOML config files merged underneath command-line flags.
//!
//! Top-level keys set global options; a table named after a subcommand sets
//! that subcommand's options. Keys are long flag names (`-` or `_`).

use crate::CliError;
use clap::{Arg, ArgAction, Command};
use std::collections::HashSet;
use std::ffi::OsString;
use std::path::PathBuf;
use toml::{Table, Value};

/// Global options that take a value, for locating the subcommand in argv.
const VALUE_GLOBALS: [&str; 3] = ["--seed", "--threads", "--config"];

#[derive(Debug, Default)]
pub struct Prescan {
    pub config: Option<PathBuf>,
    /// Index of the subcommand token in argv.
    pub subcommand: Option<usize>,
    /// Long names of the flags present on the command line.
    pub given: HashSet<String>,
}

pub fn prescan(argv: &[OsString]) -> Prescan {
    let mut out = Prescan::default();
    let mut i = 1;
    while i < argv.len() {
        let tok = argv[i].to_string_lossy();
        if tok == "--" {
            break;
        }
        if let Some(long) = tok.strip_prefix("--") {
            let (name, inline) = match long.split_once('=') {
                Some((n, v)) => (n, Some(v.to_string())),
                None => (long, None),
            };
            out.given.insert(name.to_string());
            let has_inline = inline.is_some();
            if name == "config" {
                out.config = inline
                    .or_else(|| argv.get(i + 1).map(|v| v.to_string_lossy().into_owned()))
                    .map(PathBuf::from);
            }
            if out.subcommand.is_none() && !has_inline && VALUE_GLOBALS.contains(&&*tok) {
                i += 1;
            }
        } else if let Some(short) = tok.strip_prefix('-') {
            if short.chars().all(|c| c == 'v') && !short.is_empty() {
                out.given.insert("verbose".into());
            }
            if short == "h" {
                out.given.insert("help".into());
            }
        } else if out.subcommand.is_none() {
            out.subcommand = Some(i);
        }
        i += 1;
    }
    out
}

fn find_arg<'a>(cmd: &'a Command, key: &str) -> Option<&'a Arg> {
    let long = key.replace('_', "-");
    cmd.get_arguments()
        .find(|a| a.get_long() == Some(long.as_str()) && long != "config" && long != "help")
}

fn scalar(v: &Value) -> Result<String, String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Integer(i) => Ok(i.to_string()),
        Value::Float(f) => Ok(f.to_string()),
        Value::Boolean(b) => Ok(b.to_string()),
        _ => Err("expected a string, number or boolean".into()),
    }
}

fn render(arg: &Arg, key: &str, v: &Value, out: &mut Vec<OsString>) -> Result<(), CliError> {
    let flag = format!("--{}", arg.get_long().expect("config args are long flags"));
    let bad = |m: String| CliError::Usage(format!("config key '{key}': {m}"));
    match (arg.get_action(), v) {
        (ArgAction::SetTrue, Value::Boolean(b)) => {
            if *b {
                out.push(OsString::from(&flag));
            }
        }
        (ArgAction::SetTrue, _) => return Err(bad("expected a boolean".into())),
        (ArgAction::Count, Value::Integer(n)) if *n >= 0 => {
            out.extend((0..*n).map(|_| OsString::from(&flag)));
        }
        (ArgAction::Count, Value::Boolean(b)) => {
            if *b {
                out.push(OsString::from(&flag));
            }
        }
        (ArgAction::Count, _) => return Err(bad("expected a count".into())),
        (_, Value::Array(items)) => {
            let multi = arg.get_num_args().is_some_and(|r| r.max_values() > 1);
            if multi {
                out.push(OsString::from(&flag));
            }
            for item in items {
                if !multi {
                    out.push(OsString::from(&flag));
                }
                out.push(scalar(item).map_err(bad)?.into());
            }
        }
        (_, v) => {
            out.push(OsString::from(&flag));
            out.push(scalar(v).map_err(bad)?.into());
        }
    }
    Ok(())
}

fn apply_table(
    table: &Table,
    cmd: &Command,
    given: &HashSet<String>,
    out: &mut Vec<OsString>,
) -> Result<(), CliError> {
    for (key, value) in table {
        let arg = find_arg(cmd, key).ok_or_else(|| {
            CliError::Usage(format!("unknown config key '{key}' for '{}'", cmd.get_name()))
        })?;
        if !given.contains(arg.get_long().unwrap_or_default()) {
            render(arg, key, value, out)?;
        }
    }
    Ok(())
}

/// Flags contributed by the config file for `subcommand`, skipping anything
/// given explicitly. Every key in the file is validated, including tables for
/// other subcommands.
pub fn config_args(
    text: &str,
    root: &Command,
    subcommand: &str,
    given: &HashSet<String>,
) -> Result<Vec<OsString>, CliError> {
    let table: Table = text
        .parse()
        .map_err(|e: toml::de::Error| CliError::Usage(format!("config: {}", e.message())))?;
    let mut globals = Table::new();
    let mut out = Vec::new();
    for (key, value) in &table {
        match value {
            Value::Table(sub) => {
                let cmd = root
                    .find_subcommand(key)
                    .ok_or_else(|| CliError::Usage(format!("unknown config section [{key}]")))?;
                let mut scratch = Vec::new();
                let target = if key == subcommand { &mut out } else { &mut scratch };
                apply_table(sub, cmd, given, target)?;
            }
            v => {
                globals.insert(key.clone(), v.clone());
            }
        }
    }
    let mut global_args = Vec::new();
    apply_table(&globals, root, given, &mut global_args)?;
    global_args.extend(out);
    Ok(global_args)
}
