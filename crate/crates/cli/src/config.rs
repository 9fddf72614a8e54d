//! Flag value parsers and config-file merging.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::Parser;

use crate::{Cli, Command};

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| format!("cannot parse {p:?} in {s:?}")))
        .collect()
}

pub fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    match parse_list::<usize>(s)?.as_slice() {
        &[x, y, z] => Ok([x, y, z]),
        _ => Err(format!("expected X,Y,Z, got {s:?}")),
    }
}

pub fn parse_spacing(s: &str) -> Result<[f64; 3], String> {
    let v = parse_list::<f64>(s)?;
    let out = match v.as_slice() {
        &[h] => [h; 3],
        &[x, y, z] => [x, y, z],
        _ => return Err(format!("expected one value or X,Y,Z, got {s:?}")),
    };
    if out.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
        return Err(format!("spacing must be positive, got {s:?}"));
    }
    Ok(out)
}

pub fn parse_split(s: &str) -> Result<[f64; 3], String> {
    match parse_list::<f64>(s)?.as_slice() {
        &[a, b, c] => Ok([a, b, c]),
        _ => Err(format!("expected TRAIN,VAL,TEST fractions, got {s:?}")),
    }
}

pub enum ParseFailure {
    Clap(clap::Error),
    Config(String),
}

/// Index of the subcommand token and the `--config` value, found without
/// full parsing so that required flags may come from the file.
fn scan(argv: &[OsString]) -> (Option<usize>, Option<PathBuf>) {
    let mut sub = None;
    let mut config = None;
    let mut i = 1;
    while i < argv.len() {
        let a = argv[i].to_string_lossy();
        if a == "--" {
            break;
        }
        if a == "--config" {
            config = argv.get(i + 1).map(PathBuf::from);
            i += 2;
            continue;
        }
        if let Some(v) = a.strip_prefix("--config=") {
            config = Some(PathBuf::from(v));
        } else if a == "--threads" {
            i += 2;
            continue;
        } else if sub.is_none() && Command::NAMES.contains(&a.as_ref()) {
            sub = Some(i);
        }
        i += 1;
    }
    (sub, config)
}

fn toml_to_args(key: &str, value: &toml::Value) -> Result<Vec<String>, String> {
    let flag = format!("--{}", key.replace('_', "-"));
    let scalar = |v: &toml::Value| -> Result<String, String> {
        match v {
            toml::Value::String(s) => Ok(s.clone()),
            toml::Value::Integer(i) => Ok(i.to_string()),
            toml::Value::Float(f) => Ok(f.to_string()),
            other => Err(format!("config key {key}: unsupported value {other}")),
        }
    };
    Ok(match value {
        toml::Value::Boolean(true) => vec![flag],
        toml::Value::Boolean(false) => vec![],
        toml::Value::Array(items) => {
            let items = items.iter().map(scalar).collect::<Result<Vec<_>, _>>()?;
            // Arrays of numbers are comma lists (dims, split); strings are repeated values.
            if value.as_array().is_some_and(|a| a.iter().all(|v| v.is_integer() || v.is_float())) {
                vec![flag, items.join(",")]
            } else {
                std::iter::once(flag).chain(items).collect()
            }
        }
        other => vec![flag, scalar(other)?],
    })
}

/// Parses `argv`, splicing in values from `--config` ahead of the
/// command-line flags so the latter override them.
pub fn parse_with_config(argv: Vec<OsString>) -> Result<Cli, ParseFailure> {
    let (sub, config) = scan(&argv);
    let (Some(sub), Some(path)) = (sub, config) else {
        return Cli::try_parse_from(argv).map_err(ParseFailure::Clap);
    };
    let text = std::fs::read_to_string(&path).map_err(|e| ParseFailure::Config(format!("{}: {e}", path.display())))?;
    let table: toml::Table =
        text.parse().map_err(|e| ParseFailure::Config(format!("{}: {e}", path.display())))?;
    for (k, v) in &table {
        if !v.is_table() || !Command::NAMES.contains(&k.as_str()) {
            return Err(ParseFailure::Config(format!(
                "{}: top-level key {k:?} must be one of the tables [{}]",
                path.display(),
                Command::NAMES.join("], [")
            )));
        }
    }
    let name = argv[sub].to_string_lossy().to_string();
    let mut extra = Vec::new();
    if let Some(section) = table.get(&name).and_then(|v| v.as_table()) {
        for (k, v) in section {
            extra.extend(toml_to_args(k, v).map_err(|e| ParseFailure::Config(format!("{}: {e}", path.display())))?);
        }
    }
    let mut merged: Vec<OsString> = argv[..=sub].to_vec();
    merged.extend(extra.into_iter().map(OsString::from));
    merged.extend(argv[sub + 1..].iter().cloned());
    Cli::try_parse_from(merged).map_err(ParseFailure::Clap)
}
