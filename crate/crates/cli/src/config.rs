//! `--config` support: values from a TOML file become ordinary flags placed
//! before the command-line ones, so flags given on the command line win.
//!
//! The file holds one table per subcommand, keyed by long flag name:
//!
//! ```toml
//! [train]
//! index = "data/index.jsonl"
//! epochs = 10
//! learning_rate = 1e-4
//! ```

use std::ffi::OsString;
use std::path::PathBuf;

use crate::CliError;

/// Returns `args` with the config file's flags for the chosen subcommand
/// spliced in right after the subcommand name.
pub fn expand_args(args: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let Some((config, sub_pos)) = scan(&args) else {
        return Ok(args);
    };
    let Some(config) = config else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&config)
        .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", config.display())))?;
    let doc: toml::Table = text
        .parse()
        .map_err(|e| CliError::Validation(format!("config {}: {e}", config.display())))?;
    let sub = args[sub_pos].to_string_lossy().into_owned();
    let Some(section) = doc.get(&sub) else {
        return Ok(args);
    };
    let table = section
        .as_table()
        .ok_or_else(|| CliError::Validation(format!("config section [{sub}] must be a table")))?;

    let mut injected = Vec::new();
    for (key, value) in table {
        let flag = format!("--{}", key.replace('_', "-"));
        push_value(&mut injected, &flag, value, &sub)?;
    }
    let mut out = args[..=sub_pos].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[sub_pos + 1..]);
    Ok(out)
}

fn push_value(out: &mut Vec<OsString>, flag: &str, value: &toml::Value, sub: &str) -> Result<(), CliError> {
    match value {
        toml::Value::Boolean(true) => out.push(flag.into()),
        toml::Value::Boolean(false) => {}
        toml::Value::String(s) => {
            out.push(flag.into());
            out.push(s.into());
        }
        toml::Value::Integer(i) => {
            out.push(flag.into());
            out.push(i.to_string().into());
        }
        toml::Value::Float(f) => {
            out.push(flag.into());
            out.push(f.to_string().into());
        }
        toml::Value::Array(items) => {
            for item in items {
                push_value(out, flag, item, sub)?;
            }
        }
        other => {
            return Err(CliError::Validation(format!(
                "config [{sub}] {flag}: unsupported value {other}"
            )))
        }
    }
    Ok(())
}

/// Finds the `--config` path (if any, before or after the subcommand) and
/// the index of the subcommand name.
fn scan(args: &[OsString]) -> Option<(Option<PathBuf>, usize)> {
    let mut config = None;
    let mut sub = None;
    let mut i = 1;
    while i < args.len() {
        let a = args[i].to_string_lossy();
        if a == "--" {
            break;
        } else if a == "--config" {
            config = args.get(i + 1).map(PathBuf::from);
            i += 2;
        } else if let Some(path) = a.strip_prefix("--config=") {
            config = Some(PathBuf::from(path));
            i += 1;
        } else {
            if sub.is_none() && !a.starts_with('-') {
                sub = Some(i);
            }
            i += 1;
        }
    }
    sub.map(|s| (config, s))
}
