//! `--config FILE` support: a JSON object whose keys mirror long flag names.
//!
//! Top-level scalar keys apply to every command; an object stored under a
//! subcommand's name applies only to that subcommand. Keys are appended as
//! flags unless the command line already sets them.

use std::collections::HashSet;
use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde_json::{Map, Value};

/// Keys written into run records that are not flags.
const RESERVED: &[&str] = &["command", "version", "config"];

/// Locate `--config` in `argv`, returning its value if present.
fn config_path(argv: &[OsString]) -> Option<OsString> {
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--" {
            return None;
        }
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(v.into());
        }
    }
    None
}

fn flags_present(argv: &[OsString]) -> HashSet<String> {
    argv.iter()
        .filter_map(|a| {
            let s = a.to_str()?;
            let name = s.strip_prefix("--")?;
            Some(name.split('=').next().unwrap_or(name).to_string())
        })
        .collect()
}

fn push_flag(out: &mut Vec<OsString>, key: &str, value: &Value) -> Result<()> {
    let flag = format!("--{}", key.replace('_', "-"));
    match value {
        Value::Null | Value::Bool(false) => {}
        Value::Bool(true) => out.push(flag.into()),
        Value::Number(n) => {
            out.push(flag.into());
            out.push(n.to_string().into());
        }
        Value::String(s) => {
            out.push(flag.into());
            out.push(s.into());
        }
        Value::Array(_) | Value::Object(_) => {
            bail!("config key `{key}` must be a scalar")
        }
    }
    Ok(())
}

/// Expand `argv` with the settings from the `--config` file, if any.
///
/// `subcommands` lists the names that may carry a nested object.
pub fn expand_args(argv: Vec<OsString>, subcommands: &[&str]) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let path = Path::new(&path);
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let doc: Map<String, Value> = serde_json::from_str(&text)
        .with_context(|| format!("config {} is not a JSON object", path.display()))?;

    let command = argv
        .iter()
        .skip(1)
        .filter_map(|a| a.to_str())
        .find(|a| subcommands.contains(a))
        .map(str::to_string);
    let present = flags_present(&argv);
    let normalized = |k: &str| k.replace('_', "-");

    let mut extra = Vec::new();
    let mut apply = |key: &str, value: &Value| -> Result<()> {
        let flag = normalized(key);
        if RESERVED.contains(&flag.as_str()) || present.contains(&flag) {
            return Ok(());
        }
        push_flag(&mut extra, key, value)
    };
    for (key, value) in &doc {
        if subcommands.contains(&key.as_str()) {
            continue;
        }
        apply(key, value)?;
    }
    if let Some(Value::Object(section)) = command.as_deref().and_then(|c| doc.get(c)) {
        for (key, value) in section {
            apply(key, value)?;
        }
    }

    let mut argv = argv;
    // Keep anything after `--` positional.
    let at = argv
        .iter()
        .position(|a| a == "--")
        .unwrap_or(argv.len());
    argv.splice(at..at, extra);
    Ok(argv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn flags_on_the_command_line_win() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        std::fs::write(
            &cfg,
            r#"{"seed": 3, "command": "train", "train": {"epochs": 7, "no_restore_best": true}, "synth": {"real": 9}}"#,
        )
        .unwrap();
        let argv = args(&["dfdetect", "train", "--seed", "5", "--config", cfg.to_str().unwrap()]);
        let out = expand_args(argv, &["train", "synth"]).unwrap();
        let out: Vec<String> = out.iter().map(|a| a.to_string_lossy().into_owned()).collect();
        assert_eq!(out[..5], ["dfdetect", "train", "--seed", "5", "--config"]);
        assert!(!out.contains(&"3".to_string()));
        assert!(out.windows(2).any(|w| w == ["--epochs", "7"]));
        assert!(out.contains(&"--no-restore-best".to_string()));
        assert!(!out.contains(&"--real".to_string()));
        assert!(!out.contains(&"--command".to_string()));
    }

    #[test]
    fn no_config_leaves_args_alone() {
        let argv = args(&["dfdetect", "synth", "--real", "2"]);
        assert_eq!(expand_args(argv.clone(), &["synth"]).unwrap(), argv);
    }
}
