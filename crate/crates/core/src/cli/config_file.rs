use std::ffi::OsString;
use std::path::Path;

/// Parses `key=value` lines. Blank lines and `#` comments are skipped;
/// keys may not repeat.
pub fn parse_config_file(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split_once('#').map_or(raw, |(before, _)| before).trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key=value, got '{line}'", i + 1))?;
        let (key, value) = (key.trim().replace('_', "-"), value.trim().to_string());
        if key.is_empty() {
            return Err(format!("line {}: empty key", i + 1));
        }
        if out.iter().any(|(k, _)| *k == key) {
            return Err(format!("line {}: key '{key}' given twice", i + 1));
        }
        out.push((key, value));
    }
    Ok(out)
}

/// Reads a config file and turns it into command-line arguments for `sub`.
/// Keys that are not long flags of `sub` are rejected; keys listed in
/// `overridden` are dropped.
pub(super) fn load_as_args(path: &Path, sub: &mut clap::Command, overridden: &[String]) -> Result<Vec<OsString>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let entries = parse_config_file(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut args = Vec::new();
    for (key, value) in entries {
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()) && key != "config")
            .ok_or_else(|| {
                let known: Vec<&str> = sub.get_arguments().filter_map(|a| a.get_long()).collect();
                format!("{}: unknown key '{key}' for {} (accepted: {})", path.display(), sub.get_name(), known.join(", "))
            })?;
        if overridden.contains(&key) {
            continue;
        }
        if arg.get_action().takes_values() {
            args.push(OsString::from(format!("--{key}")));
            args.push(OsString::from(value));
        } else {
            match value.as_str() {
                "true" => args.push(OsString::from(format!("--{key}"))),
                "false" => {}
                other => return Err(format!("{}: key '{key}' expects true or false, got '{other}'", path.display())),
            }
        }
    }
    Ok(args)
}
