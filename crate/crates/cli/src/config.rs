//! Flat `key=value` config files.
//!
//! `--config FILE` is replaced by the flags it lists, placed before the
//! command-line flags so that the latter take precedence.

use std::ffi::OsString;

pub fn parse(text: &str, path: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| format!("{path}:{}: expected key=value", i + 1))?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            return Err(format!("{path}:{}: empty key", i + 1));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

/// `true` becomes a bare switch and `false` is dropped.
fn to_flags(pairs: Vec<(String, String)>) -> Vec<OsString> {
    let mut flags = Vec::new();
    for (k, v) in pairs {
        match v.as_str() {
            "true" => flags.push(format!("--{k}").into()),
            "false" => {}
            _ => {
                flags.push(format!("--{k}").into());
                flags.push(v.into());
            }
        }
    }
    flags
}

pub fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let mut path = None;
    let mut rest = Vec::with_capacity(argv.len());
    let mut it = argv.into_iter();
    while let Some(arg) = it.next() {
        let s = arg.to_string_lossy().into_owned();
        if s == "--config" {
            path = Some(it.next().ok_or("--config needs a file")?.to_string_lossy().into_owned());
        } else if let Some(p) = s.strip_prefix("--config=") {
            path = Some(p.to_string());
        } else {
            rest.push(arg);
        }
    }
    let Some(path) = path else { return Ok(rest) };
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{path}: {e}"))?;
    let flags = to_flags(parse(&text, &path)?);
    // program name and subcommand come first
    let split = rest.len().min(2);
    let mut out: Vec<OsString> = rest[..split].to_vec();
    out.extend(flags);
    out.extend(rest[split..].iter().cloned());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn parses_pairs_and_skips_comments() {
        let p = parse("# c\nalpha_scale = 0.5\n\nseed=3\n", "f").unwrap();
        assert_eq!(p, vec![("alpha-scale".into(), "0.5".into()), ("seed".into(), "3".into())]);
        assert!(parse("novalue\n", "f").unwrap_err().contains("f:1"));
    }

    #[test]
    fn file_flags_precede_command_line_flags() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.cfg");
        std::fs::write(&f, "seed=3\nconstant_schedule=true\nacceptance=false\n").unwrap();
        let argv = os(&["prog", "explore", "--config", f.to_str().unwrap(), "--seed", "4"]);
        let out = expand_config(argv).unwrap();
        assert_eq!(out, os(&["prog", "explore", "--seed", "3", "--constant-schedule", "--seed", "4"]));
    }
}
