//! Flat `key = value` config files and error categories.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Check(String),
}

/// Machine-readable category for the `error[...]` line.
pub fn category(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(c) = cause.downcast_ref::<CliError>() {
            return match c {
                CliError::Usage(_) => "usage",
                CliError::Config(_) => "config",
                CliError::Check(_) => "check",
            };
        }
        if let Some(c) = cause.downcast_ref::<semvoc::Error>() {
            return c.category();
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "internal"
}

/// The error chain on one line, skipping causes already spelled out by
/// their parent.
pub fn one_line(e: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in e.chain() {
        let text = cause.to_string().replace('\n', " ");
        if !parts.last().is_some_and(|p| p.contains(&text)) {
            parts.push(text);
        }
    }
    parts.join(": ")
}

/// `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() || key.starts_with('-') {
            return Err(CliError::Config(format!("line {}: bad key `{}`", i + 1, k.trim())));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

/// Replaces `--config <file>` with the file's entries as flags, placed right
/// after the subcommand so that explicit flags override them.
pub fn expand_config(argv: Vec<String>) -> anyhow::Result<Vec<String>> {
    let mut rest = Vec::with_capacity(argv.len());
    let mut file = None;
    let mut it = argv.into_iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            let path = it.next().ok_or_else(|| CliError::Usage("--config needs a file".into()))?;
            file = Some(path);
        } else if let Some(p) = a.strip_prefix("--config=") {
            file = Some(p.to_string());
        } else {
            rest.push(a);
        }
    }
    let Some(file) = file else { return Ok(rest) };
    if rest.len() < 2 || rest[1].starts_with('-') {
        return Err(CliError::Usage("--config must follow a subcommand".into()).into());
    }
    let text = std::fs::read_to_string(&file).map_err(|e| CliError::Config(format!("cannot read config `{file}`: {e}")))?;
    let flags = parse_config(&text)?.into_iter().map(|(k, v)| format!("--{k}={v}"));
    let mut out: Vec<String> = rest[..2].to_vec();
    out.extend(flags);
    out.extend_from_slice(&rest[2..]);
    Ok(out)
}

/// Renders resolved arguments as `key = value` lines in field order.
pub fn render<T: Serialize>(args: &T) -> anyhow::Result<String> {
    let value = serde_json::to_value(args)?;
    let serde_json::Value::Object(map) = value else {
        anyhow::bail!("arguments did not serialize to a map");
    };
    let mut out = String::new();
    for (k, v) in map {
        let v = match v {
            serde_json::Value::Null => continue,
            serde_json::Value::String(s) => s,
            other => other.to_string(),
        };
        writeln!(out, "{} = {v}", k.replace('_', "-"))?;
    }
    Ok(out)
}

/// Prints the resolved config and saves it as `<reports>/<command>.cfg`.
pub fn announce<T: Serialize>(command: &str, args: &T, reports: &Path) -> anyhow::Result<()> {
    let text = render(args)?;
    println!("# semvoc {command}");
    print!("{text}");
    std::fs::create_dir_all(reports)?;
    std::fs::write(reports.join(format!("{command}.cfg")), format!("# semvoc {command}\n{text}"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_blanks_and_underscores() {
        let kv = parse_config("# c\n\nsteps = 10\nout_dir=/tmp/x\n  cfg-grid = 1,2 \n").unwrap();
        assert_eq!(
            kv,
            vec![
                ("steps".to_string(), "10".to_string()),
                ("out-dir".to_string(), "/tmp/x".to_string()),
                ("cfg-grid".to_string(), "1,2".to_string())
            ]
        );
        assert!(parse_config("steps 10").is_err());
        assert!(parse_config(" = 3").is_err());
    }

    #[test]
    fn config_flags_go_before_explicit_flags() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("a.cfg");
        std::fs::write(&f, "seed = 3\n").unwrap();
        let argv = ["semvoc", "grad-check", "--seed", "5", "--config", f.to_str().unwrap()].map(String::from).to_vec();
        let out = expand_config(argv).unwrap();
        assert_eq!(out, ["semvoc", "grad-check", "--seed=3", "--seed", "5"]);
        let argv = ["semvoc", "--config", f.to_str().unwrap()].map(String::from).to_vec();
        assert!(expand_config(argv).is_err());
    }

    #[test]
    fn render_skips_missing_options() {
        #[derive(Serialize)]
        struct A {
            out_dir: String,
            steps: usize,
            lr: f64,
            name: Option<String>,
        }
        let s = render(&A { out_dir: "o".into(), steps: 3, lr: 1e-3, name: None }).unwrap();
        assert_eq!(s, "out-dir = o\nsteps = 3\nlr = 0.001\n");
    }
}
