use std::ffi::OsString;

/// Appends the entries of the `--config` file (if any) to `argv` as long
/// flags, so that they take precedence over flags given on the command line.
///
/// The file is TOML; only top-level keys are read. Underscores in keys map
/// to dashes, `true` becomes a bare flag, `false` is skipped and arrays are
/// joined with commas.
pub fn apply_config(mut argv: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let Some(path) = find_config(&argv) else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(&path).map_err(|e| format!("cannot read config {path}: {e}"))?;
    argv.extend(config_args(&text)?);
    Ok(argv)
}

fn find_config(argv: &[OsString]) -> Option<String> {
    let mut it = argv.iter().map(|a| a.to_string_lossy());
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().map(|s| s.into_owned());
        }
        if let Some(v) = a.strip_prefix("--config=") {
            return Some(v.to_string());
        }
    }
    None
}

fn scalar(v: &toml::Value) -> Result<String, String> {
    match v {
        toml::Value::String(s) => Ok(s.clone()),
        toml::Value::Integer(i) => Ok(i.to_string()),
        toml::Value::Float(f) => Ok(f.to_string()),
        other => Err(format!("unsupported config value {other}")),
    }
}

pub fn config_args(text: &str) -> Result<Vec<OsString>, String> {
    let table: toml::Table = text.parse().map_err(|e| format!("config: {e}"))?;
    let mut out = Vec::new();
    for (key, value) in &table {
        if key == "config" {
            continue;
        }
        let flag = format!("--{}", key.replace('_', "-"));
        match value {
            toml::Value::Boolean(true) => out.push(flag.into()),
            toml::Value::Boolean(false) => {}
            toml::Value::Array(items) => {
                let parts = items.iter().map(scalar).collect::<Result<Vec<_>, _>>()?;
                out.push(flag.into());
                out.push(parts.join(",").into());
            }
            v => {
                out.push(flag.into());
                out.push(scalar(v)?.into());
            }
        }
    }
    Ok(out)
}

/// Seed from the flag, then `HIERPERC_SEED`, then 1.
pub fn resolve_seed(flag: Option<u64>) -> Result<u64, String> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("HIERPERC_SEED") {
        Ok(v) => v.trim().parse().map_err(|_| format!("HIERPERC_SEED is not an integer: {v}")),
        Err(_) => Ok(1),
    }
}
