//! Config files mirror the command-line flags one to one: a TOML table per
//! subcommand whose keys are long flag names (`n_obs` or `n-obs`). Values
//! from the file are spliced into the argument list ahead of the user's own
//! flags, and a flag given on the command line replaces the file's value.

use std::ffi::OsString;
use std::path::Path;

use toml::Value;

/// Expands `--config <file>` into the flags it stands for.
pub fn expand_args(args: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let Some(sub_pos) = args.iter().skip(1).position(|a| !a.to_string_lossy().starts_with('-')) else {
        return Ok(args);
    };
    let sub_pos = sub_pos + 1;
    let sub = args[sub_pos].to_string_lossy().into_owned();
    let text = std::fs::read_to_string(&path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let table: toml::Table = text.parse().map_err(|e| format!("config {}: {e}", path.display()))?;
    let section = match table.get(&sub) {
        Some(Value::Table(t)) => t.clone(),
        Some(_) => return Err(format!("config {}: [{sub}] must be a table", path.display())),
        None => toml::Table::new(),
    };
    for key in table.keys() {
        if !matches!(table[key], Value::Table(_)) {
            return Err(format!(
                "config {}: top-level key {key:?} must sit inside a [subcommand] table",
                path.display()
            ));
        }
    }
    let user: Vec<String> = args[sub_pos + 1..]
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    let mut spliced = Vec::new();
    for (key, value) in &section {
        let flag = format!("--{}", key.replace('_', "-"));
        if flag == "--config" {
            return Err(format!(
                "config {}: a config file cannot name another config",
                path.display()
            ));
        }
        if user.iter().any(|u| *u == flag || u.starts_with(&format!("{flag}="))) {
            continue;
        }
        match value {
            Value::Boolean(true) => spliced.push(flag),
            Value::Boolean(false) => {}
            other => {
                spliced.push(flag);
                spliced.push(render(other).map_err(|e| format!("config {} key {key:?}: {e}", path.display()))?);
            }
        }
    }
    let mut out: Vec<OsString> = args[..=sub_pos].to_vec();
    out.extend(spliced.into_iter().map(OsString::from));
    out.extend(args[sub_pos + 1..].iter().cloned());
    Ok(out)
}

fn config_path(args: &[OsString]) -> Option<std::path::PathBuf> {
    let mut it = args.iter().map(|a| a.to_string_lossy());
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().map(|p| Path::new(p.as_ref()).to_path_buf());
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(Path::new(p).to_path_buf());
        }
    }
    None
}

fn render(v: &Value) -> Result<String, String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Integer(i) => Ok(i.to_string()),
        Value::Float(f) => Ok(f.to_string()),
        Value::Array(items) => Ok(items.iter().map(render).collect::<Result<Vec<_>, _>>()?.join(",")),
        Value::Boolean(b) => Ok(b.to_string()),
        _ => Err("unsupported value type".into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    fn with_config(text: &str, rest: &[&str]) -> Result<Vec<String>, String> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, text).unwrap();
        let mut args = vec!["lpfa", "rotate", "--config", path.to_str().unwrap()];
        args.extend_from_slice(rest);
        expand_args(os(&args)).map(|v| v.into_iter().map(|a| a.into_string().unwrap()).collect())
    }

    #[test]
    fn keys_become_flags_before_user_arguments() {
        let out = with_config(
            "[rotate]\nn_obs = 100\np = 0.5\ncovariance = true\nbessel = false\nthresholds = [0.1, 0.2]\n",
            &["--input", "x.csv"],
        )
        .unwrap();
        let joined = out.join(" ");
        assert!(joined.contains("--n-obs 100"), "{joined}");
        assert!(joined.contains("--p 0.5"));
        assert!(joined.contains("--covariance"));
        assert!(!joined.contains("--bessel"));
        assert!(joined.contains("--thresholds 0.1,0.2"));
        assert!(joined.ends_with("--input x.csv"));
    }

    #[test]
    fn command_line_flags_win() {
        let out = with_config("[rotate]\np = 0.5\n", &["--p=1"]).unwrap();
        assert!(!out.contains(&"0.5".to_string()));
        let out = with_config("[rotate]\np = 0.5\n", &["--p", "1"]).unwrap();
        assert_eq!(out.iter().filter(|a| *a == "--p").count(), 1);
    }

    #[test]
    fn other_sections_are_ignored_and_stray_keys_rejected() {
        let out = with_config("[fit]\nfactors = 3\n", &[]).unwrap();
        assert!(!out.contains(&"--factors".to_string()));
        assert!(with_config("factors = 3\n", &[]).is_err());
        assert!(with_config("[rotate\n", &[]).is_err());
    }

    #[test]
    fn no_config_is_a_no_op() {
        let args = os(&["lpfa", "fit", "--factors", "2"]);
        assert_eq!(expand_args(args.clone()).unwrap(), args);
    }
}
