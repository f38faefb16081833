//! Flat `key = value` configuration files with `[section]` headers.
//!
//! ```text
//! # comment
//! corpus = "data"
//! [train]
//! steps = 200
//! weights.delta = 0.5
//! ```
//!
//! Values are JSON literals; anything that does not parse as JSON is taken
//! as a bare string. Keys must already exist in the defaults.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

/// `(dotted key, raw value, line number)` triples in file order.
pub fn parse_flat(text: &str) -> Result<Vec<(String, String, usize)>, CliError> {
    let mut section = String::new();
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| CliError::Usage(format!("line {}: unterminated section header", n + 1)))?;
            section = name.trim().to_string();
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("line {}: expected `key = value`", n + 1)))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(CliError::Usage(format!("line {}: empty key", n + 1)));
        }
        let full = if section.is_empty() { key.to_string() } else { format!("{section}.{key}") };
        out.push((full, value.trim().to_string(), n + 1));
    }
    Ok(out)
}

/// Split `key=value` as given to `--set`.
pub fn parse_override(arg: &str) -> Result<(String, String), CliError> {
    let (k, v) = arg
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{arg}` is not of the form key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn parse_value(raw: &str, current: &Value) -> Value {
    if current.is_string() && !raw.starts_with('"') {
        return Value::String(raw.to_string());
    }
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Set an existing dotted key. Unknown keys are usage errors naming the key.
pub fn apply(root: &mut Value, key: &str, raw: &str) -> Result<(), CliError> {
    let mut node = root;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| CliError::Usage(format!("unknown config key `{key}`")))?;
    }
    if node.is_object() {
        return Err(CliError::Usage(format!("config key `{key}` is a section, not a value")));
    }
    *node = parse_value(raw, node);
    Ok(())
}

/// Set every key named `seed`, at any depth.
pub fn set_seeds(root: &mut Value, seed: u64) {
    if let Some(map) = root.as_object_mut() {
        for (k, v) in map.iter_mut() {
            if k == "seed" && !v.is_object() {
                *v = Value::from(seed);
            } else {
                set_seeds(v, seed);
            }
        }
    }
}

/// Defaults, then the config file, then `--seed`, then `--set` overrides.
pub fn resolve<T: Serialize + DeserializeOwned>(
    defaults: &T,
    file: Option<&str>,
    seed: Option<u64>,
    overrides: &[String],
) -> Result<T, CliError> {
    let mut value = serde_json::to_value(defaults).map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(text) = file {
        for (key, raw, line) in parse_flat(text)? {
            apply(&mut value, &key, &raw).map_err(|e| CliError::Usage(format!("config line {line}: {e}")))?;
        }
    }
    if let Some(s) = seed {
        set_seeds(&mut value, s);
    }
    for arg in overrides {
        let (key, raw) = parse_override(arg)?;
        apply(&mut value, &key, &raw)?;
    }
    serde_json::from_value(value).map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))
}

fn write_section(out: &mut String, prefix: &str, map: &Map<String, Value>) {
    for (k, v) in map {
        if !v.is_object() {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            out.push_str(&format!("{key} = {v}\n"));
        }
    }
    for (k, v) in map {
        if let Value::Object(inner) = v {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            write_section(out, &key, inner);
        }
    }
}

/// Render a resolved config in the same format [`parse_flat`] reads.
/// Nested objects become dotted keys under their top-level `[section]`.
pub fn render_flat<T: Serialize>(config: &T, header: &str) -> String {
    let value = serde_json::to_value(config).expect("config serializes");
    let mut out = String::new();
    for line in header.lines() {
        out.push_str(&format!("# {line}\n"));
    }
    let Value::Object(map) = value else {
        out.push_str(&format!("value = {value}\n"));
        return out;
    };
    let mut top = Map::new();
    for (k, v) in &map {
        if !v.is_object() {
            top.insert(k.clone(), v.clone());
        }
    }
    write_section(&mut out, "", &top);
    for (k, v) in &map {
        if let Value::Object(inner) = v {
            out.push_str(&format!("\n[{k}]\n"));
            write_section(&mut out, "", inner);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    struct Inner {
        rate: f64,
        deep: Deep,
    }
    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    struct Deep {
        seed: u64,
        lambda: Option<f64>,
    }
    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    struct Top {
        path: String,
        seed: u64,
        inner: Inner,
    }

    fn defaults() -> Top {
        Top { path: "data".into(), seed: 1, inner: Inner { rate: 0.5, deep: Deep { seed: 2, lambda: None } } }
    }

    #[test]
    fn file_then_overrides() {
        let file = "path = out\n[inner]\nrate = 0.25\ndeep.lambda = 0.3\n";
        let t = resolve(&defaults(), Some(file), None, &["inner.rate=2".into()]).unwrap();
        assert_eq!(t.path, "out");
        assert_eq!(t.inner.rate, 2.0);
        assert_eq!(t.inner.deep.lambda, Some(0.3));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = resolve(&defaults(), None, None, &["inner.nope=1".into()]).unwrap_err();
        assert!(err.to_string().contains("inner.nope"));
    }

    #[test]
    fn seed_reaches_every_level() {
        let t = resolve(&defaults(), None, Some(9), &[]).unwrap();
        assert_eq!((t.seed, t.inner.deep.seed), (9, 9));
    }

    #[test]
    fn rendered_config_reads_back() {
        let mut d = defaults();
        d.inner.deep.lambda = Some(0.125);
        d.path = "a path".into();
        let text = render_flat(&d, "snapshot");
        let back: Top = resolve(&defaults(), Some(&text), None, &[]).unwrap();
        assert_eq!(back, d);
    }
}
