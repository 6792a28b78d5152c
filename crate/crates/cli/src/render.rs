//! Report rendering and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use optstop::report::num;

/// Flattens a JSON value into `key = value` lines; numbers get 17 significant digits.
pub fn text(value: &Value) -> String {
    let mut out = String::new();
    flatten(value, "", &mut out);
    out
}

fn flatten(value: &Value, prefix: &str, out: &mut String) {
    let key = |k: &str| {
        if prefix.is_empty() {
            k.to_string()
        } else {
            format!("{prefix}.{k}")
        }
    };
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                flatten(v, &key(k), out);
            }
        }
        Value::Array(items) => {
            for (i, v) in items.iter().enumerate() {
                flatten(v, &key(&i.to_string()), out);
            }
        }
        Value::Number(n) => {
            let s = match (n.as_i64(), n.as_f64()) {
                (Some(i), _) => i.to_string(),
                (None, Some(f)) => num(f),
                _ => n.to_string(),
            };
            out.push_str(&format!("{prefix} = {s}\n"));
        }
        Value::Null => out.push_str(&format!("{prefix} = none\n")),
        Value::Bool(b) => out.push_str(&format!("{prefix} = {b}\n")),
        Value::String(s) => out.push_str(&format!("{prefix} = {s}\n")),
    }
}

pub fn render(value: &Value, json: bool) -> String {
    if json {
        let mut s = serde_json::to_string_pretty(value).expect("report serializes");
        s.push('\n');
        s
    } else {
        text(value)
    }
}

pub fn to_value(v: &impl Serialize) -> Value {
    serde_json::to_value(v).expect("report serializes")
}

#[derive(Serialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: &'static str,
    pub problem_digest: Option<String>,
    pub parameters: Value,
    pub outputs: Vec<String>,
}

pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Collects output files written under one directory.
pub struct Outputs {
    dir: Option<PathBuf>,
    pub written: Vec<String>,
}

impl Outputs {
    pub fn new(dir: Option<PathBuf>) -> std::io::Result<Self> {
        if let Some(d) = &dir {
            fs::create_dir_all(d)?;
        }
        Ok(Outputs { dir, written: Vec::new() })
    }

    /// Writes `name` when an output directory was given.
    pub fn write(&mut self, name: &str, fill: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> std::io::Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let mut buf = Vec::new();
        fill(&mut buf)?;
        fs::write(dir.join(name), buf)?;
        self.written.push(name.to_string());
        Ok(())
    }

    pub fn finish(mut self, manifest: Manifest) -> std::io::Result<()> {
        let Some(dir) = self.dir.take() else { return Ok(()) };
        let mut m = manifest;
        m.outputs = self.written.clone();
        m.outputs.push("manifest.json".into());
        let mut s = serde_json::to_string_pretty(&m).expect("manifest serializes");
        s.push('\n');
        fs::write(Path::new(&dir).join("manifest.json"), s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn flat_text() {
        let v = json!({"a": {"b": 0.5, "c": [1, true]}, "d": null});
        assert_eq!(
            text(&v),
            "a.b = 5.0000000000000000e-1\na.c.0 = 1\na.c.1 = true\nd = none\n"
        );
    }
}
