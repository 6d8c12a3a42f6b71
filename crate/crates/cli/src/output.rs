//! Output files: CSV tables, `metadata.json` and a hashed `manifest.json`.

use std::fs;
use std::io;
use std::path::Path;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use urbm_core::format_float;

/// A CSV table with a header row.
#[derive(Clone, Debug, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl Table {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, values: Vec<f64>) {
        self.header.push(name.into());
        self.columns.push(values);
    }

    /// Rows are cut to the shortest column, so a run that stopped early still yields aligned rows.
    pub fn to_csv(&self) -> String {
        let rows = self.columns.iter().map(Vec::len).min().unwrap_or(0);
        let mut out = self.header.join(",");
        out.push('\n');
        for r in 0..rows {
            let row: Vec<String> = self.columns.iter().map(|c| format_float(c[r])).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Files produced by one experiment, in emission order.
#[derive(Debug, Default)]
pub struct Outputs {
    pub files: Vec<(String, String)>,
    pub results: serde_json::Map<String, Value>,
    pub path_counts: std::collections::BTreeMap<String, usize>,
    pub ite_sign: Option<f64>,
    /// Set when the run stopped on a numerical failure; outputs up to that point are still written.
    pub failure: Option<String>,
}

impl Outputs {
    pub fn file(&mut self, name: &str, content: String) {
        debug_assert!(!content.contains('\r'));
        self.files.push((name.to_string(), content));
    }

    pub fn result(&mut self, key: &str, v: impl Into<Value>) {
        self.results.insert(key.to_string(), v.into());
    }

    pub fn count_paths(&mut self, counts: &std::collections::BTreeMap<urbm_core::tvmc::SolverPath, usize>) {
        for (p, c) in counts {
            *self.path_counts.entry(p.as_str().to_string()).or_default() += c;
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes every file plus `metadata.json`, then `manifest.json` listing all of them with hashes.
pub fn write_outputs(dir: &Path, outputs: &Outputs, metadata: &Value) -> io::Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    let mut meta = serde_json::to_string_pretty(metadata).map_err(io::Error::other)?;
    meta.push('\n');
    let mut entries = Vec::new();
    let mut names = Vec::new();
    for (name, content) in outputs.files.iter().map(|(n, c)| (n.as_str(), c)).chain([("metadata.json", &meta)]) {
        fs::write(dir.join(name), content.as_bytes())?;
        entries.push(json!({"file": name, "sha256": sha256_hex(content.as_bytes()), "bytes": content.len()}));
        names.push(name.to_string());
    }
    let mut manifest = serde_json::to_string_pretty(&json!({ "files": entries })).map_err(io::Error::other)?;
    manifest.push('\n');
    fs::write(dir.join("manifest.json"), manifest)?;
    Ok(names)
}
