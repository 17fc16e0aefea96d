use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Value};

/// Writes `run_meta.json`: the full command line, the resolved configs and
/// seeds, and the tool version.
pub fn write_run_meta(dir: &Path, command: &impl Serialize, extra: Value) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut meta = json!({
        "tool": "dcbv",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
    });
    if let (Value::Object(m), Value::Object(e)) = (&mut meta, extra) {
        m.extend(e);
    }
    let path = dir.join("run_meta.json");
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    fs::write(&path, text)
        .map_err(|e| dcbv::Error::io(&path, e))
        .with_context(|| "writing run metadata")
}
