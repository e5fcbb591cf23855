//! Example external publisher. Appends every batch it receives to the file
//! named by its `path` param, one canonical NDJSON line per observation.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, Write};

use reprobe_core::model::{encode_batch, Observation};
use serde_json::{json, Value};

fn open(path: &str) -> Result<File, String> {
    OpenOptions::new().create(true).append(true).open(path).map_err(|e| format!("{path}: {e}"))
}

fn main() -> io::Result<()> {
    let stdin = io::stdin();
    let mut out = io::stdout().lock();
    let mut file: Option<File> = None;
    for line in stdin.lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let req: Value = serde_json::from_str(&line).unwrap_or(Value::Null);
        let reply = match req["op"].as_str() {
            Some("hello") => json!({"ok": true, "result": {"name": "demo-publisher"}}),
            Some("configure") => match req["config"]["params"]["path"].as_str().map(open) {
                Some(Ok(f)) => {
                    file = Some(f);
                    json!({"ok": true})
                }
                Some(Err(e)) => json!({"ok": false, "error": e}),
                None => json!({"ok": false, "error": "param \"path\" is required"}),
            },
            Some("publish") => {
                let batch: Result<Vec<Observation>, _> = serde_json::from_value(req["batch"].clone());
                match (batch, file.as_mut()) {
                    (Ok(batch), Some(f)) => match f.write_all(&encode_batch(&batch)) {
                        Ok(()) => json!({"ok": true, "accepted": batch.len()}),
                        Err(e) => json!({"ok": false, "error": e.to_string()}),
                    },
                    (Err(e), _) => json!({"ok": false, "error": format!("bad batch: {e}")}),
                    (_, None) => json!({"ok": false, "error": "not configured"}),
                }
            }
            Some("shutdown") => {
                if let Some(f) = file.take() {
                    let _ = f.sync_all();
                }
                writeln!(out, "{}", json!({"ok": true}))?;
                out.flush()?;
                return Ok(());
            }
            other => json!({"ok": false, "error": format!("unsupported op {other:?}")}),
        };
        writeln!(out, "{reply}")?;
        out.flush()?;
    }
    Ok(())
}
