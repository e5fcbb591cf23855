//! Example external collector. Speaks the agent's NDJSON stdio protocol and
//! reports a counter and a sine wave.

use std::collections::BTreeSet;
use std::io::{self, BufRead, Write};

use serde_json::{json, Value};

const INDICATORS: [&str; 2] = ["demo.counter", "demo.sine"];

fn main() -> io::Result<()> {
    let stdin = io::stdin();
    let mut out = io::stdout().lock();
    let mut indicators: BTreeSet<String> = INDICATORS.iter().map(|s| s.to_string()).collect();
    let mut n: u64 = 0;
    for line in stdin.lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let req: Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                writeln!(out, "{}", json!({"ok": false, "error": format!("bad request: {e}")}))?;
                out.flush()?;
                continue;
            }
        };
        let reply = match req["op"].as_str() {
            Some("hello") => json!({"ok": true, "result": {"name": "demo-collector"}}),
            Some("configure") => {
                if let Some(list) = req["config"]["indicators"].as_array() {
                    indicators = list.iter().filter_map(Value::as_str).map(str::to_string).collect();
                }
                json!({"ok": true})
            }
            Some("sample") => {
                n += 1;
                let obs: Vec<Value> = indicators
                    .iter()
                    .filter_map(|ind| match ind.as_str() {
                        "demo.counter" => Some(json!({"indicator": ind, "value": n as f64, "unit": "count"})),
                        "demo.sine" => Some(json!({"indicator": ind, "value": 50.0 + 50.0 * (n as f64 / 10.0).sin()})),
                        _ => None,
                    })
                    .collect();
                json!({"ok": true, "observations": obs})
            }
            Some("shutdown") => {
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
