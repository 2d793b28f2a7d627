use std::time::Instant;

use clap::ValueEnum;
use serde_json::{json, Map, Value};

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogFormat {
    Text,
    Json,
}

/// Progress lines on stderr, either human-readable or one JSON object per line.
pub struct Logger {
    format: LogFormat,
    start: Instant,
}

impl Logger {
    pub fn new(format: LogFormat) -> Self {
        Self {
            format,
            start: Instant::now(),
        }
    }

    fn wallclock(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    /// `fields` must be a JSON object; it is flattened into the line.
    pub fn event(&self, kind: &str, fields: Value) {
        let wallclock = self.wallclock();
        match self.format {
            LogFormat::Json => {
                let mut obj = Map::new();
                obj.insert("event".into(), json!(kind));
                obj.insert("wallclock".into(), json!(wallclock));
                if let Value::Object(m) = fields {
                    obj.extend(m);
                }
                eprintln!("{}", Value::Object(obj));
            }
            LogFormat::Text => {
                let body = match fields {
                    Value::Object(m) => m
                        .iter()
                        .map(|(k, v)| match v {
                            Value::String(s) => format!("{k}={s}"),
                            other => format!("{k}={other}"),
                        })
                        .collect::<Vec<_>>()
                        .join(" "),
                    other => other.to_string(),
                };
                eprintln!("[{wallclock:8.2}s] {kind} {body}");
            }
        }
    }

    /// Every command records its fully resolved settings first.
    pub fn config(&self, command: &str, resolved: Value) {
        self.event("config", json!({ "command": command, "config": resolved }));
    }

    pub fn step(&self, step: usize, epoch: usize, loss: f64, lr: f64) {
        self.event("step", json!({ "step": step, "epoch": epoch, "loss": loss, "lr": lr }));
    }
}
