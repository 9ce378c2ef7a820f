//! Line-oriented mutation journal.
//!
//! Each line is `<sim_time> <repo> <op> <key> <value>`, where `value` is the
//! record as canonical JSON: object keys sorted, no insignificant
//! whitespace, floats printed with 12 significant digits. The journal is
//! replayable into a [`Store`](super::Store).

use std::fmt::Write as _;

use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use super::SimTime;

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("journal line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("journal line {line}: bad value: {source}")]
    Value {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct JournalEntry {
    pub time: SimTime,
    pub repo: String,
    pub op: String,
    pub key: String,
    pub value: String,
}

impl JournalEntry {
    pub fn render(&self) -> String {
        format!(
            "{} {} {} {} {}",
            format_float(self.time),
            self.repo,
            self.op,
            self.key,
            self.value
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Journal {
    entries: Vec<JournalEntry>,
}

impl Journal {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn record_put<V: Serialize>(
        &mut self,
        time: SimTime,
        repo: String,
        key: String,
        value: &V,
    ) {
        let value = serde_json::to_value(value).expect("repository values serialise to JSON");
        self.entries.push(JournalEntry {
            time,
            repo,
            op: "put".to_string(),
            key,
            value: canonical_text(&value),
        });
    }

    pub fn entries(&self) -> &[JournalEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&e.render());
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Vec<JournalEntry>, JournalError> {
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.splitn(5, ' ');
            let mut next = |what: &str| {
                parts.next().ok_or_else(|| JournalError::Malformed {
                    line: line_no,
                    reason: format!("missing {what}"),
                })
            };
            let time = next("time")?;
            let repo = next("repo")?.to_string();
            let op = next("op")?.to_string();
            let key = next("key")?.to_string();
            let value = next("value")?.to_string();
            let time = time.parse::<f64>().map_err(|e| JournalError::Malformed {
                line: line_no,
                reason: format!("bad time `{time}`: {e}"),
            })?;
            if op != "put" {
                return Err(JournalError::Malformed {
                    line: line_no,
                    reason: format!("unknown op `{op}`"),
                });
            }
            serde_json::from_str::<Value>(&value).map_err(|source| JournalError::Value {
                line: line_no,
                source,
            })?;
            out.push(JournalEntry {
                time,
                repo,
                op,
                key,
                value,
            });
        }
        Ok(out)
    }
}

/// Formats a float with at most 12 significant digits, dropping trailing
/// zeros (`%.12g` style). Output is always a valid JSON number.
pub fn format_float(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        // Not representable in JSON; only reachable through a bug upstream.
        return "null".to_string();
    }
    let sci = format!("{:.11e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..12).contains(&exp) {
        let decimals = (11 - exp).max(0) as usize;
        let fixed = format!("{:.*}", decimals, x);
        trim_zeros(&fixed).to_string()
    } else {
        format!("{}e{}", trim_zeros(mantissa), exp)
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Canonical JSON text for a value.
pub fn canonical_text(value: &Value) -> String {
    let mut out = String::new();
    write_canonical(value, &mut out);
    out
}

fn write_canonical(value: &Value, out: &mut String) {
    match value {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => {
            let _ = write!(out, "{b}");
        }
        Value::Number(n) => {
            if n.is_f64() {
                out.push_str(&format_float(n.as_f64().unwrap_or(f64::NAN)));
            } else {
                let _ = write!(out, "{n}");
            }
        }
        Value::String(s) => out.push_str(&serde_json::to_string(s).expect("string encodes")),
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        Value::Object(map) => {
            // serde_json's default map is ordered by key.
            out.push('{');
            for (i, (k, v)) in map.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).expect("key encodes"));
                out.push(':');
                write_canonical(v, out);
            }
            out.push('}');
        }
    }
}
