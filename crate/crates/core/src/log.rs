//! Structured event log shared by every actor of a simulation run.
//!
//! Records serialize as newline-delimited JSON `{time, actor, event, detail}`
//! with `time` in simulated milliseconds. Map keys are emitted in sorted
//! order, so equal runs produce byte-identical logs.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::SimTime;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub time: f64,
    pub actor: String,
    pub event: String,
    pub detail: Value,
}

#[derive(Debug, Default, Clone)]
pub struct EventLog {
    records: Vec<LogRecord>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, at: SimTime, actor: &str, event: &str, detail: Value) {
        self.records.push(LogRecord {
            time: at.as_millis_f64(),
            actor: actor.to_string(),
            event: event.to_string(),
            detail,
        });
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn filter<'a>(
        &'a self,
        actor: &'a str,
        event: &'a str,
    ) -> impl Iterator<Item = &'a LogRecord> + 'a {
        self.records
            .iter()
            .filter(move |r| r.actor == actor && r.event == event)
    }

    pub fn write_ndjson<W: Write>(&self, mut out: W) -> io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_ndjson(&self) -> String {
        let mut buf = Vec::new();
        self.write_ndjson(&mut buf)
            .expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }
}
