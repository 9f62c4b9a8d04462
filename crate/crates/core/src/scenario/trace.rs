//! CSV event traces: `seq,time_us,kind,payload`, payload as JSON.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::metrics::{Collector, MetricEvent, Report};
use crate::sim::SimTime;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("record {seq}: {source}")]
    Payload {
        seq: u64,
        #[source]
        source: serde_json::Error,
    },
    #[error("record {seq}: expected sequence number {expected}")]
    OutOfOrder { seq: u64, expected: u64 },
    #[error("trace does not start with a scenario-start record")]
    MissingStart,
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    seq: u64,
    time_us: u64,
    kind: String,
    payload: String,
}

#[derive(Serialize, Deserialize)]
struct Tagged<'a> {
    kind: &'a str,
    data: serde_json::Value,
}

pub fn write_trace<W: Write>(events: &[(SimTime, MetricEvent)], out: W) -> Result<(), TraceError> {
    let mut w = csv::Writer::from_writer(out);
    for (seq, (t, ev)) in events.iter().enumerate() {
        let v = serde_json::to_value(ev).map_err(|source| TraceError::Payload {
            seq: seq as u64,
            source,
        })?;
        let data = v.get("data").cloned().unwrap_or(serde_json::Value::Null);
        w.serialize(Row {
            seq: seq as u64,
            time_us: t.as_us(),
            kind: ev.kind().to_owned(),
            payload: data.to_string(),
        })?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_trace<R: Read>(input: R) -> Result<Vec<(SimTime, MetricEvent)>, TraceError> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for row in r.deserialize() {
        let row: Row = row?;
        let expected = out.len() as u64;
        if row.seq != expected {
            return Err(TraceError::OutOfOrder {
                seq: row.seq,
                expected,
            });
        }
        let data: serde_json::Value =
            serde_json::from_str(&row.payload).map_err(|source| TraceError::Payload {
                seq: row.seq,
                source,
            })?;
        let tagged = serde_json::to_value(Tagged {
            kind: &row.kind,
            data,
        })
        .expect("plain json");
        let ev: MetricEvent =
            serde_json::from_value(tagged).map_err(|source| TraceError::Payload {
                seq: row.seq,
                source,
            })?;
        out.push((SimTime(row.time_us), ev));
    }
    if !matches!(out.first(), Some((_, MetricEvent::ScenarioStart { .. }))) {
        return Err(TraceError::MissingStart);
    }
    Ok(out)
}

/// Re-derives the report from a recorded event stream.
pub fn replay(events: &[(SimTime, MetricEvent)]) -> Report {
    let mut c = Collector::new();
    for (_, ev) in events {
        c.observe(ev);
    }
    c.finish()
}
