//! Per-token telemetry: records, JSONL sinks, summaries and UTS filtering.
//!
//! Floats are written with the shortest representation that parses back to
//! the same `f64`, so a JSONL round trip is lossless.

use std::collections::BTreeMap;
use std::io::{self, BufRead, BufWriter, Write};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::steering::TokenDecision;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub step: u64,
    pub token_id: u32,
    pub entropy_nats: f64,
    pub s_e: f64,
    pub s_d: f64,
    pub beta_t: f64,
    pub uts: f64,
    pub tau_t: f64,
    pub d_layers: BTreeMap<u32, f64>,
    pub steered: bool,
    pub penalty: f64,
    pub temperature: f64,
    pub stream_id: u64,
    #[serde(default)]
    pub argmax_index: u64,
}

impl TelemetryRecord {
    pub fn from_decision(
        step: u64,
        token_id: u32,
        decision: &TokenDecision,
        temperature: f64,
        stream_id: u64,
    ) -> Self {
        let s = &decision.scores;
        Self {
            step,
            token_id,
            entropy_nats: s.entropy_nats,
            s_e: s.s_e,
            s_d: s.s_d,
            beta_t: s.beta_t,
            uts: s.uts,
            tau_t: decision.tau_t,
            d_layers: s.per_layer_distance.clone(),
            steered: decision.steered,
            penalty: decision.penalty_applied,
            temperature,
            stream_id,
            argmax_index: decision.argmax_index as u64,
        }
    }
}

pub trait TelemetrySink {
    fn emit(&mut self, record: &TelemetryRecord) -> io::Result<()>;
    fn flush(&mut self) -> io::Result<()>;
}

/// One JSON object per line, buffered.
pub struct JsonlSink<W: Write> {
    out: BufWriter<W>,
}

impl<W: Write> JsonlSink<W> {
    pub fn new(inner: W) -> Self {
        Self {
            out: BufWriter::new(inner),
        }
    }

    pub fn into_inner(self) -> io::Result<W> {
        self.out.into_inner().map_err(|e| e.into_error())
    }
}

impl<W: Write> TelemetrySink for JsonlSink<W> {
    fn emit(&mut self, record: &TelemetryRecord) -> io::Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")
    }

    fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }
}

/// Collects records in memory.
#[derive(Debug, Default)]
pub struct MemorySink {
    pub records: Vec<TelemetryRecord>,
}

impl TelemetrySink for MemorySink {
    fn emit(&mut self, record: &TelemetryRecord) -> io::Result<()> {
        self.records.push(record.clone());
        Ok(())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// Serializes whole lines from many streams into one writer. Clone a handle
/// per stream; each line is written under the lock so lines never interleave.
pub struct SharedSink<W: Write + Send> {
    inner: Arc<Mutex<W>>,
    line: Vec<u8>,
}

impl<W: Write + Send> SharedSink<W> {
    pub fn new(inner: W) -> Self {
        Self {
            inner: Arc::new(Mutex::new(inner)),
            line: Vec::new(),
        }
    }

    pub fn handle(&self) -> Self {
        Self {
            inner: Arc::clone(&self.inner),
            line: Vec::new(),
        }
    }
}

impl<W: Write + Send> TelemetrySink for SharedSink<W> {
    fn emit(&mut self, record: &TelemetryRecord) -> io::Result<()> {
        self.line.clear();
        serde_json::to_writer(&mut self.line, record)?;
        self.line.push(b'\n');
        let mut w = self.inner.lock().map_err(|_| io::Error::other("poisoned sink"))?;
        w.write_all(&self.line)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner
            .lock()
            .map_err(|_| io::Error::other("poisoned sink"))?
            .flush()
    }
}

/// Result of parsing a JSONL file: good records plus the line numbers
/// (1-based) that failed.
#[derive(Debug, Default)]
pub struct ParsedTelemetry {
    pub records: Vec<TelemetryRecord>,
    pub bad_lines: Vec<usize>,
}

pub fn read_jsonl<R: BufRead>(reader: R) -> io::Result<ParsedTelemetry> {
    let mut parsed = ParsedTelemetry::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(r) => parsed.records.push(r),
            Err(_) => parsed.bad_lines.push(i + 1),
        }
    }
    Ok(parsed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub token_count: u64,
    pub mean_uts: f64,
    pub mean_entropy: f64,
    pub steering_rate: f64,
    pub min_uts: f64,
    pub steered_count: u64,
}

pub fn aggregate(records: &[TelemetryRecord]) -> Result<SummaryStats> {
    if records.is_empty() {
        return Err(Error::Empty("telemetry records"));
    }
    let n = records.len() as f64;
    let steered_count = records.iter().filter(|r| r.steered).count() as u64;
    Ok(SummaryStats {
        token_count: records.len() as u64,
        mean_uts: running_mean(records.iter().map(|r| r.uts)),
        mean_entropy: running_mean(records.iter().map(|r| r.entropy_nats)),
        steering_rate: steered_count as f64 / n,
        min_uts: records.iter().map(|r| r.uts).fold(f64::INFINITY, f64::min),
        steered_count,
    })
}

/// Incremental mean; exact when every value is equal.
fn running_mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut mean = 0.0;
    for (k, v) in values.enumerate() {
        mean += (v - mean) / (k + 1) as f64;
    }
    mean
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlaggedTrace {
    pub id: String,
    pub mean_uts: f64,
}

/// Traces whose mean UTS is below `threshold`, lowest first. Traces without
/// records are skipped.
pub fn filter_by_uts<'a, I>(traces: I, threshold: f64) -> Vec<FlaggedTrace>
where
    I: IntoIterator<Item = (&'a str, &'a [TelemetryRecord])>,
{
    let mut flagged: Vec<FlaggedTrace> = traces
        .into_iter()
        .filter_map(|(id, recs)| {
            let stats = aggregate(recs).ok()?;
            (stats.mean_uts < threshold).then(|| FlaggedTrace {
                id: id.to_owned(),
                mean_uts: stats.mean_uts,
            })
        })
        .collect();
    flagged.sort_by(|a, b| a.mean_uts.total_cmp(&b.mean_uts).then_with(|| a.id.cmp(&b.id)));
    flagged
}
