//! Versioned JSON and CSV serialization of prediction reports.
//!
//! CSV is long-format with columns `section,key,value`. Sections are
//! `meta`, `total`, `phase`, `bound`, `memory` and `inference`; the file parses
//! back into a [`ReportSummary`] holding exactly those fields.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::engine::{InferenceTimes, PredictionReport};
use crate::error::{Error, Result};
use crate::kernelperf::Bound;
use crate::memory::MemoryFootprint;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionedReport<T> {
    pub schema_version: u32,
    pub report: T,
}

pub fn to_json<T: Serialize>(report: &T) -> Result<String> {
    let wrapped = VersionedReport {
        schema_version: SCHEMA_VERSION,
        report,
    };
    Ok(serde_json::to_string_pretty(&wrapped)? + "\n")
}

pub fn from_json<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    let wrapped: VersionedReport<T> = serde_json::from_str(text)?;
    if wrapped.schema_version != SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "report schema {} is not supported (expected {SCHEMA_VERSION})",
            wrapped.schema_version
        )));
    }
    Ok(wrapped.report)
}

/// The report fields carried by CSV output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub total_time: f64,
    pub phases: BTreeMap<String, f64>,
    pub bound_histogram: BTreeMap<Bound, f64>,
    pub memory: MemoryFootprint,
    pub inference: Option<InferenceTimes>,
}

impl From<&PredictionReport> for ReportSummary {
    fn from(r: &PredictionReport) -> Self {
        ReportSummary {
            total_time: r.total_time,
            phases: r.phases.clone(),
            bound_histogram: r.bound_histogram.clone(),
            memory: r.memory,
            inference: r.inference,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    section: String,
    key: String,
    value: String,
}

/// Shortest decimal that parses back to the same f64.
fn num(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_csv<W: Write>(report: &PredictionReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut row = |section: &str, key: &str, value: String| {
        w.serialize(Row {
            section: section.into(),
            key: key.into(),
            value,
        })
    };
    row("meta", "schema_version", SCHEMA_VERSION.to_string())?;
    row("total", "total_time", num(report.total_time))?;
    for (k, v) in &report.phases {
        row("phase", k, num(*v))?;
    }
    for (k, v) in &report.bound_histogram {
        row("bound", k.as_str(), num(*v))?;
    }
    for (k, v) in report.memory.components() {
        row("memory", k, v.to_string())?;
    }
    row("memory", "total", report.memory.total.to_string())?;
    if let Some(inf) = &report.inference {
        row("inference", "prefill_time", num(inf.prefill_time))?;
        row("inference", "decode_time", num(inf.decode_time))?;
        row("inference", "comm_time", num(inf.comm_time))?;
    }
    w.flush()?;
    Ok(())
}

pub fn csv_string(report: &PredictionReport) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(report, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Config(e.to_string()))
}

pub fn read_csv<R: Read>(input: R) -> Result<ReportSummary> {
    let mut r = csv::Reader::from_reader(input);
    let bad = |msg: String| Error::Config(format!("report CSV: {msg}"));
    let mut total_time = None;
    let mut phases = BTreeMap::new();
    let mut bounds = BTreeMap::new();
    let mut mem: BTreeMap<String, u64> = BTreeMap::new();
    let mut inf: BTreeMap<String, f64> = BTreeMap::new();
    let mut version = None;
    for rec in r.deserialize() {
        let row: Row = rec?;
        let f = || row.value.parse::<f64>().map_err(|e| bad(format!("{}: {e}", row.key)));
        match row.section.as_str() {
            "meta" if row.key == "schema_version" => {
                version = Some(row.value.parse::<u32>().map_err(|e| bad(e.to_string()))?)
            }
            "total" => total_time = Some(f()?),
            "phase" => {
                phases.insert(row.key.clone(), f()?);
            }
            "bound" => {
                let b = Bound::ALL
                    .into_iter()
                    .find(|b| b.as_str() == row.key)
                    .ok_or_else(|| bad(format!("unknown bound {}", row.key)))?;
                bounds.insert(b, f()?);
            }
            "memory" => {
                mem.insert(row.key.clone(), row.value.parse().map_err(|e| bad(format!("{}: {e}", row.key)))?);
            }
            "inference" => {
                inf.insert(row.key.clone(), f()?);
            }
            other => return Err(bad(format!("unknown section {other}"))),
        }
    }
    if version != Some(SCHEMA_VERSION) {
        return Err(bad(format!("schema version {version:?}, expected {SCHEMA_VERSION}")));
    }
    let m = |k: &str| mem.get(k).copied().ok_or_else(|| bad(format!("missing memory.{k}")));
    let memory = MemoryFootprint::new(m("weights")?, m("gradients")?, m("optimizer")?, m("activations")?, m("kv_cache")?);
    if memory.total != m("total")? {
        return Err(bad("memory.total disagrees with its components".into()));
    }
    let inference = if inf.is_empty() {
        None
    } else {
        let g = |k: &str| inf.get(k).copied().ok_or_else(|| bad(format!("missing inference.{k}")));
        Some(InferenceTimes {
            prefill_time: g("prefill_time")?,
            decode_time: g("decode_time")?,
            comm_time: g("comm_time")?,
        })
    };
    Ok(ReportSummary {
        total_time: total_time.ok_or_else(|| bad("missing total_time".into()))?,
        phases,
        bound_histogram: bounds,
        memory,
        inference,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> PredictionReport {
        PredictionReport {
            total_time: 0.1 + 0.2,
            phases: BTreeMap::from([("forward".into(), 0.1), ("backward".into(), 0.2)]),
            bound_histogram: BTreeMap::from([(Bound::Compute, 0.25), (Bound::Dram, 0.05)]),
            memory: MemoryFootprint::new(1, 2, 3, 4, 5),
            per_kernel: vec![],
            inference: Some(InferenceTimes {
                prefill_time: 1.0 / 3.0,
                decode_time: 2.0,
                comm_time: 0.0,
            }),
        }
    }

    #[test]
    fn csv_round_trip() {
        let r = sample();
        let text = csv_string(&r).unwrap();
        assert_eq!(read_csv(text.as_bytes()).unwrap(), ReportSummary::from(&r));
    }

    #[test]
    fn json_round_trip() {
        let r = sample();
        let back: PredictionReport = from_json(&to_json(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
