//! Table, CSV and JSON rendering for every subcommand.

use std::fmt::Write as _;

use anyhow::Result;
use serde::Serialize;

use llmperf::config::OutputFormat;
use llmperf::dse::{SearchResult, SweepCell};
use llmperf::engine::{bound_breakdown, BreakdownScope, PredictionReport};
use llmperf::memory::MemoryFootprint;
use llmperf::parallelism::RecomputeMode;
use llmperf::report::{csv_string, to_json};
use llmperf::validate::FixtureOutcome;

#[derive(Debug, Serialize)]
pub struct MemRow {
    pub recompute: RecomputeMode,
    pub selected: bool,
    pub footprint: MemoryFootprint,
    pub capacity: u64,
    pub fits: bool,
    pub headroom: i64,
}

fn gb(bytes: u64) -> f64 {
    bytes as f64 / 1e9
}

fn csv_rows<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn footprint_json(f: &MemoryFootprint) -> String {
    serde_json::to_string(f).unwrap_or_default()
}

pub fn prediction(report: &PredictionReport, format: OutputFormat) -> Result<String> {
    match format {
        OutputFormat::Json => Ok(to_json(report)?),
        OutputFormat::Csv => Ok(csv_string(report)?),
        OutputFormat::Table => {
            let mut s = String::new();
            writeln!(s, "total time: {:.4} s", report.total_time)?;
            writeln!(s, "\n{:<16} {:>12} {:>8}", "phase", "seconds", "share")?;
            for (k, v) in &report.phases {
                let share = if report.total_time > 0.0 { v / report.total_time } else { 0.0 };
                writeln!(s, "{k:<16} {v:>12.6} {:>7.1}%", share * 100.0)?;
            }
            writeln!(s, "\n{:<16} {:>12}", "bound", "seconds")?;
            for (k, v) in &report.bound_histogram {
                writeln!(s, "{:<16} {v:>12.6}", k.as_str())?;
            }
            let rows = bound_breakdown(report, BreakdownScope::PerPhase);
            if !rows.is_empty() {
                writeln!(s, "\nlayer GEMM time by bound")?;
                for row in rows {
                    let parts: Vec<String> = row
                        .fractions
                        .iter()
                        .map(|(b, f)| format!("{} {:.1}%", b.as_str(), f * 100.0))
                        .collect();
                    writeln!(s, "  {:<10} {}", row.label, parts.join(", "))?;
                }
            }
            writeln!(s, "\nmemory per device: {:.2} GB", gb(report.memory.total))?;
            for (k, v) in report.memory.components() {
                writeln!(s, "  {k:<12} {:>10.2} GB", gb(v))?;
            }
            Ok(s)
        }
    }
}

pub fn memory(rows: &[MemRow], format: OutputFormat) -> Result<String> {
    #[derive(Serialize)]
    struct Flat {
        recompute: RecomputeMode,
        selected: bool,
        weights: u64,
        gradients: u64,
        optimizer: u64,
        activations: u64,
        kv_cache: u64,
        total: u64,
        capacity: u64,
        fits: bool,
        headroom: i64,
    }
    match format {
        OutputFormat::Json => Ok(to_json(&rows)?),
        OutputFormat::Csv => csv_rows(rows.iter().map(|r| Flat {
            recompute: r.recompute,
            selected: r.selected,
            weights: r.footprint.weights,
            gradients: r.footprint.gradients,
            optimizer: r.footprint.optimizer,
            activations: r.footprint.activations,
            kv_cache: r.footprint.kv_cache,
            total: r.footprint.total,
            capacity: r.capacity,
            fits: r.fits,
            headroom: r.headroom,
        })),
        OutputFormat::Table => {
            let mut s = String::new();
            writeln!(
                s,
                "{:<12} {:>9} {:>9} {:>9} {:>11} {:>9} {:>5}",
                "recompute", "weights", "grads", "optim", "activations", "total", "fits"
            )?;
            for r in rows {
                let mark = if r.selected { "*" } else { " " };
                let f = &r.footprint;
                writeln!(
                    s,
                    "{:<11}{mark} {:>9.2} {:>9.2} {:>9.2} {:>11.2} {:>9.2} {:>5}",
                    format!("{:?}", r.recompute).to_lowercase(),
                    gb(f.weights),
                    gb(f.gradients),
                    gb(f.optimizer),
                    gb(f.activations),
                    gb(f.total),
                    if r.fits { "yes" } else { "no" }
                )?;
            }
            if let Some(r) = rows.first() {
                writeln!(s, "GB per device; capacity {:.2} GB; * = configured mode", gb(r.capacity))?;
            }
            Ok(s)
        }
    }
}

pub fn sweep(cells: &[SweepCell], format: OutputFormat) -> Result<String> {
    #[derive(Serialize)]
    struct Flat<'a> {
        node: String,
        dram: &'a str,
        network: &'a str,
        total_time: Option<f64>,
        error: Option<&'a str>,
    }
    let flat = || {
        cells.iter().map(|c| Flat {
            node: c.node.to_string(),
            dram: &c.dram,
            network: &c.network,
            total_time: c.time(),
            error: c.error.as_deref(),
        })
    };
    match format {
        OutputFormat::Json => Ok(to_json(&cells)?),
        OutputFormat::Csv => csv_rows(flat()),
        OutputFormat::Table => {
            let mut s = String::new();
            writeln!(s, "{:<6} {:<12} {:<10} {:>12}", "node", "dram", "network", "time (s)")?;
            for f in flat() {
                let t = f.total_time.map_or_else(|| format!("error: {}", f.error.unwrap_or("?")), |t| format!("{t:>12.6}"));
                writeln!(s, "{:<6} {:<12} {:<10} {t}", f.node, f.dram, f.network)?;
            }
            Ok(s)
        }
    }
}

pub fn search(result: &SearchResult, format: OutputFormat) -> Result<String> {
    #[derive(Serialize)]
    struct TraceRow {
        step: usize,
        time: f64,
        area_compute: f64,
        area_l2: f64,
        area_dram: f64,
        area_network: f64,
        power_compute: f64,
        power_l2: f64,
        power_dram: f64,
        power_network: f64,
    }
    use llmperf::arch::Component::*;
    match format {
        OutputFormat::Json => Ok(to_json(result)?),
        OutputFormat::Csv => csv_rows(result.trace.iter().enumerate().map(|(i, e)| TraceRow {
            step: i,
            time: e.time,
            area_compute: e.point.area(Compute),
            area_l2: e.point.area(L2Cache),
            area_dram: e.point.area(DramInterface),
            area_network: e.point.area(NetworkInterface),
            power_compute: e.point.power(Compute),
            power_l2: e.point.power(L2Cache),
            power_dram: e.point.power(DramInterface),
            power_network: e.point.power(NetworkInterface),
        })),
        OutputFormat::Table => {
            let mut s = String::new();
            writeln!(s, "best time: {:.6} s at {}", result.time, result.best.node)?;
            writeln!(s, "{:<18} {:>8} {:>8}", "component", "area", "power")?;
            for c in llmperf::arch::Component::ALL {
                writeln!(s, "{:<18} {:>8.4} {:>8.4}", c.as_str(), result.best.area(c), result.best.power(c))?;
            }
            writeln!(s, "{} trace entries", result.trace.len())?;
            Ok(s)
        }
    }
}

pub fn validation(outcomes: &[FixtureOutcome], format: OutputFormat) -> Result<String> {
    match format {
        OutputFormat::Json => Ok(to_json(&outcomes)?),
        OutputFormat::Csv => csv_rows(outcomes),
        OutputFormat::Table => {
            let mut s = String::new();
            writeln!(
                s,
                "{:<30} {:>10} {:>10} {:>8} {:>6}",
                "fixture", "expected", "predicted", "dE (%)", "pass"
            )?;
            for o in outcomes {
                let pred = o.predicted_time.map_or("-".to_string(), |t| format!("{t:.3}"));
                let err = o.relative_error.map_or("-".to_string(), |e| format!("{:+.1}", e * 100.0));
                writeln!(
                    s,
                    "{:<30} {:>10.3} {:>10} {:>8} {:>6}",
                    o.id,
                    o.expected_time,
                    pred,
                    err,
                    if o.pass { "ok" } else { "FAIL" }
                )?;
                if let Some(e) = &o.error {
                    writeln!(s, "    {e}")?;
                }
            }
            let passed = outcomes.iter().filter(|o| o.pass).count();
            writeln!(s, "{passed}/{} within tolerance", outcomes.len())?;
            Ok(s)
        }
    }
}
