//! Design-space exploration: split a die's area and power between compute,
//! L2, DRAM interface and network interface so a workload runs fastest.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arch::{
    derive_from_budget, Calibration, ClusterSpec, Component, DesignPoint, DeviceSpec, DramPreset, Fractions,
    NetworkLink, NodeScaling, TechNode,
};
use crate::engine::{predict_inference, predict_training_step, PredictionReport};
use crate::error::{Error, Result};
use crate::kernelperf::UtilizationPolicy;
use crate::parallelism::ParallelismConfig;
use crate::workload::{InferenceConfig, ModelConfig};

fn d_step() -> f64 {
    0.1
}
fn d_iters() -> u32 {
    200
}
fn d_restarts() -> u32 {
    8
}
fn d_tol() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    /// Initial perturbation of a fraction.
    #[serde(default = "d_step")]
    pub step_size: f64,
    #[serde(default = "d_iters")]
    pub max_iters: u32,
    #[serde(default = "d_restarts")]
    pub restarts: u32,
    /// Relative improvement below which a descent run stops.
    #[serde(default = "d_tol")]
    pub tolerance: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            step_size: d_step(),
            max_iters: d_iters(),
            restarts: d_restarts(),
            tolerance: d_tol(),
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size < 0.5) {
            return Err(Error::Config(format!("step_size must be in (0, 0.5), got {}", self.step_size)));
        }
        if self.max_iters == 0 || self.restarts == 0 {
            return Err(Error::Config("max_iters and restarts must be at least 1".into()));
        }
        if !(self.tolerance >= 0.0 && self.tolerance.is_finite()) {
            return Err(Error::Config("tolerance must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    if v.is_empty() {
        return Vec::new();
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (i, u) in sorted.iter().enumerate() {
        cumulative += u;
        let t = (cumulative - 1.0) / (i + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        }
    }
    let mut out: Vec<f64> = v.iter().map(|x| (x - theta).max(0.0)).collect();
    // Remove rounding drift so the sum is 1 to machine precision.
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= sum);
    out
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

/// Low-discrepancy points on a product of simplices of the given sizes,
/// mapped from a Halton sequence by sorted spacings. The seed offsets the
/// sequence index.
pub fn halton_simplex_points(dims: &[usize], count: usize, seed: u64) -> Vec<Vec<Vec<f64>>> {
    let total: usize = dims.iter().map(|d| d.saturating_sub(1)).sum();
    assert!(total <= PRIMES.len(), "too many free coordinates for the Halton table");
    (0..count)
        .map(|j| {
            let index = seed.wrapping_mul(7919).wrapping_add(j as u64 + 1);
            let mut coord = 0;
            dims.iter()
                .map(|&d| {
                    let mut cuts: Vec<f64> = (0..d.saturating_sub(1))
                        .map(|_| {
                            let u = radical_inverse(index, PRIMES[coord]);
                            coord += 1;
                            u
                        })
                        .collect();
                    cuts.sort_by(f64::total_cmp);
                    let mut prev = 0.0;
                    let mut block: Vec<f64> = cuts
                        .iter()
                        .map(|c| {
                            let w = c - prev;
                            prev = *c;
                            w
                        })
                        .collect();
                    block.push(1.0 - prev);
                    block
                })
                .collect()
        })
        .collect()
}

/// A point on a product of simplices.
pub type Blocks = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplexOutcome {
    pub best: Blocks,
    pub value: f64,
    /// Accepted iterates of every descent run, in order.
    pub trace: Vec<(Blocks, f64)>,
}

fn eval<F>(objective: &F, x: &Blocks) -> f64
where
    F: Fn(&Blocks) -> Option<f64>,
{
    match objective(x) {
        Some(v) if v.is_finite() => v,
        _ => f64::INFINITY,
    }
}

/// Move coordinate `i` of block `b` by `h` along e_i − 1/n, then project.
fn nudge(x: &Blocks, b: usize, i: usize, h: f64) -> Blocks {
    let mut y = x.clone();
    let n = y[b].len() as f64;
    for (j, v) in y[b].iter_mut().enumerate() {
        *v += if j == i { h * (1.0 - 1.0 / n) } else { -h / n };
    }
    y[b] = project_simplex(&y[b]);
    y
}

fn descend<F>(start: Blocks, objective: &F, cfg: &SearchConfig, trace: &mut Vec<(Blocks, f64)>) -> (Blocks, f64)
where
    F: Fn(&Blocks) -> Option<f64> + Sync,
{
    let mut x: Blocks = start.iter().map(|b| project_simplex(b)).collect();
    let mut fx = eval(objective, &x);
    trace.push((x.clone(), fx));
    let mut step = cfg.step_size;
    let coords: Vec<(usize, usize)> = x
        .iter()
        .enumerate()
        .flat_map(|(b, block)| (0..block.len()).map(move |i| (b, i)))
        .collect();

    for _ in 0..cfg.max_iters {
        if step < 1e-12 {
            break;
        }
        let h = step;
        let slopes: Vec<f64> = coords
            .par_iter()
            .map(|&(b, i)| {
                let up = eval(objective, &nudge(&x, b, i, h));
                let down = eval(objective, &nudge(&x, b, i, -h));
                match (up.is_finite(), down.is_finite()) {
                    (true, true) => (up - down) / (2.0 * h),
                    (true, false) if fx.is_finite() => (up - fx) / h,
                    (false, true) if fx.is_finite() => (fx - down) / h,
                    (false, false) if fx.is_finite() => 0.0,
                    // Infeasible side: push away from it.
                    (false, _) => 1.0,
                    (true, _) => -1.0,
                }
            })
            .collect();

        let mut grad: Blocks = x.iter().map(|b| vec![0.0; b.len()]).collect();
        for (&(b, i), s) in coords.iter().zip(&slopes) {
            grad[b][i] = *s;
        }
        // Tangent direction: remove each block's mean so Σ stays 1.
        for g in grad.iter_mut() {
            let mean = g.iter().sum::<f64>() / g.len() as f64;
            g.iter_mut().for_each(|v| *v -= mean);
        }
        let norm = grad.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            step /= 2.0;
            continue;
        }
        let candidate: Blocks = x
            .iter()
            .zip(&grad)
            .map(|(block, g)| {
                let moved: Vec<f64> = block.iter().zip(g).map(|(v, gi)| v - step * gi / norm).collect();
                project_simplex(&moved)
            })
            .collect();
        let fc = eval(objective, &candidate);
        if fc < fx {
            let gain = if fx.is_finite() { (fx - fc) / fx.abs().max(f64::MIN_POSITIVE) } else { 1.0 };
            x = candidate;
            fx = fc;
            trace.push((x.clone(), fx));
            if gain < cfg.tolerance {
                break;
            }
        } else {
            step /= 2.0;
        }
    }
    (x, fx)
}

/// Projected central-difference descent on a product of simplices, restarted
/// from `starts` followed by Halton points until `cfg.restarts` runs are done.
pub fn minimize_on_simplices<F>(dims: &[usize], starts: &[Blocks], objective: F, cfg: &SearchConfig) -> Result<SimplexOutcome>
where
    F: Fn(&Blocks) -> Option<f64> + Sync,
{
    cfg.validate()?;
    if dims.is_empty() || dims.contains(&0) {
        return Err(Error::Search("every simplex block needs at least one coordinate".into()));
    }
    let runs = cfg.restarts as usize;
    let mut all_starts: Vec<Blocks> = starts.iter().take(runs).cloned().collect();
    let extra = runs - all_starts.len();
    all_starts.extend(halton_simplex_points(dims, extra, cfg.seed));

    let mut trace = Vec::new();
    let mut best: Option<(Blocks, f64)> = None;
    for start in all_starts {
        let (x, fx) = descend(start, &objective, cfg, &mut trace);
        if fx.is_finite() && best.as_ref().is_none_or(|(_, b)| fx < *b) {
            best = Some((x, fx));
        }
    }
    let (best, value) = best.ok_or_else(|| Error::Search("no feasible point found from any start".into()))?;
    Ok(SimplexOutcome { best, value, trace })
}

/// What to optimize for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Workload {
    Training {
        model: ModelConfig,
        parallelism: ParallelismConfig,
    },
    Inference {
        model: ModelConfig,
        inference: InferenceConfig,
        parallelism: ParallelismConfig,
    },
}

impl Workload {
    pub fn predict(&self, cluster: &ClusterSpec, policy: &UtilizationPolicy) -> Result<PredictionReport> {
        match self {
            Workload::Training { model, parallelism } => predict_training_step(model, parallelism, cluster, policy),
            Workload::Inference {
                model,
                inference,
                parallelism,
            } => predict_inference(model, inference, parallelism, cluster, policy),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budgets {
    /// mm².
    pub area: f64,
    /// W.
    pub power: f64,
}

/// Published-device calibration plus the cluster it sits in.
#[derive(Debug, Clone, PartialEq)]
pub struct HardwareContext {
    pub calibration: Calibration,
    pub cluster: ClusterSpec,
    pub policy: UtilizationPolicy,
}

/// A100-class die split (N7, 826 mm², 400 W).
pub fn reference_point() -> DesignPoint {
    let f = |c, l2, d, n| -> Fractions {
        BTreeMap::from([
            (Component::Compute, c),
            (Component::L2Cache, l2),
            (Component::DramInterface, d),
            (Component::NetworkInterface, n),
        ])
    };
    DesignPoint {
        area_fraction: f(0.6, 0.15, 0.15, 0.1),
        power_fraction: f(0.65, 0.1, 0.15, 0.1),
        node: TechNode::N7,
    }
}

pub const REFERENCE_AREA_MM2: f64 = 826.0;
pub const REFERENCE_POWER_W: f64 = 400.0;

impl HardwareContext {
    /// Context anchored on the cluster's own device at the reference split.
    pub fn anchored(cluster: ClusterSpec, policy: UtilizationPolicy) -> Self {
        HardwareContext {
            calibration: Calibration {
                device: cluster.device.clone(),
                point: reference_point(),
                area_budget: REFERENCE_AREA_MM2,
                power_budget: REFERENCE_POWER_W,
                scaling: NodeScaling::default(),
            },
            cluster,
            policy,
        }
    }

    pub fn budgets(&self) -> Budgets {
        Budgets {
            area: self.calibration.area_budget,
            power: self.calibration.power_budget,
        }
    }

    /// Swap the DRAM generation on both the calibration device and cluster.
    pub fn with_dram(&self, dram: &DramPreset) -> Self {
        let mut out = self.clone();
        out.calibration.device = self.calibration.device.with_dram(dram);
        out.cluster.device = self.cluster.device.with_dram(dram);
        out
    }

    pub fn with_inter_link(&self, link: &NetworkLink) -> Self {
        let mut out = self.clone();
        out.cluster.inter_link = link.clone();
        out
    }

    /// Cluster built from the device a design point yields.
    pub fn cluster_for(&self, point: &DesignPoint, budgets: Budgets) -> Result<ClusterSpec> {
        let derived = derive_from_budget(point, budgets.area, budgets.power, &self.calibration)?;
        let mut cluster = self.cluster.clone();
        cluster.device = derived.device;
        cluster.intra_link.bandwidth *= derived.network_scale;
        cluster.inter_link.bandwidth *= derived.network_scale;
        cluster.validate()?;
        Ok(cluster)
    }

    pub fn evaluate(&self, workload: &Workload, point: &DesignPoint, budgets: Budgets) -> Result<PredictionReport> {
        workload.predict(&self.cluster_for(point, budgets)?, &self.policy)
    }
}

fn point_from_blocks(x: &Blocks, node: TechNode) -> DesignPoint {
    let to_map = |v: &Vec<f64>| -> Fractions { Component::ALL.iter().copied().zip(v.iter().copied()).collect() };
    DesignPoint {
        area_fraction: to_map(&x[0]),
        power_fraction: to_map(&x[1]),
        node,
    }
}

fn blocks_from_point(p: &DesignPoint) -> Blocks {
    vec![
        Component::ALL.iter().map(|c| p.area(*c)).collect(),
        Component::ALL.iter().map(|c| p.power(*c)).collect(),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub point: DesignPoint,
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: DesignPoint,
    pub time: f64,
    pub trace: Vec<TraceEntry>,
}

/// Best design point at `node` under the budgets. The calibration split is
/// the first start, so the result never loses to it.
pub fn search(
    workload: &Workload,
    ctx: &HardwareContext,
    node: TechNode,
    budgets: Budgets,
    cfg: &SearchConfig,
) -> Result<SearchResult> {
    if !(budgets.area > 0.0 && budgets.power > 0.0) {
        return Err(Error::InvalidDesignPoint("budgets must be positive".into()));
    }
    let objective = |x: &Blocks| -> Option<f64> {
        let point = point_from_blocks(x, node);
        ctx.evaluate(workload, &point, budgets).ok().map(|r| r.total_time)
    };
    let start = blocks_from_point(&ctx.calibration.point);
    let outcome = minimize_on_simplices(&[4, 4], &[start], objective, cfg).map_err(|e| match e {
        Error::Search(msg) => Error::Search(format!("{msg}; no design point at {node} fits the workload")),
        other => other,
    })?;
    Ok(SearchResult {
        best: point_from_blocks(&outcome.best, node),
        time: outcome.value,
        trace: outcome
            .trace
            .into_iter()
            .filter(|(_, t)| t.is_finite())
            .map(|(x, time)| TraceEntry {
                point: point_from_blocks(&x, node),
                time,
            })
            .collect(),
    })
}

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    // Normalized exponentials are uniform on the simplex.
    let e: Vec<f64> = (0..n).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Best of `samples` uniformly random design points; a reference for
/// judging [`search`].
pub fn random_search(
    workload: &Workload,
    ctx: &HardwareContext,
    node: TechNode,
    budgets: Budgets,
    samples: usize,
    seed: u64,
) -> Result<TraceEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<DesignPoint> = (0..samples)
        .map(|_| point_from_blocks(&vec![random_simplex(&mut rng, 4), random_simplex(&mut rng, 4)], node))
        .collect();
    points
        .into_par_iter()
        .filter_map(|point| {
            let time = ctx.evaluate(workload, &point, budgets).ok()?.total_time;
            time.is_finite().then_some(TraceEntry { point, time })
        })
        .min_by(|a, b| a.time.total_cmp(&b.time))
        .ok_or_else(|| Error::Search("no random sample was feasible".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepAxes {
    pub nodes: Vec<TechNode>,
    pub dram: Vec<DramPreset>,
    pub network: Vec<NetworkLink>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub node: TechNode,
    pub dram: String,
    pub network: String,
    pub point: Option<DesignPoint>,
    pub report: Option<PredictionReport>,
    pub error: Option<String>,
}

impl SweepCell {
    pub fn time(&self) -> Option<f64> {
        self.report.as_ref().map(|r| r.total_time)
    }
}

/// Evaluate every (node, dram, network) combination, in axis order. With
/// `optimize` each cell runs its own search; otherwise the calibration split
/// is moved to the cell's node.
pub fn sweep(
    workload: &Workload,
    ctx: &HardwareContext,
    axes: &SweepAxes,
    optimize: Option<&SearchConfig>,
) -> Vec<SweepCell> {
    let mut cells = Vec::new();
    for &node in &axes.nodes {
        for dram in &axes.dram {
            for net in &axes.network {
                cells.push((node, dram, net));
            }
        }
    }
    let budgets = ctx.budgets();
    cells
        .into_par_iter()
        .map(|(node, dram, net)| {
            let cell_ctx = ctx.with_dram(dram).with_inter_link(net);
            let outcome = match optimize {
                Some(cfg) => search(workload, &cell_ctx, node, budgets, cfg).map(|r| r.best),
                None => Ok(DesignPoint {
                    node,
                    ..ctx.calibration.point.clone()
                }),
            }
            .and_then(|point| {
                let report = cell_ctx.evaluate(workload, &point, budgets)?;
                Ok((point, report))
            });
            let (point, report, error) = match outcome {
                Ok((p, r)) => (Some(p), Some(r), None),
                Err(e) => (None, None, Some(e.to_string())),
            };
            SweepCell {
                node,
                dram: dram.name.clone(),
                network: net.name.clone(),
                point,
                report,
                error,
            }
        })
        .collect()
}

/// Device produced at the calibration split moved to `node`.
pub fn device_at_node(ctx: &HardwareContext, node: TechNode) -> Result<DeviceSpec> {
    let point = DesignPoint {
        node,
        ..ctx.calibration.point.clone()
    };
    Ok(ctx.cluster_for(&point, ctx.budgets())?.device)
}
