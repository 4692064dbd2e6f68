//! End-to-end composition: kernel, communication, pipeline and memory models
//! combined into a training-step time or an inference latency.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::arch::ClusterSpec;
use crate::comm::{link_for, price_comm_op_on, CollectiveAlgo};
use crate::error::{Error, Result};
use crate::kernelperf::{estimate_kernel, Bound, KernelEstimate, UtilizationPolicy};
use crate::memory::{
    fits, inference_footprint, layers_per_stage, static_memory, training_footprint, MemoryFootprint,
    DEFAULT_OPTIMIZER_BYTES_PER_PARAM,
};
use crate::parallelism::{
    grad_sync_op, pipeline_p2p_op, pipeline_time, shard_graph, CommOp, CommPhase, ParallelismConfig, RecomputeMode,
};
use crate::workload::{
    build_inference_graph, build_training_extras, build_training_layer, ElementwiseOp, InferenceConfig, KernelKind,
    KernelNode, ModelConfig, Phase, Scope,
};

pub const FORWARD: &str = "forward";
pub const BACKWARD: &str = "backward";
pub const RECOMPUTE: &str = "recompute";
pub const TP_COMM: &str = "tp_comm";
pub const PP_COMM: &str = "pp_comm";
pub const DP_COMM: &str = "dp_comm";
pub const BUBBLE: &str = "bubble";
pub const WEIGHT_UPDATE: &str = "weight_update";
pub const PREFILL: &str = "prefill";
pub const DECODE: &str = "decode";

/// Which part of the workload a kernel record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Forward,
    Backward,
    Recompute,
    Prefill,
    Decode,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::Forward => FORWARD,
            Category::Backward => BACKWARD,
            Category::Recompute => RECOMPUTE,
            Category::Prefill => PREFILL,
            Category::Decode => DECODE,
        }
    }
}

/// One kernel's contribution, aggregated over every time it runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelRecord {
    pub name: String,
    pub category: Category,
    pub is_gemm: bool,
    pub per_layer: bool,
    /// Executions folded into this record.
    pub instances: f64,
    pub estimate: KernelEstimate,
    /// Time attributed to each bound, classified per execution.
    pub bound_time: BTreeMap<Bound, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceTimes {
    pub prefill_time: f64,
    pub decode_time: f64,
    pub comm_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub total_time: f64,
    pub phases: BTreeMap<String, f64>,
    pub bound_histogram: BTreeMap<Bound, f64>,
    pub memory: MemoryFootprint,
    pub per_kernel: Vec<KernelRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inference: Option<InferenceTimes>,
}

impl PredictionReport {
    pub fn phase(&self, name: &str) -> f64 {
        self.phases.get(name).copied().unwrap_or(0.0)
    }

    /// Kernel time across all records (the histogram total).
    pub fn kernel_time(&self) -> f64 {
        self.bound_histogram.values().sum()
    }
}

#[derive(Default)]
struct Ledger {
    records: Vec<KernelRecord>,
    index: HashMap<(Category, String), usize>,
}

impl Ledger {
    fn add(&mut self, category: Category, node: &KernelNode, est: &KernelEstimate, instances: f64) {
        if instances == 0.0 {
            return;
        }
        let scaled = est.repeated(instances);
        let key = (category, node.name.clone());
        match self.index.get(&key) {
            Some(&i) => {
                let rec = &mut self.records[i];
                rec.estimate = rec.estimate.accumulate(&scaled);
                rec.instances += instances;
                *rec.bound_time.entry(est.bound).or_insert(0.0) += scaled.effective_time;
            }
            None => {
                self.index.insert(key, self.records.len());
                self.records.push(KernelRecord {
                    name: node.name.clone(),
                    category,
                    is_gemm: node.gemm_shape().is_some(),
                    per_layer: node.scope == Scope::PerLayer,
                    instances,
                    bound_time: BTreeMap::from([(est.bound, scaled.effective_time)]),
                    estimate: scaled,
                });
            }
        }
    }

    fn histogram(&self) -> BTreeMap<Bound, f64> {
        let mut out = BTreeMap::new();
        for rec in &self.records {
            for (b, t) in &rec.bound_time {
                *out.entry(*b).or_insert(0.0) += t;
            }
        }
        out
    }
}

/// Price one kernel including its multiplicity.
fn price(node: &KernelNode, cluster: &ClusterSpec, model: &ModelConfig, policy: &UtilizationPolicy) -> Result<KernelEstimate> {
    let est = estimate_kernel(&node.kind, &cluster.device, model.precision_bytes, policy)?;
    Ok(if node.count == 1 { est } else { est.repeated(node.count as f64) })
}

fn price_comms(
    ops: &[CommOp],
    cluster: &ClusterSpec,
    algo: CollectiveAlgo,
    utilization: f64,
    filter: impl Fn(&CommOp) -> bool,
) -> Result<f64> {
    let mut total = 0.0;
    for op in ops.iter().filter(|op| filter(op)) {
        let mut link = link_for(op.scope, cluster);
        link.utilization = utilization;
        total += price_comm_op_on(op, &link, cluster, algo)?;
    }
    Ok(total)
}

fn check_fit(footprint: MemoryFootprint, cluster: &ClusterSpec) -> Result<()> {
    if fits(&footprint, &cluster.device).fits {
        Ok(())
    } else {
        Err(Error::MemoryOverflow {
            footprint,
            capacity: cluster.device.dram_capacity().round() as u64,
        })
    }
}

/// Kernels re-executed in the backward pass under selective recomputation.
fn selectively_recomputed(node: &KernelNode) -> bool {
    matches!(
        node.kind,
        KernelKind::Elementwise {
            op: ElementwiseOp::Softmax | ElementwiseOp::DropoutAttn,
            ..
        }
    )
}

/// Time of one training step (one global batch) on the busiest device.
pub fn predict_training_step(
    model: &ModelConfig,
    par: &ParallelismConfig,
    cluster: &ClusterSpec,
    policy: &UtilizationPolicy,
) -> Result<PredictionReport> {
    model.validate()?;
    cluster.validate()?;
    policy.validate()?;
    par.validate(cluster.total_devices as u64)?;

    let memory = training_footprint(model, par, DEFAULT_OPTIMIZER_BYTES_PER_PARAM)?;
    check_fit(memory, cluster)?;

    let b = par.microbatch_size;
    let layer = shard_graph(&build_training_layer(model, b), model, par)?;
    let extras = shard_graph(&build_training_extras(model, b), model, par)?;
    let layers = layers_per_stage(model, par) as f64;
    let mu = par.microbatches as f64;
    let util = policy.training_link_utilization;
    let ring = CollectiveAlgo::Ring;

    let mut ledger = Ledger::default();
    let (mut fwd, mut bwd, mut recompute) = (0.0, 0.0, 0.0);
    for node in &layer.kernels {
        let est = price(node, cluster, model, policy)?;
        let t = est.effective_time;
        match node.phase {
            Phase::Bwd => {
                bwd += t;
                ledger.add(Category::Backward, node, &est, layers * mu);
            }
            _ => {
                fwd += t;
                ledger.add(Category::Forward, node, &est, layers * mu);
                let again = match par.recompute {
                    RecomputeMode::None => false,
                    RecomputeMode::Selective => selectively_recomputed(node),
                    RecomputeMode::Full => true,
                };
                if again {
                    recompute += t;
                    ledger.add(Category::Recompute, node, &est, layers * mu);
                }
            }
        }
    }

    // Embedding lives on the first stage and logits on the last; with a
    // pipeline the busiest stage carries the heavier of the two.
    let mut first = (0.0, 0.0);
    let mut last = (0.0, 0.0);
    let mut extra_est = Vec::new();
    for node in &extras.kernels {
        let est = price(node, cluster, model, policy)?;
        let on_first = matches!(node.kind, KernelKind::Elementwise { .. });
        let slot = if on_first { &mut first } else { &mut last };
        if node.phase == Phase::Bwd {
            slot.1 += est.effective_time;
        } else {
            slot.0 += est.effective_time;
        }
        extra_est.push((node, est, on_first));
    }
    let use_first_only = par.pp > 1 && first.0 + first.1 >= last.0 + last.1;
    let use_last_only = par.pp > 1 && !use_first_only;
    let (mut extra_fwd, mut extra_bwd) = (0.0, 0.0);
    for (node, est, on_first) in &extra_est {
        if (use_first_only && !on_first) || (use_last_only && *on_first) {
            continue;
        }
        let cat = if node.phase == Phase::Bwd {
            extra_bwd += est.effective_time;
            Category::Backward
        } else {
            extra_fwd += est.effective_time;
            Category::Forward
        };
        ledger.add(cat, node, est, mu);
    }

    let tp_fwd = price_comms(&layer.comms, cluster, ring, util, |op| op.phase != CommPhase::Bwd)?;
    let tp_bwd = price_comms(&layer.comms, cluster, ring, util, |op| op.phase == CommPhase::Bwd)?;
    let tp_recompute = if par.recompute == RecomputeMode::Full { tp_fwd } else { 0.0 };
    let tp_per_layer = tp_fwd + tp_bwd + tp_recompute;

    let stage_time = layers * (fwd + bwd + recompute + tp_per_layer) + extra_fwd + extra_bwd;
    let pipe = pipeline_time(stage_time, par);

    let pp_comm = if par.pp > 1 {
        let op = pipeline_p2p_op(model, par, cluster.devices_per_node);
        let t = price_comms(std::slice::from_ref(&op), cluster, ring, util, |_| true)?;
        2.0 * (par.interleave as f64 * mu + (par.pp - 1) as f64) * t
    } else {
        0.0
    };
    let dp_comm = if par.dp > 1 {
        let op = grad_sync_op(model, par, cluster.devices_per_node);
        price_comms(std::slice::from_ref(&op), cluster, ring, util, |_| true)?
    } else {
        0.0
    };
    let optimizer_bytes = static_memory(model, par, DEFAULT_OPTIMIZER_BYTES_PER_PARAM).optimizer as f64;
    let weight_update = optimizer_bytes / cluster.device.dram().bandwidth;

    let phases = BTreeMap::from([
        (FORWARD.to_string(), mu * (layers * fwd + extra_fwd)),
        (BACKWARD.to_string(), mu * (layers * bwd + extra_bwd)),
        (RECOMPUTE.to_string(), mu * layers * recompute),
        (TP_COMM.to_string(), mu * layers * tp_per_layer),
        (PP_COMM.to_string(), pp_comm),
        (DP_COMM.to_string(), dp_comm),
        (BUBBLE.to_string(), pipe.bubble_time),
        (WEIGHT_UPDATE.to_string(), weight_update),
    ]);
    Ok(PredictionReport {
        total_time: phases.values().sum(),
        phases,
        bound_histogram: ledger.histogram(),
        memory,
        per_kernel: ledger.records,
        inference: None,
    })
}

/// Latency of one request batch: prefill plus `gen_len` decode steps.
/// Only tensor parallelism inside one node is supported.
pub fn predict_inference(
    model: &ModelConfig,
    inf: &InferenceConfig,
    par: &ParallelismConfig,
    cluster: &ClusterSpec,
    policy: &UtilizationPolicy,
) -> Result<PredictionReport> {
    model.validate()?;
    inf.validate()?;
    cluster.validate()?;
    policy.validate()?;
    if par.dp != 1 || par.pp != 1 || par.tp == 0 {
        return Err(Error::InvalidParallelism("inference supports tensor parallelism only".into()));
    }
    if par.tp > cluster.devices_per_node as u64 {
        return Err(Error::InvalidParallelism(format!(
            "tp={} exceeds {} devices per node",
            par.tp, cluster.devices_per_node
        )));
    }
    let par = ParallelismConfig { sp: 1, ..par.clone() };

    let memory = inference_footprint(model, inf, par.tp);
    check_fit(memory, cluster)?;

    let layers = model.layers as f64;
    let util = policy.inference_link_utilization;
    let tree = CollectiveAlgo::Tree;
    let graph = build_inference_graph(model, inf);
    let mut ledger = Ledger::default();

    let run = |kernels: &[KernelNode], category: Category, ledger: &mut Ledger| -> Result<(f64, f64)> {
        let sharded = shard_graph(kernels, model, &par)?;
        let mut time = 0.0;
        for node in &sharded.kernels {
            let est = price(node, cluster, model, policy)?;
            let reps = if node.scope == Scope::PerLayer { layers } else { 1.0 };
            time += reps * est.effective_time;
            ledger.add(category, node, &est, reps);
        }
        let comm = layers * price_comms(&sharded.comms, cluster, tree, util, |_| true)?;
        Ok((time, comm))
    };

    let (prefill_time, mut comm_time) = run(&graph.prefill, Category::Prefill, &mut ledger)?;
    let mut decode_time = 0.0;
    for t in 0..graph.decode_steps() {
        let (k, c) = run(&graph.decode_step(t), Category::Decode, &mut ledger)?;
        decode_time += k;
        comm_time += c;
    }

    let phases = BTreeMap::from([
        (PREFILL.to_string(), prefill_time),
        (DECODE.to_string(), decode_time),
        (TP_COMM.to_string(), comm_time),
    ]);
    Ok(PredictionReport {
        total_time: prefill_time + decode_time + comm_time,
        phases,
        bound_histogram: ledger.histogram(),
        memory,
        per_kernel: ledger.records,
        inference: Some(InferenceTimes {
            prefill_time,
            decode_time,
            comm_time,
        }),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BreakdownScope {
    PerLayer,
    PerPhase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakdownRow {
    pub label: String,
    pub time: f64,
    pub fractions: BTreeMap<Bound, f64>,
}

impl BreakdownRow {
    pub fn fraction(&self, bound: Bound) -> f64 {
        self.fractions.get(&bound).copied().unwrap_or(0.0)
    }
}

/// GEMM time of the transformer layers split by bound type. `PerLayer`
/// yields one row over all layer GEMMs; `PerPhase` one row per category.
pub fn bound_breakdown(report: &PredictionReport, scope: BreakdownScope) -> Vec<BreakdownRow> {
    let mut groups: BTreeMap<String, BTreeMap<Bound, f64>> = BTreeMap::new();
    for rec in report.per_kernel.iter().filter(|r| r.is_gemm && r.per_layer) {
        let label = match scope {
            BreakdownScope::PerLayer => "layer".to_string(),
            BreakdownScope::PerPhase => rec.category.as_str().to_string(),
        };
        let row = groups.entry(label).or_default();
        for (b, t) in &rec.bound_time {
            *row.entry(*b).or_insert(0.0) += t;
        }
    }
    groups
        .into_iter()
        .filter_map(|(label, times)| {
            let time: f64 = times.values().sum();
            (time > 0.0).then(|| BreakdownRow {
                label,
                time,
                fractions: times.into_iter().map(|(b, t)| (b, t / time)).collect(),
            })
        })
        .collect()
}
