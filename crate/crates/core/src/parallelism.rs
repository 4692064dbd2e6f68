//! DP/TP/PP/SP sharding with its implied communication, plus
//! pipeline schedule arithmetic.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::workload::{GemmRole, KernelKind, KernelNode, ModelConfig, Phase, Scope, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Gpipe,
    #[default]
    PipedreamFlush,
    #[serde(rename = "interleaved_1f1b")]
    Interleaved1f1b,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RecomputeMode {
    #[default]
    None,
    Selective,
    Full,
}

fn one() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParallelismConfig {
    #[serde(default = "one")]
    pub dp: u64,
    #[serde(default = "one")]
    pub tp: u64,
    #[serde(default = "one")]
    pub pp: u64,
    #[serde(default = "one")]
    pub sp: u64,
    #[serde(default = "one")]
    pub microbatches: u64,
    #[serde(default = "one")]
    pub microbatch_size: u64,
    #[serde(default = "one")]
    pub interleave: u64,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub recompute: RecomputeMode,
    /// Checkpoint count for full recomputation; optimal when absent.
    #[serde(default)]
    pub checkpoints: Option<u64>,
}

impl Default for ParallelismConfig {
    fn default() -> Self {
        ParallelismConfig {
            dp: 1,
            tp: 1,
            pp: 1,
            sp: 1,
            microbatches: 1,
            microbatch_size: 1,
            interleave: 1,
            schedule: Schedule::default(),
            recompute: RecomputeMode::default(),
            checkpoints: None,
        }
    }
}

impl ParallelismConfig {
    pub fn devices(&self) -> u64 {
        self.dp * self.tp * self.pp
    }

    pub fn validate(&self, total_devices: u64) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParallelism(msg));
        if [self.dp, self.tp, self.pp, self.sp].contains(&0) {
            return bad("degrees must be at least 1".into());
        }
        if self.devices() != total_devices {
            return bad(format!(
                "dp·tp·pp = {}·{}·{} = {} but the cluster has {total_devices} devices",
                self.dp,
                self.tp,
                self.pp,
                self.devices()
            ));
        }
        if self.sp != 1 && self.sp != self.tp {
            return bad(format!("sp must be 1 or equal to tp ({}), got {}", self.tp, self.sp));
        }
        if self.microbatches == 0 || self.microbatch_size == 0 {
            return bad("microbatches and microbatch_size must be at least 1".into());
        }
        if self.interleave == 0 {
            return bad("interleave must be at least 1".into());
        }
        if self.schedule == Schedule::Interleaved1f1b && self.interleave < 2 {
            return bad("interleaved_1f1b needs interleave >= 2".into());
        }
        Ok(())
    }

    pub fn global_batch(&self) -> u64 {
        self.dp * self.microbatches * self.microbatch_size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommKind {
    AllReduce,
    AllGather,
    ReduceScatter,
    P2p,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommScope {
    IntraNode,
    InterNode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommPhase {
    Fwd,
    Bwd,
    GradSync,
    Pipeline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommOp {
    pub kind: CommKind,
    /// Size of the tensor being reduced/gathered/sent, in bytes.
    pub volume: f64,
    pub group_size: u32,
    pub scope: CommScope,
    pub phase: CommPhase,
}

impl CommOp {
    /// Bytes each participant puts on the wire.
    pub fn wire_bytes(&self) -> f64 {
        let n = self.group_size as f64;
        if self.group_size <= 1 && self.kind != CommKind::P2p {
            return 0.0;
        }
        match self.kind {
            CommKind::AllReduce => 2.0 * self.volume * (n - 1.0) / n,
            CommKind::AllGather | CommKind::ReduceScatter => self.volume * (n - 1.0) / n,
            CommKind::P2p => self.volume,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShardedLayer {
    pub kernels: Vec<KernelNode>,
    pub comms: Vec<CommOp>,
}

pub fn check_divisibility(model: &ModelConfig, tp: u64) -> Result<()> {
    let checks = [
        ("heads", model.heads),
        ("ffn_dim", model.ffn_dim),
        ("3·hidden", 3 * model.hidden),
        ("hidden", model.hidden),
    ];
    for (name, v) in checks {
        if v % tp != 0 {
            return Err(Error::InvalidParallelism(format!("tp={tp} does not divide {name}={v}")));
        }
    }
    Ok(())
}

fn shard_node(node: &KernelNode, tp: u64, sp: u64) -> KernelNode {
    let mut out = node.clone();
    match &mut out.kind {
        KernelKind::Gemm(s) => match node.split {
            Split::M => s.m = s.m.div_ceil(tp),
            Split::N => s.n = s.n.div_ceil(tp),
            Split::K => s.k = s.k.div_ceil(tp),
            Split::HeadCount => out.count = out.count.div_ceil(tp),
            Split::HeadBatch => s.batch = s.batch.div_ceil(tp),
            Split::None | Split::Tensor | Split::Sequence => {}
        },
        KernelKind::Elementwise { bytes_moved, .. } => match node.split {
            Split::Tensor | Split::HeadCount | Split::HeadBatch => *bytes_moved /= tp as f64,
            Split::Sequence => *bytes_moved /= sp as f64,
            _ => {}
        },
    }
    out
}

/// Shard one layer's kernels across `tp` devices (sequence-parallel when
/// `sp == tp > 1`) and list the tensor-parallel collectives it needs.
pub fn shard_graph(kernels: &[KernelNode], model: &ModelConfig, par: &ParallelismConfig) -> Result<ShardedLayer> {
    let tp = par.tp.max(1);
    check_divisibility(model, tp)?;
    let sharded = kernels.iter().map(|k| shard_node(k, tp, par.sp)).collect();

    let mut comms = Vec::new();
    if tp > 1 {
        let phases: BTreeSet<Phase> = kernels
            .iter()
            .filter(|k| k.scope == Scope::PerLayer)
            .map(|k| k.phase)
            .collect();
        for phase in phases {
            // Forward-like phases carry the block input size on the qkv GEMM.
            let tokens = kernels
                .iter()
                .filter(|k| k.scope == Scope::PerLayer)
                .filter_map(|k| match (&k.kind, k.phase) {
                    (KernelKind::Gemm(s), p) if s.role == GemmRole::QkvProj && p != Phase::Bwd => Some(s.m),
                    _ => None,
                })
                .next();
            let Some(tokens) = tokens else { continue };
            let volume = tokens as f64 * model.hidden as f64 * model.precision();
            let comm_phase = if phase == Phase::Bwd { CommPhase::Bwd } else { CommPhase::Fwd };
            // One collective per MHA block and one per MLP block.
            for _block in 0..2 {
                comms.extend(block_collectives(volume, tp as u32, par.sp > 1, comm_phase));
            }
        }
    }
    Ok(ShardedLayer { kernels: sharded, comms })
}

fn block_collectives(volume: f64, tp: u32, sequence_parallel: bool, phase: CommPhase) -> Vec<CommOp> {
    let op = |kind| CommOp {
        kind,
        volume,
        group_size: tp,
        scope: CommScope::IntraNode,
        phase,
    };
    if sequence_parallel {
        vec![op(CommKind::ReduceScatter), op(CommKind::AllGather)]
    } else {
        vec![op(CommKind::AllReduce)]
    }
}

fn scope_for(span: u64, devices_per_node: u32) -> CommScope {
    if span <= devices_per_node as u64 {
        CommScope::IntraNode
    } else {
        CommScope::InterNode
    }
}

/// Gradient all-reduce over the data-parallel group, once per step.
pub fn grad_sync_op(model: &ModelConfig, par: &ParallelismConfig, devices_per_node: u32) -> CommOp {
    let local_params = model.parameters() / (par.tp * par.pp) as f64;
    CommOp {
        kind: CommKind::AllReduce,
        volume: local_params * model.precision(),
        group_size: par.dp as u32,
        scope: scope_for(par.dp * par.tp * par.pp, devices_per_node),
        phase: CommPhase::GradSync,
    }
}

/// Activation (or gradient) handed across one stage boundary for one microbatch.
pub fn pipeline_p2p_op(model: &ModelConfig, par: &ParallelismConfig, devices_per_node: u32) -> CommOp {
    CommOp {
        kind: CommKind::P2p,
        volume: (par.microbatch_size * model.seq_len * model.hidden) as f64 * model.precision(),
        group_size: 2,
        scope: scope_for(par.tp * par.pp, devices_per_node),
        phase: CommPhase::Pipeline,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineTime {
    pub bubble_time: f64,
    pub steady_time: f64,
}

/// `stage_time` is one microbatch's forward+backward time on one stage.
pub fn pipeline_time(stage_time: f64, par: &ParallelismConfig) -> PipelineTime {
    let steady_time = par.microbatches as f64 * stage_time;
    let fill = (par.pp.saturating_sub(1)) as f64 * stage_time;
    let bubble_time = match par.schedule {
        Schedule::Gpipe | Schedule::PipedreamFlush => fill,
        Schedule::Interleaved1f1b => fill / par.interleave.max(1) as f64,
    };
    PipelineTime { bubble_time, steady_time }
}

/// Microbatches whose activations a stage holds at peak.
pub fn inflight_activation_multiplier(par: &ParallelismConfig) -> u64 {
    if par.pp <= 1 {
        return 1;
    }
    match par.schedule {
        Schedule::Gpipe => par.microbatches,
        Schedule::PipedreamFlush => par.pp,
        Schedule::Interleaved1f1b => {
            let v = par.interleave.max(1);
            // pp·(1 + (v−1)/v), rounded up.
            (par.pp * (2 * v - 1)).div_ceil(v)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::build_training_layer;

    fn model(h: u64, a: u64) -> ModelConfig {
        ModelConfig {
            name: "m".into(),
            layers: 8,
            hidden: h,
            heads: a,
            head_dim: None,
            ffn_dim: 4 * h,
            vocab: 51200,
            seq_len: 2048,
            precision_bytes: 2,
            gated_mlp: false,
            param_count: None,
            activation_const: 34.0,
            attention_activation_const: 5.0,
        }
    }

    fn par(tp: u64, sp: u64) -> ParallelismConfig {
        ParallelismConfig { tp, sp, ..Default::default() }
    }

    #[test]
    fn tp8_allreduce_volume() {
        let m = model(4096, 32);
        let layer = shard_graph(&build_training_layer(&m, 1), &m, &par(8, 1)).unwrap();
        let fwd: Vec<_> = layer.comms.iter().filter(|c| c.phase == CommPhase::Fwd).collect();
        assert_eq!(fwd.len(), 2);
        assert!(fwd.iter().all(|c| c.kind == CommKind::AllReduce && c.volume == 16_777_216.0));
        assert_eq!(layer.comms.iter().filter(|c| c.phase == CommPhase::Bwd).count(), 2);
    }

    #[test]
    fn tp1_identity() {
        let m = model(4096, 32);
        let kernels = build_training_layer(&m, 1);
        let layer = shard_graph(&kernels, &m, &par(1, 1)).unwrap();
        assert!(layer.comms.is_empty());
        assert_eq!(layer.kernels, kernels);
    }

    #[test]
    fn heads_per_device() {
        let m = model(5120, 40);
        let layer = shard_graph(&build_training_layer(&m, 1), &m, &par(8, 1)).unwrap();
        let scores = layer.kernels.iter().find(|k| k.name == "attn_scores").unwrap();
        assert_eq!(scores.count, 5);
    }

    #[test]
    fn divisibility_errors() {
        let m = model(4096, 32);
        assert!(matches!(
            shard_graph(&build_training_layer(&m, 1), &m, &par(3, 1)),
            Err(Error::InvalidParallelism(_))
        ));
    }

    #[test]
    fn sp_replaces_allreduce() {
        let m = model(4096, 32);
        let plain = shard_graph(&build_training_layer(&m, 1), &m, &par(8, 1)).unwrap();
        let sp = shard_graph(&build_training_layer(&m, 1), &m, &par(8, 8)).unwrap();
        let bytes = |l: &ShardedLayer| l.comms.iter().map(CommOp::wire_bytes).sum::<f64>();
        assert_eq!(sp.comms.len(), 2 * plain.comms.len());
        assert!((bytes(&sp) - bytes(&plain)).abs() < 1e-6);
    }

    #[test]
    fn bubble_examples() {
        let p = ParallelismConfig { pp: 8, microbatches: 64, ..Default::default() };
        let t = pipeline_time(1.0, &p);
        assert!((t.bubble_time / t.steady_time - 7.0 / 64.0).abs() < 1e-15);
        assert_eq!(pipeline_time(1.0, &ParallelismConfig { pp: 1, ..p.clone() }).bubble_time, 0.0);
        let inter = ParallelismConfig { schedule: Schedule::Interleaved1f1b, interleave: 2, ..p.clone() };
        let g = pipeline_time(1.0, &ParallelismConfig { schedule: Schedule::Gpipe, ..p });
        assert_eq!(pipeline_time(1.0, &inter).bubble_time * 2.0, g.bubble_time);
    }

    #[test]
    fn inflight_examples() {
        let g = ParallelismConfig { pp: 8, microbatches: 64, schedule: Schedule::Gpipe, ..Default::default() };
        assert_eq!(inflight_activation_multiplier(&g), 64);
        let f = ParallelismConfig { schedule: Schedule::PipedreamFlush, ..g.clone() };
        assert_eq!(inflight_activation_multiplier(&f), 8);
        let i = ParallelismConfig { schedule: Schedule::Interleaved1f1b, interleave: 2, ..g.clone() };
        assert_eq!(inflight_activation_multiplier(&i), 12);
        for s in [Schedule::Gpipe, Schedule::PipedreamFlush, Schedule::Interleaved1f1b] {
            let one = ParallelismConfig { pp: 1, schedule: s, interleave: 2, ..g.clone() };
            assert_eq!(inflight_activation_multiplier(&one), 1);
        }
    }

    #[test]
    fn config_validation() {
        let p = ParallelismConfig { dp: 2, tp: 8, pp: 4, sp: 8, ..Default::default() };
        assert!(p.validate(64).is_ok());
        assert!(p.validate(32).is_err());
        assert!(ParallelismConfig { sp: 4, ..p.clone() }.validate(64).is_err());
        assert!(ParallelismConfig { schedule: Schedule::Interleaved1f1b, ..p }.validate(64).is_err());
    }
}
