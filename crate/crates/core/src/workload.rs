//! Transformer kernel graphs for training (forward/backward) and inference
//! (prefill/decode), plus per-layer activation sizes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_precision() -> u32 {
    2
}
fn default_act_const() -> f64 {
    34.0
}
fn default_attn_act_const() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub name: String,
    pub layers: u64,
    pub hidden: u64,
    pub heads: u64,
    #[serde(default)]
    pub head_dim: Option<u64>,
    pub ffn_dim: u64,
    pub vocab: u64,
    pub seq_len: u64,
    #[serde(default = "default_precision")]
    pub precision_bytes: u32,
    /// Gate and up projections fused into the first MLP GEMM.
    #[serde(default)]
    pub gated_mlp: bool,
    /// Pins the parameter count instead of deriving it from dimensions.
    #[serde(default)]
    pub param_count: Option<f64>,
    /// Per-layer activation constant for the b·s·h term.
    #[serde(default = "default_act_const")]
    pub activation_const: f64,
    /// Per-layer activation constant for the a·s/h attention term.
    #[serde(default = "default_attn_act_const")]
    pub attention_activation_const: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab", self.vocab),
            ("seq_len", self.seq_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::InvalidModel(format!("{}: {name} must be positive", self.name)));
            }
        }
        if self.precision_bytes == 0 {
            return Err(Error::InvalidModel(format!("{}: precision_bytes must be positive", self.name)));
        }
        match self.head_dim {
            Some(0) => Err(Error::InvalidModel(format!("{}: head_dim must be positive", self.name))),
            Some(_) => Ok(()),
            None if self.hidden % self.heads != 0 => Err(Error::InvalidModel(format!(
                "{}: heads {} do not divide hidden {}",
                self.name, self.heads, self.hidden
            ))),
            None => Ok(()),
        }
    }

    pub fn head_dim(&self) -> u64 {
        self.head_dim.unwrap_or(self.hidden / self.heads)
    }

    /// n-extent of the first MLP GEMM.
    pub fn mlp1_width(&self) -> u64 {
        if self.gated_mlp {
            2 * self.ffn_dim
        } else {
            self.ffn_dim
        }
    }

    pub fn precision(&self) -> f64 {
        self.precision_bytes as f64
    }

    /// Parameter count. Per layer: attention 4h² + 4h, MLP weights and biases,
    /// two layer-norms 4h; plus token and position embeddings. Reduces to
    /// L·(12h² + 13h) + V·h + s·h for a plain 4h MLP.
    pub fn parameters(&self) -> f64 {
        if let Some(p) = self.param_count {
            return p;
        }
        let h = self.hidden as f64;
        let f = self.ffn_dim as f64;
        let mlp_mats = if self.gated_mlp { 3.0 } else { 2.0 };
        let per_layer = 4.0 * h * h + 4.0 * h + mlp_mats * h * f + f + h + 4.0 * h;
        self.layers as f64 * per_layer + (self.vocab + self.seq_len) as f64 * h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GemmRole {
    QkvProj,
    AttnScores,
    AttnContext,
    OutProj,
    Mlp1,
    Mlp2,
    Logits,
}

impl GemmRole {
    pub const LAYER: [GemmRole; 6] = [
        GemmRole::QkvProj,
        GemmRole::AttnScores,
        GemmRole::AttnContext,
        GemmRole::OutProj,
        GemmRole::Mlp1,
        GemmRole::Mlp2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GemmRole::QkvProj => "qkv_proj",
            GemmRole::AttnScores => "attn_scores",
            GemmRole::AttnContext => "attn_context",
            GemmRole::OutProj => "out_proj",
            GemmRole::Mlp1 => "mlp1",
            GemmRole::Mlp2 => "mlp2",
            GemmRole::Logits => "logits",
        }
    }
}

/// `batch` independent (m×k)·(k×n) products executed as one kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GemmShape {
    pub m: u64,
    pub n: u64,
    pub k: u64,
    pub batch: u64,
    pub role: GemmRole,
}

impl GemmShape {
    pub fn new(m: u64, n: u64, k: u64, role: GemmRole) -> Self {
        GemmShape { m, n, k, batch: 1, role }
    }

    pub fn batched(m: u64, n: u64, k: u64, batch: u64, role: GemmRole) -> Self {
        GemmShape { m, n, k, batch, role }
    }

    pub fn flops(&self) -> f64 {
        2.0 * self.m as f64 * self.n as f64 * self.k as f64 * self.batch as f64
    }

    /// Each operand and the result touched exactly once.
    pub fn min_traffic_elems(&self) -> f64 {
        let (m, n, k) = (self.m as f64, self.n as f64, self.k as f64);
        self.batch as f64 * (m * k + k * n + m * n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementwiseOp {
    LayerNorm,
    Softmax,
    DropoutAttn,
    DropoutResidual,
    Activation,
    Embedding,
}

impl ElementwiseOp {
    pub fn as_str(self) -> &'static str {
        match self {
            ElementwiseOp::LayerNorm => "layer_norm",
            ElementwiseOp::Softmax => "softmax",
            ElementwiseOp::DropoutAttn => "dropout_attn",
            ElementwiseOp::DropoutResidual => "dropout_residual",
            ElementwiseOp::Activation => "activation",
            ElementwiseOp::Embedding => "embedding",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelKind {
    Gemm(GemmShape),
    Elementwise { op: ElementwiseOp, bytes_moved: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Fwd,
    Bwd,
    Prefill,
    Decode,
}

/// Dimension tensor/sequence parallelism divides for a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    None,
    M,
    N,
    K,
    /// One kernel per head: the kernel count is divided.
    HeadCount,
    /// Heads folded into the GEMM batch: the batch is divided.
    HeadBatch,
    /// Elementwise over a TP-sharded tensor.
    Tensor,
    /// Elementwise over a tensor only SP shards.
    Sequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    PerLayer,
    PerModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelNode {
    pub name: String,
    pub kind: KernelKind,
    pub phase: Phase,
    pub per_head: bool,
    pub count: u64,
    pub split: Split,
    pub scope: Scope,
}

impl KernelNode {
    fn gemm(name: &str, shape: GemmShape, phase: Phase, split: Split) -> Self {
        KernelNode {
            name: name.to_string(),
            kind: KernelKind::Gemm(shape),
            phase,
            per_head: matches!(split, Split::HeadCount | Split::HeadBatch),
            count: 1,
            split,
            scope: Scope::PerLayer,
        }
    }

    fn elementwise(op: ElementwiseOp, bytes_moved: f64, phase: Phase, split: Split) -> Self {
        KernelNode {
            name: op.as_str().to_string(),
            kind: KernelKind::Elementwise { op, bytes_moved },
            phase,
            per_head: split == Split::HeadCount,
            count: 1,
            split,
            scope: Scope::PerLayer,
        }
    }

    fn with_count(mut self, count: u64) -> Self {
        self.count = count;
        self
    }

    fn per_model(mut self) -> Self {
        self.scope = Scope::PerModel;
        self
    }

    pub fn gemm_shape(&self) -> Option<&GemmShape> {
        match &self.kind {
            KernelKind::Gemm(s) => Some(s),
            KernelKind::Elementwise { .. } => None,
        }
    }

    /// FLOPs including multiplicity; elementwise kernels count zero.
    pub fn flops(&self) -> f64 {
        self.gemm_shape().map_or(0.0, |s| s.flops() * self.count as f64)
    }
}

/// Forward kernels of one layer over `rows` sequences of length `seq`.
fn forward_layer(model: &ModelConfig, rows: u64, seq: u64, phase: Phase, dropout: bool) -> Vec<KernelNode> {
    let h = model.hidden;
    let a = model.heads;
    let d = model.head_dim();
    let p = model.precision();
    let tokens = (rows * seq) as f64;
    let hidden_elems = tokens * h as f64;
    let score_elems = (rows * a) as f64 * (seq * seq) as f64;
    let mlp_in = tokens * model.mlp1_width() as f64;
    let mlp_out = tokens * model.ffn_dim as f64;

    let mut out = vec![
        KernelNode::elementwise(ElementwiseOp::LayerNorm, 2.0 * hidden_elems * p, phase, Split::Sequence),
        KernelNode::gemm("qkv_proj", GemmShape::new(rows * seq, 3 * a * d, h, GemmRole::QkvProj), phase, Split::N),
        KernelNode::gemm(
            "attn_scores",
            GemmShape::batched(seq, seq, d, rows, GemmRole::AttnScores),
            phase,
            Split::HeadCount,
        )
        .with_count(a),
        KernelNode::elementwise(ElementwiseOp::Softmax, 2.0 * score_elems * p, phase, Split::Tensor),
    ];
    if dropout {
        out.push(KernelNode::elementwise(
            ElementwiseOp::DropoutAttn,
            2.0 * score_elems * p + score_elems,
            phase,
            Split::Tensor,
        ));
    }
    out.push(
        KernelNode::gemm(
            "attn_context",
            GemmShape::batched(seq, d, seq, rows, GemmRole::AttnContext),
            phase,
            Split::HeadCount,
        )
        .with_count(a),
    );
    out.push(KernelNode::gemm("out_proj", GemmShape::new(rows * seq, h, a * d, GemmRole::OutProj), phase, Split::K));
    if dropout {
        out.push(
            KernelNode::elementwise(
                ElementwiseOp::DropoutResidual,
                2.0 * hidden_elems * p + hidden_elems,
                phase,
                Split::Sequence,
            )
            .with_count(2),
        );
    }
    out.push(KernelNode::elementwise(ElementwiseOp::LayerNorm, 2.0 * hidden_elems * p, phase, Split::Sequence));
    out.push(KernelNode::gemm(
        "mlp1",
        GemmShape::new(rows * seq, model.mlp1_width(), h, GemmRole::Mlp1),
        phase,
        Split::N,
    ));
    out.push(KernelNode::elementwise(ElementwiseOp::Activation, (mlp_in + mlp_out) * p, phase, Split::Tensor));
    out.push(KernelNode::gemm(
        "mlp2",
        GemmShape::new(rows * seq, h, model.ffn_dim, GemmRole::Mlp2),
        phase,
        Split::K,
    ));
    out
}

/// Gradient kernels for one forward kernel: grad-input and grad-weight GEMMs,
/// or a mirrored elementwise pass.
pub fn backward_of(node: &KernelNode) -> Vec<KernelNode> {
    match node.kind {
        KernelKind::Gemm(s) => {
            let (dgrad_split, wgrad_split) = match node.split {
                Split::N => (Split::K, Split::N),
                Split::K => (Split::N, Split::M),
                other => (other, other),
            };
            let dgrad = GemmShape { m: s.m, n: s.k, k: s.n, ..s };
            let wgrad = GemmShape { m: s.k, n: s.n, k: s.m, ..s };
            vec![
                KernelNode {
                    name: format!("{}_dgrad", node.name),
                    kind: KernelKind::Gemm(dgrad),
                    phase: Phase::Bwd,
                    split: dgrad_split,
                    ..node.clone()
                },
                KernelNode {
                    name: format!("{}_wgrad", node.name),
                    kind: KernelKind::Gemm(wgrad),
                    phase: Phase::Bwd,
                    split: wgrad_split,
                    ..node.clone()
                },
            ]
        }
        KernelKind::Elementwise { .. } => vec![KernelNode {
            name: format!("{}_bwd", node.name),
            phase: Phase::Bwd,
            ..node.clone()
        }],
    }
}

/// One transformer layer for a microbatch of `b` sequences: forward kernels
/// followed by their backward counterparts.
pub fn build_training_layer(model: &ModelConfig, b: u64) -> Vec<KernelNode> {
    let fwd = forward_layer(model, b.max(1), model.seq_len, Phase::Fwd, true);
    let bwd: Vec<KernelNode> = fwd.iter().rev().flat_map(backward_of).collect();
    fwd.into_iter().chain(bwd).collect()
}

/// Per-model kernels outside the layer stack: embedding lookup and logits.
pub fn build_training_extras(model: &ModelConfig, b: u64) -> Vec<KernelNode> {
    let tokens = b.max(1) * model.seq_len;
    let embed = KernelNode::elementwise(
        ElementwiseOp::Embedding,
        tokens as f64 * model.hidden as f64 * model.precision(),
        Phase::Fwd,
        Split::None,
    )
    .per_model();
    let logits = KernelNode::gemm(
        "logits",
        GemmShape::new(tokens, model.vocab, model.hidden, GemmRole::Logits),
        Phase::Fwd,
        Split::N,
    )
    .per_model();
    let mut out = vec![embed.clone(), logits.clone()];
    out.extend(backward_of(&logits));
    out.extend(backward_of(&embed));
    out
}

fn default_batch() -> u64 {
    1
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    #[serde(default = "default_batch")]
    pub batch: u64,
    pub prompt_len: u64,
    pub gen_len: u64,
    #[serde(default = "default_true")]
    pub kv_cache: bool,
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.prompt_len == 0 {
            return Err(Error::InvalidModel("inference batch and prompt_len must be at least 1".into()));
        }
        Ok(())
    }

    pub fn max_context(&self) -> u64 {
        self.prompt_len + self.gen_len
    }
}

/// Inference kernels; decode steps are generated on demand.
#[derive(Debug, Clone)]
pub struct InferenceGraph {
    model: ModelConfig,
    inf: InferenceConfig,
    pub prefill: Vec<KernelNode>,
}

impl InferenceGraph {
    pub fn decode_steps(&self) -> u64 {
        self.inf.gen_len
    }

    /// Context attended to at decode step `t` (new token included).
    pub fn context_at(&self, t: u64) -> u64 {
        self.inf.prompt_len + t + 1
    }

    /// Kernels for generating one token at step `t` (0-based).
    pub fn decode_step(&self, t: u64) -> Vec<KernelNode> {
        let model = &self.model;
        let bsz = self.inf.batch;
        let ctx = self.context_at(t);
        let mut out = if self.inf.kv_cache {
            decode_layer_cached(model, bsz, ctx)
        } else {
            forward_layer(model, bsz, ctx, Phase::Decode, false)
        };
        out.push(
            KernelNode::gemm(
                "logits",
                GemmShape::new(bsz, model.vocab, model.hidden, GemmRole::Logits),
                Phase::Decode,
                Split::N,
            )
            .per_model(),
        );
        out
    }
}

fn decode_layer_cached(model: &ModelConfig, bsz: u64, ctx: u64) -> Vec<KernelNode> {
    let h = model.hidden;
    let a = model.heads;
    let d = model.head_dim();
    let p = model.precision();
    let hidden_elems = (bsz * h) as f64;
    let score_elems = (bsz * a * ctx) as f64;
    let phase = Phase::Decode;
    vec![
        KernelNode::elementwise(ElementwiseOp::LayerNorm, 2.0 * hidden_elems * p, phase, Split::Sequence),
        KernelNode::gemm("qkv_proj", GemmShape::new(bsz, 3 * a * d, h, GemmRole::QkvProj), phase, Split::N),
        KernelNode::gemm(
            "attn_scores",
            GemmShape::batched(1, ctx, d, bsz * a, GemmRole::AttnScores),
            phase,
            Split::HeadBatch,
        ),
        KernelNode::elementwise(ElementwiseOp::Softmax, 2.0 * score_elems * p, phase, Split::Tensor),
        KernelNode::gemm(
            "attn_context",
            GemmShape::batched(1, d, ctx, bsz * a, GemmRole::AttnContext),
            phase,
            Split::HeadBatch,
        ),
        KernelNode::gemm("out_proj", GemmShape::new(bsz, h, a * d, GemmRole::OutProj), phase, Split::K),
        KernelNode::elementwise(ElementwiseOp::LayerNorm, 2.0 * hidden_elems * p, phase, Split::Sequence),
        KernelNode::gemm("mlp1", GemmShape::new(bsz, model.mlp1_width(), h, GemmRole::Mlp1), phase, Split::N),
        KernelNode::elementwise(
            ElementwiseOp::Activation,
            (bsz * (model.mlp1_width() + model.ffn_dim)) as f64 * p,
            phase,
            Split::Tensor,
        ),
        KernelNode::gemm("mlp2", GemmShape::new(bsz, h, model.ffn_dim, GemmRole::Mlp2), phase, Split::K),
    ]
}

pub fn build_inference_graph(model: &ModelConfig, inf: &InferenceConfig) -> InferenceGraph {
    let mut prefill = forward_layer(model, inf.batch, inf.prompt_len, Phase::Prefill, false);
    prefill.push(
        KernelNode::elementwise(
            ElementwiseOp::Embedding,
            (inf.batch * inf.prompt_len * model.hidden) as f64 * model.precision(),
            Phase::Prefill,
            Split::None,
        )
        .per_model(),
    );
    // Only the last prompt position needs logits.
    prefill.push(
        KernelNode::gemm(
            "logits",
            GemmShape::new(inf.batch, model.vocab, model.hidden, GemmRole::Logits),
            Phase::Prefill,
            Split::N,
        )
        .per_model(),
    );
    InferenceGraph {
        model: model.clone(),
        inf: inf.clone(),
        prefill,
    }
}

/// Per-layer activation sizes in bytes for one microbatch on one TP/SP shard.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationProfile {
    pub a_tot: f64,
    pub a_inp: f64,
    pub a_sm: f64,
    pub a_do_mask: f64,
    pub a_do_out: f64,
}

impl ActivationProfile {
    /// Bytes selective recomputation drops.
    pub fn recomputable(&self) -> f64 {
        self.a_sm + self.a_do_mask + self.a_do_out
    }
}

/// Activation sizes with `tp`-way head sharding and `sp`-way sequence sharding
/// of the layer-norm/dropout terms (sp = 1 means SP off).
pub fn activation_profile(model: &ModelConfig, b: u64, tp: u64, sp: u64) -> ActivationProfile {
    let (s, h, a) = (model.seq_len as f64, model.hidden as f64, model.heads as f64);
    let p = model.precision();
    let (tp, sp) = (tp.max(1) as f64, sp.max(1) as f64);
    let bsh = b as f64 * s * h;
    let c = model.activation_const;
    // Of the b·s·h constant, 24 covers TP-sharded tensors and the rest the
    // layer-norm/dropout tensors that only SP shards.
    let tp_part = 24.0_f64.min(c);
    let seq_part = c - tp_part;
    let attn = model.attention_activation_const * a * s / h;
    let a_tot = bsh * (seq_part / sp + tp_part / tp + attn / tp) * (p / 2.0);
    let scores = b as f64 * (a / tp) * s * s;
    ActivationProfile {
        a_tot,
        a_inp: bsh * p / sp,
        a_sm: scores * p,
        a_do_mask: scores,
        a_do_out: scores * p,
    }
}
