//! Per-device memory accounting: static state, activations under the three
//! recomputation modes, and KV-cache.

use serde::{Deserialize, Serialize};

use crate::arch::DeviceSpec;
use crate::error::{Error, Result};
use crate::parallelism::{inflight_activation_multiplier, ParallelismConfig, RecomputeMode};
use crate::workload::{activation_profile, ActivationProfile, InferenceConfig, ModelConfig};

/// fp32 master weights plus two Adam moments.
pub const DEFAULT_OPTIMIZER_BYTES_PER_PARAM: f64 = 12.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryFootprint {
    pub weights: u64,
    pub gradients: u64,
    pub optimizer: u64,
    pub activations: u64,
    pub kv_cache: u64,
    pub total: u64,
}

impl MemoryFootprint {
    pub fn new(weights: u64, gradients: u64, optimizer: u64, activations: u64, kv_cache: u64) -> Self {
        MemoryFootprint {
            weights,
            gradients,
            optimizer,
            activations,
            kv_cache,
            total: weights + gradients + optimizer + activations + kv_cache,
        }
    }

    pub fn components(&self) -> [(&'static str, u64); 5] {
        [
            ("weights", self.weights),
            ("gradients", self.gradients),
            ("optimizer", self.optimizer),
            ("activations", self.activations),
            ("kv_cache", self.kv_cache),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecomputePlan {
    pub mode: RecomputeMode,
    /// Used by full recomputation; `None` picks the optimum.
    pub checkpoints: Option<u64>,
}

impl RecomputePlan {
    pub fn from_parallelism(par: &ParallelismConfig) -> Self {
        RecomputePlan {
            mode: par.recompute,
            checkpoints: par.checkpoints,
        }
    }
}

/// Full-recomputation activation bytes for `checkpoints` checkpoints.
pub fn full_recompute_bytes(layers: f64, a_inp: f64, a_tot: f64, checkpoints: f64) -> f64 {
    checkpoints * a_inp + layers / checkpoints * (a_tot - a_inp)
}

/// Selective-recomputation activation bytes.
pub fn selective_recompute_bytes(layers: f64, profile: &ActivationProfile) -> f64 {
    layers * (profile.a_tot - (profile.a_sm + profile.a_do_mask + profile.a_do_out))
}

/// Checkpoint count minimizing full-recomputation memory.
pub fn optimal_checkpoints(layers: u64, a_inp: f64, a_tot: f64) -> u64 {
    if layers <= 1 || a_inp <= 0.0 || a_tot <= a_inp {
        return 1;
    }
    let l = layers as f64;
    let continuous = (l * (a_tot - a_inp) / a_inp).sqrt();
    let lo = (continuous.floor() as u64).clamp(1, layers);
    let hi = (continuous.ceil() as u64).clamp(1, layers);
    let cost = |n: u64| full_recompute_bytes(l, a_inp, a_tot, n as f64);
    if cost(hi) < cost(lo) {
        hi
    } else {
        lo
    }
}

/// Stored activation bytes for `layers` layers on one device with
/// `inflight_multiplier` microbatches alive. Under full recomputation each
/// microbatch keeps only its checkpoints; the segment being recomputed is
/// materialized for one microbatch at a time.
pub fn activation_memory(
    profile: &ActivationProfile,
    layers: u64,
    plan: &RecomputePlan,
    inflight_multiplier: u64,
) -> Result<f64> {
    let l = layers as f64;
    let k = inflight_multiplier as f64;
    Ok(match plan.mode {
        RecomputeMode::None => k * l * profile.a_tot,
        RecomputeMode::Selective => k * selective_recompute_bytes(l, profile),
        RecomputeMode::Full => {
            let segment = profile.a_tot - profile.a_inp;
            let n = match plan.checkpoints {
                Some(n) if n == 0 || n > layers => {
                    return Err(Error::InvalidRecompute(format!(
                        "checkpoints must be in [1, {layers}], got {n}"
                    )))
                }
                Some(n) => n,
                // Same objective with the checkpoint term weighted by k.
                None => optimal_checkpoints(layers, k * profile.a_inp, k * profile.a_inp + segment),
            };
            k * n as f64 * profile.a_inp + l / n as f64 * segment
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StaticMemory {
    pub weights: u64,
    pub gradients: u64,
    pub optimizer: u64,
}

/// Weights, gradients and optimizer state per device; replicated across DP.
pub fn static_memory(model: &ModelConfig, par: &ParallelismConfig, optimizer_bytes_per_param: f64) -> StaticMemory {
    let local = model.parameters() / (par.tp * par.pp) as f64;
    let p = model.precision();
    StaticMemory {
        weights: (local * p).round() as u64,
        gradients: (local * p).round() as u64,
        optimizer: (local * optimizer_bytes_per_param).round() as u64,
    }
}

/// 2 (K and V) × batch × context × precision × layers × hidden, split over TP.
pub fn kv_cache_size(model: &ModelConfig, inf: &InferenceConfig, context: u64, tp: u64) -> u64 {
    let product: u128 = 2
        * inf.batch as u128
        * context as u128
        * model.precision_bytes as u128
        * model.layers as u128
        * model.hidden as u128;
    (product / tp.max(1) as u128) as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FitCheck {
    pub fits: bool,
    /// Capacity minus total; negative on overflow.
    pub headroom: i64,
}

pub fn fits(footprint: &MemoryFootprint, device: &DeviceSpec) -> FitCheck {
    let capacity = device.dram_capacity().round() as i128;
    let headroom = capacity - footprint.total as i128;
    FitCheck {
        fits: headroom >= 0,
        headroom: headroom.clamp(i64::MIN as i128, i64::MAX as i128) as i64,
    }
}

/// Layers held by the busiest pipeline stage.
pub fn layers_per_stage(model: &ModelConfig, par: &ParallelismConfig) -> u64 {
    model.layers.div_ceil(par.pp.max(1))
}

/// Training footprint of the busiest device.
pub fn training_footprint(
    model: &ModelConfig,
    par: &ParallelismConfig,
    optimizer_bytes_per_param: f64,
) -> Result<MemoryFootprint> {
    let st = static_memory(model, par, optimizer_bytes_per_param);
    let profile = activation_profile(model, par.microbatch_size, par.tp, par.sp);
    let act = activation_memory(
        &profile,
        layers_per_stage(model, par),
        &RecomputePlan::from_parallelism(par),
        inflight_activation_multiplier(par),
    )?;
    Ok(MemoryFootprint::new(st.weights, st.gradients, st.optimizer, act.round() as u64, 0))
}

/// Inference footprint: sharded weights plus the KV-cache at full context.
pub fn inference_footprint(model: &ModelConfig, inf: &InferenceConfig, tp: u64) -> MemoryFootprint {
    let weights = (model.parameters() * model.precision() / tp.max(1) as f64).round() as u64;
    let kv = if inf.kv_cache {
        kv_cache_size(model, inf, inf.max_context(), tp)
    } else {
        0
    };
    MemoryFootprint::new(weights, 0, 0, 0, kv)
}
