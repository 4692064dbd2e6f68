//! Hierarchical roofline pricing of single kernels.
//!
//! A GEMM's traffic at each memory level comes from the best power-of-two
//! tiling that fits (double-buffered) in the next faster level; the kernel
//! takes as long as the slowest of compute and every level's transfer time.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::arch::{DeviceSpec, MemLevel, MemoryLevel, Precision};
use crate::error::{Error, Result};
use crate::workload::{GemmShape, KernelKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Bound {
    #[serde(rename = "compute")]
    Compute,
    L1,
    L2,
    #[serde(rename = "DRAM")]
    Dram,
}

impl Bound {
    pub const ALL: [Bound; 4] = [Bound::Compute, Bound::L1, Bound::L2, Bound::Dram];

    pub fn as_str(self) -> &'static str {
        match self {
            Bound::Compute => "compute",
            Bound::L1 => "L1",
            Bound::L2 => "L2",
            Bound::Dram => "DRAM",
        }
    }

    pub fn is_memory(self) -> bool {
        self != Bound::Compute
    }
}

impl From<MemLevel> for Bound {
    fn from(l: MemLevel) -> Self {
        match l {
            MemLevel::L1 => Bound::L1,
            MemLevel::L2 => Bound::L2,
            MemLevel::Dram => Bound::Dram,
        }
    }
}

impl fmt::Display for Bound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn d_gemv_util() -> f64 {
    0.78
}
fn d_compute_eff() -> f64 {
    0.85
}
fn d_elem_util() -> f64 {
    0.8
}
fn d_gemm_setup() -> f64 {
    5.5e6
}
fn d_gemv_setup() -> f64 {
    14e6
}
fn d_skinny() -> u64 {
    16
}
fn d_max_tile() -> u64 {
    1024
}
fn d_max_tile_elems() -> u64 {
    512 * 512
}
fn d_inf_link() -> f64 {
    0.75
}
fn d_train_link() -> f64 {
    1.0
}

/// Efficiency knobs applied on top of peak device numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilizationPolicy {
    #[serde(default = "d_gemv_util")]
    pub gemv_dram_utilization: f64,
    #[serde(default = "d_compute_eff")]
    pub compute_efficiency: f64,
    #[serde(default = "d_elem_util")]
    pub elementwise_dram_utilization: f64,
    /// Fixed DRAM transfer overhead per GEMM kernel, in bytes.
    #[serde(default = "d_gemm_setup")]
    pub gemm_dram_setup_bytes: f64,
    /// Fixed DRAM transfer overhead per GEMV kernel, in bytes.
    #[serde(default = "d_gemv_setup")]
    pub gemv_dram_setup_bytes: f64,
    /// GEMMs with at most this many rows take the GEMV path.
    #[serde(default = "d_skinny")]
    pub skinny_rows: u64,
    #[serde(default = "d_max_tile")]
    pub max_tile: u64,
    /// Cap on output-tile elements t_m·t_n, i.e. accumulator state per pass.
    #[serde(default = "d_max_tile_elems")]
    pub max_tile_elems: u64,
    /// Link utilization for inference-scale collectives.
    #[serde(default = "d_inf_link")]
    pub inference_link_utilization: f64,
    #[serde(default = "d_train_link")]
    pub training_link_utilization: f64,
}

impl Default for UtilizationPolicy {
    fn default() -> Self {
        UtilizationPolicy {
            gemv_dram_utilization: d_gemv_util(),
            compute_efficiency: d_compute_eff(),
            elementwise_dram_utilization: d_elem_util(),
            gemm_dram_setup_bytes: d_gemm_setup(),
            gemv_dram_setup_bytes: d_gemv_setup(),
            skinny_rows: d_skinny(),
            max_tile: d_max_tile(),
            max_tile_elems: d_max_tile_elems(),
            inference_link_utilization: d_inf_link(),
            training_link_utilization: d_train_link(),
        }
    }
}

impl UtilizationPolicy {
    /// Plain roofline: every factor 1, no setup overhead.
    pub fn ideal() -> Self {
        UtilizationPolicy {
            gemv_dram_utilization: 1.0,
            compute_efficiency: 1.0,
            elementwise_dram_utilization: 1.0,
            gemm_dram_setup_bytes: 0.0,
            gemv_dram_setup_bytes: 0.0,
            inference_link_utilization: 1.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fractions = [
            ("gemv_dram_utilization", self.gemv_dram_utilization),
            ("compute_efficiency", self.compute_efficiency),
            ("elementwise_dram_utilization", self.elementwise_dram_utilization),
            ("inference_link_utilization", self.inference_link_utilization),
            ("training_link_utilization", self.training_link_utilization),
        ];
        for (name, v) in fractions {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("policy.{name} must be in (0, 1], got {v}")));
            }
        }
        if !(self.gemm_dram_setup_bytes >= 0.0 && self.gemv_dram_setup_bytes >= 0.0) {
            return Err(Error::Config("policy setup bytes must be non-negative".into()));
        }
        if self.max_tile == 0 || !self.max_tile.is_power_of_two() {
            return Err(Error::Config("policy.max_tile must be a power of two".into()));
        }
        if self.max_tile_elems == 0 {
            return Err(Error::Config("policy.max_tile_elems must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelEstimate {
    pub compute_time: f64,
    pub memory_time: BTreeMap<MemLevel, f64>,
    /// Bytes moved at each level.
    pub traffic: BTreeMap<MemLevel, f64>,
    pub effective_time: f64,
    pub bound: Bound,
}

impl KernelEstimate {
    fn assemble(compute_time: f64, memory_time: BTreeMap<MemLevel, f64>, traffic: BTreeMap<MemLevel, f64>) -> Self {
        let mut bound = Bound::Compute;
        let mut effective = compute_time;
        for (level, t) in &memory_time {
            if *t > effective {
                effective = *t;
                bound = (*level).into();
            }
        }
        KernelEstimate {
            compute_time,
            memory_time,
            traffic,
            effective_time: effective,
            bound,
        }
    }

    /// Time of the component named by `bound`.
    pub fn time_of(&self, bound: Bound) -> f64 {
        match bound {
            Bound::Compute => self.compute_time,
            Bound::L1 => self.memory_time.get(&MemLevel::L1).copied().unwrap_or(0.0),
            Bound::L2 => self.memory_time.get(&MemLevel::L2).copied().unwrap_or(0.0),
            Bound::Dram => self.memory_time.get(&MemLevel::Dram).copied().unwrap_or(0.0),
        }
    }

    /// Same estimate for `n` back-to-back executions.
    pub fn repeated(&self, n: f64) -> KernelEstimate {
        KernelEstimate {
            compute_time: self.compute_time * n,
            memory_time: self.memory_time.iter().map(|(k, v)| (*k, v * n)).collect(),
            traffic: self.traffic.iter().map(|(k, v)| (*k, v * n)).collect(),
            effective_time: self.effective_time * n,
            bound: self.bound,
        }
    }

    /// Component-wise sum; the bound is recomputed from the summed times.
    pub fn accumulate(&self, other: &KernelEstimate) -> KernelEstimate {
        let mut memory_time = self.memory_time.clone();
        for (k, v) in &other.memory_time {
            *memory_time.entry(*k).or_insert(0.0) += v;
        }
        let mut traffic = self.traffic.clone();
        for (k, v) in &other.traffic {
            *traffic.entry(*k).or_insert(0.0) += v;
        }
        let mut out = KernelEstimate::assemble(self.compute_time + other.compute_time, memory_time, traffic);
        out.effective_time = self.effective_time + other.effective_time;
        out
    }
}

/// Element traffic for one matrix product under the best tiling whose
/// double-buffered working set fits in `capacity` bytes. Edges are powers of
/// two up to `max_tile` and the output tile holds at most `max_tile_elems`.
pub fn tiled_traffic_elems(
    m: u64,
    n: u64,
    k: u64,
    capacity: f64,
    precision: f64,
    max_tile: u64,
    max_tile_elems: u64,
) -> f64 {
    let (mf, nf, kf) = (m as f64, n as f64, k as f64);
    let traffic = |tm: u64, tn: u64| {
        mf * kf * n.div_ceil(tn) as f64 + kf * nf * m.div_ceil(tm) as f64 + mf * nf
    };
    let mut best = traffic(1, 1);
    let mut edges = Vec::new();
    let mut e = 1;
    while e <= max_tile {
        edges.push(e);
        e *= 2;
    }
    for &tm in &edges {
        if tm / 2 >= m {
            break;
        }
        for &tn in &edges {
            if tn / 2 >= n || tm * tn > max_tile_elems {
                break;
            }
            let fits = edges.iter().any(|&tk| {
                2.0 * (tm * tk + tk * tn + tm * tn) as f64 * precision <= capacity
            });
            if fits {
                best = best.min(traffic(tm, tn));
            }
        }
    }
    best
}

fn check_shape(shape: &GemmShape) -> Result<()> {
    const LIMIT: u64 = 1 << 40;
    if shape.m == 0 || shape.n == 0 || shape.k == 0 || shape.batch == 0 {
        return Err(Error::ShapeTooLarge(format!("degenerate GEMM {shape:?}")));
    }
    if [shape.m, shape.n, shape.k, shape.batch].iter().any(|d| *d > LIMIT) || !shape.flops().is_finite() {
        return Err(Error::ShapeTooLarge(format!("{shape:?}")));
    }
    Ok(())
}

/// Everything fetched from a slower level also streams through each faster
/// one, so on-chip traffic never drops below what the level beneath it moves
/// (including that level's fixed per-kernel bytes).
fn inclusive_traffic(hierarchy: &[MemoryLevel], bytes: &mut [f64], extra: impl Fn(&MemoryLevel) -> f64) {
    for i in (0..hierarchy.len().saturating_sub(1)).rev() {
        let below = bytes[i + 1] + extra(&hierarchy[i + 1]);
        bytes[i] = bytes[i].max(below);
    }
}

fn price_gemm(
    shape: &GemmShape,
    device: &DeviceSpec,
    precision_bytes: u32,
    policy: &UtilizationPolicy,
    dram_util: f64,
    setup_bytes: f64,
) -> Result<KernelEstimate> {
    check_shape(shape)?;
    let precision = Precision::from_bytes(precision_bytes)?;
    let p = precision_bytes as f64;
    let compute_time = shape.flops() / (device.throughput_for(precision)? * policy.compute_efficiency);

    let min_bytes = shape.min_traffic_elems() * p;
    let mut raw: Vec<f64> = device
        .hierarchy
        .iter()
        .enumerate()
        .map(|(i, level)| {
            // Data served by this level is reused out of the next faster one.
            let tile_capacity = if i == 0 {
                level.capacity
            } else {
                device.hierarchy[i - 1].capacity
            };
            let elems = tiled_traffic_elems(
                shape.m,
                shape.n,
                shape.k,
                tile_capacity,
                p,
                policy.max_tile,
                policy.max_tile_elems,
            );
            let bytes = shape.batch as f64 * elems * p;
            if level.is_offchip {
                bytes.max(min_bytes)
            } else {
                bytes
            }
        })
        .collect();
    let offchip_extra = |level: &MemoryLevel| if level.is_offchip { setup_bytes } else { 0.0 };
    inclusive_traffic(&device.hierarchy, &mut raw, offchip_extra);

    let mut memory_time = BTreeMap::new();
    let mut traffic = BTreeMap::new();
    for (level, bytes) in device.hierarchy.iter().zip(raw) {
        let time = if level.is_offchip {
            (bytes + setup_bytes) / (level.bandwidth * dram_util)
        } else {
            bytes / level.bandwidth
        };
        traffic.insert(level.name, bytes);
        memory_time.insert(level.name, time);
    }
    Ok(KernelEstimate::assemble(compute_time, memory_time, traffic))
}

/// Fat GEMM: plain hierarchical roofline.
pub fn estimate_gemm(
    shape: &GemmShape,
    device: &DeviceSpec,
    precision_bytes: u32,
    policy: &UtilizationPolicy,
) -> Result<KernelEstimate> {
    price_gemm(shape, device, precision_bytes, policy, 1.0, policy.gemm_dram_setup_bytes)
}

/// Skinny GEMM / GEMV: DRAM bandwidth derated by the GEMV utilization factor.
pub fn estimate_gemv(
    shape: &GemmShape,
    device: &DeviceSpec,
    precision_bytes: u32,
    policy: &UtilizationPolicy,
) -> Result<KernelEstimate> {
    price_gemm(
        shape,
        device,
        precision_bytes,
        policy,
        policy.gemv_dram_utilization,
        policy.gemv_dram_setup_bytes,
    )
}

pub fn estimate_elementwise(bytes_moved: f64, device: &DeviceSpec, policy: &UtilizationPolicy) -> KernelEstimate {
    let mut memory_time = BTreeMap::new();
    let mut traffic = BTreeMap::new();
    for level in &device.hierarchy {
        let bandwidth = if level.is_offchip {
            level.bandwidth * policy.elementwise_dram_utilization
        } else {
            level.bandwidth
        };
        memory_time.insert(level.name, bytes_moved / bandwidth);
        traffic.insert(level.name, bytes_moved);
    }
    KernelEstimate::assemble(0.0, memory_time, traffic)
}

/// Dispatch on kernel kind; GEMMs with few rows take the GEMV path.
pub fn estimate_kernel(
    kind: &KernelKind,
    device: &DeviceSpec,
    precision_bytes: u32,
    policy: &UtilizationPolicy,
) -> Result<KernelEstimate> {
    match kind {
        KernelKind::Gemm(shape) if shape.m <= policy.skinny_rows => {
            estimate_gemv(shape, device, precision_bytes, policy)
        }
        KernelKind::Gemm(shape) => estimate_gemm(shape, device, precision_bytes, policy),
        KernelKind::Elementwise { bytes_moved, .. } => Ok(estimate_elementwise(*bytes_moved, device, policy)),
    }
}
