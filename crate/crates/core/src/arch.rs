//! Hardware abstraction: devices with a memory hierarchy, network links,
//! clusters, and the technology-node / area-budget transforms that produce
//! new devices from a calibrated reference.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Numeric format a kernel runs in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Fp32,
    Tf32,
    Fp16,
    Bf16,
    Fp8,
    Fp4,
}

impl Precision {
    pub const ALL: [Precision; 6] = [
        Precision::Fp32,
        Precision::Tf32,
        Precision::Fp16,
        Precision::Bf16,
        Precision::Fp8,
        Precision::Fp4,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Precision::Fp32 => "fp32",
            Precision::Tf32 => "tf32",
            Precision::Fp16 => "fp16",
            Precision::Bf16 => "bf16",
            Precision::Fp8 => "fp8",
            Precision::Fp4 => "fp4",
        }
    }

    /// Precision used for a given element width. Two-byte elements map to fp16.
    pub fn from_bytes(bytes: u32) -> Result<Self> {
        match bytes {
            4 => Ok(Precision::Fp32),
            2 => Ok(Precision::Fp16),
            1 => Ok(Precision::Fp8),
            other => Err(Error::UnknownPrecision(format!("{other}-byte elements"))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Precision::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownPrecision(s.to_string()))
    }
}

/// Levels of the device memory hierarchy, fastest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MemLevel {
    L1,
    L2,
    #[serde(rename = "DRAM")]
    Dram,
}

impl MemLevel {
    pub const ALL: [MemLevel; 3] = [MemLevel::L1, MemLevel::L2, MemLevel::Dram];

    pub fn as_str(self) -> &'static str {
        match self {
            MemLevel::L1 => "L1",
            MemLevel::L2 => "L2",
            MemLevel::Dram => "DRAM",
        }
    }
}

impl fmt::Display for MemLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MemLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MemLevel::ALL
            .into_iter()
            .find(|l| l.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidDevice(format!("unknown memory level `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryLevel {
    pub name: MemLevel,
    /// Bytes.
    pub capacity: f64,
    /// Bytes per second.
    pub bandwidth: f64,
    pub is_offchip: bool,
}

/// The architecture abstraction record every estimator consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub name: String,
    /// FLOP/s per precision.
    pub throughput: BTreeMap<Precision, f64>,
    /// Ordered fastest (L1) to slowest (DRAM).
    pub hierarchy: Vec<MemoryLevel>,
}

impl DeviceSpec {
    pub fn dram(&self) -> &MemoryLevel {
        self.hierarchy.last().expect("validated hierarchy is non-empty")
    }

    /// Alias of the off-chip level's capacity.
    pub fn dram_capacity(&self) -> f64 {
        self.dram().capacity
    }

    pub fn level(&self, name: MemLevel) -> Option<&MemoryLevel> {
        self.hierarchy.iter().find(|l| l.name == name)
    }

    pub fn throughput_for(&self, precision: Precision) -> Result<f64> {
        self.throughput
            .get(&precision)
            .copied()
            .ok_or_else(|| Error::UnknownPrecision(format!("{precision} not supported by {}", self.name)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.throughput.is_empty() {
            return Err(Error::InvalidDevice(format!("{}: no throughput entries", self.name)));
        }
        for (p, t) in &self.throughput {
            if !(t.is_finite() && *t > 0.0) {
                return Err(Error::InvalidDevice(format!(
                    "{}: throughput for {p} must be positive, got {t}",
                    self.name
                )));
            }
        }
        let Some(last) = self.hierarchy.last() else {
            return Err(Error::InvalidDevice(format!("{}: empty memory hierarchy", self.name)));
        };
        if last.name != MemLevel::Dram || !last.is_offchip {
            return Err(Error::InvalidDevice(format!("{}: missing DRAM level", self.name)));
        }
        let offchip = self.hierarchy.iter().filter(|l| l.is_offchip).count();
        if offchip != 1 {
            return Err(Error::InvalidDevice(format!(
                "{}: exactly one off-chip level expected, found {offchip}",
                self.name
            )));
        }
        for pair in self.hierarchy.windows(2) {
            if pair[0].name >= pair[1].name {
                return Err(Error::InvalidDevice(format!(
                    "{}: levels out of order ({} before {})",
                    self.name, pair[0].name, pair[1].name
                )));
            }
        }
        for level in &self.hierarchy {
            if !(level.capacity.is_finite() && level.capacity > 0.0) {
                return Err(Error::InvalidDevice(format!(
                    "{}: {} capacity must be positive",
                    self.name, level.name
                )));
            }
            if !(level.bandwidth.is_finite() && level.bandwidth > 0.0) {
                return Err(Error::InvalidDevice(format!(
                    "{}: {} bandwidth must be positive",
                    self.name, level.name
                )));
            }
        }
        Ok(())
    }

    /// Copy with the off-chip level swapped for a different memory generation.
    pub fn with_dram(&self, dram: &DramPreset) -> DeviceSpec {
        let mut out = self.clone();
        let last = out.hierarchy.last_mut().expect("validated hierarchy");
        last.bandwidth = dram.bandwidth;
        if let Some(cap) = dram.capacity {
            last.capacity = cap;
        }
        out.name = format!("{}+{}", self.name, dram.name);
        out
    }

    /// Multiply compute throughput and every bandwidth by `c`.
    pub fn scaled_uniform(&self, c: f64) -> DeviceSpec {
        let mut out = self.clone();
        for t in out.throughput.values_mut() {
            *t *= c;
        }
        for l in &mut out.hierarchy {
            l.bandwidth *= c;
        }
        out
    }

    pub fn to_description(&self) -> DeviceDescription {
        DeviceDescription {
            name: self.name.clone(),
            throughput: self
                .throughput
                .iter()
                .map(|(p, t)| (p.as_str().to_string(), *t))
                .collect(),
            levels: self
                .hierarchy
                .iter()
                .map(|l| {
                    (
                        l.name.as_str().to_string(),
                        LevelDescription {
                            capacity: l.capacity,
                            bandwidth: l.bandwidth,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// High-level device record as written in preset files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceDescription {
    pub name: String,
    pub throughput: BTreeMap<String, f64>,
    pub levels: BTreeMap<String, LevelDescription>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelDescription {
    pub capacity: f64,
    pub bandwidth: f64,
}

/// Default L1 derived from L2 when a description omits it.
pub const DEFAULT_L1_CAPACITY_OF_L2: f64 = 0.25;
pub const DEFAULT_L1_BANDWIDTH_OF_L2: f64 = 4.0;

pub fn resolve_device(desc: &DeviceDescription) -> Result<DeviceSpec> {
    let mut throughput = BTreeMap::new();
    for (key, value) in &desc.throughput {
        throughput.insert(key.parse::<Precision>()?, *value);
    }

    let mut levels: BTreeMap<MemLevel, LevelDescription> = BTreeMap::new();
    for (key, level) in &desc.levels {
        levels.insert(key.parse::<MemLevel>()?, *level);
    }
    let dram = levels
        .get(&MemLevel::Dram)
        .copied()
        .ok_or_else(|| Error::InvalidDevice(format!("{}: missing DRAM level", desc.name)))?;
    let l2 = levels
        .get(&MemLevel::L2)
        .copied()
        .ok_or_else(|| Error::InvalidDevice(format!("{}: missing L2 level", desc.name)))?;
    let l1 = levels.get(&MemLevel::L1).copied().unwrap_or(LevelDescription {
        capacity: DEFAULT_L1_CAPACITY_OF_L2 * l2.capacity,
        bandwidth: DEFAULT_L1_BANDWIDTH_OF_L2 * l2.bandwidth,
    });

    let level = |name, d: LevelDescription, is_offchip| MemoryLevel {
        name,
        capacity: d.capacity,
        bandwidth: d.bandwidth,
        is_offchip,
    };
    let spec = DeviceSpec {
        name: desc.name.clone(),
        throughput,
        hierarchy: vec![
            level(MemLevel::L1, l1, false),
            level(MemLevel::L2, l2, false),
            level(MemLevel::Dram, dram, true),
        ],
    };
    spec.validate()?;
    Ok(spec)
}

/// Off-chip memory generation used to swap a device's DRAM level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DramPreset {
    #[serde(default)]
    pub name: String,
    pub bandwidth: f64,
    #[serde(default)]
    pub capacity: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    #[default]
    Ring,
    DoubleBinaryTree,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkLink {
    #[serde(default)]
    pub name: String,
    /// Bytes per second.
    pub bandwidth: f64,
    /// Seconds per hop.
    pub latency: f64,
    #[serde(default = "one")]
    pub utilization: f64,
    #[serde(default)]
    pub topology: Topology,
}

fn one() -> f64 {
    1.0
}

impl NetworkLink {
    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth.is_finite() && self.bandwidth > 0.0) {
            return Err(Error::InvalidCluster(format!("link `{}`: bandwidth must be positive", self.name)));
        }
        if !(self.latency.is_finite() && self.latency >= 0.0) {
            return Err(Error::InvalidCluster(format!("link `{}`: latency must be non-negative", self.name)));
        }
        if !(self.utilization > 0.0 && self.utilization <= 1.0) {
            return Err(Error::InvalidCluster(format!(
                "link `{}`: utilization must be in (0, 1], got {}",
                self.name, self.utilization
            )));
        }
        Ok(())
    }

    pub fn effective_bandwidth(&self) -> f64 {
        self.bandwidth * self.utilization
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub name: String,
    pub device: DeviceSpec,
    pub devices_per_node: u32,
    pub intra_link: NetworkLink,
    /// Per-node aggregate; shared by every device on the node.
    pub inter_link: NetworkLink,
    pub total_devices: u32,
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<()> {
        self.device.validate()?;
        self.intra_link.validate()?;
        self.inter_link.validate()?;
        if self.devices_per_node == 0 || self.total_devices == 0 {
            return Err(Error::InvalidCluster(format!("{}: device counts must be positive", self.name)));
        }
        if self.total_devices > self.devices_per_node && self.total_devices % self.devices_per_node != 0 {
            return Err(Error::InvalidCluster(format!(
                "{}: total_devices {} is not a multiple of devices_per_node {}",
                self.name, self.total_devices, self.devices_per_node
            )));
        }
        Ok(())
    }

    /// Non-fatal oddities worth surfacing to the user.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.intra_link.bandwidth < self.inter_link.bandwidth {
            out.push(format!(
                "{}: intra-node bandwidth {} B/s is below inter-node {} B/s",
                self.name, self.intra_link.bandwidth, self.inter_link.bandwidth
            ));
        }
        out
    }

    pub fn nodes(&self) -> u32 {
        self.total_devices.div_ceil(self.devices_per_node)
    }

    pub fn with_total_devices(&self, n: u32) -> ClusterSpec {
        ClusterSpec {
            total_devices: n,
            ..self.clone()
        }
    }
}

/// Logic technology node ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TechNode {
    N12,
    N10,
    N7,
    N5,
    N3,
    N2,
    N1,
}

impl TechNode {
    pub const ALL: [TechNode; 7] = [
        TechNode::N12,
        TechNode::N10,
        TechNode::N7,
        TechNode::N5,
        TechNode::N3,
        TechNode::N2,
        TechNode::N1,
    ];

    pub fn index(self) -> i32 {
        TechNode::ALL.iter().position(|n| *n == self).expect("listed") as i32
    }

    /// Signed number of node steps from `self` to `to`.
    pub fn steps_to(self, to: TechNode) -> i32 {
        to.index() - self.index()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TechNode::N12 => "N12",
            TechNode::N10 => "N10",
            TechNode::N7 => "N7",
            TechNode::N5 => "N5",
            TechNode::N3 => "N3",
            TechNode::N2 => "N2",
            TechNode::N1 => "N1",
        }
    }
}

impl fmt::Display for TechNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TechNode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TechNode::ALL
            .into_iter()
            .find(|n| n.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownNode(s.to_string()))
    }
}

/// Per-step density and power-efficiency gains between consecutive nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeScaling {
    pub area_scale: f64,
    pub power_scale: f64,
}

impl Default for NodeScaling {
    fn default() -> Self {
        NodeScaling {
            area_scale: 1.8,
            power_scale: 1.3,
        }
    }
}

impl NodeScaling {
    pub fn area_factor(&self, from: TechNode, to: TechNode) -> f64 {
        self.area_scale.powi(from.steps_to(to))
    }

    pub fn power_factor(&self, from: TechNode, to: TechNode) -> f64 {
        self.power_scale.powi(from.steps_to(to))
    }
}

/// Iso-area node transform with the default ladder factors.
pub fn scale_node(base: &DeviceSpec, from: TechNode, to: TechNode) -> DeviceSpec {
    scale_node_with(base, from, to, NodeScaling::default())
}

/// Compute and on-chip caches grow by `area_scale^steps`; DRAM is untouched.
pub fn scale_node_with(base: &DeviceSpec, from: TechNode, to: TechNode, scaling: NodeScaling) -> DeviceSpec {
    if from == to {
        return base.clone();
    }
    let factor = scaling.area_factor(from, to);
    let mut out = base.clone();
    for t in out.throughput.values_mut() {
        *t *= factor;
    }
    for level in out.hierarchy.iter_mut().filter(|l| !l.is_offchip) {
        level.capacity *= factor;
        level.bandwidth *= factor;
    }
    out.name = format!("{}@{}", base.name, to);
    out
}

/// Die resources a design point distributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Compute,
    L2Cache,
    DramInterface,
    NetworkInterface,
}

impl Component {
    pub const ALL: [Component; 4] = [
        Component::Compute,
        Component::L2Cache,
        Component::DramInterface,
        Component::NetworkInterface,
    ];

    /// Off-chip interfaces are pinned to their memory and network
    /// technology; only on-die logic and SRAM benefit from a newer node.
    pub fn scales_with_node(self) -> bool {
        matches!(self, Component::Compute | Component::L2Cache)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Compute => "compute",
            Component::L2Cache => "l2_cache",
            Component::DramInterface => "dram_interface",
            Component::NetworkInterface => "network_interface",
        }
    }
}

pub type Fractions = BTreeMap<Component, f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignPoint {
    pub area_fraction: Fractions,
    pub power_fraction: Fractions,
    pub node: TechNode,
}

const FRACTION_SUM_TOL: f64 = 1e-9;

fn check_fractions(kind: &str, f: &Fractions) -> Result<()> {
    let mut sum = 0.0;
    for c in Component::ALL {
        let v = f.get(&c).copied().unwrap_or(0.0);
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::InvalidDesignPoint(format!("{kind} fraction for {} is {v}", c.as_str())));
        }
        sum += v;
    }
    if f.keys().any(|k| !Component::ALL.contains(k)) {
        return Err(Error::InvalidDesignPoint(format!("{kind}: unknown component")));
    }
    if (sum - 1.0).abs() > FRACTION_SUM_TOL {
        return Err(Error::InvalidDesignPoint(format!("{kind} fractions sum to {sum}, expected 1")));
    }
    Ok(())
}

impl DesignPoint {
    pub fn validate(&self) -> Result<()> {
        check_fractions("area", &self.area_fraction)?;
        check_fractions("power", &self.power_fraction)
    }

    pub fn area(&self, c: Component) -> f64 {
        self.area_fraction.get(&c).copied().unwrap_or(0.0)
    }

    pub fn power(&self, c: Component) -> f64 {
        self.power_fraction.get(&c).copied().unwrap_or(0.0)
    }
}

/// Published device plus the budget split that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub device: DeviceSpec,
    pub point: DesignPoint,
    /// mm².
    pub area_budget: f64,
    /// W.
    pub power_budget: f64,
    #[serde(default)]
    pub scaling: NodeScaling,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DerivedDevice {
    pub device: DeviceSpec,
    /// Multiplier for intra- and inter-node link bandwidth.
    pub network_scale: f64,
}

impl Calibration {
    /// Resource ratio for one component relative to the calibration device,
    /// limited by area only.
    pub fn area_limited_ratio(&self, point: &DesignPoint, area_budget: f64, c: Component) -> f64 {
        let reference = self.point.area(c) * self.area_budget;
        let node = if c.scales_with_node() {
            self.scaling.area_factor(self.point.node, point.node)
        } else {
            1.0
        };
        point.area(c) * area_budget / reference * node
    }

    pub fn power_limited_ratio(&self, point: &DesignPoint, power_budget: f64, c: Component) -> f64 {
        let reference = self.point.power(c) * self.power_budget;
        let node = if c.scales_with_node() {
            self.scaling.power_factor(self.point.node, point.node)
        } else {
            1.0
        };
        point.power(c) * power_budget / reference * node
    }

    fn ratio(&self, point: &DesignPoint, area_budget: f64, power_budget: f64, c: Component) -> f64 {
        self.area_limited_ratio(point, area_budget, c)
            .min(self.power_limited_ratio(point, power_budget, c))
    }
}

/// Device whose quantities are linear in their allocated resource, anchored so
/// that the calibration point reproduces the calibration device.
pub fn derive_from_budget(
    point: &DesignPoint,
    area_budget: f64,
    power_budget: f64,
    calibration: &Calibration,
) -> Result<DerivedDevice> {
    if !(area_budget > 0.0 && power_budget > 0.0) {
        return Err(Error::InvalidDesignPoint(format!(
            "budgets must be positive (area {area_budget}, power {power_budget})"
        )));
    }
    point.validate()?;
    calibration.point.validate()?;
    for c in Component::ALL {
        if calibration.point.area(c) <= 0.0 || calibration.point.power(c) <= 0.0 {
            return Err(Error::InvalidDesignPoint(format!(
                "calibration point has no {} allocation",
                c.as_str()
            )));
        }
    }

    let compute = calibration.ratio(point, area_budget, power_budget, Component::Compute);
    let l2 = calibration.ratio(point, area_budget, power_budget, Component::L2Cache);
    let dram = calibration.ratio(point, area_budget, power_budget, Component::DramInterface);
    let network = calibration.ratio(point, area_budget, power_budget, Component::NetworkInterface);

    let mut device = calibration.device.clone();
    for t in device.throughput.values_mut() {
        *t *= compute;
    }
    for level in &mut device.hierarchy {
        match level.name {
            // L1 lives inside the compute cores.
            MemLevel::L1 => {
                level.capacity *= compute;
                level.bandwidth *= compute;
            }
            MemLevel::L2 => {
                level.capacity *= l2;
                level.bandwidth *= l2;
            }
            MemLevel::Dram => level.bandwidth *= dram,
        }
    }
    if *point != calibration.point || area_budget != calibration.area_budget || power_budget != calibration.power_budget {
        device.name = format!("{}-derived@{}", calibration.device.name, point.node);
    }
    device.validate()?;
    Ok(DerivedDevice {
        device,
        network_scale: network,
    })
}
