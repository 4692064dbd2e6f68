//! Named presets and run configuration files.
//!
//! Presets ship embedded in the binary. Extra directories listed in the
//! `LLMPERF_PRESET_PATH` environment variable (path-separator delimited) are
//! layered on top; each may hold any of `devices.toml`, `dram.toml`,
//! `links.toml`, `clusters.toml` and `models.toml`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::arch::{resolve_device, ClusterSpec, DeviceDescription, DeviceSpec, DramPreset, NetworkLink, TechNode};
use crate::error::{Error, Result};
use crate::kernelperf::UtilizationPolicy;
use crate::parallelism::ParallelismConfig;
use crate::workload::{InferenceConfig, ModelConfig};

pub const PRESET_PATH_ENV: &str = "LLMPERF_PRESET_PATH";

const DEVICES: &str = include_str!("../presets/devices.toml");
const DRAM: &str = include_str!("../presets/dram.toml");
const LINKS: &str = include_str!("../presets/links.toml");
const CLUSTERS: &str = include_str!("../presets/clusters.toml");
const MODELS: &str = include_str!("../presets/models.toml");

/// Device reference: a preset name or an inline description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DeviceRef {
    Named(String),
    Inline(DeviceDescription),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LinkRef {
    Named(String),
    Inline(NetworkLink),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelRef {
    Named(String),
    Inline(ModelConfig),
}

/// Cluster as written in files; every field may be filled from `preset`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterDescription {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub device: Option<DeviceRef>,
    #[serde(default)]
    pub devices_per_node: Option<u32>,
    #[serde(default)]
    pub intra_link: Option<LinkRef>,
    #[serde(default)]
    pub inter_link: Option<LinkRef>,
    #[serde(default)]
    pub total_devices: Option<u32>,
    /// DRAM preset swapped into the device.
    #[serde(default)]
    pub dram: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClusterRef {
    Named(String),
    Inline(ClusterDescription),
}

fn normalize(name: &str) -> String {
    name.trim().to_ascii_lowercase().replace(['-', '.', ' '], "_")
}

fn parse_table<T: DeserializeOwned>(text: &str, source: &str) -> Result<BTreeMap<String, T>> {
    let raw: BTreeMap<String, T> =
        toml::from_str(text).map_err(|e| Error::Config(format!("{source}: {e}")))?;
    Ok(raw.into_iter().map(|(k, v)| (normalize(&k), v)).collect())
}

#[derive(Debug, Clone, Default)]
pub struct PresetLibrary {
    pub devices: BTreeMap<String, DeviceDescription>,
    pub dram: BTreeMap<String, DramPreset>,
    pub links: BTreeMap<String, NetworkLink>,
    pub clusters: BTreeMap<String, ClusterDescription>,
    pub models: BTreeMap<String, ModelConfig>,
}

impl PresetLibrary {
    /// Only the embedded presets.
    pub fn builtin() -> Result<Self> {
        let mut lib = PresetLibrary::default();
        lib.merge_texts(
            &[
                Some(DEVICES.to_string()),
                Some(DRAM.to_string()),
                Some(LINKS.to_string()),
                Some(CLUSTERS.to_string()),
                Some(MODELS.to_string()),
            ],
            "builtin",
        )?;
        Ok(lib)
    }

    /// Embedded presets plus any directories named by the environment.
    pub fn load() -> Result<Self> {
        let mut lib = Self::builtin()?;
        if let Some(paths) = std::env::var_os(PRESET_PATH_ENV) {
            for dir in std::env::split_paths(&paths) {
                lib.merge_dir(&dir)?;
            }
        }
        Ok(lib)
    }

    pub fn merge_dir(&mut self, dir: &Path) -> Result<()> {
        let read = |file: &str| -> Result<Option<String>> {
            let path = dir.join(file);
            if path.is_file() {
                Ok(Some(std::fs::read_to_string(path)?))
            } else {
                Ok(None)
            }
        };
        let texts = [
            read("devices.toml")?,
            read("dram.toml")?,
            read("links.toml")?,
            read("clusters.toml")?,
            read("models.toml")?,
        ];
        self.merge_texts(&texts, &dir.display().to_string())
    }

    fn merge_texts(&mut self, texts: &[Option<String>; 5], source: &str) -> Result<()> {
        if let Some(t) = &texts[0] {
            self.devices.extend(parse_table(t, &format!("{source}/devices.toml"))?);
        }
        if let Some(t) = &texts[1] {
            let mut dram: BTreeMap<String, DramPreset> = parse_table(t, &format!("{source}/dram.toml"))?;
            for (k, v) in dram.iter_mut() {
                if v.name.is_empty() {
                    v.name = k.clone();
                }
            }
            self.dram.extend(dram);
        }
        if let Some(t) = &texts[2] {
            let mut links: BTreeMap<String, NetworkLink> = parse_table(t, &format!("{source}/links.toml"))?;
            for (k, v) in links.iter_mut() {
                if v.name.is_empty() {
                    v.name = k.clone();
                }
            }
            self.links.extend(links);
        }
        if let Some(t) = &texts[3] {
            self.clusters.extend(parse_table(t, &format!("{source}/clusters.toml"))?);
        }
        if let Some(t) = &texts[4] {
            let mut models: BTreeMap<String, ModelConfig> = parse_table(t, &format!("{source}/models.toml"))?;
            for (k, v) in models.iter_mut() {
                if v.name.is_empty() {
                    v.name = k.clone();
                }
            }
            self.models.extend(models);
        }
        Ok(())
    }

    fn lookup<'a, T>(map: &'a BTreeMap<String, T>, kind: &'static str, name: &str) -> Result<&'a T> {
        map.get(&normalize(name)).ok_or_else(|| Error::UnknownPreset {
            kind,
            name: name.to_string(),
        })
    }

    pub fn device(&self, name: &str) -> Result<DeviceSpec> {
        resolve_device(Self::lookup(&self.devices, "device", name)?)
    }

    pub fn dram(&self, name: &str) -> Result<DramPreset> {
        Self::lookup(&self.dram, "dram", name).cloned()
    }

    pub fn link(&self, name: &str) -> Result<NetworkLink> {
        Self::lookup(&self.links, "link", name).cloned()
    }

    pub fn model(&self, name: &str) -> Result<ModelConfig> {
        Self::lookup(&self.models, "model", name).cloned()
    }

    pub fn cluster(&self, name: &str) -> Result<ClusterSpec> {
        self.resolve_cluster(&ClusterRef::Named(name.to_string()))
    }

    pub fn resolve_model(&self, r: &ModelRef) -> Result<ModelConfig> {
        let model = match r {
            ModelRef::Named(n) => self.model(n)?,
            ModelRef::Inline(m) => m.clone(),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn resolve_device_ref(&self, r: &DeviceRef) -> Result<DeviceSpec> {
        match r {
            DeviceRef::Named(n) => self.device(n),
            DeviceRef::Inline(d) => resolve_device(d),
        }
    }

    pub fn resolve_link(&self, r: &LinkRef) -> Result<NetworkLink> {
        let link = match r {
            LinkRef::Named(n) => self.link(n)?,
            LinkRef::Inline(l) => l.clone(),
        };
        link.validate()?;
        Ok(link)
    }

    pub fn resolve_cluster(&self, r: &ClusterRef) -> Result<ClusterSpec> {
        let given = match r {
            ClusterRef::Named(n) => ClusterDescription {
                preset: Some(n.clone()),
                ..Default::default()
            },
            ClusterRef::Inline(d) => d.clone(),
        };
        let base = match &given.preset {
            Some(p) => Self::lookup(&self.clusters, "cluster", p)?.clone(),
            None => ClusterDescription::default(),
        };
        let missing = |field: &str| Error::InvalidCluster(format!("cluster is missing `{field}`"));
        let device_ref = given.device.or(base.device).ok_or_else(|| missing("device"))?;
        let mut device = self.resolve_device_ref(&device_ref)?;
        if let Some(d) = given.dram.or(base.dram) {
            device = device.with_dram(&self.dram(&d)?);
        }
        let intra = given.intra_link.or(base.intra_link).ok_or_else(|| missing("intra_link"))?;
        let inter = given.inter_link.or(base.inter_link).ok_or_else(|| missing("inter_link"))?;
        let devices_per_node = given
            .devices_per_node
            .or(base.devices_per_node)
            .ok_or_else(|| missing("devices_per_node"))?;
        let cluster = ClusterSpec {
            name: given.preset.unwrap_or_else(|| device.name.clone()),
            device,
            devices_per_node,
            intra_link: self.resolve_link(&intra)?,
            inter_link: self.resolve_link(&inter)?,
            total_devices: given.total_devices.or(base.total_devices).unwrap_or(devices_per_node),
        };
        cluster.validate()?;
        Ok(cluster)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Table,
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Infer,
    Mem,
    Sweep,
    Dse,
    Validate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub nodes: Vec<TechNode>,
    pub dram: Vec<String>,
    pub network: Vec<String>,
    /// Train (default) or infer.
    #[serde(default)]
    pub objective: Option<Mode>,
}

/// Budgets and search knobs for the `dse` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DseSection {
    pub node: TechNode,
    #[serde(default)]
    pub area_budget: Option<f64>,
    #[serde(default)]
    pub power_budget: Option<f64>,
    #[serde(default)]
    pub search: crate::dse::SearchConfig,
    #[serde(default)]
    pub objective: Option<Mode>,
}

/// Everything one CLI invocation needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub mode: Option<Mode>,
    pub model: ModelRef,
    pub cluster: ClusterRef,
    #[serde(default)]
    pub parallelism: ParallelismConfig,
    #[serde(default)]
    pub inference: Option<InferenceConfig>,
    #[serde(default)]
    pub policy: UtilizationPolicy,
    #[serde(default)]
    pub output: OutputFormat,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub dse: Option<DseSection>,
}

impl RunConfig {
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value =
            toml::from_str(text).map_err(|e| Error::Config(format!("parse error: {e}")))?;
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid config: {e}")))
    }

    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, overrides).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn resolve_model(&self, lib: &PresetLibrary) -> Result<ModelConfig> {
        lib.resolve_model(&self.model)
    }

    /// Cluster sized to the parallel config unless the file pins a size.
    pub fn resolve_cluster(&self, lib: &PresetLibrary) -> Result<ClusterSpec> {
        let explicit = matches!(&self.cluster, ClusterRef::Inline(d) if d.total_devices.is_some());
        let cluster = lib.resolve_cluster(&self.cluster)?;
        Ok(if explicit {
            cluster
        } else {
            cluster.with_total_devices(self.parallelism.devices() as u32)
        })
    }
}

/// Apply `dotted.key=value`. The value is read as a TOML literal, falling
/// back to a bare string; the parent table must already exist.
pub fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let parsed: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut cursor = root;
    for (i, part) in parents.iter().enumerate() {
        let table = cursor
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{}` is not a table", parts[..i].join("."))))?;
        cursor = table
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("override `{key}`: no section `{}`", parts[..=i].join("."))))?;
    }
    let table = cursor
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("override `{key}`: parent is not a table")))?;
    table.insert(last.to_string(), parsed);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_presets_resolve() {
        let lib = PresetLibrary::builtin().unwrap();
        for name in lib.models.keys() {
            lib.model(name).unwrap().validate().unwrap();
        }
        for name in lib.clusters.keys() {
            lib.cluster(name).unwrap();
        }
        assert_eq!(lib.model("Llama2-13B").unwrap().hidden, 5120);
        assert!(matches!(lib.device("tpu"), Err(Error::UnknownPreset { .. })));
    }

    #[test]
    fn overrides_replace_existing_keys() {
        let text = "model = \"gpt_22b\"\ncluster = \"a100_hdr\"\n[parallelism]\ntp = 8\n";
        let cfg = RunConfig::parse(text, &["parallelism.tp=1".into()]).unwrap();
        assert_eq!(cfg.parallelism.tp, 1);
        let cfg = RunConfig::parse(text, &["model=gpt_175b".into()]).unwrap();
        assert_eq!(cfg.model, ModelRef::Named("gpt_175b".into()));
        assert!(RunConfig::parse(text, &["nosuch.tp=1".into()]).is_err());
        assert!(RunConfig::parse(text, &["parallelism.tp".into()]).is_err());
    }

    #[test]
    fn empty_config_is_rejected() {
        assert!(matches!(RunConfig::parse("", &[]), Err(Error::Config(_))));
    }

    #[test]
    fn cluster_sized_from_parallelism() {
        let lib = PresetLibrary::builtin().unwrap();
        let text = "model = \"gpt_175b\"\ncluster = \"a100_hdr\"\n[parallelism]\ntp = 8\npp = 8\n";
        let cfg = RunConfig::parse(text, &[]).unwrap();
        assert_eq!(cfg.resolve_cluster(&lib).unwrap().total_devices, 64);
    }
}
