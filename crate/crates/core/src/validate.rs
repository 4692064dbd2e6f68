//! Bundled validation fixtures and the harness that replays them.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ClusterRef, ModelRef, PresetLibrary};
use crate::engine::{predict_inference, predict_training_step};
use crate::error::{Error, Result};
use crate::kernelperf::UtilizationPolicy;
use crate::parallelism::ParallelismConfig;
use crate::workload::InferenceConfig;

const BUNDLED: &str = include_str!("../presets/fixtures.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixtureKind {
    Training,
    Inference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixtureSet {
    Training,
    Inference,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationFixture {
    pub id: String,
    pub model: ModelRef,
    pub cluster: ClusterRef,
    #[serde(default)]
    pub parallelism: ParallelismConfig,
    #[serde(default)]
    pub inference: Option<InferenceConfig>,
    /// Seconds.
    pub expected_time: f64,
    #[serde(default)]
    pub measured_time: Option<f64>,
    pub tolerance: f64,
    pub source: String,
}

impl ValidationFixture {
    pub fn validate(&self) -> Result<()> {
        if !(self.expected_time > 0.0 && self.expected_time.is_finite()) {
            return Err(Error::Fixture(format!("{}: expected_time must be positive", self.id)));
        }
        if !(self.tolerance > 0.0 && self.tolerance < 1.0) {
            return Err(Error::Fixture(format!("{}: tolerance must be in (0, 1)", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureFile {
    #[serde(default)]
    pub training: Vec<ValidationFixture>,
    #[serde(default)]
    pub inference: Vec<ValidationFixture>,
}

impl FixtureFile {
    pub fn bundled() -> Result<Self> {
        Self::parse(BUNDLED)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Fixture(format!("fixture file {} not found", path.display())));
        }
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let file: FixtureFile = toml::from_str(text).map_err(|e| Error::Fixture(e.to_string()))?;
        for f in file.training.iter().chain(&file.inference) {
            f.validate()?;
        }
        Ok(file)
    }

    pub fn select(&self, set: FixtureSet) -> Vec<(FixtureKind, &ValidationFixture)> {
        let training = self.training.iter().map(|f| (FixtureKind::Training, f));
        let inference = self.inference.iter().map(|f| (FixtureKind::Inference, f));
        match set {
            FixtureSet::Training => training.collect(),
            FixtureSet::Inference => inference.collect(),
            FixtureSet::All => training.chain(inference).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureOutcome {
    pub id: String,
    pub kind: FixtureKind,
    pub expected_time: f64,
    pub predicted_time: Option<f64>,
    /// Signed (predicted − expected) / expected.
    pub relative_error: Option<f64>,
    pub tolerance: f64,
    pub pass: bool,
    pub error: Option<String>,
}

pub fn run_fixture(
    lib: &PresetLibrary,
    kind: FixtureKind,
    fixture: &ValidationFixture,
    policy: &UtilizationPolicy,
) -> FixtureOutcome {
    let predicted = (|| -> Result<f64> {
        let model = lib.resolve_model(&fixture.model)?;
        let cluster = lib.resolve_cluster(&fixture.cluster)?;
        match kind {
            FixtureKind::Training => {
                let cluster = cluster.with_total_devices(fixture.parallelism.devices() as u32);
                Ok(predict_training_step(&model, &fixture.parallelism, &cluster, policy)?.total_time)
            }
            FixtureKind::Inference => {
                let inf = fixture
                    .inference
                    .clone()
                    .ok_or_else(|| Error::Fixture(format!("{}: missing inference section", fixture.id)))?;
                let cluster = cluster.with_total_devices(cluster.devices_per_node);
                Ok(predict_inference(&model, &inf, &fixture.parallelism, &cluster, policy)?.total_time)
            }
        }
    })();
    let (predicted_time, relative_error, error) = match predicted {
        Ok(t) => (Some(t), Some((t - fixture.expected_time) / fixture.expected_time), None),
        Err(e) => (None, None, Some(e.to_string())),
    };
    FixtureOutcome {
        id: fixture.id.clone(),
        kind,
        expected_time: fixture.expected_time,
        predicted_time,
        relative_error,
        tolerance: fixture.tolerance,
        pass: relative_error.is_some_and(|e| e.abs() <= fixture.tolerance),
        error,
    }
}

/// Replay a fixture selection; order follows the file.
pub fn run_fixtures(
    lib: &PresetLibrary,
    file: &FixtureFile,
    set: FixtureSet,
    policy: &UtilizationPolicy,
) -> Result<Vec<FixtureOutcome>> {
    let selected = file.select(set);
    if selected.is_empty() {
        return Err(Error::Fixture("fixture selection is empty".into()));
    }
    Ok(selected
        .into_par_iter()
        .map(|(kind, f)| run_fixture(lib, kind, f, policy))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_fixture_counts() {
        let file = FixtureFile::bundled().unwrap();
        assert_eq!(file.training.len(), 11);
        assert_eq!(file.inference.len(), 22);
    }

    #[test]
    fn empty_selection_is_an_error() {
        let lib = PresetLibrary::builtin().unwrap();
        let empty = FixtureFile::default();
        assert!(matches!(
            run_fixtures(&lib, &empty, FixtureSet::All, &UtilizationPolicy::default()),
            Err(Error::Fixture(_))
        ));
    }

    #[test]
    fn bad_tolerance_rejected() {
        let text = r#"
[[training]]
id = "x"
model = "gpt_22b"
cluster = "a100_hdr"
expected_time = 1.0
tolerance = 1.5
source = "s"
"#;
        assert!(FixtureFile::parse(text).is_err());
    }
}
