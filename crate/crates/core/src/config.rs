//! Experiment configuration, stored as JSON.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::DEFAULT_PERIODS_H;
use crate::events::{Registry, VarType};
use crate::graph::TopologyMode;
use crate::model::ModelConfig;
use crate::sampler::{SplitFractions, WindowSpec};
use crate::train::{Pooling, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub events: PathBuf,
    /// Defaults to `registry.json` next to the events file.
    pub registry: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            events: PathBuf::from("data/events.csv"),
            registry: None,
        }
    }
}

impl DataConfig {
    pub fn registry_path(&self) -> PathBuf {
        self.registry.clone().unwrap_or_else(|| {
            self.events
                .parent()
                .unwrap_or_else(|| Path::new("."))
                .join("registry.json")
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub inputs: BTreeSet<VarType>,
    pub targets: BTreeSet<VarType>,
    pub topology: TopologyMode,
    pub window: WindowSpec,
    /// Number of snapshots sampled over the reference range.
    pub snapshots: usize,
    /// Reference-time range `[start, end)`; defaults to the widest range whose
    /// windows stay inside the data.
    pub range: Option<(i64, i64)>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub split: SplitFractions,
    pub pooling: Pooling,
    /// Constituent periods (hours) for the harmonic baseline.
    pub harmonic_periods_h: Vec<f64>,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::default(),
            inputs: [VarType::current(), VarType::ssh()].into(),
            targets: [VarType::current()].into(),
            topology: TopologyMode::FullyConnected,
            window: WindowSpec::default(),
            snapshots: 1000,
            range: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            seeds: (0..10).collect(),
            split: SplitFractions::default(),
            pooling: Pooling::Pooled,
            harmonic_periods_h: DEFAULT_PERIODS_H.to_vec(),
            output: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid experiment config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    /// Run name derived from the input set, e.g. `current+ssh`.
    pub fn input_set_name(&self) -> String {
        self.inputs.iter().map(VarType::as_str).collect::<Vec<_>>().join("+")
    }

    /// Checks everything that does not need the data files.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.inputs.is_empty() {
            return bad("at least one input type is required".into());
        }
        if self.targets.is_empty() {
            return bad("at least one target type is required".into());
        }
        if let Some(t) = self.targets.iter().find(|t| !self.inputs.contains(*t)) {
            return bad(format!("target `{t}` is not among the inputs"));
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.snapshots == 0 {
            return bad("snapshot count must be at least 1".into());
        }
        if let Some((a, b)) = self.range {
            if a >= b {
                return bad(format!("reference range [{a}, {b}) is empty"));
            }
        }
        if self.harmonic_periods_h.iter().any(|p| !(*p > 0.0)) {
            return bad("harmonic periods must be positive".into());
        }
        self.window.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let SplitFractions { train, val, test } = self.split;
        if !(train > 0.0 && val > 0.0 && test > 0.0) || (train + val + test - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions ({train}, {val}, {test}) must be positive and sum to 1"));
        }
        Ok(())
    }

    /// Checks the referenced types against a registry.
    pub fn validate_against(&self, registry: &Registry) -> Result<()> {
        for t in self.inputs.iter() {
            registry.require_spec(t)?;
        }
        for t in &self.targets {
            let spec = registry.require_spec(t)?;
            if spec.decoder.is_none() || spec.labels.is_empty() {
                return Err(Error::Config(format!("type `{t}` has no decoder or labels and cannot be a target")));
            }
        }
        Ok(())
    }

    /// Fails with a configuration error when a data file is missing.
    pub fn check_data_paths(&self) -> Result<()> {
        for p in [self.data.events.clone(), self.data.registry_path()] {
            if !p.is_file() {
                return Err(Error::Config(format!("data file `{}` does not exist", p.display())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderKind;
    use proptest::prelude::*;

    #[test]
    fn defaults_are_valid_and_partial_files_fill_in() {
        ExperimentConfig::default().validate().unwrap();
        let c = ExperimentConfig::from_json(r#"{"inputs": ["ssh"], "targets": ["ssh"], "model": {"gnn_blocks": 3}}"#).unwrap();
        assert_eq!(c.model.gnn_blocks, 3);
        assert_eq!(c.model.encoder, ExperimentConfig::default().model.encoder);
        assert_eq!(c.input_set_name(), "ssh");
        assert!(ExperimentConfig::from_json(r#"{"inputz": []}"#).is_err());
    }

    #[test]
    fn rejects_inconsistent_configs() {
        let c = ExperimentConfig {
            targets: [VarType::wind()].into(),
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let reg = Registry::estuary(&["a"], &[VarType::current(), VarType::ssh(), VarType::wind()]).unwrap();
        let c = ExperimentConfig {
            inputs: [VarType::wind()].into(),
            targets: [VarType::wind()].into(),
            ..Default::default()
        };
        assert!(c.validate_against(&reg).is_err());
        let c = ExperimentConfig {
            inputs: [VarType::new("salinity")].into(),
            targets: [VarType::new("salinity")].into(),
            ..Default::default()
        };
        assert!(c.validate_against(&reg).is_err());
        let c = ExperimentConfig {
            data: DataConfig {
                events: "/nonexistent/events.csv".into(),
                registry: None,
            },
            ..Default::default()
        };
        assert!(matches!(c.check_data_paths(), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn round_trips_through_json(
            seeds in proptest::collection::vec(any::<u64>(), 1..5),
            lr in 1e-6f64..1.0,
            past in 1i64..1_000_000,
            embed in 1usize..64,
            transformer in any::<bool>(),
            mode in 0usize..3,
            range in proptest::option::of((any::<i32>(), 1i64..1_000_000)),
        ) {
            let mut c = ExperimentConfig::default();
            c.seeds = seeds;
            c.train.adam.lr = lr;
            c.window.past_len = past;
            c.model.encoder.embed_size = embed;
            c.model.encoder.kind = if transformer { EncoderKind::Transformer } else { EncoderKind::Lstm };
            c.topology = TopologyMode::ALL[mode];
            c.range = range.map(|(a, d)| (a as i64, a as i64 + d));
            let back = ExperimentConfig::from_json(&c.to_json().unwrap()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
