//! Shared fixtures for the benchmarks.

use tidegraph::config::ExperimentConfig;
use tidegraph::events::{EventStore, VarType};
use tidegraph::experiment::{prepare, Prepared};
use tidegraph::sampler::WindowSpec;
use tidegraph::synth::{generate, WorldConfig};

/// Synthetic estuary store over `days` days with every variable type.
pub fn store(days: f64) -> EventStore {
    let world = WorldConfig {
        days,
        seed: 11,
        ..WorldConfig::default()
    };
    let out = generate(&world).expect("default world is valid");
    EventStore::from_events(out.registry, out.events.into_iter().map(|e| (0, e))).0
}

/// Experiment settings used by the model benchmarks.
pub fn config(snapshots: usize) -> ExperimentConfig {
    ExperimentConfig {
        inputs: [VarType::current(), VarType::ssh(), VarType::wind()].into(),
        targets: [VarType::current(), VarType::ssh()].into(),
        window: WindowSpec::new(24 * 3600, 12 * 3600).expect("valid window"),
        snapshots,
        ..ExperimentConfig::default()
    }
}

pub fn prepared(days: f64, snapshots: usize) -> (ExperimentConfig, Prepared) {
    let cfg = config(snapshots);
    let prep = prepare(&cfg, store(days)).expect("fixture prepares");
    (cfg, prep)
}
