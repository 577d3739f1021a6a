//! Forecasting of irregular multivariate sensor networks with graph neural
//! networks over discrete-time dynamic graphs.
//!
//! Events from heterogeneous sensors are kept in an [`EventStore`]. Snapshots
//! sampled from it hold variable-length past and future windows per node.
//! Each node is encoded by an LSTM or Transformer encoder for its type, the
//! embeddings are mixed by a GATv2 message-passing stack and decoded into
//! forecasts trained with an index-of-agreement loss. Everything runs on the
//! small reverse-mode autodiff engine in [`ndiff`].
//!
//! [`experiment`] ties the pieces into reproducible runs and [`synth`]
//! generates the synthetic estuary used for testing.

pub mod baselines;
pub mod config;
pub mod decoders;
pub mod encoders;
pub mod error;
pub mod events;
pub mod experiment;
pub mod graph;
pub mod model;
pub mod ndiff;
pub mod sampler;
pub mod synth;
pub mod train;

pub use config::{DataConfig, ExperimentConfig};
pub use encoders::{EncoderKind, EncoderSpec};
pub use error::{Error, Result};
pub use events::{Event, EventStore, NodeKey, Registry, TypeSpec, VarType};
pub use graph::{ConvKind, TopologyMode};
pub use model::{Model, ModelConfig, ModelSpec};
pub use sampler::{Snapshot, WindowSpec};
pub use synth::WorldConfig;
pub use train::{MetricReport, MultiSeedReport, Pooling, TrainConfig};
