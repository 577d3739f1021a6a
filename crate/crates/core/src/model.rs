//! The full forecaster: per-type encoders, the shared GNN stack and per-type
//! decoders, evaluated over batches of snapshots on one tape.
//!
//! Snapshots in a batch are stacked into one block-diagonal graph. Every op
//! is row-independent, so batching never changes a node's result.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoders::{Decoder, DecoderKind, DynamicDecoder, FixedDecoder, StepInputs};
use crate::encoders::{Dropout, EncoderSpec, NodeInput, Sequence, TypeEncoder};
use crate::error::{Error, Result};
use crate::events::{Registry, VarType};
use crate::graph::{ConvKind, GnnStack};
use crate::ndiff::{checkpoint, seeded_rng, Matrix, ParamStore, SeededRng, Tape, Var};
use crate::sampler::Snapshot;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderSpec,
    pub gnn_blocks: usize,
    pub conv: ConvKind,
    pub decoder_hidden: Vec<usize>,
    pub dropout: f64,
    /// Skip message passing entirely (GNN parameters are still created).
    pub bypass_gnn: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderSpec::default(),
            gnn_blocks: 2,
            conv: ConvKind::Gatv2,
            decoder_hidden: vec![64, 64],
            dropout: 0.0,
            bypass_gnn: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Everything needed to rebuild a model's structure; stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub config: ModelConfig,
    pub registry: Registry,
    pub inputs: BTreeSet<VarType>,
    pub targets: BTreeSet<VarType>,
    /// Fixed-decoder capacity per target type.
    pub max_fs: BTreeMap<VarType, usize>,
    /// Divisor applied to time offsets (the past window length in seconds).
    pub time_scale: f64,
}

#[derive(Debug, Clone)]
pub struct TypeModule {
    pub encoder: TypeEncoder,
    pub decoder: Option<Decoder>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamStore,
    pub types: BTreeMap<VarType, TypeModule>,
    pub gnn: GnnStack,
}

/// Largest future length per target type over `snapshots`.
pub fn fit_max_fs(snapshots: &[Snapshot], targets: &BTreeSet<VarType>) -> BTreeMap<VarType, usize> {
    let mut out: BTreeMap<VarType, usize> = targets.iter().map(|t| (t.clone(), 0)).collect();
    for s in snapshots {
        for n in &s.nodes {
            if let Some(m) = out.get_mut(&n.node.var_type) {
                *m = (*m).max(n.future_len());
            }
        }
    }
    out
}

/// Forecasts of one batch: `per_snapshot[s][i]` is the `fs × l` forecast of
/// node `i` of snapshot `s`, or `None` when it is not decoded.
pub struct BatchForecast {
    pub per_snapshot: Vec<Vec<Option<Var>>>,
}

impl Model {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.config.validate()?;
        if spec.inputs.is_empty() {
            return Err(Error::Config("at least one input type is required".into()));
        }
        if let Some(t) = spec.targets.iter().find(|t| !spec.inputs.contains(*t)) {
            return Err(Error::Config(format!("target type `{t}` is not an input")));
        }
        if spec.targets.is_empty() {
            return Err(Error::Config("at least one target type is required".into()));
        }
        let mut rng = seeded_rng(seed);
        let mut params = ParamStore::new();
        let cfg = &spec.config;
        let embed = cfg.encoder.embed_size;
        let mut types = BTreeMap::new();
        for t in &spec.inputs {
            let ts = spec.registry.require_spec(t)?;
            let encoder = TypeEncoder::new(
                &mut params,
                &format!("{t}.encoder"),
                &cfg.encoder,
                ts.arity(),
                ts.known_future.len(),
                &mut rng,
            )?;
            types.insert(
                t.clone(),
                TypeModule {
                    encoder,
                    decoder: None,
                },
            );
        }
        for t in &spec.targets {
            let ts = spec.registry.require_spec(t)?;
            let prefix = format!("{t}.decoder");
            let decoder = match ts.decoder {
                None => {
                    return Err(Error::Config(format!("target type `{t}` has no decoder in the registry")))
                }
                Some(DecoderKind::Fixed) => {
                    let max_fs = spec.max_fs.get(t).copied().unwrap_or(0);
                    if max_fs == 0 {
                        return Err(Error::Config(format!(
                            "no future events of target type `{t}` to size its decoder"
                        )));
                    }
                    Decoder::Fixed(FixedDecoder::new(
                        &mut params,
                        &prefix,
                        embed,
                        &cfg.decoder_hidden,
                        max_fs,
                        ts.label_count(),
                        &mut rng,
                    )?)
                }
                Some(DecoderKind::Dynamic) => Decoder::Dynamic(DynamicDecoder::new(
                    &mut params,
                    &prefix,
                    embed,
                    &cfg.decoder_hidden,
                    ts.known_future.len(),
                    ts.label_count(),
                    &mut rng,
                )?),
            };
            types.get_mut(t).expect("targets are inputs").decoder = Some(decoder);
        }
        let gnn = GnnStack::new(&mut params, "gnn", embed, cfg.gnn_blocks, cfg.conv, &mut rng)?;
        Ok(Model {
            spec,
            params,
            types,
            gnn,
        })
    }

    /// Forward pass over a batch. `train_rng` enables dropout.
    pub fn forward(
        &self,
        tape: &Tape,
        snapshots: &[&Snapshot],
        train_rng: Option<&mut SeededRng>,
    ) -> Result<BatchForecast> {
        self.forward_with(tape, &self.params, snapshots, train_rng)
    }

    /// Forward pass with an explicit parameter store (used by gradient checks).
    pub fn forward_with(
        &self,
        tape: &Tape,
        params: &ParamStore,
        snapshots: &[&Snapshot],
        train_rng: Option<&mut SeededRng>,
    ) -> Result<BatchForecast> {
        let mut drop = Dropout {
            p: self.spec.config.dropout,
            rng: train_rng,
        };
        let scale = self.spec.time_scale;

        // Global node numbering across the batch and the stacked edge list.
        let mut global: Vec<(usize, usize)> = Vec::new();
        let mut edges = Vec::new();
        for (si, s) in snapshots.iter().enumerate() {
            let base = global.len();
            edges.extend(s.edges.iter().map(|&(a, b)| (a + base, b + base)));
            global.extend((0..s.nodes.len()).map(|i| (si, i)));
        }
        if global.is_empty() {
            return Err(Error::Sampling("batch contains no nodes".into()));
        }

        let mut groups: BTreeMap<&VarType, Vec<usize>> = BTreeMap::new();
        for (g, &(si, i)) in global.iter().enumerate() {
            let t = &snapshots[si].nodes[i].node.var_type;
            if !self.types.contains_key(t) {
                return Err(Error::UnknownType(t.to_string()));
            }
            groups.entry(t).or_default().push(g);
        }

        // Encode each type, then permute the stacked rows back to global order.
        let mut emb_parts = Vec::new();
        let mut fut_parts = Vec::new();
        let mut position = vec![0usize; global.len()];
        let mut offset = 0;
        for (t, members) in &groups {
            let inputs: Vec<NodeInput<'_>> = members
                .iter()
                .map(|&g| {
                    let (si, i) = global[g];
                    let n = &snapshots[si].nodes[i];
                    NodeInput {
                        past: Sequence {
                            rows: &n.x_past,
                            offsets: &n.past_offsets,
                        },
                        future: Sequence {
                            rows: &n.x_future,
                            offsets: &n.future_offsets,
                        },
                    }
                })
                .collect();
            let enc = self.types[*t].encoder.encode(tape, params, &inputs, scale, &mut drop)?;
            emb_parts.push(enc.embedding);
            fut_parts.push(enc.future);
            for (k, &g) in members.iter().enumerate() {
                position[g] = offset + k;
            }
            offset += members.len();
        }
        let stack = |parts: &[Var]| {
            let all = if parts.len() == 1 { parts[0] } else { tape.concat_rows(parts) };
            if position.iter().enumerate().all(|(g, &p)| g == p) {
                all
            } else {
                tape.gather_rows(all, &position)
            }
        };
        let h = stack(&emb_parts);
        let h_future = stack(&fut_parts);

        let h = if self.spec.config.bypass_gnn {
            h
        } else {
            self.gnn.forward(tape, params, h, &edges)?
        };

        let mut per_snapshot: Vec<Vec<Option<Var>>> =
            snapshots.iter().map(|s| vec![None; s.nodes.len()]).collect();
        for (t, members) in &groups {
            let Some(decoder) = &self.types[*t].decoder else {
                continue;
            };
            match decoder {
                Decoder::Fixed(d) => {
                    let with_future: Vec<usize> = members
                        .iter()
                        .copied()
                        .filter(|&g| {
                            let (si, i) = global[g];
                            snapshots[si].nodes[i].future_len() > 0
                        })
                        .collect();
                    if with_future.is_empty() {
                        continue;
                    }
                    for &g in &with_future {
                        let (si, i) = global[g];
                        let fs = snapshots[si].nodes[i].future_len();
                        if fs > d.max_fs {
                            return Err(Error::ForecastTooLong { fs, max_fs: d.max_fs });
                        }
                    }
                    let block = d.forward_block(tape, params, tape.gather_rows(h, &with_future));
                    for (row, &g) in with_future.iter().enumerate() {
                        let (si, i) = global[g];
                        let fs = snapshots[si].nodes[i].future_len();
                        per_snapshot[si][i] = d.take(tape, block, row, fs)?;
                    }
                }
                Decoder::Dynamic(d) => {
                    let steps: Vec<StepInputs<'_>> = members
                        .iter()
                        .map(|&g| {
                            let (si, i) = global[g];
                            let n = &snapshots[si].nodes[i];
                            StepInputs {
                                row: g,
                                future_row: g,
                                known: &n.x_future,
                                offsets: &n.future_offsets,
                            }
                        })
                        .collect();
                    let out = d.decode(tape, params, h, h_future, &steps, scale)?;
                    for (&g, v) in members.iter().zip(out) {
                        let (si, i) = global[g];
                        per_snapshot[si][i] = v;
                    }
                }
            }
        }
        Ok(BatchForecast { per_snapshot })
    }

    /// Forecast values for every snapshot, evaluated in batches of `batch`.
    pub fn predict(&self, snapshots: &[Snapshot], batch: usize) -> Result<Vec<Vec<Option<Matrix>>>> {
        let mut out = Vec::with_capacity(snapshots.len());
        for chunk in snapshots.chunks(batch.max(1)) {
            let tape = Tape::new();
            let refs: Vec<&Snapshot> = chunk.iter().collect();
            let f = self.forward(&tape, &refs, None)?;
            for row in f.per_snapshot {
                out.push(row.into_iter().map(|v| v.map(|v| tape.value(v).clone())).collect());
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_value(&self.spec)?;
        checkpoint::save(path, &self.params, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, meta) = checkpoint::load(path)?;
        let spec: ModelSpec = serde_json::from_value(meta)?;
        let mut model = Model::new(spec, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                params.len(),
                model.params.len()
            )));
        }
        model.params.load_from(&params)?;
        Ok(model)
    }
}
