//! Topology construction and the shared message-passing stack.
//!
//! Edges are directed `(source, target)` index pairs. A block computes
//! `h + ELU(conv(LN(h)))`; the convolution attends over in-edges only, so a
//! node with no in-edges receives a zero message and passes through unchanged.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::NodeKey;
use crate::ndiff::{Matrix, ParamId, ParamStore, Tape, Var};

const LEAKY_SLOPE: f64 = 0.2;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub enum TopologyMode {
    #[default]
    #[serde(rename = "full")]
    FullyConnected,
    #[serde(rename = "same_type")]
    SameTypeOnly,
    #[serde(rename = "disconnected")]
    Disconnected,
}

impl TopologyMode {
    pub const ALL: [TopologyMode; 3] = [
        TopologyMode::FullyConnected,
        TopologyMode::SameTypeOnly,
        TopologyMode::Disconnected,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TopologyMode::FullyConnected => "full",
            TopologyMode::SameTypeOnly => "same_type",
            TopologyMode::Disconnected => "disconnected",
        }
    }
}

impl fmt::Display for TopologyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TopologyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(TopologyMode::FullyConnected),
            "same_type" => Ok(TopologyMode::SameTypeOnly),
            "disconnected" => Ok(TopologyMode::Disconnected),
            other => Err(Error::Config(format!(
                "unknown topology `{other}` (expected full, same_type or disconnected)"
            ))),
        }
    }
}

/// Directed edges over `nodes`, ordered by `(source key, target key)`.
/// No self-loops.
pub fn build_topology(nodes: &[NodeKey], mode: TopologyMode) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..nodes.len()).collect();
    order.sort_by(|&a, &b| nodes[a].cmp(&nodes[b]));
    let mut edges = Vec::new();
    if mode == TopologyMode::Disconnected {
        return edges;
    }
    for &s in &order {
        for &t in &order {
            if s == t {
                continue;
            }
            if mode == TopologyMode::SameTypeOnly && nodes[s].var_type != nodes[t].var_type {
                continue;
            }
            edges.push((s, t));
        }
    }
    edges
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvKind {
    /// Single-head GATv2 attention.
    #[default]
    Gatv2,
    /// Unweighted mean over in-neighbours.
    Mean,
}

/// Parameters of one residual block.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    /// Scoring projection split into the target and source halves of
    /// `W · [h_target ‖ h_source]`.
    pub w_target: ParamId,
    pub w_source: ParamId,
    pub attn: ParamId,
    pub w_value: ParamId,
}

#[derive(Debug, Clone)]
pub struct GnnStack {
    pub width: usize,
    pub conv: ConvKind,
    pub blocks: Vec<BlockParams>,
}

/// Output of one convolution: aggregated messages and, for attention
/// convolutions, the per-edge weights.
pub struct ConvOutput {
    pub messages: Var,
    pub attention: Option<Var>,
}

impl GnnStack {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        blocks: usize,
        conv: ConvKind,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut out = Vec::with_capacity(blocks);
        for b in 0..blocks {
            let p = format!("{prefix}.block{b}");
            out.push(BlockParams {
                ln_gain: store.filled(format!("{p}.ln.gain"), 1, width, 1.0)?,
                ln_bias: store.zeros(format!("{p}.ln.bias"), 1, width)?,
                w_target: store.glorot(format!("{p}.w_target"), width, width, rng)?,
                w_source: store.glorot(format!("{p}.w_source"), width, width, rng)?,
                attn: store.glorot(format!("{p}.attn"), width, 1, rng)?,
                w_value: store.glorot(format!("{p}.w_value"), width, width, rng)?,
            });
        }
        Ok(GnnStack {
            width,
            conv,
            blocks: out,
        })
    }

    fn check(&self, tape: &Tape, h: Var, edges: &[(usize, usize)]) -> Result<usize> {
        let (n, w) = tape.shape(h);
        if w != self.width {
            return Err(Error::Shape(format!(
                "gnn expects width {}, got {w}",
                self.width
            )));
        }
        if let Some(&(s, t)) = edges.iter().find(|(s, t)| *s >= n || *t >= n) {
            return Err(Error::Shape(format!("edge ({s}, {t}) outside {n} nodes")));
        }
        Ok(n)
    }

    /// Attention convolution of block `b` applied to `x`.
    pub fn conv(
        &self,
        tape: &Tape,
        store: &ParamStore,
        b: usize,
        x: Var,
        edges: &[(usize, usize)],
    ) -> Result<ConvOutput> {
        let n = self.check(tape, x, edges)?;
        let p = &self.blocks[b];
        if edges.is_empty() {
            return Ok(ConvOutput {
                messages: tape.constant(Matrix::zeros(n, self.width)),
                attention: None,
            });
        }
        let src: Vec<usize> = edges.iter().map(|e| e.0).collect();
        let dst: Vec<usize> = edges.iter().map(|e| e.1).collect();
        let values = tape.matmul(x, tape.param(store, p.w_value));
        let values = tape.gather_rows(values, &src);
        let (weighted, attention) = match self.conv {
            ConvKind::Gatv2 => {
                let to_t = tape.matmul(x, tape.param(store, p.w_target));
                let to_s = tape.matmul(x, tape.param(store, p.w_source));
                let pair = tape.add(tape.gather_rows(to_t, &dst), tape.gather_rows(to_s, &src));
                let hidden = tape.leaky_relu(pair, LEAKY_SLOPE);
                let logits = tape.matmul(hidden, tape.param(store, p.attn));
                let alpha = tape.segment_softmax(logits, &dst);
                (tape.mul(values, alpha), Some(alpha))
            }
            ConvKind::Mean => {
                let mut deg = vec![0usize; n];
                for &t in &dst {
                    deg[t] += 1;
                }
                let w: Vec<f64> = dst.iter().map(|&t| 1.0 / deg[t] as f64).collect();
                let alpha = tape.constant(Matrix::column_vector(&w));
                (tape.mul(values, alpha), None)
            }
        };
        Ok(ConvOutput {
            messages: tape.scatter_add_rows(weighted, &dst, n),
            attention,
        })
    }

    /// `h + ELU(conv(LN(h)))`.
    pub fn block(
        &self,
        tape: &Tape,
        store: &ParamStore,
        b: usize,
        h: Var,
        edges: &[(usize, usize)],
    ) -> Result<Var> {
        self.check(tape, h, edges)?;
        if edges.is_empty() {
            // ELU(0) = 0: the residual path is the whole update.
            return Ok(h);
        }
        let p = &self.blocks[b];
        let z = tape.layer_norm_rows(h, LN_EPS);
        let z = tape.add(
            tape.mul(z, tape.param(store, p.ln_gain)),
            tape.param(store, p.ln_bias),
        );
        let m = self.conv(tape, store, b, z, edges)?.messages;
        Ok(tape.add(h, tape.elu(m)))
    }

    pub fn forward(
        &self,
        tape: &Tape,
        store: &ParamStore,
        h: Var,
        edges: &[(usize, usize)],
    ) -> Result<Var> {
        let mut h = h;
        for b in 0..self.blocks.len() {
            h = self.block(tape, store, b, h, edges)?;
        }
        Ok(h)
    }
}
