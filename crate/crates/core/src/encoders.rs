//! Temporal encoders: variable-length event windows to fixed-size vectors.
//!
//! Each input row is the raw feature vector with one extra column holding the
//! row's offset from the reference time divided by the past window length.
//! Encoders work on batches of sequences so that one tape op serves many
//! nodes; results are identical to encoding the sequences one at a time.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndiff::{Matrix, ParamId, ParamStore, SeededRng, Tape, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    #[default]
    Lstm,
    Transformer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    /// Width of a node embedding; the past and future halves get half each.
    pub embed_size: usize,
    pub lstm_hidden: usize,
    pub model_width: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_width: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            kind: EncoderKind::Lstm,
            embed_size: 20,
            lstm_hidden: 20,
            model_width: 20,
            heads: 5,
            layers: 3,
            ffn_width: 80,
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("encoder: {m}")));
        if self.embed_size == 0 || self.embed_size % 2 != 0 {
            return bad("embed_size must be even and positive");
        }
        match self.kind {
            EncoderKind::Lstm if self.lstm_hidden == 0 => bad("lstm_hidden must be positive"),
            EncoderKind::Transformer
                if self.heads == 0 || self.model_width % self.heads != 0 =>
            {
                bad("model_width must be divisible by heads")
            }
            EncoderKind::Transformer if self.layers == 0 || self.ffn_width == 0 => {
                bad("transformer needs at least one layer and a positive ffn width")
            }
            _ => Ok(()),
        }
    }

    pub fn half(&self) -> usize {
        self.embed_size / 2
    }
}

/// Inverted dropout applied during training only.
pub struct Dropout<'r> {
    pub p: f64,
    pub rng: Option<&'r mut SeededRng>,
}

impl<'r> Dropout<'r> {
    pub fn off() -> Self {
        Dropout { p: 0.0, rng: None }
    }

    pub fn apply(&mut self, tape: &Tape, v: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) if self.p > 0.0 => tape.dropout(v, self.p, true, rng),
            _ => v,
        }
    }
}

/// One sequence to encode: `rows` is `n × d`, `offsets` holds the `n` row
/// offsets in seconds from the reference time.
#[derive(Debug, Clone, Copy)]
pub struct Sequence<'a> {
    pub rows: &'a Matrix,
    pub offsets: &'a [i64],
}

impl Sequence<'_> {
    fn augmented_row(&self, r: usize, time_scale: f64) -> impl Iterator<Item = f64> + '_ {
        self.rows
            .row(r)
            .iter()
            .copied()
            .chain(std::iter::once(self.offsets[r] as f64 / time_scale))
    }
}

#[derive(Debug, Clone)]
pub struct LstmParams {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub w_ff1: ParamId,
    pub b_ff1: ParamId,
    pub w_ff2: ParamId,
    pub b_ff2: ParamId,
}

#[derive(Debug, Clone)]
pub struct TransformerParams {
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
    pub width: usize,
    pub heads: usize,
}

/// A sequence model producing one `out`-wide row per input sequence.
#[derive(Debug, Clone)]
pub enum SequenceEncoder {
    Lstm(LstmParams),
    Transformer(TransformerParams),
}

impl SequenceEncoder {
    /// `features` is the raw row width; one time column is added internally.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        spec: &EncoderSpec,
        features: usize,
        out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let d = features + 1;
        Ok(match spec.kind {
            EncoderKind::Lstm => {
                let h = spec.lstm_hidden;
                SequenceEncoder::Lstm(LstmParams {
                    w_input: store.glorot(format!("{prefix}.lstm.w_input"), d, 4 * h, rng)?,
                    w_hidden: store.glorot(format!("{prefix}.lstm.w_hidden"), h, 4 * h, rng)?,
                    bias: store.zeros(format!("{prefix}.lstm.bias"), 1, 4 * h)?,
                    w_out: store.glorot(format!("{prefix}.lstm.w_out"), h, out, rng)?,
                    b_out: store.zeros(format!("{prefix}.lstm.b_out"), 1, out)?,
                    hidden: h,
                })
            }
            EncoderKind::Transformer => {
                let w = spec.model_width;
                let f = spec.ffn_width;
                let mut layers = Vec::with_capacity(spec.layers);
                for l in 0..spec.layers {
                    let p = format!("{prefix}.tf.layer{l}");
                    layers.push(TransformerLayer {
                        ln1_gain: store.filled(format!("{p}.ln1.gain"), 1, w, 1.0)?,
                        ln1_bias: store.zeros(format!("{p}.ln1.bias"), 1, w)?,
                        w_q: store.glorot(format!("{p}.w_q"), w, w, rng)?,
                        w_k: store.glorot(format!("{p}.w_k"), w, w, rng)?,
                        w_v: store.glorot(format!("{p}.w_v"), w, w, rng)?,
                        w_o: store.glorot(format!("{p}.w_o"), w, w, rng)?,
                        b_o: store.zeros(format!("{p}.b_o"), 1, w)?,
                        ln2_gain: store.filled(format!("{p}.ln2.gain"), 1, w, 1.0)?,
                        ln2_bias: store.zeros(format!("{p}.ln2.bias"), 1, w)?,
                        w_ff1: store.glorot(format!("{p}.w_ff1"), w, f, rng)?,
                        b_ff1: store.zeros(format!("{p}.b_ff1"), 1, f)?,
                        w_ff2: store.glorot(format!("{p}.w_ff2"), f, w, rng)?,
                        b_ff2: store.zeros(format!("{p}.b_ff2"), 1, w)?,
                    });
                }
                SequenceEncoder::Transformer(TransformerParams {
                    w_in: store.glorot(format!("{prefix}.tf.w_in"), d, w, rng)?,
                    b_in: store.zeros(format!("{prefix}.tf.b_in"), 1, w)?,
                    layers,
                    ln_gain: store.filled(format!("{prefix}.tf.ln.gain"), 1, w, 1.0)?,
                    ln_bias: store.zeros(format!("{prefix}.tf.ln.bias"), 1, w)?,
                    w_out: store.glorot(format!("{prefix}.tf.w_out"), w, out, rng)?,
                    b_out: store.zeros(format!("{prefix}.tf.b_out"), 1, out)?,
                    width: w,
                    heads: spec.heads,
                })
            }
        })
    }

    fn input_width(&self, store: &ParamStore) -> usize {
        match self {
            SequenceEncoder::Lstm(p) => store.get(p.w_input).rows(),
            SequenceEncoder::Transformer(p) => store.get(p.w_in).rows(),
        }
    }

    /// Encodes every sequence; returns `B × out`.
    pub fn encode(
        &self,
        tape: &Tape,
        store: &ParamStore,
        seqs: &[Sequence<'_>],
        time_scale: f64,
        drop: &mut Dropout<'_>,
    ) -> Result<Var> {
        self.encode_traced(tape, store, seqs, time_scale, drop, None)
    }

    /// As [`encode`](Self::encode), also collecting every attention matrix
    /// (transformer only).
    pub fn encode_traced(
        &self,
        tape: &Tape,
        store: &ParamStore,
        seqs: &[Sequence<'_>],
        time_scale: f64,
        drop: &mut Dropout<'_>,
        trace: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let d = self.input_width(store);
        if seqs.is_empty() {
            return Err(Error::Shape("encoder called with no sequences".into()));
        }
        for s in seqs {
            if s.rows.rows() == 0 {
                return Err(Error::Shape("encoder input sequence is empty".into()));
            }
            if s.rows.cols() + 1 != d || s.offsets.len() != s.rows.rows() {
                return Err(Error::Shape(format!(
                    "encoder expects {} features per row, got {} ({} offsets for {} rows)",
                    d - 1,
                    s.rows.cols(),
                    s.offsets.len(),
                    s.rows.rows()
                )));
            }
        }
        match self {
            SequenceEncoder::Lstm(p) => Ok(lstm_encode(tape, store, p, seqs, time_scale, d)),
            SequenceEncoder::Transformer(p) => {
                Ok(transformer_encode(tape, store, p, seqs, time_scale, drop, trace))
            }
        }
    }
}

/// Runs all sequences in lockstep. Step `s` feeds row `s` of every sequence
/// still running; finished sequences keep their last state through an exact
/// 0/1 select.
fn lstm_encode(
    tape: &Tape,
    store: &ParamStore,
    p: &LstmParams,
    seqs: &[Sequence<'_>],
    time_scale: f64,
    d: usize,
) -> Var {
    let b = seqs.len();
    let hd = p.hidden;
    let lens: Vec<usize> = seqs.iter().map(|s| s.rows.rows()).collect();
    let steps = *lens.iter().max().expect("non-empty batch");

    // Step-major input: rows [s*b, (s+1)*b) hold step s of every sequence.
    let mut x = Matrix::zeros(steps * b, d);
    for (i, s) in seqs.iter().enumerate() {
        for r in 0..lens[i] {
            for (o, v) in x.row_mut(r * b + i).iter_mut().zip(s.augmented_row(r, time_scale)) {
                *o = v;
            }
        }
    }
    let pre_all = tape.linear(
        tape.constant(x),
        tape.param(store, p.w_input),
        tape.param(store, p.bias),
    );
    let w_hidden = tape.param(store, p.w_hidden);
    let mut h = tape.constant(Matrix::zeros(b, hd));
    let mut c = tape.constant(Matrix::zeros(b, hd));
    for s in 0..steps {
        let pre = tape.add(tape.slice_rows(pre_all, s * b, (s + 1) * b), tape.matmul(h, w_hidden));
        let hc = tape.lstm_cell(pre, c);
        let h_new = tape.slice_cols(hc, 0, hd);
        let c_new = tape.slice_cols(hc, hd, 2 * hd);
        if lens.iter().all(|&n| s < n) {
            h = h_new;
            c = c_new;
        } else {
            let keep: Vec<f64> = lens.iter().map(|&n| if s < n { 1.0 } else { 0.0 }).collect();
            let hold: Vec<f64> = keep.iter().map(|k| 1.0 - k).collect();
            let keep = tape.constant(Matrix::column_vector(&keep));
            let hold = tape.constant(Matrix::column_vector(&hold));
            h = tape.add(tape.mul(h_new, keep), tape.mul(h, hold));
            c = tape.add(tape.mul(c_new, keep), tape.mul(c, hold));
        }
    }
    tape.linear(h, tape.param(store, p.w_out), tape.param(store, p.b_out))
}

/// Sinusoidal encoding of row offsets measured in hours.
pub fn positional_encoding(offsets: &[i64], width: usize) -> Matrix {
    Matrix::from_fn(offsets.len(), width, |r, c| {
        let hours = offsets[r] as f64 / 3600.0;
        let freq = 1.0 / 10_000f64.powf((c - c % 2) as f64 / width as f64);
        if c % 2 == 0 {
            (hours * freq).sin()
        } else {
            (hours * freq).cos()
        }
    })
}

fn norm_affine(tape: &Tape, store: &ParamStore, x: Var, gain: ParamId, bias: ParamId) -> Var {
    let z = tape.layer_norm_rows(x, LN_EPS);
    tape.add(tape.mul(z, tape.param(store, gain)), tape.param(store, bias))
}

fn transformer_encode(
    tape: &Tape,
    store: &ParamStore,
    p: &TransformerParams,
    seqs: &[Sequence<'_>],
    time_scale: f64,
    drop: &mut Dropout<'_>,
    mut trace: Option<&mut Vec<Var>>,
) -> Var {
    let dh = p.width / p.heads;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut pooled = Vec::with_capacity(seqs.len());
    for s in seqs {
        let n = s.rows.rows();
        let mut rows = Vec::with_capacity(n);
        for r in 0..n {
            rows.push(s.augmented_row(r, time_scale).collect::<Vec<f64>>());
        }
        let x = tape.constant(Matrix::from_rows(&rows).expect("rectangular rows"));
        let mut h = tape.linear(x, tape.param(store, p.w_in), tape.param(store, p.b_in));
        h = tape.add(h, tape.constant(positional_encoding(s.offsets, p.width)));
        for l in &p.layers {
            let z = norm_affine(tape, store, h, l.ln1_gain, l.ln1_bias);
            let q = tape.matmul(z, tape.param(store, l.w_q));
            let k = tape.matmul(z, tape.param(store, l.w_k));
            let v = tape.matmul(z, tape.param(store, l.w_v));
            let mut heads = Vec::with_capacity(p.heads);
            for i in 0..p.heads {
                let (a, b) = (i * dh, (i + 1) * dh);
                let scores = tape.matmul(tape.slice_cols(q, a, b), tape.transpose(tape.slice_cols(k, a, b)));
                let att = tape.softmax_rows(tape.scale(scores, inv_sqrt));
                if let Some(t) = trace.as_deref_mut() {
                    t.push(att);
                }
                heads.push(tape.matmul(att, tape.slice_cols(v, a, b)));
            }
            let merged = tape.concat_cols(&heads);
            let attn_out = tape.linear(merged, tape.param(store, l.w_o), tape.param(store, l.b_o));
            h = tape.add(h, drop.apply(tape, attn_out));
            let z = norm_affine(tape, store, h, l.ln2_gain, l.ln2_bias);
            let ff = tape.relu(tape.linear(z, tape.param(store, l.w_ff1), tape.param(store, l.b_ff1)));
            let ff = tape.linear(ff, tape.param(store, l.w_ff2), tape.param(store, l.b_ff2));
            h = tape.add(h, drop.apply(tape, ff));
        }
        let h = norm_affine(tape, store, h, p.ln_gain, p.ln_bias);
        pooled.push(tape.mean_rows(h));
    }
    let pooled = tape.concat_rows(&pooled);
    tape.linear(pooled, tape.param(store, p.w_out), tape.param(store, p.b_out))
}

/// Past encoder, future encoder and empty-future vector of one variable type.
#[derive(Debug, Clone)]
pub struct TypeEncoder {
    pub past: SequenceEncoder,
    pub future: SequenceEncoder,
    pub null_future: ParamId,
    pub half: usize,
}

/// Per-node inputs to a [`TypeEncoder`].
#[derive(Debug, Clone, Copy)]
pub struct NodeInput<'a> {
    pub past: Sequence<'a>,
    pub future: Sequence<'a>,
}

/// Encoded nodes: `embedding` is `B × embed_size`, `future` its right half.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub embedding: Var,
    pub future: Var,
}

impl TypeEncoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        spec: &EncoderSpec,
        past_features: usize,
        future_features: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let half = spec.half();
        Ok(TypeEncoder {
            past: SequenceEncoder::new(store, &format!("{prefix}.past"), spec, past_features, half, rng)?,
            future: SequenceEncoder::new(store, &format!("{prefix}.future"), spec, future_features, half, rng)?,
            null_future: store.zeros(format!("{prefix}.null_future"), 1, half)?,
            half,
        })
    }

    pub fn encode(
        &self,
        tape: &Tape,
        store: &ParamStore,
        nodes: &[NodeInput<'_>],
        time_scale: f64,
        drop: &mut Dropout<'_>,
    ) -> Result<Encoded> {
        let past: Vec<Sequence<'_>> = nodes.iter().map(|n| n.past).collect();
        let h_past = self.past.encode(tape, store, &past, time_scale, drop)?;

        let with_future: Vec<Sequence<'_>> = nodes
            .iter()
            .filter(|n| n.future.rows.rows() > 0)
            .map(|n| n.future)
            .collect();
        let null = tape.param(store, self.null_future);
        let h_future = if with_future.is_empty() {
            tape.gather_rows(null, &vec![0; nodes.len()])
        } else {
            let enc = self.future.encode(tape, store, &with_future, time_scale, drop)?;
            let table = tape.concat_rows(&[enc, null]);
            let mut next = 0;
            let idx: Vec<usize> = nodes
                .iter()
                .map(|n| {
                    if n.future.rows.rows() > 0 {
                        next += 1;
                        next - 1
                    } else {
                        with_future.len()
                    }
                })
                .collect();
            tape.gather_rows(table, &idx)
        };
        Ok(Encoded {
            embedding: tape.concat_cols(&[h_past, h_future]),
            future: h_future,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndiff::{grad_check, seeded_rng};

    fn spec(kind: EncoderKind) -> EncoderSpec {
        EncoderSpec {
            kind,
            ..EncoderSpec::default()
        }
    }

    fn small(kind: EncoderKind) -> EncoderSpec {
        EncoderSpec {
            kind,
            embed_size: 6,
            lstm_hidden: 4,
            model_width: 4,
            heads: 2,
            layers: 2,
            ffn_width: 8,
        }
    }

    fn random_seq(n: usize, d: usize, rng: &mut SeededRng) -> (Matrix, Vec<i64>) {
        let m = Matrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        let mut offs: Vec<i64> = (0..n).map(|_| -rng.random_range(1..86_400)).collect();
        offs.sort_unstable();
        (m, offs)
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn single_step_lstm_matches_cell_equations() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(1);
        let enc = SequenceEncoder::new(&mut store, "e", &spec(EncoderKind::Lstm), 3, 10, &mut rng).unwrap();
        let SequenceEncoder::Lstm(p) = &enc else { unreachable!() };
        // non-zero biases so they are exercised
        *store.get_mut(p.bias) = Matrix::from_fn(1, 80, |_, c| 0.01 * c as f64 - 0.3);
        *store.get_mut(p.b_out) = Matrix::from_fn(1, 10, |_, c| 0.1 * c as f64);
        let rows = Matrix::row_vector(&[0.2, -0.4, 0.9]);
        let offsets = [-1800];
        let tape = Tape::new();
        let out = enc
            .encode(&tape, &store, &[Sequence { rows: &rows, offsets: &offsets }], 3600.0, &mut Dropout::off())
            .unwrap();

        let x = [0.2, -0.4, 0.9, -0.5];
        let (wi, b) = (store.get(p.w_input), store.get(p.bias));
        let hd = 20;
        let pre: Vec<f64> = (0..4 * hd)
            .map(|j| b.get(0, j) + (0..4).map(|i| x[i] * wi.get(i, j)).sum::<f64>())
            .collect();
        let h: Vec<f64> = (0..hd)
            .map(|j| {
                let c = sigmoid(pre[j]) * pre[2 * hd + j].tanh();
                sigmoid(pre[3 * hd + j]) * c.tanh()
            })
            .collect();
        let (wo, bo) = (store.get(p.w_out), store.get(p.b_out));
        let got = tape.value(out).clone();
        for j in 0..10 {
            let expect = bo.get(0, j) + (0..hd).map(|i| h[i] * wo.get(i, j)).sum::<f64>();
            assert!((got.get(0, j) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn batched_lstm_equals_one_at_a_time() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(2);
        let enc = SequenceEncoder::new(&mut store, "e", &spec(EncoderKind::Lstm), 2, 10, &mut rng).unwrap();
        let seqs: Vec<_> = [5, 1, 8, 3].iter().map(|&n| random_seq(n, 2, &mut rng)).collect();
        let views: Vec<_> = seqs.iter().map(|(m, o)| Sequence { rows: m, offsets: o }).collect();
        let tape = Tape::new();
        let all = enc.encode(&tape, &store, &views, 86_400.0, &mut Dropout::off()).unwrap();
        let all = tape.value(all).clone();
        for (i, v) in views.iter().enumerate() {
            let t = Tape::new();
            let one = enc.encode(&t, &store, &[*v], 86_400.0, &mut Dropout::off()).unwrap();
            assert_eq!(t.value(one).row(0), all.row(i));
        }
    }

    #[test]
    fn repeating_last_row_changes_lstm_output() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(3);
        let enc = SequenceEncoder::new(&mut store, "e", &spec(EncoderKind::Lstm), 2, 10, &mut rng).unwrap();
        let (m, o) = random_seq(4, 2, &mut rng);
        let mut rows: Vec<Vec<f64>> = (0..4).map(|r| m.row(r).to_vec()).collect();
        rows.push(rows[3].clone());
        let longer = Matrix::from_rows(&rows).unwrap();
        let mut o2 = o.clone();
        o2.push(o[3]);
        let t = Tape::new();
        let a = enc.encode(&t, &store, &[Sequence { rows: &m, offsets: &o }], 1e5, &mut Dropout::off()).unwrap();
        let b = enc.encode(&t, &store, &[Sequence { rows: &longer, offsets: &o2 }], 1e5, &mut Dropout::off()).unwrap();
        assert!(t.value(a).max_abs_diff(&t.value(b)) > 1e-9);
    }

    #[test]
    fn transformer_is_invariant_to_row_order() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(4);
        let enc = SequenceEncoder::new(&mut store, "e", &spec(EncoderKind::Transformer), 3, 10, &mut rng).unwrap();
        let (m, o) = random_seq(6, 3, &mut rng);
        let perm = [3, 0, 5, 1, 4, 2];
        let pm = m.select_rows(&perm);
        let po: Vec<i64> = perm.iter().map(|&i| o[i]).collect();
        let t = Tape::new();
        let a = enc.encode(&t, &store, &[Sequence { rows: &m, offsets: &o }], 1e5, &mut Dropout::off()).unwrap();
        let b = enc.encode(&t, &store, &[Sequence { rows: &pm, offsets: &po }], 1e5, &mut Dropout::off()).unwrap();
        assert!(t.value(a).max_abs_diff(&t.value(b)) < 1e-12);
    }

    #[test]
    fn transformer_attention_rows_sum_to_one() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(5);
        let enc = SequenceEncoder::new(&mut store, "e", &spec(EncoderKind::Transformer), 2, 10, &mut rng).unwrap();
        let (m, o) = random_seq(7, 2, &mut rng);
        let t = Tape::new();
        let mut trace = Vec::new();
        enc.encode_traced(&t, &store, &[Sequence { rows: &m, offsets: &o }], 1e5, &mut Dropout::off(), Some(&mut trace))
            .unwrap();
        assert_eq!(trace.len(), 3 * 5);
        for att in trace {
            let a = t.value(att);
            for r in 0..a.rows() {
                assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn single_token_transformer_matches_direct_evaluation() {
        // With one row, every attention matrix is [1], so each layer reduces
        // to h + Wo·(LN(h)·Wv) + bo followed by the feed-forward residual.
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(6);
        let sp = small(EncoderKind::Transformer);
        let enc = SequenceEncoder::new(&mut store, "e", &sp, 2, 3, &mut rng).unwrap();
        let SequenceEncoder::Transformer(p) = &enc else { unreachable!() };
        let rows = Matrix::row_vector(&[0.5, -1.0]);
        let offsets = [-7200];
        let t = Tape::new();
        let out = enc.encode(&t, &store, &[Sequence { rows: &rows, offsets: &offsets }], 86_400.0, &mut Dropout::off()).unwrap();

        let vecmat = |x: &[f64], w: &Matrix| -> Vec<f64> {
            (0..w.cols()).map(|j| (0..w.rows()).map(|i| x[i] * w.get(i, j)).sum()).collect()
        };
        let plus = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x + y).collect() };
        let ln = |x: &[f64], g: &Matrix, b: &Matrix| -> Vec<f64> {
            let n = x.len() as f64;
            let mu = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            x.iter().enumerate().map(|(i, v)| (v - mu) / (var + LN_EPS).sqrt() * g.get(0, i) + b.get(0, i)).collect()
        };
        let x = [0.5, -1.0, -7200.0 / 86_400.0];
        let pe = positional_encoding(&offsets, 4);
        let mut h = plus(&plus(&vecmat(&x, store.get(p.w_in)), store.get(p.b_in).as_slice()), pe.row(0));
        for l in &p.layers {
            let z = ln(&h, store.get(l.ln1_gain), store.get(l.ln1_bias));
            let v = vecmat(&z, store.get(l.w_v));
            let a = plus(&vecmat(&v, store.get(l.w_o)), store.get(l.b_o).as_slice());
            h = plus(&h, &a);
            let z = ln(&h, store.get(l.ln2_gain), store.get(l.ln2_bias));
            let f: Vec<f64> = plus(&vecmat(&z, store.get(l.w_ff1)), store.get(l.b_ff1).as_slice())
                .into_iter()
                .map(|v| v.max(0.0))
                .collect();
            h = plus(&h, &plus(&vecmat(&f, store.get(l.w_ff2)), store.get(l.b_ff2).as_slice()));
        }
        let z = ln(&h, store.get(p.ln_gain), store.get(p.ln_bias));
        let expect = plus(&vecmat(&z, store.get(p.w_out)), store.get(p.b_out).as_slice());
        let got = t.value(out);
        for j in 0..3 {
            assert!((got.get(0, j) - expect[j]).abs() < 1e-12, "{j}");
        }
    }

    #[test]
    fn empty_future_uses_null_vector_and_output_width_is_fixed() {
        for kind in [EncoderKind::Lstm, EncoderKind::Transformer] {
            let mut store = ParamStore::new();
            let mut rng = seeded_rng(7);
            let enc = TypeEncoder::new(&mut store, "t", &spec(kind), 4, 3, &mut rng).unwrap();
            *store.get_mut(enc.null_future) = Matrix::from_fn(1, 10, |_, c| c as f64);
            let (p1, o1) = random_seq(9, 4, &mut rng);
            let (f1, g1) = random_seq(3, 3, &mut rng);
            let (p2, o2) = random_seq(1, 4, &mut rng);
            let empty = Matrix::zeros(0, 3);
            let nodes = [
                NodeInput { past: Sequence { rows: &p1, offsets: &o1 }, future: Sequence { rows: &f1, offsets: &g1 } },
                NodeInput { past: Sequence { rows: &p2, offsets: &o2 }, future: Sequence { rows: &empty, offsets: &[] } },
            ];
            let t = Tape::new();
            let e = enc.encode(&t, &store, &nodes, 86_400.0, &mut Dropout::off()).unwrap();
            let emb = t.value(e.embedding).clone();
            assert_eq!(emb.shape(), (2, 20));
            assert_eq!(&emb.row(1)[10..], store.get(enc.null_future).as_slice());
            assert_eq!(t.value(e.future).row(0), &emb.row(0)[10..]);
        }
    }

    #[test]
    fn arity_mismatch_is_an_error() {
        let mut store = ParamStore::new();
        let enc = SequenceEncoder::new(&mut store, "e", &spec(EncoderKind::Lstm), 2, 10, &mut seeded_rng(0)).unwrap();
        let m = Matrix::zeros(2, 3);
        let t = Tape::new();
        let r = enc.encode(&t, &store, &[Sequence { rows: &m, offsets: &[0, 1] }], 1.0, &mut Dropout::off());
        assert!(matches!(r, Err(Error::Shape(_))));
        assert!(EncoderSpec { embed_size: 7, ..EncoderSpec::default() }.validate().is_err());
        assert!(EncoderSpec { heads: 3, kind: EncoderKind::Transformer, ..EncoderSpec::default() }.validate().is_err());
    }

    #[test]
    fn gradients_reach_every_encoder_parameter() {
        for kind in [EncoderKind::Lstm, EncoderKind::Transformer] {
            let mut store = ParamStore::new();
            let mut rng = seeded_rng(8);
            let enc = TypeEncoder::new(&mut store, "t", &small(kind), 2, 1, &mut rng).unwrap();
            let seqs: Vec<_> = (0..3).map(|i| (random_seq(3 + i, 2, &mut rng), random_seq(2, 1, &mut rng))).collect();
            let (np, no) = random_seq(2, 2, &mut rng);
            let empty = Matrix::zeros(0, 1);
            let loss = |t: &Tape, s: &ParamStore| -> Result<Var> {
                let mut nodes: Vec<NodeInput<'_>> = seqs
                    .iter()
                    .map(|((p, po), (f, fo))| NodeInput {
                        past: Sequence { rows: p, offsets: po },
                        future: Sequence { rows: f, offsets: fo },
                    })
                    .collect();
                nodes.push(NodeInput { past: Sequence { rows: &np, offsets: &no }, future: Sequence { rows: &empty, offsets: &[] } });
                let e = enc.encode(t, s, &nodes, 86_400.0, &mut Dropout::off())?;
                let w = t.constant(Matrix::from_fn(4, 6, |r, c| ((r * 7 + c * 3) % 5) as f64 - 2.0));
                Ok(t.sum(t.tanh(t.mul(e.embedding, w))))
            };
            let tape = Tape::new();
            let out = loss(&tape, &store).unwrap();
            let grads = tape.backward(out).unwrap();
            for (id, name, _) in store.iter() {
                let g = grads.param(id).map_or(0.0, |g| g.norm());
                assert!(g > 0.0, "{kind:?}: no gradient for {name}");
            }
            let report = grad_check(&store, loss, 1e-5, 1e-4, 6, &mut seeded_rng(1)).unwrap();
            assert!(report.passed(), "{kind:?}: {report:?}");
        }
    }
}
