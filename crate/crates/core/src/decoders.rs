//! Output decoders from final node embeddings to forecast rows.
//!
//! The fixed decoder emits a `max_fs × l` block in one shot and keeps the
//! first `fs` rows. The dynamic decoder runs once per future step on
//! `[h ‖ h_future ‖ known-future row ‖ time offset]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndiff::{Matrix, ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    Fixed,
    Dynamic,
}

/// Dense layers with ELU between them and a linear output.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: &[usize],
        output: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(output);
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (i, w) in widths.windows(2).enumerate() {
            layers.push((
                store.glorot(format!("{prefix}.w{i}"), w[0], w[1], rng)?,
                store.zeros(format!("{prefix}.b{i}"), 1, w[1])?,
            ));
        }
        Ok(Mlp { layers })
    }

    pub fn input_width(&self, store: &ParamStore) -> usize {
        store.get(self.layers[0].0).rows()
    }

    pub fn output_width(&self, store: &ParamStore) -> usize {
        store.get(self.layers.last().expect("at least one layer").0).cols()
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = tape.linear(h, tape.param(store, w), tape.param(store, b));
            if i + 1 < self.layers.len() {
                h = tape.elu(h);
            }
        }
        h
    }
}

#[derive(Debug, Clone)]
pub struct FixedDecoder {
    pub mlp: Mlp,
    pub max_fs: usize,
    pub labels: usize,
}

impl FixedDecoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        embed: usize,
        hidden: &[usize],
        max_fs: usize,
        labels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if max_fs == 0 || labels == 0 {
            return Err(Error::Config("fixed decoder needs max_fs ≥ 1 and at least one label".into()));
        }
        Ok(FixedDecoder {
            mlp: Mlp::new(store, prefix, embed, hidden, max_fs * labels, rng)?,
            max_fs,
            labels,
        })
    }

    /// Runs the MLP on `B × embed` rows; returns `B × (max_fs·l)` with label
    /// column `c` occupying output columns `[c·max_fs, (c+1)·max_fs)`.
    pub fn forward_block(&self, tape: &Tape, store: &ParamStore, h: Var) -> Var {
        self.mlp.forward(tape, store, h)
    }

    /// First `fs` rows of node `row`'s block as an `fs × l` matrix.
    pub fn take(&self, tape: &Tape, block: Var, row: usize, fs: usize) -> Result<Option<Var>> {
        if fs > self.max_fs {
            return Err(Error::ForecastTooLong {
                fs,
                max_fs: self.max_fs,
            });
        }
        if fs == 0 {
            return Ok(None);
        }
        let r = tape.slice_rows(block, row, row + 1);
        let cols: Vec<Var> = (0..self.labels)
            .map(|c| {
                let start = c * self.max_fs;
                tape.transpose(tape.slice_cols(r, start, start + fs))
            })
            .collect();
        Ok(Some(if cols.len() == 1 { cols[0] } else { tape.concat_cols(&cols) }))
    }

    pub fn decode(&self, tape: &Tape, store: &ParamStore, h: Var, fs: usize) -> Result<Option<Var>> {
        if fs > self.max_fs {
            return Err(Error::ForecastTooLong {
                fs,
                max_fs: self.max_fs,
            });
        }
        if fs == 0 {
            return Ok(None);
        }
        let block = self.forward_block(tape, store, h);
        self.take(tape, block, 0, fs)
    }
}

#[derive(Debug, Clone)]
pub struct DynamicDecoder {
    pub mlp: Mlp,
    pub embed: usize,
    pub known_future: usize,
}

/// Per-step inputs of one node for the dynamic decoder.
#[derive(Debug, Clone, Copy)]
pub struct StepInputs<'a> {
    /// Row of the final embeddings matrix holding this node.
    pub row: usize,
    /// Row of the future-half matrix holding this node.
    pub future_row: usize,
    /// `fs × known_future` values.
    pub known: &'a Matrix,
    pub offsets: &'a [i64],
}

impl DynamicDecoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        embed: usize,
        hidden: &[usize],
        known_future: usize,
        labels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if labels == 0 {
            return Err(Error::Config("dynamic decoder needs at least one label".into()));
        }
        let input = embed + embed / 2 + known_future + 1;
        Ok(DynamicDecoder {
            mlp: Mlp::new(store, prefix, input, hidden, labels, rng)?,
            embed,
            known_future,
        })
    }

    /// Decodes every step of every node in one MLP pass. `h` holds final
    /// embeddings and `h_future` the encoder's future halves. Returns one
    /// `fs × l` forecast per node, `None` where `fs = 0`.
    pub fn decode(
        &self,
        tape: &Tape,
        store: &ParamStore,
        h: Var,
        h_future: Var,
        nodes: &[StepInputs<'_>],
        time_scale: f64,
    ) -> Result<Vec<Option<Var>>> {
        if tape.shape(h).1 != self.embed || tape.shape(h_future).1 != self.embed / 2 {
            return Err(Error::Shape(format!(
                "dynamic decoder expects widths {} and {}, got {} and {}",
                self.embed,
                self.embed / 2,
                tape.shape(h).1,
                tape.shape(h_future).1
            )));
        }
        let mut rows = Vec::new();
        let mut future_rows = Vec::new();
        let mut known = Vec::new();
        for n in nodes {
            if n.known.cols() != self.known_future || n.known.rows() != n.offsets.len() {
                return Err(Error::Shape(format!(
                    "dynamic decoder expects {} known-future columns, got {} ({} offsets for {} rows)",
                    self.known_future,
                    n.known.cols(),
                    n.offsets.len(),
                    n.known.rows()
                )));
            }
            for (r, &o) in n.offsets.iter().enumerate() {
                rows.push(n.row);
                future_rows.push(n.future_row);
                let mut k = n.known.row(r).to_vec();
                k.push(o as f64 / time_scale);
                known.push(k);
            }
        }
        if rows.is_empty() {
            return Ok(vec![None; nodes.len()]);
        }
        let input = tape.concat_cols(&[
            tape.gather_rows(h, &rows),
            tape.gather_rows(h_future, &future_rows),
            tape.constant(Matrix::from_rows(&known)?),
        ]);
        let out = self.mlp.forward(tape, store, input);
        let mut start = 0;
        Ok(nodes
            .iter()
            .map(|n| {
                let fs = n.offsets.len();
                let v = (fs > 0).then(|| tape.slice_rows(out, start, start + fs));
                start += fs;
                v
            })
            .collect())
    }
}

#[derive(Debug, Clone)]
pub enum Decoder {
    Fixed(FixedDecoder),
    Dynamic(DynamicDecoder),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndiff::seeded_rng;

    fn elu(x: f64) -> f64 {
        if x > 0.0 {
            x
        } else {
            x.exp_m1()
        }
    }

    fn dense(store: &ParamStore, mlp: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (i, &(w, b)) in mlp.layers.iter().enumerate() {
            let (w, b) = (store.get(w), store.get(b));
            let mut next: Vec<f64> = (0..w.cols())
                .map(|j| b.get(0, j) + (0..w.rows()).map(|k| h[k] * w.get(k, j)).sum::<f64>())
                .collect();
            if i + 1 < mlp.layers.len() {
                next.iter_mut().for_each(|v| *v = elu(*v));
            }
            h = next;
        }
        h
    }

    fn randomize_biases(store: &mut ParamStore, mlp: &Mlp) {
        for (i, &(_, b)) in mlp.layers.iter().enumerate() {
            let m = store.get_mut(b);
            for (j, v) in m.as_mut_slice().iter_mut().enumerate() {
                *v = 0.05 * ((i + j) % 7) as f64 - 0.15;
            }
        }
    }

    #[test]
    fn fixed_decoder_shapes_and_limits() {
        let mut store = ParamStore::new();
        let dec = FixedDecoder::new(&mut store, "d", 6, &[8, 8], 5, 2, &mut seeded_rng(0)).unwrap();
        let t = Tape::new();
        let h = t.constant(Matrix::from_fn(1, 6, |_, c| c as f64 * 0.1));
        assert!(dec.decode(&t, &store, h, 0).unwrap().is_none());
        for fs in 1..=5 {
            let out = dec.decode(&t, &store, h, fs).unwrap().unwrap();
            assert_eq!(t.shape(out), (fs, 2));
        }
        assert!(matches!(
            dec.decode(&t, &store, h, 6),
            Err(Error::ForecastTooLong { fs: 6, max_fs: 5 })
        ));
    }

    #[test]
    fn fixed_decoder_layout_matches_dense_mlp() {
        let mut store = ParamStore::new();
        let dec = FixedDecoder::new(&mut store, "d", 4, &[8], 3, 2, &mut seeded_rng(1)).unwrap();
        randomize_biases(&mut store, &dec.mlp);
        let x = [0.3, -0.1, 0.7, 0.2];
        let raw = dense(&store, &dec.mlp, &x);
        let t = Tape::new();
        let out = dec.decode(&t, &store, t.constant(Matrix::row_vector(&x)), 2).unwrap().unwrap();
        let got = t.value(out);
        for r in 0..2 {
            for c in 0..2 {
                assert!((got.get(r, c) - raw[c * 3 + r]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_rows_receive_no_gradient() {
        let mut store = ParamStore::new();
        let dec = FixedDecoder::new(&mut store, "d", 4, &[8], 5, 1, &mut seeded_rng(2)).unwrap();
        let t = Tape::new();
        let out = dec
            .decode(&t, &store, t.constant(Matrix::row_vector(&[0.1, 0.2, 0.3, 0.4])), 2)
            .unwrap()
            .unwrap();
        let grads = t.backward(t.sum(t.square(out))).unwrap();
        let (w, b) = *dec.mlp.layers.last().unwrap();
        let gw = grads.param(w).unwrap();
        let gb = grads.param(b).unwrap();
        for c in 0..5 {
            let col_norm: f64 = gw.column(c).iter().map(|v| v.abs()).sum::<f64>() + gb.get(0, c).abs();
            if c < 2 {
                assert!(col_norm > 0.0);
            } else {
                assert_eq!(col_norm, 0.0);
            }
        }
        // the same holds numerically
        let report = crate::ndiff::grad_check(
            &store,
            |t, s| {
                let out = dec.decode(t, s, t.constant(Matrix::row_vector(&[0.1, 0.2, 0.3, 0.4])), 2)?.unwrap();
                Ok(t.sum(t.square(out)))
            },
            1e-5,
            1e-4,
            usize::MAX,
            &mut seeded_rng(0),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn dynamic_decoder_matches_dense_mlp_per_step() {
        let mut store = ParamStore::new();
        let dec = DynamicDecoder::new(&mut store, "d", 4, &[6, 6], 2, 1, &mut seeded_rng(3)).unwrap();
        randomize_biases(&mut store, &dec.mlp);
        let h = Matrix::from_rows(&[vec![0.1, 0.2, 0.3, 0.4], vec![-0.5, 0.6, -0.7, 0.8]]).unwrap();
        let hf = Matrix::from_rows(&[vec![0.3, 0.4], vec![-0.7, 0.8]]).unwrap();
        let known_a = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.5], vec![1.0, 0.0]]).unwrap();
        let known_b = Matrix::zeros(0, 2);
        let offs_a = [0, 1800, 0];
        let t = Tape::new();
        let (hv, hfv) = (t.constant(h.clone()), t.constant(hf.clone()));
        let nodes = [
            StepInputs { row: 1, future_row: 1, known: &known_a, offsets: &offs_a },
            StepInputs { row: 0, future_row: 0, known: &known_b, offsets: &[] },
        ];
        let out = dec.decode(&t, &store, hv, hfv, &nodes, 3600.0).unwrap();
        assert!(out[1].is_none());
        let got = t.value(out[0].unwrap()).clone();
        assert_eq!(got.shape(), (3, 1));
        for r in 0..3 {
            let mut x = h.row(1).to_vec();
            x.extend_from_slice(hf.row(1));
            x.extend_from_slice(known_a.row(r));
            x.push(offs_a[r] as f64 / 3600.0);
            assert!((got.get(r, 0) - dense(&store, &dec.mlp, &x)[0]).abs() < 1e-12);
        }
        // identical per-step inputs give identical outputs
        assert_eq!(got.get(0, 0), got.get(2, 0));
    }

    #[test]
    fn dynamic_decoder_has_no_length_cap_and_checks_widths() {
        let mut store = ParamStore::new();
        let dec = DynamicDecoder::new(&mut store, "d", 4, &[6], 0, 2, &mut seeded_rng(4)).unwrap();
        let known = Matrix::zeros(500, 0);
        let offs: Vec<i64> = (0..500).map(|i| i * 60).collect();
        let t = Tape::new();
        let h = t.constant(Matrix::zeros(1, 4));
        let hf = t.constant(Matrix::zeros(1, 2));
        let out = dec
            .decode(&t, &store, h, hf, &[StepInputs { row: 0, future_row: 0, known: &known, offsets: &offs }], 1.0)
            .unwrap();
        assert_eq!(t.shape(out[0].unwrap()), (500, 2));
        let bad = t.constant(Matrix::zeros(1, 3));
        assert!(dec.decode(&t, &store, bad, hf, &[], 1.0).is_err());
    }
}
