//! Reference forecasters scored with the same metrics as the model.
//!
//! Both work on snapshots in physical units and never touch model state.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::events::{EventStore, NodeKey, Registry, VarType};
use crate::ndiff::Matrix;
use crate::sampler::Snapshot;
use crate::train::{compute_report, MetricReport, Pooling, ScoredForecast};
use crate::{Error, Result};

pub const DEFAULT_PERIODS_H: [f64; 3] = [12.42, 12.0, 25.82];

/// Holds the last observed value of every label column over the horizon.
pub fn persistence_forecasts(snapshots: &[Snapshot], registry: &Registry) -> Result<Vec<ScoredForecast>> {
    let mut out = Vec::new();
    for s in snapshots {
        for n in &s.nodes {
            let Some(y) = &n.y else { continue };
            if y.rows() == 0 || n.x_past.rows() == 0 {
                continue;
            }
            let spec = registry.require_spec(&n.node.var_type)?;
            let last = n.x_past.row(n.x_past.rows() - 1);
            out.push(ScoredForecast {
                reference_time: s.reference_time,
                node: n.node.clone(),
                offsets: n.future_offsets.clone(),
                truth: y.clone(),
                forecast: Matrix::from_fn(y.rows(), y.cols(), |_, c| last[spec.labels[c]]),
            });
        }
    }
    Ok(out)
}

/// Per-node least-squares fit of a mean plus one cosine/sine pair per period.
#[derive(Debug, Clone, PartialEq)]
pub struct HarmonicBaseline {
    pub periods_h: Vec<f64>,
    /// Per node, per label column: `[mean, a1, b1, a2, b2, ...]`.
    pub coefficients: BTreeMap<NodeKey, Vec<Vec<f64>>>,
}

fn basis(periods_h: &[f64], t: i64) -> Vec<f64> {
    let hours = t as f64 / 3600.0;
    let mut row = Vec::with_capacity(1 + 2 * periods_h.len());
    row.push(1.0);
    for p in periods_h {
        let a = 2.0 * PI * hours / p;
        row.push(a.cos());
        row.push(a.sin());
    }
    row
}

impl HarmonicBaseline {
    /// Fits every node of the target types on events in `[t0, t1)`. Nodes
    /// with too few events for the basis are left out.
    pub fn fit(store: &EventStore, t0: i64, t1: i64, targets: &BTreeSet<VarType>, periods_h: &[f64]) -> Result<Self> {
        if t0 >= t1 {
            return Err(Error::EmptyRange(t0, t1));
        }
        if periods_h.iter().any(|p| !(*p > 0.0)) {
            return Err(Error::Config("harmonic periods must be positive".into()));
        }
        let width = 1 + 2 * periods_h.len();
        let mut coefficients = BTreeMap::new();
        for node in store.nodes() {
            if !targets.contains(&node.var_type) {
                continue;
            }
            let spec = store.registry().require_spec(&node.var_type)?;
            let w = store.query_window(node, t0, t1);
            if w.len() < width {
                continue;
            }
            let design = DMatrix::from_fn(w.len(), width, |r, c| basis(periods_h, w.timestamps[r])[c]);
            let svd = design.svd(true, true);
            let mut per_label = Vec::new();
            for &col in &spec.labels {
                let rhs = DVector::from_fn(w.len(), |r, _| w.row(r)[col]);
                let x = svd
                    .solve(&rhs, 1e-12)
                    .map_err(|e| Error::Config(format!("harmonic fit for {node}: {e}")))?;
                per_label.push(x.iter().copied().collect());
            }
            coefficients.insert(node.clone(), per_label);
        }
        Ok(HarmonicBaseline {
            periods_h: periods_h.to_vec(),
            coefficients,
        })
    }

    pub fn predict(&self, node: &NodeKey, t: i64) -> Option<Vec<f64>> {
        let coef = self.coefficients.get(node)?;
        let b = basis(&self.periods_h, t);
        Some(coef.iter().map(|c| c.iter().zip(&b).map(|(x, y)| x * y).sum()).collect())
    }

    pub fn forecasts(&self, snapshots: &[Snapshot]) -> Vec<ScoredForecast> {
        let mut out = Vec::new();
        for s in snapshots {
            for n in &s.nodes {
                let Some(y) = &n.y else { continue };
                if y.rows() == 0 || !self.coefficients.contains_key(&n.node) {
                    continue;
                }
                let rows: Vec<Vec<f64>> = n
                    .future_offsets
                    .iter()
                    .map(|o| self.predict(&n.node, s.reference_time + o).expect("fitted node"))
                    .collect();
                out.push(ScoredForecast {
                    reference_time: s.reference_time,
                    node: n.node.clone(),
                    offsets: n.future_offsets.clone(),
                    truth: y.clone(),
                    forecast: Matrix::from_fn(y.rows(), y.cols(), |r, c| rows[r][c]),
                });
            }
        }
        out
    }
}

pub fn score(forecasts: &[ScoredForecast], registry: &Registry, pooling: Pooling) -> Result<MetricReport> {
    if forecasts.is_empty() {
        return Err(Error::NoTarget);
    }
    Ok(compute_report(forecasts, registry, pooling, None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::Event;
    use crate::graph::TopologyMode;
    use crate::sampler::{sample_snapshot, WindowSpec};
    use crate::synth::astronomical_tide;
    use crate::synth::Constituent;

    fn store_from(f: impl Fn(i64) -> f64, days: i64) -> EventStore {
        let reg = Registry::estuary(&["p"], &[VarType::ssh()]).unwrap();
        let events = (0..days * 48).map(|k| {
            let t = k * 1800;
            (
                0,
                Event {
                    node: NodeKey::new(VarType::ssh(), "p"),
                    timestamp: t,
                    features: vec![f(t), 0.0, 0.0, 0.0],
                },
            )
        });
        EventStore::from_events(reg, events).0
    }

    fn snaps(store: &EventStore, from: i64) -> Vec<Snapshot> {
        let w = WindowSpec::new(24 * 3600, 12 * 3600).unwrap();
        let targets: BTreeSet<VarType> = [VarType::ssh()].into();
        (0..20)
            .map(|j| sample_snapshot(store, from + j * 7 * 3600, w, TopologyMode::FullyConnected, &targets).unwrap())
            .collect()
    }

    #[test]
    fn harmonic_fit_recovers_clean_tide() {
        let c = [Constituent {
            name: "M2".into(),
            amplitude: 1.0,
            period_h: 12.42,
            phase: 0.7,
        }];
        let store = store_from(|t| astronomical_tide(&c, t) + 0.3, 40);
        let targets: BTreeSet<VarType> = [VarType::ssh()].into();
        let fit = HarmonicBaseline::fit(&store, 0, 20 * 86_400, &targets, &[12.42]).unwrap();
        let coef = &fit.coefficients[&NodeKey::new(VarType::ssh(), "p")][0];
        assert!((coef[0] - 0.3).abs() < 1e-9);
        assert!((coef[1].hypot(coef[2]) - 1.0).abs() < 1e-9);
        let test = snaps(&store, 25 * 86_400);
        let report = score(&fit.forecasts(&test), store.registry(), Pooling::Pooled).unwrap();
        assert!(report.metrics[&VarType::ssh()]["height"].ioa.unwrap() > 0.999);
    }

    #[test]
    fn persistence_on_constant_series_is_undefined() {
        let store = store_from(|_| 2.5, 10);
        let test = snaps(&store, 2 * 86_400);
        let f = persistence_forecasts(&test, store.registry()).unwrap();
        assert!(f.iter().all(|x| x.forecast == x.truth));
        let report = score(&f, store.registry(), Pooling::Pooled).unwrap();
        assert_eq!(report.metrics[&VarType::ssh()]["height"].ioa, None);
        assert_eq!(report.metrics[&VarType::ssh()]["height"].rmse, Some(0.0));
    }

    #[test]
    fn persistence_repeats_last_past_value() {
        let store = store_from(|t| t as f64 / 3600.0, 10);
        let test = snaps(&store, 2 * 86_400);
        for f in persistence_forecasts(&test, store.registry()).unwrap() {
            let last = (f.reference_time - 1800) as f64 / 3600.0;
            assert!(f.forecast.column(0).iter().all(|v| *v == last));
        }
    }

    #[test]
    fn empty_forecasts_are_an_error() {
        let reg = Registry::estuary(&["p"], &[VarType::ssh()]).unwrap();
        assert!(matches!(score(&[], &reg, Pooling::Pooled), Err(Error::NoTarget)));
    }
}
