//! Index of Agreement, RMSE and the derived current quantities.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::events::{NodeKey, Registry, VarType};
use crate::ndiff::Matrix;

/// Willmott's index of agreement,
/// `1 - Σ(y - ŷ)² / Σ(|ŷ - ȳ| + |y - ȳ|)²`.
///
/// `None` for fewer than two points, mismatched lengths, constant `y` or a
/// zero denominator.
pub fn ioa(y: &[f64], y_hat: &[f64]) -> Option<f64> {
    if y.len() < 2 || y.len() != y_hat.len() {
        return None;
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    if y.iter().all(|&v| v == y[0]) {
        return None;
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (&o, &p) in y.iter().zip(y_hat) {
        num += (o - p).powi(2);
        den += ((p - mean).abs() + (o - mean).abs()).powi(2);
    }
    if den <= 0.0 {
        return None;
    }
    // num <= den holds exactly; rounding can push the ratio just past 1
    Some((1.0 - num / den).clamp(0.0, 1.0))
}

pub fn rmse(y: &[f64], y_hat: &[f64]) -> Option<f64> {
    if y.is_empty() || y.len() != y_hat.len() {
        return None;
    }
    let ss: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b).powi(2)).sum();
    Some((ss / y.len() as f64).sqrt())
}

pub fn speed(u: f64, v: f64) -> f64 {
    u.hypot(v)
}

/// Bearing of the flow in degrees clockwise from north, in `[0, 360)`.
pub fn bearing_deg(u: f64, v: f64) -> f64 {
    let d = u.atan2(v).to_degrees();
    let d = d.rem_euclid(360.0);
    if d >= 360.0 {
        0.0
    } else {
        d
    }
}

/// Wraps an angle difference into `(-180, 180]`.
pub fn wrap_deg(d: f64) -> f64 {
    let w = (d + 180.0).rem_euclid(360.0) - 180.0;
    if w <= -180.0 {
        w + 360.0
    } else {
        w
    }
}

/// Forecast and truth of one node in one snapshot, in physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredForecast {
    pub reference_time: i64,
    pub node: NodeKey,
    pub offsets: Vec<i64>,
    /// `fs × l`.
    pub truth: Matrix,
    /// `fs × l`.
    pub forecast: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantityMetrics {
    pub ioa: Option<f64>,
    pub rmse: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// One IoA over all points of a quantity.
    #[default]
    Pooled,
    /// IoA per (snapshot, node), then averaged.
    PerSnapshot,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub seed: Option<u64>,
    /// Per target type, per quantity (label columns plus `speed` and
    /// `direction` for currents).
    pub metrics: BTreeMap<VarType, BTreeMap<String, QuantityMetrics>>,
    /// Mean IoA over the label columns of each target type.
    pub headline_ioa: BTreeMap<VarType, Option<f64>>,
    /// Current points left out of direction scoring because a speed was zero.
    pub excluded_direction_points: usize,
}

#[derive(Default)]
struct Pool {
    truth: Vec<f64>,
    forecast: Vec<f64>,
    per_group: Vec<Option<f64>>,
    errors: Vec<f64>,
}

impl Pool {
    fn push_group(&mut self, truth: &[f64], forecast: &[f64]) {
        self.truth.extend_from_slice(truth);
        self.forecast.extend_from_slice(forecast);
        self.per_group.push(ioa(truth, forecast));
    }

    fn finish(&self, pooling: Pooling) -> QuantityMetrics {
        let ioa_value = match pooling {
            Pooling::Pooled => ioa(&self.truth, &self.forecast),
            Pooling::PerSnapshot => {
                let v: Vec<f64> = self.per_group.iter().flatten().copied().collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            }
        };
        let rmse_value = if self.errors.is_empty() {
            rmse(&self.truth, &self.forecast)
        } else {
            let ss: f64 = self.errors.iter().map(|e| e * e).sum();
            Some((ss / self.errors.len() as f64).sqrt())
        };
        QuantityMetrics {
            ioa: ioa_value,
            rmse: rmse_value,
            n: self.truth.len(),
        }
    }
}

fn is_current(registry: &Registry, t: &VarType) -> bool {
    *t == VarType::current() && registry.spec(t).is_some_and(|s| s.labels.len() == 2)
}

/// Scores forecasts per target type and quantity.
///
/// Direction errors are wrapped into `(-180, 180]` before squaring. For the
/// direction IoA the forecast is unwrapped next to the truth,
/// `ŷ' = y + wrap(ŷ - y)`, so a 359° forecast of a 1° truth scores as 361°.
pub fn compute_report(
    forecasts: &[ScoredForecast],
    registry: &Registry,
    pooling: Pooling,
    seed: Option<u64>,
) -> MetricReport {
    let mut pools: BTreeMap<VarType, BTreeMap<String, Pool>> = BTreeMap::new();
    let mut excluded = 0;
    for f in forecasts {
        let t = &f.node.var_type;
        let Some(spec) = registry.spec(t) else { continue };
        let by_q = pools.entry(t.clone()).or_default();
        for (c, &col) in spec.labels.iter().enumerate() {
            let name = spec.columns[col].clone();
            by_q.entry(name)
                .or_default()
                .push_group(&f.truth.column(c), &f.forecast.column(c));
        }
        if is_current(registry, t) {
            let (mut st, mut sf) = (Vec::new(), Vec::new());
            let (mut dt, mut df, mut de) = (Vec::new(), Vec::new(), Vec::new());
            for r in 0..f.truth.rows() {
                let (tu, tv) = (f.truth.get(r, 0), f.truth.get(r, 1));
                let (fu, fv) = (f.forecast.get(r, 0), f.forecast.get(r, 1));
                st.push(speed(tu, tv));
                sf.push(speed(fu, fv));
                if speed(tu, tv) == 0.0 || speed(fu, fv) == 0.0 {
                    excluded += 1;
                    continue;
                }
                let (bt, bf) = (bearing_deg(tu, tv), bearing_deg(fu, fv));
                let e = wrap_deg(bf - bt);
                dt.push(bt);
                df.push(bt + e);
                de.push(e);
            }
            by_q.entry("speed".into()).or_default().push_group(&st, &sf);
            let dir = by_q.entry("direction".into()).or_default();
            dir.push_group(&dt, &df);
            dir.errors.extend(de);
        }
    }

    let mut report = MetricReport {
        seed,
        excluded_direction_points: excluded,
        ..MetricReport::default()
    };
    for (t, by_q) in pools {
        let spec = registry.spec(&t).expect("pooled types are registered");
        let metrics: BTreeMap<String, QuantityMetrics> =
            by_q.iter().map(|(q, p)| (q.clone(), p.finish(pooling))).collect();
        let label_ioa: Vec<Option<f64>> = spec
            .labels
            .iter()
            .map(|&c| metrics.get(&spec.columns[c]).and_then(|m| m.ioa))
            .collect();
        let headline = if label_ioa.iter().all(Option::is_some) && !label_ioa.is_empty() {
            Some(label_ioa.iter().flatten().sum::<f64>() / label_ioa.len() as f64)
        } else {
            None
        };
        report.headline_ioa.insert(t.clone(), headline);
        report.metrics.insert(t, metrics);
    }
    report
}

impl MetricReport {
    /// `type/quantity/stat` keys for tabulation.
    pub fn flatten(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for (t, by_q) in &self.metrics {
            for (q, m) in by_q {
                if let Some(v) = m.ioa {
                    out.insert(format!("{t}/{q}/ioa"), v);
                }
                if let Some(v) = m.rmse {
                    out.insert(format!("{t}/{q}/rmse"), v);
                }
            }
        }
        for (t, v) in &self.headline_ioa {
            if let Some(v) = v {
                out.insert(format!("{t}/headline/ioa"), *v);
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("var_type,quantity,ioa,rmse,n\n");
        let fmt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v}"));
        for (t, by_q) in &self.metrics {
            for (q, m) in by_q {
                let _ = writeln!(s, "{t},{q},{},{},{}", fmt(m.ioa), fmt(m.rmse), m.n);
            }
        }
        s
    }
}
