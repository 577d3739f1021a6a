use rand::seq::index::sample;
use rand::Rng;

use super::{ParamId, ParamStore, Tape, Var};
use crate::error::Result;

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates_checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub failures: Vec<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// `|a - n| / max(|a|, |n|, 1e-6)`. The floor stops round-off in the
/// numerical estimate from dominating coordinates whose true gradient is ~0.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central-difference check of `loss` with respect to every parameter in
/// `params`. At most `per_param` coordinates are sampled from each
/// parameter; pass `usize::MAX` to check them all. The closure must be
/// deterministic.
pub fn grad_check<F>(
    params: &ParamStore,
    loss: F,
    step: f64,
    tol: f64,
    per_param: usize,
    rng: &mut impl Rng,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &ParamStore) -> Result<Var>,
{
    let tape = Tape::new();
    let out = loss(&tape, params)?;
    let grads = tape.backward(out)?;
    let dense = grads.dense(params);

    let eval = |p: &ParamStore| -> Result<f64> {
        let t = Tape::new();
        let v = loss(&t, p)?;
        let x = t.value(v).item();
        Ok(x)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coordinates_checked: 0,
        worst: None,
        failures: Vec::new(),
    };
    let mut work = params.clone();
    let ids: Vec<ParamId> = params.ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        let n = params.get(id).len();
        let coords: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            let mut c = sample(rng, n, per_param).into_vec();
            c.sort_unstable();
            c
        };
        for j in coords {
            let orig = params.get(id).as_slice()[j];
            work.get_mut(id).as_mut_slice()[j] = orig + step;
            let plus = eval(&work)?;
            work.get_mut(id).as_mut_slice()[j] = orig - step;
            let minus = eval(&work)?;
            work.get_mut(id).as_mut_slice()[j] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let analytic = dense[pi].as_slice()[j];
            let err = relative_error(analytic, numeric);
            report.coordinates_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((params.name(id).to_string(), j));
            }
            if err > tol {
                report
                    .failures
                    .push((params.name(id).to_string(), j, analytic, numeric));
            }
        }
    }
    Ok(report)
}
