//! Central-difference gradient oracle.
//!
//! Runs in 64-bit only: the default tolerances are unreachable in f32.

use super::{GradMap, ParamStore};
use crate::error::Result;
use crate::rng::Rng;

/// One coordinate whose analytic and numeric gradients disagree.
#[derive(Debug, Clone)]
pub struct BadCoord {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub tol: f64,
    pub failures: Vec<BadCoord>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    // The additive floor absorbs central-difference rounding noise, which is
    // on the order of |f| * machine-eps / eps ~ 1e-11: coordinates whose true
    // gradient is that small would otherwise report spurious mismatches.
    (a - b).abs() / (a.abs() + b.abs() + 1e-6)
}

/// Compare tape gradients against central differences
/// (f(theta+eps) - f(theta-eps)) / 2eps for every coordinate of every
/// parameter (or a random sample of `max_coords` per tensor for big ones).
///
/// `build` must be deterministic given the parameter store: it evaluates the
/// scalar loss and returns it together with the tape gradients.
pub fn grad_check<B>(
    build: B,
    params: &ParamStore<f64>,
    eps: f64,
    tol: f64,
    max_coords: usize,
    rng: &mut Rng,
) -> Result<GradCheckReport>
where
    B: Fn(&ParamStore<f64>) -> Result<(f64, GradMap<f64>)>,
{
    let (_, analytic) = build(params)?;
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        tol,
        failures: Vec::new(),
    };
    let mut perturbed = params.clone();
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    for name in names {
        let n = params.get(&name)?.data.len();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            (0..max_coords).map(|_| rng.below(n)).collect()
        };
        for i in coords {
            let orig = params.get(&name)?.data[i];
            let central = |p: &mut ParamStore<f64>, step: f64| -> Result<f64> {
                p.get_mut(&name).unwrap().data[i] = orig + step;
                let (f_plus, _) = build(p)?;
                p.get_mut(&name).unwrap().data[i] = orig - step;
                let (f_minus, _) = build(p)?;
                p.get_mut(&name).unwrap().data[i] = orig;
                Ok((f_plus - f_minus) / (2.0 * step))
            };
            let mut numeric = central(&mut perturbed, eps)?;
            let ad = analytic
                .get(&name)
                .map(|g| g[i])
                .unwrap_or(0.0);
            let mut e = rel_err(ad, numeric);
            if e > tol {
                // A central difference that straddles a piecewise-linear kink
                // (relu) reports a blended slope. Shrinking the step resolves
                // the straddle; a genuine backward bug does not improve.
                let retry = central(&mut perturbed, eps / 16.0)?;
                let e2 = rel_err(ad, retry);
                if e2 < e {
                    numeric = retry;
                    e = e2;
                }
            }
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
            }
            if e > tol {
                report.failures.push(BadCoord {
                    param: name.clone(),
                    index: i,
                    analytic: ad,
                    numeric,
                    rel_err: e,
                });
            }
        }
    }
    Ok(report)
}
