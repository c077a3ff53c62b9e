//! Finite-difference verification of [`Graph::backward`].

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Outcome of a check: the worst relative error and where it occurred.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub coordinates_checked: usize,
}

/// Which coordinates of each parameter to perturb.
#[derive(Debug, Clone, Copy)]
pub enum Coverage {
    All,
    /// At most this many coordinates per parameter, drawn under `seed`.
    Sample { per_param: usize, seed: u64 },
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

fn eval<F>(store: &ParamStore, f: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph<'_>) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let out = f(&mut g)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::Contract(format!("objective must be scalar, got {:?}", v.shape())));
    }
    let x = v.item();
    if !x.is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {x}")));
    }
    Ok(x)
}

/// Compare analytic gradients of `f` against central differences
/// `(f(x+eps) − f(x−eps)) / 2eps`, coordinate by coordinate, returning the
/// maximum of `|a − n| / max(|a|, |n|, 1e-8)`.
///
/// `f` must rebuild the same computation on every call; it is invoked once
/// for the analytic pass and twice per checked coordinate.
pub fn grad_check<F>(store: &mut ParamStore, params: &[ParamId], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<'_>) -> Result<Var>,
{
    grad_check_with(store, params, eps, Coverage::All, f)
}

pub fn grad_check_with<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    eps: f64,
    coverage: Coverage,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<'_>) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("eps must be positive, got {eps}")));
    }
    let grads = {
        let mut g = Graph::new(store);
        let out = f(&mut g)?;
        if !g.value(out).is_finite() {
            return Err(Error::NonFinite("objective".into()));
        }
        g.backward(out)?
    };
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: None,
        worst_index: 0,
        coordinates_checked: 0,
    };
    for &id in params {
        let analytic = grads.for_param(store, id);
        let n = analytic.len();
        let pinned: Vec<usize> = store.get(id).pinned().iter().map(|(i, _)| *i).collect();
        let coords: Vec<usize> = match coverage {
            Coverage::All => (0..n).collect(),
            Coverage::Sample { per_param, seed } if per_param < n => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (id as u64).wrapping_mul(0x9E37_79B9));
                let mut c = sample(&mut rng, n, per_param).into_vec();
                c.sort_unstable();
                c
            }
            Coverage::Sample { .. } => (0..n).collect(),
        };
        for i in coords {
            if pinned.contains(&i) {
                continue;
            }
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(store, &mut f);
            store.value_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(store, &mut f);
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let err = relative_error(analytic.data()[i], numeric);
            report.coordinates_checked += 1;
            if report.worst_param.is_none() || err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst_param = Some(store.get(id).name.clone());
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
