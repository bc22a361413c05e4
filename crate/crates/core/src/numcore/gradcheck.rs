//! Central finite-difference verification of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CoordCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// `|a - n| / max(1, |a|, |n|)`
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub coords: Vec<CoordCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Evaluates the scalar built by `f` against `store`.
pub fn eval_scalar<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let out = f(&mut g)?;
    g.scalar(out)
}

/// Reverse-mode gradient of `f` w.r.t. `param`, zero if `param` is unused.
pub fn analytic_gradient<F>(store: &ParamStore, param: ParamId, f: &F) -> Result<Tensor>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let out = f(&mut g)?;
    let grads = g.backward(out)?;
    Ok(grads
        .param(param)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(store.get(param).dims())))
}

/// Compares `analytic` with central differences of `f` at every coordinate of `param`.
pub fn compare_with_finite_differences<F>(
    analytic: &Tensor,
    store: &ParamStore,
    param: ParamId,
    step: f64,
    tolerance: f64,
    f: &F,
) -> Result<FdReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::Invalid(format!("step {step} must be > 0")));
    }
    if analytic.len() != store.get(param).len() {
        return Err(shape_err!(
            "analytic gradient has {} entries, parameter has {}",
            analytic.len(),
            store.get(param).len()
        ));
    }
    let mut work = store.clone();
    let mut coords = Vec::with_capacity(analytic.len());
    for idx in 0..analytic.len() {
        let orig = work.get(param).data()[idx];
        work.data_mut(param)[idx] = orig + step;
        let plus = eval_scalar(&work, f)?;
        work.data_mut(param)[idx] = orig - step;
        let minus = eval_scalar(&work, f)?;
        work.data_mut(param)[idx] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.data()[idx];
        coords.push(CoordCheck {
            index: idx,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric),
        });
    }
    let max_rel_error = coords.iter().fold(0.0_f64, |m, c| m.max(c.rel_error));
    Ok(FdReport {
        coords,
        max_rel_error,
        tolerance,
        passed: max_rel_error <= tolerance,
    })
}

/// Checks the reverse-mode gradient of `f` w.r.t. `param` by central differences.
pub fn finite_difference_check<F>(
    store: &ParamStore,
    param: ParamId,
    step: f64,
    tolerance: f64,
    f: F,
) -> Result<FdReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut store = store.clone();
    store.set_trainable(param, true);
    let analytic = analytic_gradient(&store, param, &f)?;
    compare_with_finite_differences(&analytic, &store, param, step, tolerance, &f)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, t: Tensor) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert(name, t).unwrap();
        (s, id)
    }

    #[test]
    fn linear_function_matches_exactly() {
        let (store, w) = store_with("w", Tensor::vector(vec![0.3, -1.2, 2.0]).unwrap());
        let c = Tensor::vector(vec![1.5, -0.5, 4.0]).unwrap();
        let report = finite_difference_check(&store, w, 1e-5, 1e-4, |g| {
            let wv = g.param(w);
            let cv = g.constant(c.clone())?;
            let p = g.mul(wv, cv)?;
            g.sum(p)
        })
        .unwrap();
        assert!(report.passed);
        assert!(report.max_rel_error < 1e-9, "{}", report.max_rel_error);
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let (store, w) = store_with("w", Tensor::vector(vec![0.7, -0.4]).unwrap());
        let f = |g: &mut Graph| {
            let wv = g.param(w);
            let sq = g.mul(wv, wv)?;
            g.sum(sq)
        };
        let good = analytic_gradient(&store, w, &f).unwrap();
        let bad = good.scaled(2.0);
        let ok = compare_with_finite_differences(&good, &store, w, 1e-5, 1e-4, &f).unwrap();
        let broken = compare_with_finite_differences(&bad, &store, w, 1e-5, 1e-4, &f).unwrap();
        assert!(ok.passed);
        assert!(!broken.passed);
    }

    #[test]
    fn rejects_non_positive_step() {
        let (store, w) = store_with("w", Tensor::scalar(1.0));
        let r = finite_difference_check(&store, w, 0.0, 1e-4, |g| Ok(g.param(w)));
        assert!(r.is_err());
    }
}
