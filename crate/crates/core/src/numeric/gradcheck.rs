//! Central finite-difference oracle for graph gradients.

use super::{Graph, Matrix, ParamId, ParameterStore, Scalar, Var};
use crate::error::Result;

/// Inputs closer than this to a rectifier kink or a max-pool tie are
/// reported as non-smooth.
pub const KINK_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// max over coordinates of `|analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    pub kink_margin: f64,
    /// The probe point sits within [`KINK_TOLERANCE`] of a non-smooth point;
    /// the error figure is not meaningful and the point should be resampled.
    pub nonsmooth: bool,
    /// Some probe took a different discrete branch than the base point.
    pub branch_changed: bool,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        !self.nonsmooth && self.max_rel_error < tol
    }

    /// Pass criterion for deep compositions where some rectifier input is
    /// almost always near zero: every probe must stay on the base point's
    /// branch, however close to a kink it is.
    pub fn passes_on_branch(&self, tol: f64) -> bool {
        !self.branch_changed && self.max_rel_error < tol
    }
}

fn evaluate<T, F>(store: &ParameterStore<T>, f: &F, point: &Matrix<T>) -> Result<(f64, Option<u64>)>
where
    T: Scalar,
    F: Fn(&mut Graph<'_, T>, Var) -> Result<Var>,
{
    let mut g = Graph::new(store).with_branch_tracking();
    let x = g.input(point.clone())?;
    let out = f(&mut g, x)?;
    Ok((g.value(out).item()?.f64(), g.branch_signature()))
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Compares the backward-pass gradient of `f` at `point` against central
/// differences with the given step.
pub fn finite_diff_check<T, F>(
    store: &ParameterStore<T>,
    f: F,
    point: &Matrix<T>,
    step: f64,
) -> Result<GradCheck>
where
    T: Scalar,
    F: Fn(&mut Graph<'_, T>, Var) -> Result<Var>,
{
    let (analytic, kink_margin, base) = {
        let mut g = Graph::new(store).with_branch_tracking();
        let x = g.input(point.clone())?;
        let out = f(&mut g, x)?;
        let grads = g.backward(out)?;
        let a = grads
            .wrt(x)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(point.rows(), point.cols()));
        (a, g.kink_margin(), g.branch_signature())
    };
    let mut max_rel_error = 0.0f64;
    let mut branch_changed = false;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = T::of(orig.f64() + step);
        let (plus, bp) = evaluate(store, &f, &probe)?;
        probe.data_mut()[i] = T::of(orig.f64() - step);
        let (minus, bm) = evaluate(store, &f, &probe)?;
        probe.data_mut()[i] = orig;
        branch_changed |= bp != base || bm != base;
        let numeric = (plus - minus) / (2.0 * step);
        max_rel_error = max_rel_error.max(rel_err(analytic.data()[i].f64(), numeric));
    }
    Ok(GradCheck {
        max_rel_error,
        kink_margin,
        nonsmooth: kink_margin < KINK_TOLERANCE,
        branch_changed,
    })
}

/// Same oracle with respect to one stored parameter instead of an input.
pub fn param_diff_check<T, F>(
    store: &ParameterStore<T>,
    id: ParamId,
    f: F,
    step: f64,
) -> Result<GradCheck>
where
    T: Scalar,
    F: Fn(&mut Graph<'_, T>) -> Result<Var>,
{
    let (analytic, kink_margin, base) = {
        let mut g = Graph::new(store).with_branch_tracking();
        let out = f(&mut g)?;
        let grads = g.backward(out)?;
        let shape = store.value(id).shape();
        let a = grads
            .params()
            .find(|(p, _)| *p == id)
            .map(|(_, m)| m.clone())
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1));
        (a, g.kink_margin(), g.branch_signature())
    };
    let mut probe = store.clone();
    let eval = |s: &ParameterStore<T>| -> Result<(f64, Option<u64>)> {
        let mut g = Graph::new(s).with_branch_tracking();
        let out = f(&mut g)?;
        Ok((g.value(out).item()?.f64(), g.branch_signature()))
    };
    let mut max_rel_error = 0.0f64;
    let mut branch_changed = false;
    for i in 0..analytic.len() {
        let orig = probe.value(id).data()[i];
        probe.value_mut(id).data_mut()[i] = T::of(orig.f64() + step);
        let (plus, bp) = eval(&probe)?;
        probe.value_mut(id).data_mut()[i] = T::of(orig.f64() - step);
        let (minus, bm) = eval(&probe)?;
        probe.value_mut(id).data_mut()[i] = orig;
        branch_changed |= bp != base || bm != base;
        let numeric = (plus - minus) / (2.0 * step);
        max_rel_error = max_rel_error.max(rel_err(analytic.data()[i].f64(), numeric));
    }
    Ok(GradCheck {
        max_rel_error,
        kink_margin,
        nonsmooth: kink_margin < KINK_TOLERANCE,
        branch_changed,
    })
}

/// Runs [`finite_diff_check`] on freshly sampled points until one lands away
/// from every kink, giving up after `max_tries` (the last result is returned,
/// still flagged).
pub fn finite_diff_check_resampled<T, F>(
    store: &ParameterStore<T>,
    f: F,
    mut sample: impl FnMut() -> Matrix<T>,
    step: f64,
    max_tries: usize,
) -> Result<GradCheck>
where
    T: Scalar,
    F: Fn(&mut Graph<'_, T>, Var) -> Result<Var>,
{
    let mut last = None;
    for _ in 0..max_tries.max(1) {
        let point = sample();
        let check = finite_diff_check(store, &f, &point, step)?;
        if !check.nonsmooth {
            return Ok(check);
        }
        last = Some(check);
    }
    Ok(last.expect("at least one attempt"))
}
