//! Central finite-difference gradient oracle.

use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore, Trainable};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compares reverse-mode gradients of `f` at `point` against central
/// differences, returning the worst per-coordinate error
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn finite_diff_check<T, F>(f: F, point: &[Tensor<T>], eps: f64) -> Result<f64>
where
    T: Scalar,
    F: for<'t> Fn(&[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::invalid(format!("finite-difference step {eps} outside [1e-6, 1e-4]")));
    }
    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let vars = point
            .iter()
            .map(|p| tape.param(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = f(&vars)?;
        let grads = tape.backward(loss)?;
        vars.iter()
            .zip(point)
            .map(|(v, p)| match grads.get(*v) {
                Some(g) => g.iter().map(|x| x.f64()).collect(),
                None => vec![0.0; p.len()],
            })
            .collect()
    };

    let eval = |pt: &[Tensor<T>]| -> Result<f64> {
        let tape = Tape::new();
        let vars = pt
            .iter()
            .map(|p| tape.constant(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let v = f(&vars)?.value().item().f64();
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "finite_diff_check" });
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<T>> = point.to_vec();
    for (ti, p) in point.iter().enumerate() {
        for ci in 0..p.len() {
            let orig = p.data()[ci];
            work[ti].data_mut()[ci] = orig + T::c(eps);
            let up = eval(&work)?;
            work[ti].data_mut()[ci] = orig - T::c(eps);
            let down = eval(&work)?;
            work[ti].data_mut()[ci] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[ti][ci];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Same measure over every coordinate of every parameter in `store`, for
/// losses built through a [`Binder`].
pub fn finite_diff_params<T, F>(store: &ParamStore<T>, f: F, eps: f64) -> Result<f64>
where
    T: Scalar,
    F: for<'t, 's> Fn(&Binder<'t, 's, T>) -> Result<Var<'t, T>>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::invalid(format!("finite-difference step {eps} outside [1e-6, 1e-4]")));
    }
    let analytic = {
        let tape = Tape::new();
        let bd = Binder::new(&tape, store, Trainable::All);
        let loss = f(&bd)?;
        let grads = tape.backward(loss)?;
        bd.param_grads(&grads)
    };
    let eval = |s: &ParamStore<T>| -> Result<f64> {
        let tape = Tape::new();
        let bd = Binder::inference(&tape, s);
        let v = f(&bd)?.value().item().f64();
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "finite_diff_params" });
        }
        Ok(v)
    };
    let mut work = store.clone();
    let mut worst = 0.0f64;
    for id in store.ids().collect::<Vec<_>>() {
        for ci in 0..store.get(id).len() {
            let orig = store.get(id).data()[ci];
            work.get_mut(id).data_mut()[ci] = orig + T::c(eps);
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[ci] = orig - T::c(eps);
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[ci] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.get(id).map_or(0.0, |g| g[ci].f64());
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
