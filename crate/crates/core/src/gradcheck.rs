//! Central finite-difference check of tape gradients.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::peft::AdapterSet;
use crate::tape::{Session, Tape, Var};

/// Anything that owns a [`ParamStore`].
pub trait HasParams {
    fn param_store(&self) -> &ParamStore;
    fn param_store_mut(&mut self) -> &mut ParamStore;
}

impl HasParams for ParamStore {
    fn param_store(&self) -> &ParamStore {
        self
    }
    fn param_store_mut(&mut self) -> &mut ParamStore {
        self
    }
}

fn scalar_of(tape: &Tape, loss: Var) -> Result<f64> {
    let t = tape.value(loss);
    if t.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}

/// Largest `|analytic − numeric| / max(1, |analytic|)` over every coordinate
/// of every trainable parameter. `eval` must rebuild the loss from scratch.
pub fn grad_check_model<M, F>(model: &mut M, eval: F, eps: f64) -> Result<f64>
where
    M: HasParams,
    F: FnMut(&M) -> Result<(Tape, Var)>,
{
    check_coords(model, eval, eps, |n| (0..n).collect())
}

/// [`grad_check_model`] over at most `per_param` coordinates of each
/// trainable parameter, drawn without replacement from `rng`.
pub fn grad_check_sampled<M, F, R>(
    model: &mut M,
    eval: F,
    eps: f64,
    per_param: usize,
    rng: &mut R,
) -> Result<f64>
where
    M: HasParams,
    F: FnMut(&M) -> Result<(Tape, Var)>,
    R: Rng + ?Sized,
{
    check_coords(model, eval, eps, |n| {
        let mut idx = rand::seq::index::sample(rng, n, per_param.min(n)).into_vec();
        idx.sort_unstable();
        idx
    })
}

fn check_coords<M, F>(
    model: &mut M,
    mut eval: F,
    eps: f64,
    mut coords: impl FnMut(usize) -> Vec<usize>,
) -> Result<f64>
where
    M: HasParams,
    F: FnMut(&M) -> Result<(Tape, Var)>,
{
    model.param_store_mut().zero_grad();
    let (tape, loss) = eval(model)?;
    scalar_of(&tape, loss)?;
    tape.backward_into(loss, model.param_store_mut())?;

    let trainable: Vec<_> = model
        .param_store()
        .iter()
        .filter(|(_, p)| p.requires_grad)
        .map(|(id, p)| {
            let g = p.grad.clone().unwrap_or_else(|| vec![0.0; p.value.numel()]);
            (id, g)
        })
        .collect();
    model.param_store_mut().zero_grad();

    let mut worst = 0.0f64;
    for (id, analytic) in trainable {
        for i in coords(analytic.len()) {
            let a = analytic[i];
            let orig = model.param_store().value(id).data()[i];
            model.param_store_mut().value_mut(id).data_mut()[i] = orig + eps;
            let (t, l) = eval(model)?;
            let plus = scalar_of(&t, l)?;
            model.param_store_mut().value_mut(id).data_mut()[i] = orig - eps;
            let (t, l) = eval(model)?;
            let minus = scalar_of(&t, l)?;
            model.param_store_mut().value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = libm::fabs(a - numeric) / libm::fabs(a).max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// [`grad_check_model`] for a bare parameter store without adapters.
pub fn grad_check<F>(store: &mut ParamStore, mut f: F, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Session<'_>) -> Result<Var>,
{
    let adapters = AdapterSet::default();
    grad_check_model(
        store,
        |p| {
            let mut s = Session::new(p, &adapters);
            let loss = f(&mut s)?;
            Ok((s.into_tape(), loss))
        },
        eps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(3.0), true).unwrap();
        let err = grad_check(
            &mut store,
            |s| {
                let v = s.param(x);
                s.tape.mul(v, v)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
        assert_eq!(store.value(x).data()[0], 3.0);
    }

    #[test]
    fn non_scalar_function_is_a_contract_error() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::zeros(&[3]), true).unwrap();
        let r = grad_check(&mut store, |s| Ok(s.param(x)), 1e-5);
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
