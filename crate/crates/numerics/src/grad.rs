use indexmap::IndexMap;

use crate::error::NumericsError;
use crate::float::Float;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Parameter name to gradient, in store order.
pub type GradMap<T = f32> = IndexMap<String, Tensor<T>>;

/// Evaluates `loss_fn` on a fresh tape and returns the scalar loss and the
/// gradient of every trainable parameter in `stores`.
///
/// Frozen parameters get no entry.
pub fn value_and_grad<T, E, F>(stores: &[&ParamStore<T>], loss_fn: F) -> Result<(T, GradMap<T>), E>
where
    T: Float,
    E: From<NumericsError>,
    F: FnOnce(&Tape<'_, T>) -> Result<Var, E>,
{
    let tape = Tape::new(stores);
    let loss = loss_fn(&tape)?;
    let value = tape.item(loss);
    if !value.is_finite() {
        return Err(NumericsError::NonFinite {
            context: format!("loss = {value}"),
        }
        .into());
    }
    let grads = tape.backward(loss)?;
    Ok((value, grads.params_for(stores)))
}

fn eval_loss<T, E, F>(stores: &[&ParamStore<T>], loss_fn: &F) -> Result<T, E>
where
    T: Float,
    E: From<NumericsError>,
    F: Fn(&Tape<'_, T>) -> Result<Var, E>,
{
    let tape = Tape::new(stores);
    let loss = loss_fn(&tape)?;
    Ok(tape.item(loss))
}

/// Central-difference gradient `(f(x+eps) - f(x-eps)) / (2 eps)` for every
/// trainable scalar in `stores`. Used as an oracle for [`value_and_grad`].
pub fn finite_diff_grad<T, E, F>(stores: &[&ParamStore<T>], loss_fn: F, eps: f64) -> Result<GradMap<T>, E>
where
    T: Float,
    E: From<NumericsError>,
    F: Fn(&Tape<'_, T>) -> Result<Var, E>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(NumericsError::OracleInvalid(format!("eps must be positive, got {eps}")).into());
    }
    let first = eval_loss(stores, &loss_fn)?;
    let second = eval_loss(stores, &loss_fn)?;
    if first != second {
        return Err(NumericsError::OracleInvalid(format!(
            "loss function is not deterministic ({first} vs {second})"
        ))
        .into());
    }

    let mut owned: Vec<ParamStore<T>> = stores.iter().map(|s| (*s).clone()).collect();
    let mut out = GradMap::new();
    let h = T::c(eps);
    let two_h = T::c(2.0 * eps);
    for si in 0..owned.len() {
        let names: Vec<String> = owned[si].trainable_names().map(str::to_string).collect();
        for name in names {
            let base = owned[si].require(&name)?.clone();
            let mut grad = Tensor::zeros(base.shape());
            for k in 0..base.numel() {
                let mut plus = base.clone();
                plus.data_mut()[k] += h;
                owned[si].set_unchecked(&name, plus);
                let fp = {
                    let refs: Vec<&ParamStore<T>> = owned.iter().collect();
                    eval_loss(&refs, &loss_fn)?
                };
                let mut minus = base.clone();
                minus.data_mut()[k] -= h;
                owned[si].set_unchecked(&name, minus);
                let fm = {
                    let refs: Vec<&ParamStore<T>> = owned.iter().collect();
                    eval_loss(&refs, &loss_fn)?
                };
                grad.data_mut()[k] = (fp - fm) / two_h;
            }
            owned[si].set_unchecked(&name, base);
            out.insert(name, grad);
        }
    }
    Ok(out)
}

/// Per-entry error used by the gradient checks: `|a-b| / max(|a|, |b|)`, with
/// differences below `abs_floor` treated as exact (both sides are then at the
/// roundoff level of the finite-difference oracle).
pub fn relative_error(a: f64, b: f64, abs_floor: f64) -> f64 {
    let diff = (a - b).abs();
    if diff <= abs_floor {
        return 0.0;
    }
    diff / a.abs().max(b.abs())
}
