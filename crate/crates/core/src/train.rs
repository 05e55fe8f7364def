//! Mini-batch gradient plumbing shared by every training loop.
//!
//! Each example is differentiated on its own tape, in parallel; the
//! per-example gradients are then summed in example order so the result does
//! not depend on thread scheduling.

use rayon::prelude::*;
use softslot_numerics::{adam_step, value_and_grad, AdamConfig, AdamState, GradMap, ParamStore, Tape, Var};

use crate::error::{CoreError, Result};

/// Mean loss and mean gradient over `batch`.
pub fn batch_grad<I, F>(stores: &[&ParamStore], batch: &[I], f: F) -> Result<(f64, GradMap)>
where
    I: Sync,
    F: Fn(&Tape<f32>, &I) -> Result<Var> + Sync,
{
    if batch.is_empty() {
        return Err(CoreError::Protocol("empty training batch".into()));
    }
    let parts: Vec<(f32, GradMap)> = batch
        .par_iter()
        .map(|ex| value_and_grad::<f32, CoreError, _>(stores, |tape| f(tape, ex)))
        .collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / batch.len() as f32;
    let mut iter = parts.into_iter();
    let (first_loss, mut total) = iter.next().expect("nonempty");
    let mut loss = first_loss as f64;
    for (l, g) in iter {
        loss += l as f64;
        for (name, t) in g {
            let acc = total.get_mut(&name).expect("same parameter set");
            for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += b;
            }
        }
    }
    for t in total.values_mut() {
        for v in t.data_mut() {
            *v *= scale;
        }
    }
    Ok((loss / batch.len() as f64, total))
}

/// Adam with a fixed learning rate over one parameter store.
pub struct Optimizer {
    pub lr: f64,
    state: AdamState,
}

impl Optimizer {
    pub fn new(lr: f64) -> Self {
        Optimizer {
            lr,
            state: AdamState::new(AdamConfig::default()),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &GradMap) -> Result<()> {
        adam_step(params, grads, &mut self.state, self.lr)?;
        Ok(())
    }

    pub fn steps(&self) -> u64 {
        self.state.step_count()
    }
}

/// Fails with stage/epoch/step context when a loss is not finite.
pub fn check_finite(loss: f64, stage: &str, epoch: usize, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(CoreError::NonFinite {
            term: format!("{stage} loss"),
            context: format!("epoch {epoch}, step {step}"),
        })
    }
}
