use indexmap::IndexMap;

use crate::error::{NumericsError, Result};
use crate::float::Float;
use crate::grad::GradMap;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates per parameter plus the step counter.
#[derive(Clone, Debug, Default)]
pub struct AdamState<T: Float = f32> {
    pub config: AdamConfig,
    m: IndexMap<String, Tensor<T>>,
    v: IndexMap<String, Tensor<T>>,
    t: u64,
}

impl<T: Float> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            m: IndexMap::new(),
            v: IndexMap::new(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.m.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.v.get(name)
    }
}

/// One bias-corrected Adam update of every trainable parameter in `params`.
///
/// `grads` must carry an entry for each trainable name; entries for names
/// outside `params` are ignored so one gradient map can serve several stores.
pub fn adam_step<T: Float>(
    params: &mut ParamStore<T>,
    grads: &GradMap<T>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    let names: Vec<String> = params.trainable_names().map(str::to_string).collect();
    for name in &names {
        let g = grads
            .get(name)
            .ok_or_else(|| NumericsError::IncompleteGradient { name: name.clone() })?;
        let p = params.require(name)?;
        if g.shape() != p.shape() {
            return Err(NumericsError::shape(
                "adam_step",
                format!("{name}: grad {:?} vs param {:?}", g.shape(), p.shape()),
            ));
        }
    }

    state.t += 1;
    let cfg = state.config;
    let b1 = T::c(cfg.beta1);
    let b2 = T::c(cfg.beta2);
    let bc1 = T::c(1.0 - cfg.beta1.powi(state.t as i32));
    let bc2 = T::c(1.0 - cfg.beta2.powi(state.t as i32));
    let eps = T::c(cfg.eps);
    let lr = T::c(lr);

    for name in &names {
        let g = &grads[name.as_str()];
        let shape = g.shape().to_vec();
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(&shape));
        for (mi, &gi) in m.data_mut().iter_mut().zip(g.data()) {
            *mi = b1 * *mi + (T::one() - b1) * gi;
        }
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(&shape));
        for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
        }
        let m = &state.m[name.as_str()];
        let v = &state.v[name.as_str()];
        let p = params.get_mut(name).expect("trainable name");
        for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            *pi -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(v)).unwrap();
        s
    }

    fn grad(v: f64) -> GradMap<f64> {
        let mut g = GradMap::new();
        g.insert("p".to_string(), Tensor::scalar(v));
        g
    }

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let mut s = scalar_store(1.0);
        let mut st = AdamState::new(AdamConfig::default());
        adam_step(&mut s, &grad(0.0), &mut st, 0.001).unwrap();
        assert_eq!(s.get("p").unwrap().item(), 1.0);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = 1, v_hat = 1 after bias correction: p' = 1 - 0.001 * 1 / (1 + 1e-8)
        let mut s = scalar_store(1.0);
        let mut st = AdamState::new(AdamConfig::default());
        adam_step(&mut s, &grad(1.0), &mut st, 0.001).unwrap();
        let expected = 1.0 - 0.001 / (1.0 + 1e-8);
        assert!((s.get("p").unwrap().item() - expected).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_descends() {
        let mut s = scalar_store(1.0);
        let mut st = AdamState::new(AdamConfig::default());
        adam_step(&mut s, &grad(1.0), &mut st, 0.001).unwrap();
        let p1 = s.get("p").unwrap().item();
        adam_step(&mut s, &grad(1.0), &mut st, 0.001).unwrap();
        let p2 = s.get("p").unwrap().item();
        assert_eq!(st.step_count(), 2);
        assert!(p1 < 1.0 && p2 < p1);
    }

    #[test]
    fn frozen_params_untouched() {
        let mut s = scalar_store(1.0);
        s.insert("q", Tensor::scalar(2.5)).unwrap();
        s.freeze("q").unwrap();
        let mut st = AdamState::new(AdamConfig::default());
        adam_step(&mut s, &grad(3.0), &mut st, 0.1).unwrap();
        assert_eq!(s.get("q").unwrap().item().to_bits(), 2.5f64.to_bits());
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut s = scalar_store(1.0);
        let mut st = AdamState::new(AdamConfig::default());
        let err = adam_step(&mut s, &GradMap::new(), &mut st, 0.1).unwrap_err();
        assert!(matches!(err, NumericsError::IncompleteGradient { .. }));
        assert_eq!(st.step_count(), 0);
    }
}
