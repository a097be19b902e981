use std::collections::HashMap;

use levitmc_tensor::{Real, Tensor};

use crate::error::{Error, Result};
use crate::model::ParamStore;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Bias-corrected Adam on raw slices; `step` is the 1-based step number.
pub fn adam_update<T: Real>(param: &mut [T], grad: &[T], m: &mut [T], v: &mut [T], step: u64, lr: f64) {
    let c1 = 1.0 - BETA1.powi(step as i32);
    let c2 = 1.0 - BETA2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i].to_f64();
        let mi = BETA1 * m[i].to_f64() + (1.0 - BETA1) * g;
        let vi = BETA2 * v[i].to_f64() + (1.0 - BETA2) * g * g;
        m[i] = T::from_f64(mi);
        v[i] = T::from_f64(vi);
        let update = lr * (mi / c1) / ((vi / c2).sqrt() + EPS);
        param[i] = T::from_f64(param[i].to_f64() - update);
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    /// First and second moments by parameter name.
    pub moments: HashMap<String, (Tensor<f32>, Tensor<f32>)>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update of every parameter that has a gradient. Parameters rejected
    /// by `trainable` are left untouched, moments included.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &[(String, Tensor<f32>)],
        lr: f64,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient of {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if let Some((m, _)) = self.moments.get(name) {
                if m.shape() != g.shape() {
                    return Err(Error::Shape(format!("moment of {name} has shape {:?}", m.shape())));
                }
            }
        }
        self.step += 1;
        for (name, g) in grads {
            if !trainable(name) {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let p = params.get_mut(name).expect("checked above");
            adam_update(p.data_mut(), g.data(), m.data_mut(), v.data_mut(), self.step, lr);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamKind;

    #[test]
    fn first_step_moves_by_lr() {
        let (mut p, mut m, mut v) = ([1.0f64], [0.0], [0.0]);
        adam_update(&mut p, &[1.0], &mut m, &mut v, 1, 1e-5);
        let expected = 1.0 - 1e-5 * (1.0 / (1.0 + 1e-8));
        assert!((p[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn two_steps_match_scalar_oracle() {
        let (lr, g) = (1e-3, 0.37);
        let (mut p, mut m, mut v) = ([0.5f64], [0.0], [0.0]);
        let (mut op, mut om, mut ov) = (0.5f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            adam_update(&mut p, &[g], &mut m, &mut v, t, lr);
            om = 0.9 * om + 0.1 * g;
            ov = 0.999 * ov + 0.001 * g * g;
            let mh = om / (1.0 - 0.9f64.powi(t as i32));
            let vh = ov / (1.0 - 0.999f64.powi(t as i32));
            op -= lr * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p[0] - op).abs() < 1e-10);
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut store = ParamStore::new();
        store.insert("w", ParamKind::Trainable, Tensor::full(&[3], 2.0)).unwrap();
        let mut adam = AdamState::new();
        adam.step(&mut store, &[("w".into(), Tensor::full(&[3], 1.0))], 0.1, |_| true).unwrap();
        let after_one = store.get("w").unwrap().clone();
        let m1 = adam.moments["w"].0.data()[0];
        adam.step(&mut store, &[("w".into(), Tensor::zeros(&[3]))], 0.1, |_| true).unwrap();
        assert!(adam.moments["w"].0.data()[0].abs() < m1.abs());
        // the decaying first moment still moves the parameter; a fresh state does not
        assert_ne!(store.get("w").unwrap(), &after_one);
        let mut fresh = AdamState::new();
        let before = store.get("w").unwrap().clone();
        fresh.step(&mut store, &[("w".into(), Tensor::zeros(&[3]))], 0.1, |_| true).unwrap();
        assert_eq!(store.get("w").unwrap(), &before);
    }

    #[test]
    fn frozen_and_mismatched() {
        let mut store = ParamStore::new();
        store.insert("w", ParamKind::Trainable, Tensor::full(&[2], 1.0)).unwrap();
        let mut adam = AdamState::new();
        adam.step(&mut store, &[("w".into(), Tensor::full(&[2], 1.0))], 0.1, |_| false).unwrap();
        assert_eq!(store.get("w").unwrap().data(), &[1.0, 1.0]);
        assert!(adam.moments.is_empty());
        let bad = adam.step(&mut store, &[("w".into(), Tensor::zeros(&[3]))], 0.1, |_| true);
        assert!(matches!(bad, Err(Error::Shape(_))));
    }
}
