//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates per parameter, plus the step counter.
#[derive(Default)]
pub struct AdamState {
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One Adam update. `grads` must be keyed exactly by the trainable
/// parameter names of `params`.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    let trainable: Vec<String> = params
        .iter()
        .filter(|p| p.trainable)
        .map(|p| p.name.clone())
        .collect();
    if trainable.len() != grads.len() || trainable.iter().any(|n| !grads.contains_key(n)) {
        return Err(Error::KeyMismatch(format!(
            "adam_step: {} gradients for {} trainable parameters",
            grads.len(),
            trainable.len()
        )));
    }

    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);

    for name in &trainable {
        let g = &grads[name];
        let p = params.get(name)?;
        if g.shape() != p.value.shape() {
            return Err(Error::KeyMismatch(format!(
                "adam_step: gradient shape {:?} for parameter {name} of shape {:?}",
                g.shape(),
                p.value.shape()
            )));
        }
        let n = p.value.numel();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);

        let mut new_value = Vec::with_capacity(n);
        for ((mi, vi), (&gi, &pi)) in m
            .iter_mut()
            .zip(v.iter_mut())
            .zip(g.data().iter().zip(p.value.data()))
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            new_value.push(pi - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps));
        }
        let shape = p.value.shape().to_vec();
        params.set_value(name, Tensor::from_vec(shape, new_value)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64) -> ParamSet {
        let mut set = ParamSet::new();
        set.insert("w", Tensor::from_vec(vec![1], vec![value]).unwrap(), true)
            .unwrap();
        set
    }

    fn grad(value: f64) -> BTreeMap<String, Tensor> {
        let mut g = BTreeMap::new();
        g.insert(
            "w".to_string(),
            Tensor::from_vec(vec![1], vec![value]).unwrap(),
        );
        g
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut params = one_param(1.25);
        let mut state = AdamState::new();
        let cfg = AdamConfig::default();
        for _ in 0..3 {
            adam_step(&mut params, &grad(0.0), &mut state, &cfg).unwrap();
        }
        assert_eq!(params.get("w").unwrap().value.data(), &[1.25]);
        assert_eq!(state.step, 3);
    }

    #[test]
    fn first_step_closed_form() {
        // theta = 0, g = 1, lr = 1e-3: bias correction makes m_hat = v_hat = 1,
        // so the update is -lr / (1 + eps).
        let mut params = one_param(0.0);
        let mut state = AdamState::new();
        let cfg = AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        };
        adam_step(&mut params, &grad(1.0), &mut state, &cfg).unwrap();
        let got = params.get("w").unwrap().value.data()[0];
        let want = -1e-3 / (1.0 + 1e-8);
        assert!((got - want).abs() < 1e-18, "{got} vs {want}");
    }

    #[test]
    fn two_steps_match_hand_unrolled_recurrence() {
        let mut params = one_param(0.5);
        let mut state = AdamState::new();
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let g = 2.0;
        adam_step(&mut params, &grad(g), &mut state, &cfg).unwrap();
        adam_step(&mut params, &grad(g), &mut state, &cfg).unwrap();

        // independent unroll
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.01);
        let mut theta = 0.5;
        let mut m = 0.0;
        let mut v = 0.0;
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1_pow(b1, t));
            let v_hat = v / (1.0 - b1_pow(b2, t));
            theta -= lr * m_hat / (f64::sqrt(v_hat) + eps);
        }
        let got = params.get("w").unwrap().value.data()[0];
        assert!((got - theta).abs() < 1e-15, "{got} vs {theta}");
    }

    fn b1_pow(b: f64, t: u32) -> f64 {
        let mut out = 1.0;
        for _ in 0..t {
            out *= b;
        }
        out
    }

    #[test]
    fn key_mismatch_is_an_error() {
        let mut params = one_param(0.0);
        let mut state = AdamState::new();
        let cfg = AdamConfig::default();
        let mut wrong = BTreeMap::new();
        wrong.insert(
            "nope".to_string(),
            Tensor::from_vec(vec![1], vec![1.0]).unwrap(),
        );
        assert!(matches!(
            adam_step(&mut params, &wrong, &mut state, &cfg),
            Err(Error::KeyMismatch(_))
        ));
        assert!(matches!(
            adam_step(&mut params, &BTreeMap::new(), &mut state, &cfg),
            Err(Error::KeyMismatch(_))
        ));
    }
}
