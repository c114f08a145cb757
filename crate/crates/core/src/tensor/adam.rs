use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamKind, ParamSet, Tensor};
use crate::error::{DehazeError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates and step counter of the Adam optimizer. Moments are
/// kept at `f32` precision like the parameters they track.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// One bias-corrected Adam update of every trainable parameter.
    ///
    /// Parameters without an entry in `grads` see a zero gradient. Any
    /// non-finite gradient aborts the step before anything is modified.
    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            if params.kind(name) != Some(ParamKind::Trainable) {
                continue;
            }
            params.get(name)?.same_shape(g, name)?;
            g.ensure_finite(&format!("gradient of {name}"))?;
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        if !(lr.is_finite() && lr > 0.0) {
            return Err(DehazeError::invalid(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let names: Vec<String> = params.trainable().map(|(n, _)| n.to_owned()).collect();
        for name in names {
            let p = params.get_mut(&name).expect("name taken from the set");
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let g = grads.get(&name);
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                let mi = (beta1 * m.data()[i] + (1.0 - beta1) * gi) as f32 as f64;
                let vi = (beta2 * v.data()[i] + (1.0 - beta2) * gi * gi) as f32 as f64;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                p.data_mut()[i] -= update;
            }
            p.round_to_f32();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(x: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("x", ParamKind::Trainable, Tensor::scalar(x));
        p
    }

    fn grad(g: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("x".to_owned(), Tensor::scalar(g))])
    }

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let mut p = scalar_params(0.75);
        let mut s = AdamState::new(AdamConfig::default());
        s.step(&mut p, &grad(0.0)).unwrap();
        assert_eq!(p.get("x").unwrap().data(), &[0.75]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [3.0, -0.01, 250.0] {
            let mut p = scalar_params(0.5);
            let mut s = AdamState::new(AdamConfig {
                lr: 0.01,
                ..AdamConfig::default()
            });
            s.step(&mut p, &grad(g)).unwrap();
            let moved = 0.5 - p.get("x").unwrap().data()[0];
            assert!((moved.abs() - 0.01).abs() < 1e-6, "g={g} moved {moved}");
            assert_eq!(moved.signum(), g.signum());
        }
    }

    #[test]
    fn rejects_non_finite_gradient_without_mutation() {
        let mut p = scalar_params(0.5);
        let mut s = AdamState::new(AdamConfig::default());
        assert!(s.step(&mut p, &grad(f64::NAN)).is_err());
        assert_eq!(s.step, 0);
        assert_eq!(p.get("x").unwrap().data(), &[0.5]);
    }

    #[test]
    fn minimizes_quadratic_like_reference() {
        // independent scalar reference implementation
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.1);
        let (mut xr, mut m, mut v) = (1.0f64, 0.0, 0.0);
        for t in 1..=200 {
            let g = 2.0 * xr;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            xr -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        assert!(xr.abs() < 1e-2);

        let mut p = scalar_params(1.0);
        let mut s = AdamState::new(AdamConfig {
            lr,
            ..AdamConfig::default()
        });
        for _ in 0..200 {
            let x = p.get("x").unwrap().data()[0];
            s.step(&mut p, &grad(2.0 * x)).unwrap();
        }
        let x = p.get("x").unwrap().data()[0];
        assert!(x.abs() < 1e-2, "x = {x}");
        // f32 parameter storage keeps the trajectories close, not identical
        assert!((x - xr).abs() < 1e-3, "engine {x} vs reference {xr}");
    }
}
