//! Server-side optimizers and the learning-rate schedule. One optimizer
//! lives on the server; per-parameter state steps whenever that parameter
//! receives a gradient.

use std::collections::BTreeMap;

use crate::nn::CycleModels;
use crate::tensor::Gradients;

use super::FedError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimKind {
    /// Adam with the training defaults (beta1 = 0.5, beta2 = 0.999).
    pub fn adam_default() -> Self {
        OptimKind::Adam {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
}

/// Optimizer with per-parameter state keyed by qualified name.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimKind,
    state: BTreeMap<String, Moments>,
}

impl Optimizer {
    pub fn new(kind: OptimKind) -> Self {
        Self {
            kind,
            state: BTreeMap::new(),
        }
    }

    /// Applies one update at learning rate `lr` to every parameter named in
    /// `grads`. Aborts on any non-finite gradient, naming the parameter;
    /// silent divergence is worse than a failed run.
    pub fn step(
        &mut self,
        models: &mut CycleModels,
        grads: &Gradients<f32>,
        lr: f64,
    ) -> Result<(), FedError> {
        for (name, grad) in grads {
            if !grad.data().iter().all(|v| v.is_finite()) {
                return Err(FedError::NonFiniteGradient { param: name.clone() });
            }
            let param = models
                .entry_mut(name)
                .ok_or_else(|| FedError::UnknownParameter { param: name.clone() })?;
            if param.shape() != grad.shape() {
                return Err(FedError::Congruence(format!(
                    "gradient for {name} has shape {:?}, parameter has {:?}",
                    grad.shape(),
                    param.shape()
                )));
            }
            match self.kind {
                OptimKind::Sgd => {
                    let lr = lr as f32;
                    for (p, &g) in param.data_mut().iter_mut().zip(grad.data()) {
                        *p -= lr * g;
                    }
                }
                OptimKind::Adam { beta1, beta2, eps } => {
                    let slot = self.state.entry(name.clone()).or_insert_with(|| Moments {
                        m: vec![0.0; grad.numel()],
                        v: vec![0.0; grad.numel()],
                        t: 0,
                    });
                    slot.t += 1;
                    // Scalar coefficients in f64, applied in f32.
                    let b1 = beta1 as f32;
                    let b2 = beta2 as f32;
                    let one_minus_b1 = (1.0 - beta1) as f32;
                    let one_minus_b2 = (1.0 - beta2) as f32;
                    let bias1 = (1.0 - beta1.powi(slot.t as i32)) as f32;
                    let bias2 = (1.0 - beta2.powi(slot.t as i32)) as f32;
                    let lr = lr as f32;
                    let eps = eps as f32;
                    for ((p, &g), (m, v)) in param
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .zip(slot.m.iter_mut().zip(slot.v.iter_mut()))
                    {
                        *m = b1 * *m + one_minus_b1 * g;
                        *v = b2 * *v + one_minus_b2 * g * g;
                        let mh = *m / bias1;
                        let vh = *v / bias2;
                        *p -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Learning rate at round `k` of `total`: the base rate for the first half,
/// then linear decay to exactly zero at `k == total`.
pub fn lr_schedule(k: u32, total: u32, base: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let half = total as f64 / 2.0;
    let k = k as f64;
    if k < half {
        base
    } else {
        base * (1.0 - (k - half) / (total as f64 - half))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ModelSpec, Variant};
    use crate::tensor::Tensor;

    fn one_param_models() -> (CycleModels, String) {
        let models = CycleModels::new(ModelSpec::toy(Variant::Standard), 1).unwrap();
        let name = "G/stem.b".to_string();
        (models, name)
    }

    #[test]
    fn sgd_step_matches_hand_computation() {
        let (mut models, name) = one_param_models();
        // stem.b has 8 entries; set the first two and check them.
        let mut grads = Gradients::new();
        let mut g = Tensor::zeros(&[8]);
        g.data_mut()[0] = 1.0;
        g.data_mut()[1] = -2.0;
        grads.insert(name.clone(), g);
        let mut opt = Optimizer::new(OptimKind::Sgd);
        opt.step(&mut models, &grads, 0.1).unwrap();
        let p = models.group(crate::nn::Role::G).unwrap().get("stem.b").unwrap();
        assert!((p.data()[0] + 0.1).abs() < 1e-7);
        assert!((p.data()[1] - 0.2).abs() < 1e-7);
    }

    #[test]
    fn adam_first_step_matches_hand_computation() {
        // g = 1, lr = 1e-3: mhat = 1, vhat = 1, delta = -lr / (1 + eps).
        let (mut models, name) = one_param_models();
        let mut grads = Gradients::new();
        let mut g = Tensor::zeros(&[8]);
        g.data_mut()[0] = 1.0;
        grads.insert(name.clone(), g);
        let mut opt = Optimizer::new(OptimKind::adam_default());
        opt.step(&mut models, &grads, 1e-3).unwrap();
        let p = models.group(crate::nn::Role::G).unwrap().get("stem.b").unwrap();
        let expected = -1e-3f64 / (1.0 + 1e-8);
        assert!(
            (p.data()[0] as f64 - expected).abs() < 1e-9,
            "got {}",
            p.data()[0]
        );
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        for kind in [OptimKind::Sgd, OptimKind::adam_default()] {
            let (mut models, name) = one_param_models();
            let before = models.group(crate::nn::Role::G).unwrap().clone();
            let mut grads = Gradients::new();
            grads.insert(name.clone(), Tensor::zeros(&[8]));
            Optimizer::new(kind).step(&mut models, &grads, 0.1).unwrap();
            assert_eq!(models.group(crate::nn::Role::G).unwrap(), &before);
        }
    }

    #[test]
    fn nan_gradient_aborts_with_parameter_name() {
        let (mut models, name) = one_param_models();
        let mut grads = Gradients::new();
        let mut g = Tensor::zeros(&[8]);
        g.data_mut()[0] = f32::NAN;
        grads.insert(name.clone(), g);
        let err = Optimizer::new(OptimKind::Sgd)
            .step(&mut models, &grads, 0.1)
            .unwrap_err();
        match err {
            FedError::NonFiniteGradient { param } => assert_eq!(param, name),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn schedule_holds_then_decays_to_zero() {
        let base = 2e-4;
        assert_eq!(lr_schedule(0, 400, base), base);
        assert_eq!(lr_schedule(199, 400, base), base);
        assert_eq!(lr_schedule(200, 400, base), base);
        assert!((lr_schedule(300, 400, base) - base / 2.0).abs() < 1e-18);
        assert_eq!(lr_schedule(400, 400, base), 0.0);
        // Non-increasing across the whole range.
        let mut prev = f64::INFINITY;
        for k in 0..=400 {
            let lr = lr_schedule(k, 400, base);
            assert!(lr <= prev + 1e-18);
            prev = lr;
        }
    }
}
