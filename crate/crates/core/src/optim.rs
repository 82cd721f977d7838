//! Adam with the AMSGrad correction, and the step-decay schedule.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::Parameters;

/// `initial · 0.5^floor(epoch / every)`.
pub fn step_decay(initial: f64, every: usize, epoch: usize) -> f64 {
    initial * libm::pow(0.5, (epoch / every.max(1)) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmsGrad {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AmsGrad {
    fn default() -> Self {
        AmsGrad {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter moment estimates. `v_max` is the running elementwise
/// maximum of `v` and is what the update divides by.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub v_max: Vec<Vec<f64>>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(params: &Parameters) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![0.0; t.len()]).collect::<Vec<_>>();
        OptimizerState {
            m: zeros(),
            v: zeros(),
            v_max: zeros(),
            t: 0,
        }
    }

    /// One AMSGrad update of every parameter. Nothing is modified if any
    /// gradient is non-finite.
    pub fn step(&mut self, cfg: &AmsGrad, params: &mut Parameters, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::shape(
                "adam_amsgrad_step",
                format!("{} params, {} grads, {} moments", params.len(), grads.len(), self.m.len()),
            ));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if g.len() != p.len() {
                return Err(Error::shape("adam_amsgrad_step", format!("{name}: gradient length {}", g.len())));
            }
            if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient {} in {name}[{pos}] at step {}",
                    g[pos],
                    self.t + 1
                )));
            }
        }
        self.t += 1;
        let c1 = 1.0 - libm::pow(cfg.beta1, self.t as f64);
        let c2 = 1.0 - libm::pow(cfg.beta2, self.t as f64);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let (m, v, vmax) = (&mut self.m[i], &mut self.v[i], &mut self.v_max[i]);
            for (j, theta) in p.data_mut().iter_mut().enumerate() {
                let g = grads[i][j];
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
                if v[j] > vmax[j] {
                    vmax[j] = v[j];
                }
                let m_hat = m[j] / c1;
                let v_hat = vmax[j] / c2;
                *theta -= lr * m_hat / (libm::sqrt(v_hat) + cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(v: f64) -> Parameters {
        let mut p = Parameters::new();
        p.push("w", Tensor::new([1], alloc::vec![v]).unwrap());
        p
    }

    #[test]
    fn schedule_halves_on_boundaries() {
        assert_eq!(step_decay(1e-4, 30, 0), 1e-4);
        assert_eq!(step_decay(1e-4, 30, 29), 1e-4);
        assert_eq!(step_decay(1e-4, 30, 30), 5e-5);
        assert_eq!(step_decay(1e-4, 30, 59), 5e-5);
        assert_eq!(step_decay(1e-4, 30, 60), 2.5e-5);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = single(0.7);
        let mut s = OptimizerState::new(&p);
        s.step(&AmsGrad::default(), &mut p, &[alloc::vec![0.0]], 1e-3).unwrap();
        assert_eq!(p.tensors()[0].data()[0], 0.7);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_matches_scalar_hand_computation() {
        // m = 0.1g, v = 0.001g², m̂ = g, v̂ = g², Δ = -lr·g/(|g| + eps)
        let (g, lr) = (0.25, 1e-3);
        let mut p = single(1.0);
        let mut s = OptimizerState::new(&p);
        s.step(&AmsGrad::default(), &mut p, &[alloc::vec![g]], lr).unwrap();
        let expected = 1.0 - lr * g / (g + 1e-8);
        assert!((p.tensors()[0].data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_aborts_without_update() {
        let mut p = single(1.0);
        let mut s = OptimizerState::new(&p);
        let err = s.step(&AmsGrad::default(), &mut p, &[alloc::vec![f64::NAN]], 1e-3).unwrap_err();
        assert!(matches!(err, Error::Numerical(ref m) if m.contains("w[0]")));
        assert_eq!(s.t, 0);
        assert_eq!(p.tensors()[0].data()[0], 1.0);
    }
}
