//! AdamW with decoupled weight decay, per-group gradient clipping, and the
//! warmup-cosine learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::numerics::params::ParamStore;
use crate::numerics::tensor::{Real, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm clip for this parameter group; None disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: None,
        }
    }
}

/// Per-group optimizer state: first/second moments plus a step counter.
#[derive(Debug, Clone)]
pub struct OptimState<S> {
    m: BTreeMap<String, Tensor<S>>,
    v: BTreeMap<String, Tensor<S>>,
    pub step: u64,
    pub hyper: AdamHyper,
}

impl<S: Real> OptimState<S> {
    pub fn new(params: &ParamStore<S>, hyper: AdamHyper) -> Self {
        let m = params
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.rows(), t.cols())))
            .collect();
        let v = params
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.rows(), t.cols())))
            .collect();
        OptimState {
            m,
            v,
            step: 0,
            hyper,
        }
    }

    /// Clip gradients (global norm over this group), then apply one AdamW
    /// step with bias-corrected moments and decoupled weight decay.
    /// Returns the pre-clip global gradient norm.
    pub fn step(
        &mut self,
        params: &mut ParamStore<S>,
        grads: &ParamStore<S>,
        lr: f64,
    ) -> Result<f64> {
        for (name, g) in grads.iter() {
            if !g.all_finite() {
                return Err(Error::TrainingDiverged(format!(
                    "non-finite gradient in parameter {name:?}"
                )));
            }
        }
        let raw_norm = grads.global_norm().as_f64();
        let clip_scale = match self.hyper.clip_norm {
            Some(c) if raw_norm > c && raw_norm > 0.0 => c / raw_norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step;
        let b1 = S::from_f64(self.hyper.beta1);
        let b2 = S::from_f64(self.hyper.beta2);
        let eps = S::from_f64(self.hyper.eps);
        let bc1 = S::from_f64(1.0 - self.hyper.beta1.powi(t as i32));
        let bc2 = S::from_f64(1.0 - self.hyper.beta2.powi(t as i32));
        let lr_s = S::from_f64(lr);
        let wd = S::from_f64(self.hyper.weight_decay);
        let cs = S::from_f64(clip_scale);
        let one = S::one();
        for (name, p) in params.iter_mut() {
            let g = grads.get(name)?;
            let m = self.m.get_mut(name).expect("moment exists");
            let v = self.v.get_mut(name).expect("moment exists");
            debug_assert_eq!(g.shape(), p.shape(), "gradient shape mismatch");
            for i in 0..p.data().len() {
                let gi = g.data()[i] * cs;
                let mi = b1 * m.data()[i] + (one - b1) * gi;
                let vi = b2 * v.data()[i] + (one - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                let mut pv = p.data()[i];
                pv = pv - lr_s * m_hat / (v_hat.sqrt() + eps);
                pv = pv - lr_s * wd * p.data()[i];
                p.data_mut()[i] = pv;
            }
        }
        for (name, p) in params.iter() {
            if !p.all_finite() {
                return Err(Error::TrainingDiverged(format!(
                    "non-finite value in parameter {name:?} after optimizer step"
                )));
            }
        }
        Ok(raw_norm)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub total_steps: u64,
    pub warmup_fraction: f64,
    pub peak_lr: f64,
}

impl ScheduleConfig {
    pub fn warmup_steps(&self) -> u64 {
        let w = (self.total_steps as f64 * self.warmup_fraction).round() as u64;
        w.min(self.total_steps.saturating_sub(1))
    }
}

/// Linear ramp 0 -> peak over the warmup steps, then half-cosine decay
/// peak -> 0 at `total_steps`.
pub fn lr_at(step: u64, sched: &ScheduleConfig) -> Result<f64> {
    if step > sched.total_steps {
        return Err(Error::InvalidArgument(format!(
            "schedule step {step} out of range 0..={}",
            sched.total_steps
        )));
    }
    let w = sched.warmup_steps();
    if step <= w {
        if w == 0 {
            return Ok(sched.peak_lr);
        }
        return Ok(sched.peak_lr * step as f64 / w as f64);
    }
    let span = (sched.total_steps - w) as f64;
    let frac = (step - w) as f64 / span;
    Ok(sched.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// Scale the pre-clip gradient norm down to the post-clip value.
pub fn post_clip_norm(raw_norm: f64, clip: Option<f64>) -> f64 {
    match clip {
        Some(c) if raw_norm > c => c,
        _ => raw_norm,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store1(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(v)).unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = store1(0.0);
        let g = store1(1.0);
        let mut st = OptimState::new(&p, AdamHyper::default());
        st.step(&mut p, &g, 0.1).unwrap();
        // bias-corrected m_hat/sqrt(v_hat) = 1 up to eps
        let moved = -p.get("p").unwrap().item();
        assert!((moved - 0.1).abs() < 1e-6, "moved {moved}");
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let mut p = store1(1.5);
        let g = store1(0.0);
        let mut st = OptimState::new(&p, AdamHyper::default());
        st.step(&mut p, &g, 0.1).unwrap();
        assert_eq!(p.get("p").unwrap().item(), 1.5);
    }

    #[test]
    fn decoupled_decay_multiplies() {
        let mut p = store1(2.0);
        let g = store1(0.0);
        let hyper = AdamHyper {
            weight_decay: 0.04,
            ..AdamHyper::default()
        };
        let mut st = OptimState::new(&p, hyper);
        st.step(&mut p, &g, 0.1).unwrap();
        let expect = 2.0 * (1.0 - 0.1 * 0.04);
        assert!((p.get("p").unwrap().item() - expect).abs() < 1e-15);
    }

    #[test]
    fn nan_grad_is_divergence_error() {
        let mut p = store1(0.0);
        let g = store1(f64::NAN);
        let mut st = OptimState::new(&p, AdamHyper::default());
        let err = st.step(&mut p, &g, 0.1).unwrap_err();
        assert!(err.to_string().contains("\"p\""), "{err}");
    }

    #[test]
    fn clip_bounds_applied_norm() {
        let mut p = ParamStore::<f64>::new();
        p.insert("a", Tensor::from_vec(1, 2, vec![0.0, 0.0])).unwrap();
        let mut g = ParamStore::new();
        g.insert("a", Tensor::from_vec(1, 2, vec![3.0, 4.0])).unwrap();
        let hyper = AdamHyper {
            clip_norm: Some(1.0),
            ..AdamHyper::default()
        };
        let mut st = OptimState::new(&p, hyper);
        let raw = st.step(&mut p, &g, 0.1).unwrap();
        assert!((raw - 5.0).abs() < 1e-12);
        assert!(post_clip_norm(raw, Some(1.0)) <= 1.0 + 1e-6);
    }

    #[test]
    fn schedule_shape() {
        let s = ScheduleConfig {
            total_steps: 1000,
            warmup_fraction: 0.02,
            peak_lr: 1e-3,
        };
        let w = s.warmup_steps();
        assert_eq!(w, 20);
        assert_eq!(lr_at(w, &s).unwrap(), 1e-3);
        assert!(lr_at(1000, &s).unwrap().abs() < 1e-19);
        // cosine midpoint -> peak/2
        let mid = w + (1000 - w) / 2;
        let lr = lr_at(mid, &s).unwrap();
        assert!((lr - 0.5e-3).abs() < 1e-9, "{lr}");
        // continuity at the boundary
        let before = lr_at(w, &s).unwrap();
        let after = lr_at(w + 1, &s).unwrap();
        assert!((before - after).abs() < 1e-3 * 0.01);
        assert!(lr_at(1001, &s).is_err());
        // non-negative everywhere
        for step in 0..=1000 {
            assert!(lr_at(step, &s).unwrap() >= 0.0);
        }
    }
}
