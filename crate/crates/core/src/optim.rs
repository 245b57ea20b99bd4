//! Adam and a one-cycle learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moments for an ordered list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (vec![0.0; p.numel()], vec![0.0; p.numel()]))
            .unzip();
        AdamState {
            config,
            step: 0,
            m,
            v,
        }
    }
}

/// One bias-corrected Adam update. Every parameter must hold a gradient;
/// gradients are cleared afterwards.
pub fn adam_step(state: &mut AdamState, params: Vec<(String, &mut Tensor)>, lr: f64) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::Input(format!(
            "optimizer tracks {} parameters, got {}",
            state.m.len(),
            params.len()
        )));
    }
    for (i, (name, p)) in params.iter().enumerate() {
        if p.grad().is_none() {
            return Err(Error::MissingGradient(name.clone()));
        }
        if state.m[i].len() != p.numel() {
            return Err(Error::Input(format!("optimizer state for `{name}` has the wrong size")));
        }
    }
    let AdamConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (i, (_, p)) in params.into_iter().enumerate() {
        let g = p.take_grad().expect("checked above");
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let data = p.data_mut();
        for j in 0..data.len() {
            let gj = g[j] + weight_decay * data[j];
            m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
            v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Warm up from `max_lr / div_factor` to `max_lr`, then anneal to
/// `max_lr / (div_factor * final_div_factor)`, both with half-cosine shape.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneCycleSchedule {
    pub max_lr: f64,
    pub total_steps: usize,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl OneCycleSchedule {
    pub fn new(max_lr: f64, total_steps: usize) -> Self {
        OneCycleSchedule {
            max_lr,
            total_steps,
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
        }
    }

    pub fn initial_lr(&self) -> f64 {
        self.max_lr / self.div_factor
    }

    pub fn final_lr(&self) -> f64 {
        self.max_lr / (self.div_factor * self.final_div_factor)
    }

    pub fn peak_step(&self) -> usize {
        let peak = (self.pct_start * self.total_steps as f64).round() as usize;
        peak.min(self.total_steps.saturating_sub(1))
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step >= self.total_steps {
            return Err(Error::ScheduleStep {
                step,
                total: self.total_steps,
            });
        }
        let peak = self.peak_step();
        if step < peak {
            Ok(cosine(self.initial_lr(), self.max_lr, step as f64 / peak as f64))
        } else {
            let span = self.total_steps - 1 - peak;
            if span == 0 {
                return Ok(self.max_lr);
            }
            Ok(cosine(self.max_lr, self.final_lr(), (step - peak) as f64 / span as f64))
        }
    }
}

/// Half-cosine interpolation, exact at both ends and monotone in `frac`.
fn cosine(start: f64, end: f64, frac: f64) -> f64 {
    let w = (1.0 - (PI * frac).cos()) / 2.0;
    if w <= 0.0 {
        return start;
    }
    if w >= 1.0 {
        return end;
    }
    let x = start + (end - start) * w;
    x.clamp(start.min(end), start.max(end))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn param(v: f64) -> Tensor {
        Tensor::parameter(vec![1], vec![v])
    }

    fn step(state: &mut AdamState, p: &mut Tensor, g: f64, lr: f64) {
        p.accumulate_grad(&[g]).unwrap();
        adam_step(state, vec![("p".into(), p)], lr).unwrap();
    }

    #[test]
    fn first_step_from_zero() {
        let mut p = param(0.0);
        let mut s = AdamState::new(AdamConfig::default(), [&p]);
        step(&mut s, &mut p, 1.0, 1e-3);
        let want = -1e-3 / (1.0 + 1e-8);
        assert_eq!(p.data()[0], want);
        assert!((p.data()[0] + 9.9999999e-4).abs() < 1e-12);
        assert_eq!(s.step, 1);
        assert!(p.grad().is_none());
    }

    #[test]
    fn two_steps_match_unrolled_recurrence() {
        let mut p = param(0.5);
        let mut s = AdamState::new(AdamConfig::default(), [&p]);
        step(&mut s, &mut p, 1.0, 1e-3);
        step(&mut s, &mut p, 1.0, 1e-3);
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 1e-3);
        let mut theta = 0.5;
        let (m1, v1) = (1.0 - b1, 1.0 - b2);
        theta -= lr * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
        let (m2, v2) = (b1 * m1 + (1.0 - b1), b2 * v1 + (1.0 - b2));
        theta -= lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);
        assert!((p.data()[0] - theta).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut p = param(0.25);
        let mut s = AdamState::new(AdamConfig::default(), [&p]);
        step(&mut s, &mut p, 0.0, 1e-3);
        assert_eq!(p.data()[0], 0.25);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut p = param(0.0);
        let mut s = AdamState::new(AdamConfig::default(), [&p]);
        let err = adam_step(&mut s, vec![("encoder.wq".into(), &mut p)], 1e-3).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(ref n) if n == "encoder.wq"));
        assert_eq!(s.step, 0);
    }

    #[test]
    fn schedule_examples() {
        let s = OneCycleSchedule::new(1e-3, 100);
        assert_eq!(s.lr_at(0).unwrap(), 1e-3 / 25.0);
        assert_eq!(s.lr_at(30).unwrap(), 1e-3);
        assert_eq!(s.lr_at(99).unwrap(), 1e-3 / 25e4);
        assert!((s.lr_at(15).unwrap() - 5.2e-4).abs() < 1e-15);
        assert!(matches!(s.lr_at(100), Err(Error::ScheduleStep { step: 100, total: 100 })));
    }

    proptest! {
        #[test]
        fn first_step_is_sign_times_lr(g in prop_oneof![-1e3..-1e-2f64, 1e-2..1e3f64], lr in 1e-5..1e-1f64) {
            let mut p = param(0.0);
            let mut s = AdamState::new(AdamConfig::default(), [&p]);
            step(&mut s, &mut p, g, lr);
            let u = p.data()[0];
            prop_assert_eq!(u.signum(), -g.signum());
            prop_assert!((u.abs() / lr - 1.0).abs() <= 1e-6);
        }

        #[test]
        fn first_step_shortfall_is_eps_over_g(g in 1e-6..1e3f64) {
            let mut p = param(0.0);
            let mut s = AdamState::new(AdamConfig::default(), [&p]);
            step(&mut s, &mut p, g, 1.0);
            let want = g / (g + 1e-8);
            prop_assert!((p.data()[0].abs() - want).abs() <= 1e-12);
        }

        #[test]
        fn schedule_anchors_and_monotone(max_lr in 1e-5..1e-1f64, total in 3usize..400) {
            let s = OneCycleSchedule::new(max_lr, total);
            let peak = s.peak_step();
            prop_assert_eq!(s.lr_at(0).unwrap(), max_lr / 25.0);
            prop_assert_eq!(s.lr_at(peak).unwrap(), max_lr);
            prop_assert_eq!(s.lr_at(total - 1).unwrap(), max_lr / 25e4);
            let lrs: Vec<f64> = (0..total).map(|t| s.lr_at(t).unwrap()).collect();
            for t in 1..total {
                if t <= peak {
                    prop_assert!(lrs[t] >= lrs[t - 1]);
                } else {
                    prop_assert!(lrs[t] <= lrs[t - 1]);
                }
            }
        }
    }
}
