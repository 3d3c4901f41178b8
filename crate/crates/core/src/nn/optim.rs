use serde::{Deserialize, Serialize};

use super::model::Param;
use crate::error::{CacError, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    /// Fractions of the run after which the rate is multiplied by `decay_factor`.
    pub decay_at: Vec<f64>,
    pub decay_factor: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            nesterov: true,
            decay_at: vec![0.6, 0.8],
            decay_factor: 0.1,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.decay_factor > 0.0
            && self.decay_at.iter().all(|f| (0.0..=1.0).contains(f));
        if ok {
            Ok(())
        } else {
            Err(CacError::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Piecewise-constant learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    /// Epoch indices (0-based) at which a decay takes effect.
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn from_config(cfg: &OptimizerConfig, epochs: usize) -> Self {
        LrSchedule {
            base: cfg.lr,
            milestones: cfg.decay_at.iter().map(|f| (f * epochs as f64).round() as usize).collect(),
            factor: cfg.decay_factor,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| epoch >= m).count() as i32;
        self.base * self.factor.powi(drops)
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub velocity: Vec<Tensor<T>>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    pub schedule: LrSchedule,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(cfg: &OptimizerConfig, epochs: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(OptimizerState {
            velocity: Vec::new(),
            lr: cfg.lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            nesterov: cfg.nesterov,
            schedule: LrSchedule::from_config(cfg, epochs),
        })
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.lr = self.schedule.lr_at(epoch);
    }
}

/// One SGD update over `params` in order. With weight decay `g ← g + wd·θ`
/// (for params that opt in), then `v ← μv + g` and
/// `θ ← θ − lr·(g + μv)` (Nesterov) or `θ ← θ − lr·v`.
pub fn sgd_step<T: Scalar>(params: &mut [&mut Param<T>], state: &mut OptimizerState<T>) -> Result<()> {
    if !(state.lr > 0.0) {
        return Err(CacError::invalid(format!("learning rate must be > 0, got {}", state.lr)));
    }
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    }
    if state.velocity.len() != params.len() {
        return Err(CacError::invalid(format!(
            "optimizer holds {} buffers for {} parameters",
            state.velocity.len(),
            params.len()
        )));
    }
    let lr = T::lit(state.lr);
    let mu = T::lit(state.momentum);
    let wd = T::lit(state.weight_decay);
    for (p, v) in params.iter_mut().zip(state.velocity.iter_mut()) {
        if p.grad.shape() != p.value.shape() || v.shape() != p.value.shape() {
            return Err(CacError::invalid(format!("shape mismatch for parameter {}", p.name)));
        }
        let decay = p.decay && state.weight_decay > 0.0;
        let Param { value, grad, name, .. } = &mut **p;
        for ((theta, &g0), vel) in value.data_mut().iter_mut().zip(grad.data()).zip(v.data_mut()) {
            let g = if decay { g0 + wd * *theta } else { g0 };
            *vel = mu * *vel + g;
            let step = if state.nesterov { g + mu * *vel } else { *vel };
            *theta -= lr * step;
        }
        value.ensure_finite(&format!("sgd update of {name}"))?;
    }
    Ok(())
}

/// `L = ℓ · ratio^λ` with its partial derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub value: f64,
    pub d_ell: f64,
    pub d_ratio: f64,
}

pub fn weighted_product_loss(ell: f64, cost_ratio: f64, lambda: f64) -> Result<Objective> {
    if !(ell >= 0.0) || !ell.is_finite() {
        return Err(CacError::invalid(format!("task loss must be finite and >= 0, got {ell}")));
    }
    let (factor, dfactor) = crate::cost::cost_penalty(cost_ratio, lambda)?;
    Ok(Objective {
        value: ell * factor,
        d_ell: factor,
        d_ratio: ell * dfactor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: &[f64], g: &[f64], decay: bool) -> Param<f64> {
        Param {
            name: "p".into(),
            value: Tensor::new(vec![v.len()], v.to_vec()).unwrap(),
            grad: Tensor::new(vec![g.len()], g.to_vec()).unwrap(),
            decay,
        }
    }

    fn state(lr: f64, mu: f64, wd: f64) -> OptimizerState<f64> {
        let cfg = OptimizerConfig { lr, momentum: mu, weight_decay: wd, ..Default::default() };
        OptimizerState::new(&cfg, 10).unwrap()
    }

    #[test]
    fn plain_step() {
        let mut p = param(&[1.0, -2.0], &[0.5, 0.25], true);
        let mut s = state(0.1, 0.0, 0.0);
        sgd_step(&mut [&mut p], &mut s).unwrap();
        assert_eq!(p.value.data(), &[1.0 - 0.05, -2.0 - 0.025]);
    }

    #[test]
    fn nesterov_two_steps_match_recurrence() {
        let (lr, mu, g) = (0.1, 0.9, 1.0);
        let mut p = param(&[0.0], &[g], false);
        let mut s = state(lr, mu, 1e-4);
        sgd_step(&mut [&mut p], &mut s).unwrap();
        sgd_step(&mut [&mut p], &mut s).unwrap();
        // v1 = g, θ1 = −lr(g + μg); v2 = μg + g, θ2 = θ1 − lr(g + μ v2)
        let theta1 = -lr * (g + mu * g);
        let v2 = mu * g + g;
        let theta2 = theta1 - lr * (g + mu * v2);
        assert!((p.value.data()[0] - theta2).abs() < 1e-15);
        assert!((s.velocity[0].data()[0] - v2).abs() < 1e-15);
    }

    #[test]
    fn decay_only_step() {
        let mut p = param(&[2.0], &[0.0], true);
        let mut s = state(0.5, 0.9, 1e-4);
        sgd_step(&mut [&mut p], &mut s).unwrap();
        // nesterov with v = wd·θ: θ − lr(g + μ g) where g = wd θ
        let g = 1e-4 * 2.0;
        assert!((p.value.data()[0] - (2.0 - 0.5 * (g + 0.9 * g))).abs() < 1e-15);
        let mut p = param(&[2.0], &[0.0], true);
        let mut s = state(0.5, 0.0, 1e-4);
        sgd_step(&mut [&mut p], &mut s).unwrap();
        assert_eq!(p.value.data()[0], 2.0 - 0.5 * 0.0001 * 2.0);
        let mut gate = param(&[2.0], &[0.0], false);
        sgd_step(&mut [&mut gate], &mut state(0.5, 0.0, 1e-4)).unwrap();
        assert_eq!(gate.value.data()[0], 2.0);
    }

    #[test]
    fn non_finite_update_is_reported() {
        let mut p = param(&[1.0], &[f64::INFINITY], true);
        let err = sgd_step(&mut [&mut p], &mut state(0.1, 0.0, 0.0)).unwrap_err();
        assert!(err.to_string().contains("sgd update"), "{err}");
    }

    #[test]
    fn schedule_drops_at_sixty_and_eighty_percent() {
        let s = LrSchedule::from_config(&OptimizerConfig::default(), 20);
        assert_eq!(s.milestones, vec![12, 16]);
        assert_eq!(s.lr_at(11), 0.05);
        assert!((s.lr_at(12) - 0.005).abs() < 1e-15);
        assert!((s.lr_at(19) - 0.0005).abs() < 1e-15);
    }

    #[test]
    fn weighted_product_examples() {
        assert_eq!(weighted_product_loss(2.0, 123.0, 0.0).unwrap().value, 2.0);
        assert_eq!(weighted_product_loss(2.0, 0.5, 1.0).unwrap().value, 1.0);
        let o = weighted_product_loss(1.5, 0.8, 0.3).unwrap();
        assert!((o.value - 1.5 * 0.8f64.powf(0.3)).abs() < 1e-15);
        assert!((o.value - 1.40288).abs() < 1e-5);
        assert!((o.d_ratio - 1.5 * 0.3 * 0.8f64.powf(-0.7)).abs() < 1e-15);
        assert!(weighted_product_loss(-1.0, 0.5, 1.0).is_err());
        assert!(weighted_product_loss(1.0, 0.0, 1.0).is_err());
        assert!(weighted_product_loss(1.0, 0.5, -0.1).is_err());
    }
}
