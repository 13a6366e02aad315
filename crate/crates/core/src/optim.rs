//! Nesterov momentum SGD with decoupled weight decay, step-decay schedules and
//! the effective learning rate / effective weight decay reparameterizations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub base_eta: f64,
    pub milestones: Vec<usize>,
    #[serde(default = "default_factor")]
    pub factor: f64,
    pub total_epochs: usize,
}

fn default_factor() -> f64 {
    0.1
}

impl ScheduleSpec {
    pub fn new(base_eta: f64, milestones: Vec<usize>, factor: f64, total_epochs: usize) -> Result<Self> {
        let s = Self {
            base_eta,
            milestones,
            factor,
            total_epochs,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_eta.is_finite() && self.base_eta > 0.0) {
            return Err(Error::Input(format!(
                "base learning rate must be positive, got {}",
                self.base_eta
            )));
        }
        if self.total_epochs == 0 {
            return Err(Error::Input("schedule needs at least one epoch".into()));
        }
        if !(self.factor > 0.0 && self.factor <= 1.0) {
            return Err(Error::Input(format!(
                "decay factor must be in (0, 1], got {}",
                self.factor
            )));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Input("milestones must be strictly increasing".into()));
        }
        if self.milestones.last().is_some_and(|&m| m >= self.total_epochs) {
            return Err(Error::Input("milestones must precede the final epoch".into()));
        }
        Ok(())
    }
}

/// Learning rate for `epoch`: the base rate decayed once per milestone
/// already reached.
pub fn schedule_eta(schedule: &ScheduleSpec, epoch: usize) -> Result<f64> {
    if epoch >= schedule.total_epochs {
        return Err(Error::Input(format!(
            "epoch {epoch} outside schedule of {} epochs",
            schedule.total_epochs
        )));
    }
    let decays = schedule.milestones.iter().filter(|&&m| m <= epoch).count();
    Ok(schedule.base_eta * schedule.factor.powi(decays as i32))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub eta: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub schedule: ScheduleSpec,
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::Input(format!(
                "learning rate must be positive and finite, got {}",
                self.eta
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Input(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Input(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Input("batch size must be positive".into()));
        }
        self.schedule.validate()
    }
}

/// Effective learning rate `eta / (1 - m)`.
pub fn elr(h: &HyperParams) -> f64 {
    h.eta / (1.0 - h.momentum)
}

/// Learning rate that yields `target_elr` at momentum `m`.
pub fn eta_for_elr(target_elr: f64, momentum: f64) -> f64 {
    target_elr * (1.0 - momentum)
}

/// Weight decay relative to the learning rate, `lambda / eta`.
pub fn effective_wd(h: &HyperParams) -> Result<f64> {
    if h.eta == 0.0 {
        return Err(Error::Division("effective weight decay with zero learning rate".into()));
    }
    Ok(h.weight_decay / h.eta)
}

/// BN running-average momentum for fine-tuning with `steps_per_epoch` updates
/// per epoch: `max(1 - 10 / s, 0.9)`.
pub fn bn_momentum_heuristic(steps_per_epoch: usize) -> f64 {
    let s = steps_per_epoch.max(1) as f64;
    (1.0 - 10.0 / s).max(0.9)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub theta: Vec<f64>,
    pub velocity: Vec<f64>,
    pub step: u64,
}

impl OptimState {
    /// Starts at `theta` with zero velocity.
    pub fn new(theta: Vec<f64>) -> Self {
        let velocity = vec![0.0; theta.len()];
        Self {
            theta,
            velocity,
            step: 0,
        }
    }

    /// The point `theta + m * v` where the gradient of the next step is taken.
    pub fn lookahead(&self, momentum: f64) -> Vec<f64> {
        self.theta
            .iter()
            .zip(&self.velocity)
            .map(|(t, v)| t + momentum * v)
            .collect()
    }
}

/// One Nesterov update. `grad` must be evaluated at [`OptimState::lookahead`].
///
/// `v <- m v - eta_t g`, `theta <- theta + v - eta_t lambda theta`, where the
/// decay term uses the pre-update parameters.
pub fn nag_step(state: &mut OptimState, grad: &[f64], h: &HyperParams, eta_t: f64) -> Result<()> {
    if grad.len() != state.theta.len() {
        return Err(Error::dim("gradient length", state.theta.len(), grad.len()));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric {
            step: state.step,
            message: format!("non-finite gradient component {i}"),
        });
    }
    let m = h.momentum;
    let decay = eta_t * h.weight_decay;
    for ((theta, v), g) in state.theta.iter_mut().zip(state.velocity.iter_mut()).zip(grad) {
        *v = m * *v - eta_t * g;
        *theta = *theta + *v - decay * *theta;
    }
    state.step += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hp(eta: f64, momentum: f64, weight_decay: f64) -> HyperParams {
        HyperParams {
            eta,
            momentum,
            weight_decay,
            batch_size: 1,
            schedule: ScheduleSpec::new(eta, vec![], 0.1, 10).unwrap(),
        }
    }

    #[test]
    fn elr_examples() {
        assert!((elr(&hp(0.01, 0.9, 0.0)) - 0.1).abs() < 1e-15);
        assert_eq!(elr(&hp(0.05, 0.0, 0.0)), 0.05);
        assert!((elr(&hp(0.01, 0.99, 0.0)) - 1.0).abs() < 1e-13);
    }

    #[test]
    fn eta_for_elr_examples() {
        assert!((eta_for_elr(0.1, 0.9) - 0.01).abs() < 1e-15);
        assert_eq!(eta_for_elr(0.1, 0.0), 0.1);
        assert!((eta_for_elr(0.5, 0.95) - 0.025).abs() < 1e-15);
    }

    #[test]
    fn effective_wd_examples() {
        assert!((effective_wd(&hp(0.01, 0.9, 1e-4)).unwrap() - 0.01).abs() < 1e-15);
        assert_eq!(effective_wd(&hp(0.01, 0.9, 0.0)).unwrap(), 0.0);
        assert!((effective_wd(&hp(0.1, 0.9, 5e-4)).unwrap() - 5e-3).abs() < 1e-15);
        let mut h = hp(0.01, 0.9, 1e-4);
        h.eta = 0.0;
        assert!(matches!(effective_wd(&h), Err(Error::Division(_))));
    }

    #[test]
    fn nag_two_step_trace() {
        // f = theta^2 / 2, so the gradient at the lookahead point is the point itself.
        let h = hp(0.1, 0.9, 0.0);
        let mut s = OptimState::new(vec![1.0]);
        let g = s.lookahead(h.momentum);
        assert_eq!(g, vec![1.0]);
        nag_step(&mut s, &g, &h, 0.1).unwrap();
        assert!((s.velocity[0] + 0.1).abs() < 1e-15);
        assert!((s.theta[0] - 0.9).abs() < 1e-15);
        let g = s.lookahead(h.momentum);
        assert!((g[0] - 0.81).abs() < 1e-15);
        nag_step(&mut s, &g, &h, 0.1).unwrap();
        assert!((s.velocity[0] + 0.171).abs() < 1e-12);
        assert!((s.theta[0] - 0.729).abs() < 1e-12);
        assert_eq!(s.step, 2);
    }

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let h = hp(0.3, 0.0, 0.0);
        let mut s = OptimState::new(vec![2.0, -1.0]);
        nag_step(&mut s, &[0.5, 1.0], &h, 0.3).unwrap();
        assert_eq!(s.theta, vec![2.0 - 0.3 * 0.5, -1.0 - 0.3 * 1.0]);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let h = hp(0.1, 0.9, 0.0);
        let mut s = OptimState::new(vec![1.5, -2.0]);
        nag_step(&mut s, &[0.0, 0.0], &h, 0.1).unwrap();
        assert_eq!(s.theta, vec![1.5, -2.0]);
        assert_eq!(s.velocity, vec![0.0, 0.0]);
    }

    #[test]
    fn pure_decay_is_geometric() {
        let h = hp(0.1, 0.9, 0.5);
        let mut s = OptimState::new(vec![2.0]);
        for _ in 0..5 {
            nag_step(&mut s, &[0.0], &h, 0.1).unwrap();
        }
        assert!((s.theta[0] - 2.0 * (1.0f64 - 0.05).powi(5)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_reports_step() {
        let h = hp(0.1, 0.9, 0.0);
        let mut s = OptimState::new(vec![1.0]);
        nag_step(&mut s, &[1.0], &h, 0.1).unwrap();
        match nag_step(&mut s, &[f64::NAN], &h, 0.1) {
            Err(Error::Numeric { step, .. }) => assert_eq!(step, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn schedule_examples() {
        let s = ScheduleSpec::new(0.01, vec![150, 250], 0.1, 300).unwrap();
        assert_eq!(schedule_eta(&s, 0).unwrap(), 0.01);
        assert_eq!(schedule_eta(&s, 149).unwrap(), 0.01);
        assert!((schedule_eta(&s, 150).unwrap() - 0.001).abs() < 1e-18);
        assert!((schedule_eta(&s, 299).unwrap() - 0.0001).abs() < 1e-18);
        assert!(matches!(schedule_eta(&s, 300), Err(Error::Input(_))));
    }

    #[test]
    fn schedule_rejects_bad_specs() {
        assert!(ScheduleSpec::new(0.1, vec![5, 5], 0.1, 10).is_err());
        assert!(ScheduleSpec::new(0.1, vec![10], 0.1, 10).is_err());
        assert!(ScheduleSpec::new(0.1, vec![], 0.0, 10).is_err());
        assert!(ScheduleSpec::new(0.1, vec![], 1.5, 10).is_err());
        assert!(ScheduleSpec::new(0.1, vec![], 0.1, 0).is_err());
    }

    #[test]
    fn bn_momentum_examples() {
        assert!((bn_momentum_heuristic(100) - 0.9).abs() < 1e-15);
        assert!((bn_momentum_heuristic(1000) - 0.99).abs() < 1e-15);
        assert_eq!(bn_momentum_heuristic(5), 0.9);
    }
}
