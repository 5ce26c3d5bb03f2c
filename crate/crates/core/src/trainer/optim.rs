use super::params::ParamStore;
use crate::config::{ExperimentConfig, OptimizerKind, ScheduleKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub lr0: f64,
    pub milestones: Vec<usize>,
    pub total_epochs: usize,
}

impl LrSchedule {
    /// Uses the linearly scaled base rate of the configuration.
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self { kind: cfg.schedule, lr0: cfg.scaled_lr(), milestones: cfg.milestones.clone(), total_epochs: cfg.epochs }
    }
}

/// Learning rate for a zero-based epoch.
///
/// Stepwise divides by 10 at each milestone reached; cosine follows
/// `lr0 / 2 * (1 + cos(pi * epoch / total))`.
pub fn lr_at(s: &LrSchedule, epoch: usize) -> f64 {
    match s.kind {
        ScheduleKind::Stepwise => {
            let passed = s.milestones.iter().filter(|&&m| epoch >= m).count();
            s.lr0 * 0.1f64.powi(passed as i32)
        }
        ScheduleKind::Cosine => {
            let t = epoch.min(s.total_epochs) as f64 / s.total_epochs.max(1) as f64;
            0.5 * s.lr0 * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub rho: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            kind: cfg.optimizer,
            momentum: cfg.momentum,
            rho: cfg.rmsprop_rho,
            eps: cfg.rmsprop_eps,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn sgd(momentum: f64, weight_decay: f64) -> Self {
        Self { kind: OptimizerKind::SgdMomentum, momentum, rho: 0.9, eps: 1e-8, weight_decay }
    }

    pub fn rmsprop(weight_decay: f64) -> Self {
        Self { kind: OptimizerKind::RmsProp, momentum: 0.0, rho: 0.9, eps: 1e-8, weight_decay }
    }
}

/// Per-parameter buffers: velocity for SGD, mean square for RMSProp.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub buffers: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        Self { buffers: params.iter().map(|p| vec![0.0; p.value.len()]).collect() }
    }
}

/// One update of every non-frozen parameter. Weight decay is folded into
/// the gradient as `g + wd * p`.
///
/// * SGD: `v = m*v + g + wd*p; p -= lr*v`
/// * RMSProp: `s = rho*s + (1-rho)*g^2; p -= lr*g / (sqrt(s) + eps)`
pub fn optimizer_step(cfg: &OptimizerConfig, params: &mut ParamStore, state: &mut OptimizerState, lr: f64) -> Result<()> {
    if state.buffers.len() != params.len() {
        return Err(Error::Usage("optimizer state does not match the parameters".into()));
    }
    for p in params.iter() {
        if let Some(i) = p.grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient in `{}` at index {i}", p.name)));
        }
    }
    for (p, buf) in params.iter_mut().zip(&mut state.buffers) {
        if p.frozen {
            continue;
        }
        for ((w, &g), b) in p.value.iter_mut().zip(&p.grad).zip(buf.iter_mut()) {
            let g = g + cfg.weight_decay * *w;
            match cfg.kind {
                OptimizerKind::SgdMomentum => {
                    *b = cfg.momentum * *b + g;
                    *w -= lr * *b;
                }
                OptimizerKind::RmsProp => {
                    *b = cfg.rho * *b + (1.0 - cfg.rho) * g * g;
                    *w -= lr * g / (b.sqrt() + cfg.eps);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(value: f64, grad: f64) -> ParamStore {
        let mut s = ParamStore::default();
        let id = s.add("p", vec![value]);
        s.get_mut(id).grad[0] = grad;
        s
    }

    #[test]
    fn schedules() {
        let step = LrSchedule { kind: ScheduleKind::Stepwise, lr0: 0.1, milestones: vec![30, 60, 90], total_epochs: 100 };
        assert!((lr_at(&step, 45) - 0.01).abs() < 1e-15);
        assert_eq!(lr_at(&step, 0), 0.1);
        assert!((lr_at(&step, 29) - 0.1).abs() < 1e-15);
        assert!((lr_at(&step, 95) - 1e-4).abs() < 1e-15);
        let cos = LrSchedule { kind: ScheduleKind::Cosine, ..step };
        assert_eq!(lr_at(&cos, 0), 0.1);
        assert!((lr_at(&cos, 50) - 0.05).abs() < 1e-15);
        assert!(lr_at(&cos, 100).abs() < 1e-15);
    }

    #[test]
    fn sgd_first_step() {
        let mut p = store(1.0, 1.0);
        let mut st = OptimizerState::new(&p);
        optimizer_step(&OptimizerConfig::sgd(0.9, 0.0), &mut p, &mut st, 0.1).unwrap();
        assert!((p.get(0).value[0] - 0.9).abs() < 1e-15);
        assert_eq!(st.buffers[0][0], 1.0);
        optimizer_step(&OptimizerConfig::sgd(0.9, 0.0), &mut p, &mut st, 0.1).unwrap();
        assert!((st.buffers[0][0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_reaches_every_parameter() {
        let mut p = ParamStore::default();
        for name in ["conv.w", "norm.gamma", "norm.beta", "norm.logits_mu"] {
            p.add(name, vec![2.0]);
        }
        let mut st = OptimizerState::new(&p);
        optimizer_step(&OptimizerConfig::sgd(0.9, 1e-4), &mut p, &mut st, 1.0).unwrap();
        assert!(p.iter().all(|q| (q.value[0] - (2.0 - 2e-4)).abs() < 1e-15));
    }

    #[test]
    fn rmsprop_first_step() {
        let mut p = store(0.0, 1.0);
        let mut st = OptimizerState::new(&p);
        optimizer_step(&OptimizerConfig::rmsprop(0.0), &mut p, &mut st, 0.01).unwrap();
        let expect = -0.01 / (0.1f64.sqrt() + 1e-8);
        assert!((p.get(0).value[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut p = store(1.0, 1.0);
        p.get_mut(0).frozen = true;
        let mut st = OptimizerState::new(&p);
        optimizer_step(&OptimizerConfig::sgd(0.9, 1e-4), &mut p, &mut st, 0.1).unwrap();
        assert_eq!(p.get(0).value[0], 1.0);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut p = store(1.0, f64::NAN);
        let mut st = OptimizerState::new(&p);
        let err = optimizer_step(&OptimizerConfig::sgd(0.9, 0.0), &mut p, &mut st, 0.1).unwrap_err();
        assert!(matches!(&err, Error::Numeric(m) if m.contains("`p`")), "{err}");
    }
}
