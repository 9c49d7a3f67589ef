use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OptimError {
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("invalid optimizer setting: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    AdamW,
}

impl OptimizerKind {
    pub fn parse(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "sgd" => Some(OptimizerKind::Sgd),
            "adam" => Some(OptimizerKind::Adam),
            "adamw" => Some(OptimizerKind::AdamW),
            _ => None,
        }
    }

    pub fn moment_buffers(self) -> usize {
        match self {
            OptimizerKind::Sgd => 0,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Scheduler {
    None,
    ReduceOnPlateau { patience: usize, factor: f64 },
}

impl Scheduler {
    pub const PLATEAU_DEFAULT: Scheduler = Scheduler::ReduceOnPlateau {
        patience: 5,
        factor: 0.9,
    };
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub scheduler: Scheduler,
    pub step_count: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub best_metric: Option<f64>,
    pub bad_epochs: usize,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64, scheduler: Scheduler) -> Result<Self, OptimError> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(OptimError::Invalid(format!("lr must be positive, got {lr}")));
        }
        if !(weight_decay >= 0.0) {
            return Err(OptimError::Invalid("weight_decay must be non-negative".into()));
        }
        if let Scheduler::ReduceOnPlateau { factor, .. } = scheduler {
            if !(factor > 0.0 && factor < 1.0) {
                return Err(OptimError::Invalid(format!("plateau factor must be in (0,1), got {factor}")));
            }
        }
        Ok(OptimizerState {
            kind,
            lr,
            weight_decay,
            scheduler,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            best_metric: None,
            bad_epochs: 0,
        })
    }

    /// One update; returns new parameter values.
    pub fn step(&mut self, params: &[(String, Tensor)], grads: &[Tensor]) -> Result<Vec<(String, Tensor)>, OptimError> {
        for ((name, _), g) in params.iter().zip(grads) {
            if !g.is_finite() {
                return Err(OptimError::NonFiniteGradient(name.clone()));
            }
        }
        if self.first_moment.is_empty() && self.kind != OptimizerKind::Sgd {
            self.first_moment = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
            self.second_moment = self.first_moment.clone();
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let (lr, wd) = (self.lr, self.weight_decay);
        let mut out = Vec::with_capacity(params.len());
        for (p, ((name, w), g)) in params.iter().zip(grads).enumerate() {
            let mut w = w.clone();
            let wdat = w.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (x, g) in wdat.iter_mut().zip(g.data()) {
                        *x -= lr * (g + wd * *x);
                    }
                }
                OptimizerKind::Adam | OptimizerKind::AdamW => {
                    let decoupled = self.kind == OptimizerKind::AdamW;
                    let (m, v) = (&mut self.first_moment[p], &mut self.second_moment[p]);
                    let bc1 = 1.0 - BETA1.powi(t);
                    let bc2 = 1.0 - BETA2.powi(t);
                    for i in 0..wdat.len() {
                        let gi = if decoupled { g.data()[i] } else { g.data()[i] + wd * wdat[i] };
                        m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                        v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                        if decoupled {
                            wdat[i] -= lr * wd * wdat[i];
                        }
                        wdat[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + EPS);
                    }
                }
            }
            out.push((name.clone(), w));
        }
        Ok(out)
    }

    /// Feeds one epoch's validation metric (lower is better) to the
    /// scheduler. The rate drops once `patience` consecutive epochs pass
    /// without improvement, then the counter restarts. Returns true when
    /// the rate changed.
    pub fn end_epoch(&mut self, val_metric: f64) -> bool {
        let Scheduler::ReduceOnPlateau { patience, factor } = self.scheduler else {
            return false;
        };
        match self.best_metric {
            Some(best) if !(val_metric < best) => self.bad_epochs += 1,
            _ => {
                self.best_metric = Some(val_metric);
                self.bad_epochs = 0;
            }
        }
        if self.bad_epochs >= patience {
            self.lr *= factor;
            self.bad_epochs = 0;
            return true;
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(v: &[f64]) -> Vec<(String, Tensor)> {
        vec![("w".into(), Tensor::new(vec![v.len()], v.to_vec()).unwrap())]
    }

    fn g(v: &[f64]) -> Vec<Tensor> {
        vec![Tensor::new(vec![v.len()], v.to_vec()).unwrap()]
    }

    #[test]
    fn sgd_arithmetic() {
        let mut o = OptimizerState::new(OptimizerKind::Sgd, 0.1, 0.0, Scheduler::None).unwrap();
        let out = o.step(&p(&[1.0]), &g(&[2.0])).unwrap();
        assert!((out[0].1.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adamw_without_decay_equals_adam() {
        let mut a = OptimizerState::new(OptimizerKind::Adam, 1e-3, 0.0, Scheduler::None).unwrap();
        let mut w = OptimizerState::new(OptimizerKind::AdamW, 1e-3, 0.0, Scheduler::None).unwrap();
        let (mut pa, mut pw) = (p(&[0.5, -1.0]), p(&[0.5, -1.0]));
        for k in 0..20 {
            let grad = g(&[0.3 * k as f64, -0.1]);
            pa = a.step(&pa, &grad).unwrap();
            pw = w.step(&pw, &grad).unwrap();
        }
        assert_eq!(pa, pw);
    }

    #[test]
    fn adamw_decay_is_decoupled() {
        let mut w = OptimizerState::new(OptimizerKind::AdamW, 0.1, 0.5, Scheduler::None).unwrap();
        // zero gradient: only the decay term moves the weight
        let out = w.step(&p(&[2.0]), &g(&[0.0])).unwrap();
        assert!((out[0].1.data()[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_rejected() {
        let mut o = OptimizerState::new(OptimizerKind::Sgd, 0.1, 0.0, Scheduler::None).unwrap();
        assert_eq!(
            o.step(&p(&[1.0]), &g(&[f64::NAN])).unwrap_err(),
            OptimError::NonFiniteGradient("w".into())
        );
    }

    #[test]
    fn invalid_settings_rejected() {
        assert!(OptimizerState::new(OptimizerKind::Sgd, 0.0, 0.0, Scheduler::None).is_err());
        let bad = Scheduler::ReduceOnPlateau {
            patience: 5,
            factor: 1.0,
        };
        assert!(OptimizerState::new(OptimizerKind::Sgd, 0.1, 0.0, bad).is_err());
    }

    #[test]
    fn plateau_of_patience_epochs_reduces_once() {
        let mut o = OptimizerState::new(OptimizerKind::Adam, 1.0, 0.0, Scheduler::PLATEAU_DEFAULT).unwrap();
        assert!(!o.end_epoch(1.0));
        for _ in 0..4 {
            assert!(!o.end_epoch(1.0));
        }
        assert!(o.end_epoch(1.0));
        assert!((o.lr - 0.9).abs() < 1e-15);
        assert!(!o.end_epoch(0.5));
    }

    proptest! {
        #[test]
        fn sgd_converges_monotonically_on_quadratic(w0 in -10.0f64..10.0, curv in 0.1f64..5.0, frac in 0.05f64..0.95) {
            // f(w) = curv/2 · w², stable for lr < 2/curv; below 1/curv descent is monotone
            let lr = frac / curv;
            let mut o = OptimizerState::new(OptimizerKind::Sgd, lr, 0.0, Scheduler::None).unwrap();
            let mut w = p(&[w0]);
            let mut prev = w0.abs();
            for _ in 0..50 {
                let x = w[0].1.data()[0];
                w = o.step(&w, &g(&[curv * x])).unwrap();
                let now = w[0].1.data()[0].abs();
                prop_assert!(now <= prev);
                prev = now;
            }
        }

        #[test]
        fn tiny_lr_is_fixed_point(w0 in -5.0f64..5.0, grad in -5.0f64..5.0) {
            let mut o = OptimizerState::new(OptimizerKind::Sgd, 1e-300, 0.0, Scheduler::None).unwrap();
            let out = o.step(&p(&[w0]), &g(&[grad])).unwrap();
            prop_assert_eq!(out[0].1.data()[0], w0);
        }
    }
}
