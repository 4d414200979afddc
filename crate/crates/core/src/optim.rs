//! First-order optimizers over a parameter scope, and the learning-rate
//! schedule shared by both training phases.

use std::f64::consts::PI;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GradVector, Layout, ModelParams, Scope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Cosine,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub total_steps: u64,
    pub kind: ScheduleKind,
}

/// Learning rate at step `t`; cosine decays from `base_lr` at `t = 0` to 0 at
/// `t = total_steps`. Steps past the end use the final value.
pub fn lr_at(schedule: &Schedule, t: u64) -> f64 {
    match schedule.kind {
        ScheduleKind::Constant => schedule.base_lr,
        ScheduleKind::Cosine => {
            let total = schedule.total_steps.max(1);
            let frac = t.min(total) as f64 / total as f64;
            schedule.base_lr * 0.5 * (1.0 + (PI * frac).cos())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Rmsprop,
    Adam,
    Yogi,
}

fn d_momentum() -> f64 {
    0.9
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_rho() -> f64 {
    0.9
}
fn d_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default)]
    pub schedule: ScheduleKind,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    /// RMSprop decay.
    #[serde(default = "d_rho")]
    pub rho: f64,
    #[serde(default = "d_eps")]
    pub epsilon: f64,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        OptimizerConfig {
            kind,
            learning_rate,
            schedule: ScheduleKind::Cosine,
            momentum: d_momentum(),
            beta1: d_beta1(),
            beta2: d_beta2(),
            rho: d_rho(),
            epsilon: d_eps(),
        }
    }

    pub fn schedule(&self, total_steps: u64) -> Schedule {
        Schedule {
            base_lr: self.learning_rate,
            total_steps,
            kind: self.schedule,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, v) in [
            ("momentum", self.momentum),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("rho", self.rho),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("optimizer epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Accumulators for one optimizer over one scope.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub scope: Scope,
    ranges: Vec<Range<usize>>,
    /// Velocity (momentum) or first moment (adam, yogi).
    first: Vec<f64>,
    /// Second moment (rmsprop, adam, yogi).
    second: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, layout: &Layout, scope: Scope) -> Self {
        let ranges = layout.scope_ranges(scope);
        let n: usize = ranges.iter().map(|r| r.len()).sum();
        let (f, s) = match config.kind {
            OptimizerKind::Sgd => (0, 0),
            OptimizerKind::Momentum => (n, 0),
            OptimizerKind::Rmsprop => (0, n),
            OptimizerKind::Adam | OptimizerKind::Yogi => (n, n),
        };
        OptimizerState {
            config,
            scope,
            ranges,
            first: vec![0.0; f],
            second: vec![0.0; s],
            step: 0,
        }
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second
    }

    /// Applies one update with learning rate `lr` to the coordinates of
    /// `params` in this optimizer's scope.
    pub fn apply(&mut self, params: &mut ModelParams, grad: &GradVector, lr: f64) -> Result<()> {
        let n = self.ranges.iter().map(|r| r.len()).sum::<usize>();
        if grad.scope != self.scope || grad.len() != n {
            return Err(Error::Shape {
                expected: n,
                actual: grad.len(),
            });
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as f64;
        let bias1 = 1.0 - c.beta1.powf(t);
        let bias2 = 1.0 - c.beta2.powf(t);
        let values = params.values_mut();
        let mut k = 0;
        for r in &self.ranges {
            for i in r.clone() {
                let g = grad.values[k];
                let w = &mut values[i];
                match c.kind {
                    OptimizerKind::Sgd => *w -= lr * g,
                    OptimizerKind::Momentum => {
                        let m = &mut self.first[k];
                        *m = c.momentum * *m + g;
                        *w -= lr * *m;
                    }
                    OptimizerKind::Rmsprop => {
                        let v = &mut self.second[k];
                        *v = c.rho * *v + (1.0 - c.rho) * g * g;
                        *w -= lr * g / (v.sqrt() + c.epsilon);
                    }
                    OptimizerKind::Adam | OptimizerKind::Yogi => {
                        let m = &mut self.first[k];
                        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                        let v = &mut self.second[k];
                        let g2 = g * g;
                        if c.kind == OptimizerKind::Adam {
                            *v = c.beta2 * *v + (1.0 - c.beta2) * g2;
                        } else {
                            *v -= (1.0 - c.beta2) * sign(*v - g2) * g2;
                        }
                        let m_hat = *m / bias1;
                        let v_hat = *v / bias2;
                        *w -= lr * m_hat / (v_hat.sqrt() + c.epsilon);
                    }
                }
                k += 1;
            }
        }
        Ok(())
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Free-function form of [`OptimizerState::apply`].
pub fn apply_update(
    params: &mut ModelParams,
    grad: &GradVector,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    state.apply(params, grad, lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FeatureSchema, FieldSpec};
    use crate::model::{init_params, ModelConfig};
    use std::sync::Arc;

    fn layout() -> Arc<Layout> {
        let schema = FeatureSchema {
            fields: vec![
                FieldSpec::categorical("a", 3, false),
                FieldSpec::categorical("s", 2, true),
            ],
            label_field: "y".into(),
            user_id_field: None,
            order_field: None,
        };
        let cfg = ModelConfig {
            embedding_dim: Some(1),
            nonsensitive_hidden: vec![],
            sensitive_hidden: vec![],
            common_hidden: vec![],
            ..ModelConfig::default()
        };
        Layout::new(&schema, &cfg).unwrap()
    }

    const ALL: [OptimizerKind; 5] = [
        OptimizerKind::Sgd,
        OptimizerKind::Momentum,
        OptimizerKind::Rmsprop,
        OptimizerKind::Adam,
        OptimizerKind::Yogi,
    ];

    #[test]
    fn cosine_points() {
        let s = Schedule {
            base_lr: 0.2,
            total_steps: 100,
            kind: ScheduleKind::Cosine,
        };
        assert_eq!(lr_at(&s, 0), 0.2);
        assert!(lr_at(&s, 100).abs() < 1e-17);
        assert!((lr_at(&s, 50) - 0.1).abs() < 1e-15);
        assert_eq!(lr_at(&s, 150), lr_at(&s, 100));
        let c = Schedule {
            kind: ScheduleKind::Constant,
            ..s
        };
        assert_eq!(lr_at(&c, 77), 0.2);
        for t in 0..=100 {
            let lr = lr_at(&s, t);
            assert!((0.0..=0.2).contains(&lr));
        }
    }

    #[test]
    fn sgd_step() {
        let l = layout();
        let mut p = ModelParams::zeros(l.clone());
        let mut st = OptimizerState::new(
            OptimizerConfig::new(OptimizerKind::Sgd, 0.1),
            &l,
            Scope::Full,
        );
        let g = GradVector {
            scope: Scope::Full,
            values: vec![1.0; l.len],
        };
        st.apply(&mut p, &g, 0.1).unwrap();
        assert!(p.values().iter().all(|&v| v == -0.1));
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let l = layout();
        let p0 = init_params(&l);
        let mut p = p0.clone();
        let mut st = OptimizerState::new(
            OptimizerConfig::new(OptimizerKind::Adam, 0.1),
            &l,
            Scope::Full,
        );
        let g = GradVector::zeros(&l, Scope::Full);
        for _ in 0..50 {
            st.apply(&mut p, &g, 0.1).unwrap();
        }
        assert_eq!(p, p0);
    }

    #[test]
    fn scope_mismatch_rejected() {
        let l = layout();
        let mut p = ModelParams::zeros(l.clone());
        let mut st = OptimizerState::new(
            OptimizerConfig::new(OptimizerKind::Sgd, 0.1),
            &l,
            Scope::Truncated,
        );
        let g = GradVector::zeros(&l, Scope::Full);
        assert!(matches!(
            st.apply(&mut p, &g, 0.1),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn truncated_updates_leave_sensitive_untouched() {
        let l = layout();
        for kind in ALL {
            let p0 = init_params(&l);
            let mut p = p0.clone();
            let mut st =
                OptimizerState::new(OptimizerConfig::new(kind, 0.05), &l, Scope::Truncated);
            let g = GradVector {
                scope: Scope::Truncated,
                values: vec![0.7; l.scope_len(Scope::Truncated)],
            };
            for _ in 0..10 {
                st.apply(&mut p, &g, 0.05).unwrap();
            }
            for r in l.sensitive_ranges() {
                assert_eq!(&p.values()[r.clone()], &p0.values()[r]);
            }
            assert_ne!(p, p0);
        }
    }

    /// Minimizes `sum_i (w_i - 3)^2 / 2` from zero.
    fn quadratic_losses(kind: OptimizerKind, lr: f64) -> Vec<f64> {
        let l = layout();
        let mut p = ModelParams::zeros(l.clone());
        let mut st = OptimizerState::new(OptimizerConfig::new(kind, lr), &l, Scope::Full);
        let loss = |p: &ModelParams| {
            p.values()
                .iter()
                .map(|w| 0.5 * (w - 3.0).powi(2))
                .sum::<f64>()
        };
        let mut out = vec![loss(&p)];
        for _ in 0..100 {
            let g = GradVector {
                scope: Scope::Full,
                values: p.values().iter().map(|w| w - 3.0).collect(),
            };
            st.apply(&mut p, &g, lr).unwrap();
            out.push(loss(&p));
        }
        out
    }

    #[test]
    fn every_optimizer_descends_on_a_quadratic() {
        for (kind, lr) in [
            (OptimizerKind::Sgd, 0.1),
            (OptimizerKind::Momentum, 0.001), // overdamped heavy ball
            (OptimizerKind::Rmsprop, 0.01),
            (OptimizerKind::Adam, 0.01),
            (OptimizerKind::Yogi, 0.01),
        ] {
            let losses = quadratic_losses(kind, lr);
            for w in losses.windows(2) {
                assert!(w[1] < w[0], "{kind:?}: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn deterministic() {
        for kind in ALL {
            assert_eq!(quadratic_losses(kind, 0.01), quadratic_losses(kind, 0.01));
        }
    }

    #[test]
    fn yogi_second_moment_rule() {
        // hand-rolled recurrences on a nondecreasing squared-gradient sequence
        let l = layout();
        let n = l.len;
        let gs: Vec<f64> = (1..=30).map(|t| 0.5 + 0.1 * t as f64).collect();
        let mut pa = ModelParams::zeros(l.clone());
        let mut py = ModelParams::zeros(l.clone());
        let mut adam = OptimizerState::new(
            OptimizerConfig::new(OptimizerKind::Adam, 1e-3),
            &l,
            Scope::Full,
        );
        let mut yogi = OptimizerState::new(
            OptimizerConfig::new(OptimizerKind::Yogi, 1e-3),
            &l,
            Scope::Full,
        );
        let b2 = 0.999;
        let (mut va, mut vy) = (0.0f64, 0.0f64);
        for (t, &g) in gs.iter().enumerate() {
            let gv = GradVector {
                scope: Scope::Full,
                values: vec![g; n],
            };
            adam.apply(&mut pa, &gv, 1e-3).unwrap();
            yogi.apply(&mut py, &gv, 1e-3).unwrap();
            va = b2 * va + (1.0 - b2) * g * g;
            assert!(vy <= g * g);
            vy += (1.0 - b2) * g * g;
            assert!((adam.second_moment()[0] - va).abs() <= 1e-15 * va);
            assert!((yogi.second_moment()[0] - vy).abs() <= 1e-15 * vy);
            if t == 0 {
                assert_eq!(adam.second_moment()[0], yogi.second_moment()[0]);
            } else {
                // yogi grows by (1-b2) g^2, adam by (1-b2)(g^2 - v)
                assert!(yogi.second_moment()[0] > adam.second_moment()[0]);
            }
        }
    }
}
