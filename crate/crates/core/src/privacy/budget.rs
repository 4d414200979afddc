use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        let b = PrivacyBudget { epsilon, delta };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::Domain(format!(
                "epsilon must be finite and >= 0, got {}",
                self.epsilon
            )));
        }
        if !(0.0..1.0).contains(&self.delta) {
            return Err(Error::Domain(format!(
                "delta must lie in [0, 1), got {}",
                self.delta
            )));
        }
        Ok(())
    }
}

/// Split of a budget into a pure-DP randomized-response phase `(eps1, 0)` and
/// a DP-SGD phase `(eps2, delta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetSplit {
    pub eps1: f64,
    pub eps2: f64,
    pub delta: f64,
}

/// `eps1 = min(0.6 eps, 3)`, `eps2 = eps - eps1`, all of `delta` to phase 2.
pub fn split_budget(epsilon: f64, delta: f64) -> Result<BudgetSplit> {
    PrivacyBudget::new(epsilon, delta)?;
    if epsilon <= 0.0 {
        return Err(Error::Domain("epsilon must be positive to split".into()));
    }
    // 3 eps / 5 rounds once, so eps1 is the double nearest to 0.6 eps
    // (0.6 * 3.0 would give 1.7999999999999998)
    let eps1 = (3.0 * epsilon / 5.0).min(3.0);
    Ok(BudgetSplit {
        eps1,
        eps2: epsilon - eps1,
        delta,
    })
}

/// `(e^{k eps} - 1) / (e^eps - 1)`, with the `eps -> 0` limit `k`.
fn group_delta_factor(eps: f64, k: u32) -> f64 {
    if eps == 0.0 {
        f64::from(k)
    } else {
        (f64::from(k) * eps).exp_m1() / eps.exp_m1()
    }
}

/// Example-level `(eps, delta)` to the guarantee for groups of `k` examples:
/// `(k eps, delta (e^{k eps} - 1) / (e^eps - 1))`.
pub fn group_privacy(eps: f64, delta: f64, k: u32) -> Result<PrivacyBudget> {
    if k == 0 {
        return Err(Error::Domain("group size k must be at least 1".into()));
    }
    if k == 1 {
        return Ok(PrivacyBudget {
            epsilon: eps,
            delta,
        });
    }
    Ok(PrivacyBudget {
        epsilon: f64::from(k) * eps,
        delta: delta * group_delta_factor(eps, k),
    })
}

/// Inverse of [`group_privacy`]: the example-level budget that yields
/// `target` for users contributing at most `k` examples.
pub fn user_level_calibrate(target: PrivacyBudget, k: u32) -> Result<PrivacyBudget> {
    if k == 0 {
        return Err(Error::Domain("group size k must be at least 1".into()));
    }
    if k == 1 {
        return Ok(target);
    }
    let eps = target.epsilon / f64::from(k);
    Ok(PrivacyBudget {
        epsilon: eps,
        delta: target.delta / group_delta_factor(eps, k),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_examples() {
        let s = split_budget(1.0, 1e-6).unwrap();
        assert_eq!((s.eps1, s.eps2, s.delta), (0.6, 0.4, 1e-6));
        let s = split_budget(5.0, 1e-6).unwrap();
        assert_eq!((s.eps1, s.eps2), (3.0, 2.0));
        let s = split_budget(3.0, 1e-6).unwrap();
        assert_eq!((s.eps1, s.eps2), (1.8, 3.0 - 1.8));
        let s = split_budget(50.0, 1e-6).unwrap();
        assert_eq!((s.eps1, s.eps2), (3.0, 47.0));
        assert!(split_budget(0.0, 1e-6).is_err());
    }

    #[test]
    fn group_examples() {
        let b = group_privacy(0.3, 1e-7, 1).unwrap();
        assert_eq!((b.epsilon, b.delta), (0.3, 1e-7));
        let b = group_privacy(2f64.ln(), 1e-8, 2).unwrap();
        assert!((b.epsilon - 2.0 * 2f64.ln()).abs() < 1e-15);
        assert!((b.delta - 3e-8).abs() < 1e-22);
        let b = group_privacy(0.0, 1e-8, 4).unwrap();
        assert_eq!((b.epsilon, b.delta), (0.0, 4e-8));
    }

    #[test]
    fn user_level_example() {
        let b = user_level_calibrate(
            PrivacyBudget {
                epsilon: 3.0,
                delta: 1e-6,
            },
            5,
        )
        .unwrap();
        assert_eq!(b.epsilon, 0.6);
        let series: f64 = (0..5).map(|j| (f64::from(j) * 0.6).exp()).sum();
        assert!((b.delta - 1e-6 / series).abs() <= 1e-15 * b.delta);
        let id = user_level_calibrate(
            PrivacyBudget {
                epsilon: 3.0,
                delta: 1e-6,
            },
            1,
        )
        .unwrap();
        assert_eq!((id.epsilon, id.delta), (3.0, 1e-6));
    }
}
