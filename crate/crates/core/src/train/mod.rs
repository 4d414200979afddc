//! Training orchestration: the label-DP phase, the DP-SGD phase, their
//! sequential composition (Hybrid), the single-phase baselines and
//! non-private training, plus the privacy ledger of a run.

mod phases;

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use phases::{
    plan_dpsgd, randomize_labels, run_dpsgd_phase, run_dpsgd_steps, run_label_dp_phase,
    run_nonprivate, train_truncated, DpSgdPlan, PhaseOutcome,
};

use crate::data::{cap_examples_per_user, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalResult};
use crate::model::{init_params, Layout, ModelConfig, ModelParams, Scope, Workspace};
use crate::optim::{OptimizerConfig, OptimizerKind};
use crate::privacy::{
    group_privacy, split_budget, user_level_calibrate, DpSgdParams, PrivacyBudget,
};
use crate::rng::{derive_seed, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Hybrid,
    RrOnly,
    DpsgdOnly,
    Nonprivate,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::Hybrid,
        Algorithm::RrOnly,
        Algorithm::DpsgdOnly,
        Algorithm::Nonprivate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Hybrid => "hybrid",
            Algorithm::RrOnly => "rr_only",
            Algorithm::DpsgdOnly => "dpsgd_only",
            Algorithm::Nonprivate => "nonprivate",
        }
    }

    /// The model evaluated at the end: RR-only never trains the sensitive
    /// tower, so it is scored with the truncated model.
    pub fn eval_scope(self) -> Scope {
        match self {
            Algorithm::RrOnly => Scope::Truncated,
            _ => Scope::Full,
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown algorithm {s:?}")))
    }
}

fn d_delta() -> f64 {
    1e-6
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetConfig {
    pub epsilon: f64,
    #[serde(default = "d_delta")]
    pub delta: f64,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        BudgetConfig {
            epsilon: 5.0,
            delta: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelDpConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for LabelDpConfig {
    fn default() -> Self {
        LabelDpConfig {
            epochs: 3,
            batch_size: 1024,
            optimizer: OptimizerConfig::new(OptimizerKind::Yogi, 0.01),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpSgdConfig {
    pub epochs: u32,
    /// Explicit step count; overrides `epochs`.
    pub steps: Option<u64>,
    pub expected_batch: f64,
    pub clip_norm: f64,
    pub optimizer: OptimizerConfig,
}

impl Default for DpSgdConfig {
    fn default() -> Self {
        DpSgdConfig {
            epochs: 1,
            steps: None,
            expected_batch: 1024.0,
            clip_norm: 1.0,
            optimizer: OptimizerConfig::new(OptimizerKind::Momentum, 0.1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NonPrivateConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for NonPrivateConfig {
    fn default() -> Self {
        NonPrivateConfig {
            epochs: 3,
            batch_size: 256,
            optimizer: OptimizerConfig::new(OptimizerKind::Adam, 1e-3),
        }
    }
}

fn d_cap_rr() -> u32 {
    1
}

/// Per-user example caps. The guarantee is then stated per user.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserLevelConfig {
    #[serde(default = "d_cap_rr")]
    pub cap_rr: u32,
    pub cap_dpsgd: u32,
    /// Largest cap of the surrounding experiment; DP-SGD then runs for
    /// `ceil(n_users * max_cap / B)` steps whatever its own cap.
    #[serde(default)]
    pub max_cap: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub rr: u64,
    pub noise: u64,
    pub init: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds::from_root(0)
    }
}

impl Seeds {
    pub fn from_root(root: u64) -> Self {
        Seeds {
            data: derive_seed(root, Stream::Data, 0),
            rr: derive_seed(root, Stream::RandomizedResponse, 0),
            noise: derive_seed(root, Stream::Noise, 0),
            init: derive_seed(root, Stream::Init, 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    #[serde(default)]
    pub budget: BudgetConfig,
    /// Hybrid only: overrides the default budget split.
    #[serde(default)]
    pub eps1: Option<f64>,
    #[serde(default)]
    pub label_dp: LabelDpConfig,
    #[serde(default)]
    pub dpsgd: DpSgdConfig,
    #[serde(default)]
    pub nonprivate: NonPrivateConfig,
    #[serde(default)]
    pub user_level: Option<UserLevelConfig>,
    #[serde(default)]
    pub seeds: Seeds,
    /// AUC of a non-private reference model; enables the relative loss.
    #[serde(default)]
    pub baseline_auc: Option<f64>,
}

impl TrainConfig {
    pub fn new(algorithm: Algorithm, epsilon: f64) -> Self {
        TrainConfig {
            algorithm,
            budget: BudgetConfig {
                epsilon,
                delta: d_delta(),
            },
            eps1: None,
            label_dp: LabelDpConfig::default(),
            dpsgd: DpSgdConfig::default(),
            nonprivate: NonPrivateConfig::default(),
            user_level: None,
            seeds: Seeds::default(),
            baseline_auc: None,
        }
    }

    /// Per-phase `(eps1, eps2)` for the configured algorithm.
    pub fn phase_epsilons(&self) -> Result<(f64, f64)> {
        let eps = self.budget.epsilon;
        let delta = self.budget.delta;
        if self.algorithm == Algorithm::Nonprivate {
            return Ok((0.0, 0.0));
        }
        PrivacyBudget::new(eps, delta).map_err(|e| Error::Config(e.to_string()))?;
        if !(eps > 0.0) {
            return Err(Error::Config("private training needs epsilon > 0".into()));
        }
        Ok(match self.algorithm {
            Algorithm::RrOnly => (eps, 0.0),
            Algorithm::DpsgdOnly => (0.0, eps),
            Algorithm::Hybrid => {
                let (e1, e2) = match self.eps1 {
                    Some(e1) => (e1, eps - e1),
                    None => {
                        let s = split_budget(eps, delta)?;
                        (s.eps1, s.eps2)
                    }
                };
                if !(e1 > 0.0) {
                    return Err(Error::Config(format!(
                        "hybrid with eps1 = {e1} has no label-DP phase; use dpsgd_only"
                    )));
                }
                if !(e2 > 0.0) {
                    return Err(Error::Config(format!(
                        "hybrid with eps1 = {e1} leaves nothing for DP-SGD; use rr_only"
                    )));
                }
                (e1, e2)
            }
            Algorithm::Nonprivate => unreachable!(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.phase_epsilons()?;
        let uses_rr = matches!(self.algorithm, Algorithm::Hybrid | Algorithm::RrOnly);
        let uses_dpsgd = matches!(self.algorithm, Algorithm::Hybrid | Algorithm::DpsgdOnly);
        if uses_rr {
            self.label_dp.optimizer.validate()?;
        }
        if uses_dpsgd {
            self.dpsgd.optimizer.validate()?;
            if !(self.budget.delta > 0.0) {
                return Err(Error::Config("DP-SGD needs delta > 0".into()));
            }
            if !(self.dpsgd.clip_norm > 0.0 && self.dpsgd.clip_norm.is_finite()) {
                return Err(Error::Config("clip_norm must be positive".into()));
            }
        }
        if self.algorithm == Algorithm::Nonprivate {
            self.nonprivate.optimizer.validate()?;
            if self.user_level.is_some() {
                return Err(Error::Config(
                    "user_level caps apply to private algorithms only".into(),
                ));
            }
        }
        if let Some(u) = &self.user_level {
            if u.cap_rr == 0 || u.cap_dpsgd == 0 || u.max_cap == Some(0) {
                return Err(Error::Config("example caps must be at least 1".into()));
            }
            if u.max_cap.is_some_and(|m| m < u.cap_dpsgd) {
                return Err(Error::Config("max_cap must be at least cap_dpsgd".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    RandomizedResponse,
    DpSgd,
}

/// Privacy spent by one phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub mechanism: Mechanism,
    pub epsilon: f64,
    pub delta: f64,
    /// Per-example guarantee when the entry is stated per user.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub example_level: Option<PrivacyBudget>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cap: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dpsgd: Option<DpSgdParams>,
}

/// Per-phase spend; phases compose by adding epsilons and deltas.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    pub entries: Vec<LedgerEntry>,
}

impl PrivacyLedger {
    pub fn total(&self) -> PrivacyBudget {
        PrivacyBudget {
            epsilon: self.entries.iter().map(|e| e.epsilon).sum(),
            delta: self.entries.iter().map(|e| e.delta).sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub mechanism: Mechanism,
    pub examples: usize,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub algorithm: Algorithm,
    pub private: bool,
    pub budget: BudgetConfig,
    pub test: EvalResult,
    pub ledger: PrivacyLedger,
    pub total: PrivacyBudget,
    pub phases: Vec<PhaseSummary>,
    pub nonprivate_steps: u64,
    pub n_params: usize,
    pub seeds: Seeds,
    pub wall_clock_secs: f64,
}

/// Model scores (logits) for every example of `dataset`.
pub fn score_dataset(params: &ModelParams, dataset: &Dataset, scope: Scope) -> Result<Vec<f64>> {
    dataset
        .examples()
        .par_chunks(256)
        .map(|chunk| {
            let mut ws = Workspace::new();
            chunk
                .iter()
                .map(|ex| {
                    let s = (scope == Scope::Full).then_some(&ex.sensitive);
                    ws.forward(params, &ex.nonsensitive, s)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.concat())
}

fn cap_dataset(dataset: &Dataset, cap: u32, seed: u64, phase: u64) -> Result<Dataset> {
    cap_examples_per_user(dataset, cap as usize, derive_seed(seed, Stream::Cap, phase))
}

/// Trains a model on `train_set` with `cfg` and evaluates it on `test_set`.
///
/// Hybrid runs the label-DP phase with `eps1` and then DP-SGD with
/// `(eps2, delta)` starting from the phase-1 parameters; the baselines run
/// one of the two phases with the whole budget. With `user_level` set, each
/// phase trains on a copy of the data capped to that phase's number of
/// examples per user, and its per-user budget is converted to a per-example
/// one before calibration.
pub fn train(
    train_set: &Dataset,
    test_set: &Dataset,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    let start = Instant::now();
    cfg.validate()?;
    if cfg.user_level.is_some() && !train_set.has_user_ids() {
        return Err(Error::Config(
            "user-level training needs user ids on every example".into(),
        ));
    }
    let mut model = model.clone();
    model.init_seed = cfg.seeds.init;
    let layout = Layout::new(train_set.schema(), &model)?;
    let mut params = init_params(&layout);
    let (eps1, eps2) = cfg.phase_epsilons()?;
    let delta = cfg.budget.delta;
    let seeds = cfg.seeds;
    let mut ledger = PrivacyLedger::default();
    let mut phases = Vec::new();
    let mut nonprivate_steps = 0;

    if cfg.algorithm == Algorithm::Nonprivate {
        nonprivate_steps =
            run_nonprivate(train_set, &mut params, &cfg.nonprivate, seeds.data)?.steps;
    }

    if eps1 > 0.0 {
        let (data, example_level, cap) = match &cfg.user_level {
            Some(u) => (
                Some(cap_dataset(train_set, u.cap_rr, seeds.data, 1)?),
                user_level_calibrate(
                    PrivacyBudget {
                        epsilon: eps1,
                        delta: 0.0,
                    },
                    u.cap_rr,
                )?,
                Some(u.cap_rr),
            ),
            None => (
                None,
                PrivacyBudget {
                    epsilon: eps1,
                    delta: 0.0,
                },
                None,
            ),
        };
        let data = data.as_ref().unwrap_or(train_set);
        let out = run_label_dp_phase(
            data,
            &mut params,
            &cfg.label_dp,
            example_level.epsilon,
            seeds.rr,
            seeds.data,
        )?;
        ledger.entries.push(LedgerEntry {
            mechanism: Mechanism::RandomizedResponse,
            epsilon: eps1,
            delta: 0.0,
            example_level: cap.map(|_| example_level),
            cap,
            dpsgd: None,
        });
        phases.push(PhaseSummary {
            mechanism: Mechanism::RandomizedResponse,
            examples: data.len(),
            steps: out.steps,
        });
    }

    if eps2 > 0.0 {
        let (data, target, cap, fixed_steps) = match &cfg.user_level {
            Some(u) => {
                let capped = cap_dataset(train_set, u.cap_dpsgd, seeds.data, 2)?;
                let max_cap = u.max_cap.unwrap_or(u.cap_dpsgd);
                let n_max = train_set.n_users() as f64 * f64::from(max_cap);
                let steps = match cfg.dpsgd.steps {
                    Some(t) => t,
                    None => (n_max / cfg.dpsgd.expected_batch).ceil() as u64,
                };
                let target = user_level_calibrate(
                    PrivacyBudget {
                        epsilon: eps2,
                        delta,
                    },
                    u.cap_dpsgd,
                )?;
                (Some(capped), target, Some(u.cap_dpsgd), Some(steps))
            }
            None => (
                None,
                PrivacyBudget {
                    epsilon: eps2,
                    delta,
                },
                None,
                None,
            ),
        };
        let data = data.as_ref().unwrap_or(train_set);
        let (out, plan) = run_dpsgd_phase(
            data,
            &mut params,
            &cfg.dpsgd,
            target.epsilon,
            target.delta,
            fixed_steps,
            seeds.noise,
        )?;
        let spent = PrivacyBudget {
            epsilon: plan.epsilon,
            delta: plan.delta,
        };
        let stated = match cap {
            Some(k) => group_privacy(spent.epsilon, spent.delta, k)?,
            None => spent,
        };
        ledger.entries.push(LedgerEntry {
            mechanism: Mechanism::DpSgd,
            epsilon: stated.epsilon,
            delta: stated.delta,
            example_level: cap.map(|_| spent),
            cap,
            dpsgd: Some(plan.params),
        });
        phases.push(PhaseSummary {
            mechanism: Mechanism::DpSgd,
            examples: data.len(),
            steps: out.steps,
        });
    }

    let scores = score_dataset(&params, test_set, cfg.algorithm.eval_scope())?;
    let test = evaluate(&scores, &test_set.labels(), cfg.baseline_auc)?;
    let report = TrainReport {
        algorithm: cfg.algorithm,
        private: cfg.algorithm != Algorithm::Nonprivate,
        budget: cfg.budget,
        test,
        total: ledger.total(),
        ledger,
        phases,
        nonprivate_steps,
        n_params: layout.len,
        seeds,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok((params, report))
}
