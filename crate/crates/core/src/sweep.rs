//! Grid sweeps over privacy budgets, algorithms, seeds and hyperparameters,
//! with a long-form results table and a best-per-budget summary.

use std::path::Path;

use rayon::prelude::*;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{aggregate, relative_auc_loss};
use crate::model::ModelConfig;
use crate::rng::{derive_seed, Stream};
use crate::train::{train, Algorithm, Seeds, TrainConfig, UserLevelConfig};

fn d_epsilons() -> Vec<f64> {
    vec![1.0, 3.0, 5.0, 10.0, 20.0, 30.0, 50.0]
}

fn d_algorithms() -> Vec<Algorithm> {
    vec![Algorithm::Hybrid, Algorithm::RrOnly, Algorithm::DpsgdOnly]
}

/// Axes of a sweep. Empty hyperparameter lists mean "the base config's
/// value". Axes that an algorithm does not use are not expanded for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub epsilons: Vec<f64>,
    pub algorithms: Vec<Algorithm>,
    /// Number of seed replicates.
    pub seeds: u32,
    pub root_seed: u64,
    pub clip_norms: Vec<f64>,
    pub label_dp_epochs: Vec<u32>,
    pub dpsgd_epochs: Vec<u32>,
    pub label_dp_lrs: Vec<f64>,
    pub dpsgd_lrs: Vec<f64>,
    /// Per-user caps for the DP-SGD phase; non-empty makes every private
    /// run user-level.
    pub caps: Vec<u32>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            epsilons: d_epsilons(),
            algorithms: d_algorithms(),
            seeds: 3,
            root_seed: 0,
            clip_norms: vec![],
            label_dp_epochs: vec![],
            dpsgd_epochs: vec![],
            label_dp_lrs: vec![],
            dpsgd_lrs: vec![],
            caps: vec![],
        }
    }
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.epsilons.is_empty() || self.algorithms.is_empty() || self.seeds == 0 {
            return Err(Error::Config(
                "sweep needs at least one epsilon, algorithm and seed".into(),
            ));
        }
        if self.epsilons.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return Err(Error::Config(
                "sweep epsilons must be positive and finite".into(),
            ));
        }
        if self.caps.contains(&0) {
            return Err(Error::Config("sweep caps must be at least 1".into()));
        }
        Ok(())
    }

    /// Seeds of replicate `index`; shared by every grid point so that all
    /// algorithms see the same initialization for a given replicate.
    pub fn replicate_seeds(&self, index: u32) -> Seeds {
        Seeds::from_root(derive_seed(self.root_seed, Stream::Sweep, u64::from(index)))
    }
}

/// One run of the sweep. Hyperparameters an algorithm does not use are
/// empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub algorithm: Algorithm,
    pub cap: Option<u32>,
    pub clip_norm: Option<f64>,
    pub rr_epochs: Option<u32>,
    pub dpsgd_epochs: Option<u32>,
    pub rr_lr: Option<f64>,
    pub dpsgd_lr: Option<f64>,
    pub seed: u32,
    pub auc: Option<f64>,
    pub rel_loss: Option<f64>,
    pub eps_spent: Option<f64>,
    pub error: Option<String>,
}

impl SweepRow {
    fn axes(&self) -> [Option<u64>; 6] {
        [
            self.cap.map(u64::from),
            self.clip_norm.map(f64::to_bits),
            self.rr_epochs.map(u64::from),
            self.dpsgd_epochs.map(u64::from),
            self.rr_lr.map(f64::to_bits),
            self.dpsgd_lr.map(f64::to_bits),
        ]
    }
}

/// Best grid point for one `(epsilon, algorithm)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub epsilon: f64,
    pub algorithm: Algorithm,
    pub cap: Option<u32>,
    pub clip_norm: Option<f64>,
    pub rr_epochs: Option<u32>,
    pub dpsgd_epochs: Option<u32>,
    pub rr_lr: Option<f64>,
    pub dpsgd_lr: Option<f64>,
    pub n_seeds: usize,
    pub auc_mean: Option<f64>,
    pub auc_std: Option<f64>,
    pub rel_loss_mean: Option<f64>,
    pub rel_loss_std: Option<f64>,
    /// `mean ± std` of the AUC, three decimals.
    pub auc: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SummaryRow>,
    pub baseline_auc: f64,
}

fn or_base<T: Copy>(axis: &[T], base: T) -> Vec<T> {
    if axis.is_empty() {
        vec![base]
    } else {
        axis.to_vec()
    }
}

/// Grid points (without seeds) in table order.
fn points(grid: &SweepGrid, base: &TrainConfig) -> Vec<SweepRow> {
    let caps: Vec<Option<u32>> = if grid.caps.is_empty() {
        vec![base.user_level.map(|u| u.cap_dpsgd)]
    } else {
        grid.caps.iter().map(|&c| Some(c)).collect()
    };
    let clips = or_base(&grid.clip_norms, base.dpsgd.clip_norm);
    let rr_epochs = or_base(&grid.label_dp_epochs, base.label_dp.epochs);
    let dp_epochs = or_base(&grid.dpsgd_epochs, base.dpsgd.epochs);
    let rr_lrs = or_base(&grid.label_dp_lrs, base.label_dp.optimizer.learning_rate);
    let dp_lrs = or_base(&grid.dpsgd_lrs, base.dpsgd.optimizer.learning_rate);
    let wrap = |v: &[f64]| v.iter().map(|&x| Some(x)).collect::<Vec<_>>();
    let wrap_u = |v: &[u32]| v.iter().map(|&x| Some(x)).collect::<Vec<_>>();

    let mut out = Vec::new();
    for &epsilon in &grid.epsilons {
        for &algorithm in &grid.algorithms {
            let rr = matches!(algorithm, Algorithm::Hybrid | Algorithm::RrOnly);
            let dp = matches!(algorithm, Algorithm::Hybrid | Algorithm::DpsgdOnly);
            let pick_f = |on: bool, v: &[f64]| if on { wrap(v) } else { vec![None] };
            let pick_u = |on: bool, v: &[u32]| if on { wrap_u(v) } else { vec![None] };
            let cap_axis = if dp { caps.clone() } else { vec![None] };
            for &cap in &cap_axis {
                for clip_norm in pick_f(dp, &clips) {
                    for rr_epochs in pick_u(rr, &rr_epochs) {
                        for dpsgd_epochs in pick_u(dp, &dp_epochs) {
                            for rr_lr in pick_f(rr, &rr_lrs) {
                                for dpsgd_lr in pick_f(dp, &dp_lrs) {
                                    out.push(SweepRow {
                                        epsilon,
                                        algorithm,
                                        cap,
                                        clip_norm,
                                        rr_epochs,
                                        dpsgd_epochs,
                                        rr_lr,
                                        dpsgd_lr,
                                        seed: 0,
                                        auc: None,
                                        rel_loss: None,
                                        eps_spent: None,
                                        error: None,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Expands the grid into result rows, one per grid point and seed, with no
/// results filled in.
pub fn expand(grid: &SweepGrid, base: &TrainConfig) -> Vec<SweepRow> {
    points(grid, base)
        .into_iter()
        .flat_map(|p| (0..grid.seeds).map(move |seed| SweepRow { seed, ..p.clone() }))
        .collect()
}

/// The train config for one row.
pub fn row_config(row: &SweepRow, grid: &SweepGrid, base: &TrainConfig) -> TrainConfig {
    let mut c = *base;
    c.algorithm = row.algorithm;
    c.budget.epsilon = row.epsilon;
    c.seeds = grid.replicate_seeds(row.seed);
    if let Some(v) = row.clip_norm {
        c.dpsgd.clip_norm = v;
    }
    if let Some(v) = row.rr_epochs {
        c.label_dp.epochs = v;
    }
    if let Some(v) = row.dpsgd_epochs {
        c.dpsgd.epochs = v;
    }
    if let Some(v) = row.rr_lr {
        c.label_dp.optimizer.learning_rate = v;
    }
    if let Some(v) = row.dpsgd_lr {
        c.dpsgd.optimizer.learning_rate = v;
    }
    if !grid.caps.is_empty() && row.algorithm != Algorithm::Nonprivate {
        let max_cap = grid.caps.iter().copied().max();
        let cap_rr = base.user_level.map_or(1, |u| u.cap_rr);
        c.user_level = Some(UserLevelConfig {
            cap_rr,
            cap_dpsgd: row.cap.or(max_cap).unwrap_or(1),
            max_cap,
        });
    }
    if row.algorithm == Algorithm::Nonprivate {
        c.user_level = None;
    }
    c
}

/// Runs every row of the grid. Failed runs are recorded in the row's
/// `error` column. Without `baseline_auc`, a non-private model is trained
/// per seed replicate and the mean of their AUCs is the reference for the
/// relative loss.
pub fn run_sweep(
    train_set: &Dataset,
    test_set: &Dataset,
    model: &ModelConfig,
    base: &TrainConfig,
    grid: &SweepGrid,
    baseline_auc: Option<f64>,
) -> Result<SweepOutcome> {
    grid.validate()?;
    let nonprivate_run = |seed: u32| -> Result<f64> {
        let mut c = *base;
        c.algorithm = Algorithm::Nonprivate;
        c.user_level = None;
        c.baseline_auc = None;
        c.seeds = grid.replicate_seeds(seed);
        Ok(train(train_set, test_set, model, &c)?.1.test.auc)
    };
    let needs_np = baseline_auc.is_none() || grid.algorithms.contains(&Algorithm::Nonprivate);
    let np: Vec<Option<f64>> = if needs_np {
        (0..grid.seeds)
            .into_par_iter()
            .map(|s| nonprivate_run(s).ok())
            .collect()
    } else {
        vec![]
    };
    let baseline = match baseline_auc {
        Some(b) => b,
        None => {
            let ok: Vec<f64> = np.iter().flatten().copied().collect();
            if ok.is_empty() {
                return Err(Error::Config(
                    "no non-private baseline run succeeded".into(),
                ));
            }
            aggregate(&ok).mean
        }
    };

    let mut rows = expand(grid, base);
    rows.par_iter_mut().for_each(|row| {
        let result = if row.algorithm == Algorithm::Nonprivate {
            np[row.seed as usize]
                .map(|auc| (auc, 0.0))
                .ok_or_else(|| Error::Config("non-private run failed".into()))
        } else {
            let cfg = row_config(row, grid, base);
            train(train_set, test_set, model, &cfg).map(|(_, r)| (r.test.auc, r.total.epsilon))
        };
        match result {
            Ok((auc, spent)) => {
                row.auc = Some(auc);
                row.rel_loss = relative_auc_loss(auc, baseline).ok();
                row.eps_spent = (row.algorithm != Algorithm::Nonprivate).then_some(spent);
            }
            Err(e) => row.error = Some(e.to_string()),
        }
    });
    let summary = summarize(&rows);
    Ok(SweepOutcome {
        rows,
        summary,
        baseline_auc: baseline,
    })
}

/// For each `(epsilon, algorithm)` in table order, the grid point with the
/// lowest mean relative loss over its seeds (highest mean AUC when no
/// relative loss is available). Ties go to the earlier point.
pub fn summarize(rows: &[SweepRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(u64, Algorithm)> = Vec::new();
    for r in rows {
        let k = (r.epsilon.to_bits(), r.algorithm);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(eps_bits, algorithm)| {
            let group: Vec<&SweepRow> = rows
                .iter()
                .filter(|r| r.epsilon.to_bits() == eps_bits && r.algorithm == algorithm)
                .collect();
            let mut axes: Vec<[Option<u64>; 6]> = Vec::new();
            for r in &group {
                if !axes.contains(&r.axes()) {
                    axes.push(r.axes());
                }
            }
            let mut best: Option<(f64, SummaryRow)> = None;
            for a in &axes {
                let members: Vec<&&SweepRow> = group.iter().filter(|r| r.axes() == *a).collect();
                let aucs: Vec<f64> = members.iter().filter_map(|r| r.auc).collect();
                let losses: Vec<f64> = members.iter().filter_map(|r| r.rel_loss).collect();
                let first = members[0];
                let auc = (!aucs.is_empty()).then(|| aggregate(&aucs));
                let loss = (!losses.is_empty()).then(|| aggregate(&losses));
                let score = match (loss, auc) {
                    (Some(l), _) => l.mean,
                    (None, Some(a)) => -a.mean,
                    (None, None) => f64::INFINITY,
                };
                let row = SummaryRow {
                    epsilon: first.epsilon,
                    algorithm,
                    cap: first.cap,
                    clip_norm: first.clip_norm,
                    rr_epochs: first.rr_epochs,
                    dpsgd_epochs: first.dpsgd_epochs,
                    rr_lr: first.rr_lr,
                    dpsgd_lr: first.dpsgd_lr,
                    n_seeds: aucs.len(),
                    auc_mean: auc.map(|s| s.mean),
                    auc_std: auc.map(|s| s.std),
                    rel_loss_mean: loss.map(|s| s.mean),
                    rel_loss_std: loss.map(|s| s.std),
                    auc: auc.map(|s| s.to_string()).unwrap_or_default(),
                };
                if best.as_ref().is_none_or(|(b, _)| score < *b) {
                    best = Some((score, row));
                }
            }
            best.expect("group is non-empty").1
        })
        .collect()
}

/// Writes rows as a comma-delimited table with a header.
pub fn write_table<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a table written by [`write_table`].
pub fn read_table<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_error(path, e)))
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Parse(format!("{}: {e}", path.display()))
    }
}
