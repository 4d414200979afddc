use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    #[default]
    Random,
    /// Test set is the tail by the schema's order column.
    Chronological,
}

/// Partitions `dataset` into `(train, test)` with `round(n * test_fraction)`
/// test examples. Both parts keep input order.
pub fn split_train_test(
    dataset: &Dataset,
    test_fraction: f64,
    mode: SplitMode,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test_fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let n = dataset.len();
    let n_test = (n as f64 * test_fraction).round() as usize;
    let mut is_test = vec![false; n];
    match mode {
        SplitMode::Random => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut stream_rng(seed, Stream::Split, 0));
            for &i in &idx[..n_test] {
                is_test[i] = true;
            }
        }
        SplitMode::Chronological => {
            let keys: Option<Vec<i64>> = match dataset.schema().order_field {
                Some(_) => dataset.examples().iter().map(|e| e.order_key).collect(),
                None => None,
            };
            let keys = keys.ok_or_else(|| {
                Error::Config(
                    "chronological split requires an order column on every example".into(),
                )
            })?;
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by_key(|&i| (keys[i], i));
            for &i in &idx[n - n_test..] {
                is_test[i] = true;
            }
        }
    }
    let train: Vec<usize> = (0..n).filter(|&i| !is_test[i]).collect();
    let test: Vec<usize> = (0..n).filter(|&i| is_test[i]).collect();
    Ok((dataset.subset(&train), dataset.subset(&test)))
}

/// Draws exactly `k` examples per user, with replacement, from that user's
/// examples. Users appear in order of first occurrence.
pub fn cap_examples_per_user(dataset: &Dataset, k: usize, seed: u64) -> Result<Dataset> {
    if k == 0 {
        return Err(Error::Config("example cap must be at least 1".into()));
    }
    if !dataset.has_user_ids() {
        return Err(Error::Config(
            "per-user capping requires a user id on every example".into(),
        ));
    }
    let mut order: Vec<u64> = Vec::new();
    let mut pools: HashMap<u64, Vec<usize>> = HashMap::new();
    for (i, e) in dataset.examples().iter().enumerate() {
        let uid = e.user_id.expect("checked above");
        pools
            .entry(uid)
            .or_insert_with(|| {
                order.push(uid);
                Vec::new()
            })
            .push(i);
    }
    let mut rng = stream_rng(seed, Stream::Cap, 0);
    let mut picked = Vec::with_capacity(order.len() * k);
    for uid in &order {
        let pool = &pools[uid];
        for _ in 0..k {
            picked.push(pool[rng.random_range(0..pool.len())]);
        }
    }
    Ok(dataset.subset(&picked))
}
