//! A small epsilon sweep over all algorithms with three seeds; writes the
//! per-run and summary tables as CSV.
//!
//!     cargo run --release --example sweep

use hybrid_dp::data::{generate_synthetic, split_train_test, SplitMode, SyntheticSpec};
use hybrid_dp::model::ModelConfig;
use hybrid_dp::sweep::{run_sweep, write_table, SweepGrid};
use hybrid_dp::train::{Algorithm, TrainConfig};

fn main() -> hybrid_dp::Result<()> {
    let spec = SyntheticSpec {
        n_examples: 10_000,
        n_users: 2_000,
        nonsensitive_vocab: vec![300, 50],
        sensitive_vocab: vec![8],
        nonsensitive_signal_weight: 1.5,
        sensitive_signal_weight: 1.5,
        label_noise: 0.0,
        base_logit: -1.0,
        user_skew: 1.1,
        token_skew: 1.0,
        seed: 9,
    };
    let data = generate_synthetic(&spec)?;
    let (tr, te) = split_train_test(&data, 0.2, SplitMode::Random, 1)?;
    let model = ModelConfig {
        nonsensitive_hidden: vec![16],
        common_hidden: vec![16],
        ..ModelConfig::default()
    };
    let mut base = TrainConfig::new(Algorithm::Hybrid, 1.0);
    base.dpsgd.expected_batch = 256.0;
    base.nonprivate.epochs = 10;
    let grid = SweepGrid {
        epsilons: vec![1.0, 5.0, 20.0],
        algorithms: vec![Algorithm::Hybrid, Algorithm::RrOnly, Algorithm::DpsgdOnly],
        seeds: 3,
        dpsgd_epochs: vec![3],
        clip_norms: vec![1.0, 3.0],
        ..SweepGrid::default()
    };
    let out = run_sweep(&tr, &te, &model, &base, &grid, None)?;
    println!("non-private baseline auc {:.4}", out.baseline_auc);
    for s in &out.summary {
        println!(
            "eps {:>4} {:<11} auc {}",
            s.epsilon,
            s.algorithm.name(),
            s.auc
        );
    }
    let dir = std::env::temp_dir().join("hybrid_dp_sweep");
    std::fs::create_dir_all(&dir).expect("create output directory");
    write_table(&dir.join("results.csv"), &out.rows)?;
    write_table(&dir.join("summary.csv"), &out.summary)?;
    println!("tables written to {}", dir.display());
    Ok(())
}
