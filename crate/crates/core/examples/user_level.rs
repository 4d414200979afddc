//! User-level guarantee: cap examples per user and convert the user-level
//! budget to per-example budgets through group privacy.
//!
//!     cargo run --release --example user_level

use hybrid_dp::data::{generate_synthetic, split_train_test, SplitMode, SyntheticSpec};
use hybrid_dp::model::ModelConfig;
use hybrid_dp::train::{train, Algorithm, TrainConfig, UserLevelConfig};

fn main() -> hybrid_dp::Result<()> {
    let spec = SyntheticSpec {
        n_examples: 10_000,
        n_users: 1_000,
        nonsensitive_vocab: vec![300, 40],
        sensitive_vocab: vec![6],
        nonsensitive_signal_weight: 1.5,
        sensitive_signal_weight: 1.5,
        label_noise: 0.0,
        base_logit: -1.0,
        user_skew: 1.1,
        token_skew: 1.0,
        seed: 5,
    };
    let data = generate_synthetic(&spec)?;
    let (tr, te) = split_train_test(&data, 0.2, SplitMode::Random, 1)?;
    let model = ModelConfig {
        nonsensitive_hidden: vec![16],
        common_hidden: vec![16],
        ..ModelConfig::default()
    };

    for cap in [1, 3] {
        let mut cfg = TrainConfig::new(Algorithm::Hybrid, 5.0);
        cfg.user_level = Some(UserLevelConfig {
            cap_rr: 1,
            cap_dpsgd: cap,
            max_cap: None,
        });
        cfg.dpsgd.expected_batch = 256.0;
        let (_, report) = train(&tr, &te, &model, &cfg)?;
        println!(
            "cap {cap}: auc {:.4}, user-level total eps {:.3}",
            report.test.auc, report.total.epsilon
        );
        for e in &report.ledger.entries {
            if let Some(ex) = &e.example_level {
                println!(
                    "  {:?}: per-example eps {:.3} -> user eps {:.3}",
                    e.mechanism, ex.epsilon, e.epsilon
                );
            }
        }
    }
    Ok(())
}
