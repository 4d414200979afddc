//! Trains the hybrid algorithm and the three baselines on a synthetic
//! dataset at epsilon = 5 and prints test AUC and the privacy ledger.
//!
//!     cargo run --release --example train_hybrid

use hybrid_dp::data::{generate_synthetic, split_train_test, SplitMode, SyntheticSpec};
use hybrid_dp::model::{Checkpoint, ModelConfig};
use hybrid_dp::train::{train, Algorithm, TrainConfig};

fn main() -> hybrid_dp::Result<()> {
    let spec = SyntheticSpec {
        n_examples: 20_000,
        n_users: 4_000,
        nonsensitive_vocab: vec![500, 200, 50],
        sensitive_vocab: vec![8, 6],
        nonsensitive_signal_weight: 1.5,
        sensitive_signal_weight: 1.5,
        label_noise: 0.0,
        base_logit: -1.0,
        user_skew: 1.1,
        token_skew: 1.0,
        seed: 3,
    };
    let data = generate_synthetic(&spec)?;
    let (tr, te) = split_train_test(&data, 0.2, SplitMode::Random, 1)?;
    let model = ModelConfig {
        nonsensitive_hidden: vec![32],
        sensitive_hidden: vec![],
        common_hidden: vec![32, 16],
        ..ModelConfig::default()
    };

    for alg in Algorithm::ALL {
        let mut cfg = TrainConfig::new(alg, 5.0);
        cfg.dpsgd.epochs = 5;
        cfg.dpsgd.clip_norm = 3.0;
        cfg.dpsgd.optimizer.learning_rate = 0.3;
        let (params, report) = train(&tr, &te, &model, &cfg)?;
        println!("{:<11} auc {:.4}", alg.name(), report.test.auc);
        for e in &report.ledger.entries {
            println!(
                "            {:?}: eps {:.3}, delta {:e}",
                e.mechanism, e.epsilon, e.delta
            );
            if let Some(p) = &e.dpsgd {
                println!(
                    "            sigma {:.3}, q {:.4}, steps {}",
                    p.noise_multiplier, p.sampling_rate, p.steps
                );
            }
        }
        if alg == Algorithm::Hybrid {
            let path = std::env::temp_dir().join("hybrid_checkpoint.json");
            Checkpoint::from_params(&params).save(&path)?;
            println!("            checkpoint written to {}", path.display());
        }
    }
    Ok(())
}
