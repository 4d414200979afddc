//! Loads a delimited file with a declared schema (hashed categorical tokens,
//! log-transformed counts) and trains the hybrid algorithm on it.
//!
//!     cargo run --release --example csv_training

use std::fmt::Write as _;

use hybrid_dp::data::{
    load_delimited, split_train_test, ColumnMap, DelimitedOptions, FeatureSchema, FieldKind,
    FieldSpec, SplitMode,
};
use hybrid_dp::model::ModelConfig;
use hybrid_dp::train::{train, Algorithm, TrainConfig};
use rand::{Rng, SeedableRng};

fn main() -> hybrid_dp::Result<()> {
    // a throwaway file: clicks depend on the site and on the (sensitive) age
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let mut text = String::from("user,site,views,age,click\n");
    for _ in 0..6000 {
        let site = rng.random_range(0..40u32);
        let age = rng.random_range(0..5u32);
        let views = rng.random_range(0..200u32);
        let logit = (site % 7) as f64 * 0.4 - 1.5 + if age >= 3 { 1.0 } else { -0.5 };
        let click = u8::from(rng.random::<f64>() < 1.0 / (1.0 + (-logit).exp()));
        writeln!(
            text,
            "u{},site{site},{views},age{age},{click}",
            rng.random_range(0..800)
        )
        .unwrap();
    }
    let path = std::env::temp_dir().join("hybrid_dp_clicks.csv");
    std::fs::write(&path, text).expect("write sample file");

    let schema = FeatureSchema {
        fields: vec![
            FieldSpec::categorical("site", 64, false),
            FieldSpec::numeric("views", FieldKind::Integer, false),
            FieldSpec::categorical("age", 8, true),
        ],
        label_field: "click".into(),
        user_id_field: Some("user".into()),
        order_field: None,
    };
    let loaded = load_delimited(
        &path,
        &schema,
        &ColumnMap::new(),
        DelimitedOptions::default(),
    )?;
    println!(
        "{} rows loaded, {} skipped",
        loaded.dataset.len(),
        loaded.skipped_rows
    );
    let (tr, te) = split_train_test(&loaded.dataset, 0.2, SplitMode::Random, 2)?;
    let model = ModelConfig {
        nonsensitive_hidden: vec![16],
        common_hidden: vec![16],
        ..ModelConfig::default()
    };
    let mut cfg = TrainConfig::new(Algorithm::Hybrid, 5.0);
    cfg.label_dp.batch_size = 256;
    cfg.dpsgd.expected_batch = 256.0;
    let (_, report) = train(&tr, &te, &model, &cfg)?;
    println!(
        "hybrid auc {:.4} at eps {:.3}",
        report.test.auc, report.total.epsilon
    );
    Ok(())
}
