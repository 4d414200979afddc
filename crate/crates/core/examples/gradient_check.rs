//! Compares analytic per-example gradients with central finite differences
//! for both the full and the truncated model.
//!
//!     cargo run --example gradient_check

use hybrid_dp::data::{Example, FeatureSchema, Features, FieldKind, FieldSpec};
use hybrid_dp::model::{
    bce_loss, forward_full, forward_truncated, init_params, per_example_grad, Layout, ModelConfig,
    Scope,
};

fn main() -> hybrid_dp::Result<()> {
    let schema = FeatureSchema {
        fields: vec![
            FieldSpec::categorical("site", 10, false),
            FieldSpec::numeric("price", FieldKind::Float, false),
            FieldSpec::categorical("age_bucket", 5, true),
        ],
        label_field: "click".into(),
        user_id_field: None,
        order_field: None,
    };
    let cfg = ModelConfig {
        embedding_dim: Some(3),
        nonsensitive_hidden: vec![5],
        sensitive_hidden: vec![3],
        common_hidden: vec![4],
        ..ModelConfig::default()
    };
    let layout = Layout::new(&schema, &cfg)?;
    let params = init_params(&layout);
    let ex = Example {
        user_id: None,
        order_key: None,
        nonsensitive: Features {
            cat: vec![4],
            num: vec![0.3],
        },
        sensitive: Features {
            cat: vec![2],
            num: vec![],
        },
        label: 1,
    };
    for scope in [Scope::Full, Scope::Truncated] {
        let g = per_example_grad(&params, &ex, 1.0, scope)?;
        let f = |p: &hybrid_dp::model::ModelParams| {
            let z = match scope {
                Scope::Full => forward_full(p, &ex),
                Scope::Truncated => forward_truncated(p, &ex),
            };
            bce_loss(z.unwrap(), 1.0)
        };
        let mut worst: f64 = 0.0;
        let mut k = 0;
        for r in layout.scope_ranges(scope) {
            for i in r {
                let mut p = params.clone();
                p.values_mut()[i] += 1e-6;
                let up = f(&p);
                p.values_mut()[i] -= 2e-6;
                let fd = (up - f(&p)) / 2e-6;
                worst = worst.max((fd - g.values[k]).abs());
                k += 1;
            }
        }
        println!("{scope:?}: {k} coordinates, max abs error {worst:.2e}");
    }
    Ok(())
}
