//! Randomized response on labels and the debiased loss that undoes it in
//! expectation.
//!
//!     cargo run --example label_dp

use hybrid_dp::model::bce_loss;
use hybrid_dp::privacy::{debias_coefficients, keep_probability, randomized_response};

fn main() -> hybrid_dp::Result<()> {
    let labels: Vec<u8> = (0..100_000).map(|i| u8::from(i % 3 == 0)).collect();
    for eps in [0.5, 1.0, 3.0] {
        let noisy = randomized_response(&labels, eps, 42)?;
        let flips = labels.iter().zip(&noisy).filter(|(a, b)| a != b).count();
        println!(
            "eps1 {eps}: flipped {:.4} (expected {:.4})",
            flips as f64 / labels.len() as f64,
            1.0 - keep_probability(eps)
        );
    }

    // average debiased loss over noisy copies of one label vs the clean loss
    let (logit, y, eps) = (0.7, 1u8, 1.0);
    let noisy = randomized_response(&vec![y; 200_000], eps, 7)?;
    let mean = noisy
        .iter()
        .map(|&n| {
            let (c0, c1) = debias_coefficients(eps, n).unwrap();
            c0 * bce_loss(logit, 0.0) + c1 * bce_loss(logit, 1.0)
        })
        .sum::<f64>()
        / noisy.len() as f64;
    println!(
        "debiased mean loss {mean:.4}, clean loss {:.4}",
        bce_loss(logit, f64::from(y))
    );
    Ok(())
}
