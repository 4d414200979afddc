//! RDP accounting for the subsampled Gaussian mechanism: per-order curve,
//! conversion to (eps, delta), noise calibration, and group privacy.
//!
//!     cargo run --example accountant

use hybrid_dp::privacy::{
    calibrate_sigma, compose_and_convert, default_orders, group_privacy, rdp_subsampled_gaussian,
    user_level_calibrate, PrivacyBudget,
};

fn main() -> hybrid_dp::Result<()> {
    let (q, sigma, steps, delta) = (0.01, 1.1, 10_000, 1e-5);
    let curve = rdp_subsampled_gaussian(q, sigma, &default_orders())?;
    for (a, e) in curve.orders.iter().zip(&curve.eps).take(6) {
        println!("alpha {a:>3}: rdp {e:.6}");
    }
    let conv = compose_and_convert(&curve, steps, delta)?;
    println!(
        "after {steps} steps: eps {:.4} at alpha {}",
        conv.epsilon, conv.order
    );

    for target in [0.5, 1.0, 2.0, 8.0] {
        let s = calibrate_sigma(target, delta, q, steps)?;
        println!("eps {target:>4}: sigma {s:.4}");
    }

    let per_example = PrivacyBudget {
        epsilon: 0.5,
        delta: 1e-7,
    };
    let user = group_privacy(per_example.epsilon, per_example.delta, 4)?;
    println!(
        "k=4 group: eps {:.3}, delta {:.3e}",
        user.epsilon, user.delta
    );
    let back = user_level_calibrate(user, 4)?;
    println!(
        "inverted: eps {:.3}, delta {:.3e}",
        back.epsilon, back.delta
    );
    Ok(())
}
