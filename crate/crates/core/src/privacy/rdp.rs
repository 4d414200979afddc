//! Rényi accountant for the Poisson-subsampled Gaussian mechanism at integer
//! orders, linear composition, and conversion to `(eps, delta)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Search interval for the noise multiplier.
pub const SIGMA_BRACKET: (f64, f64) = (0.3, 1000.0);
/// Calibrated sigma spends at least `target - CALIBRATION_SLACK`.
pub const CALIBRATION_SLACK: f64 = 1e-3;

/// Integer orders `2..=256`.
pub fn default_orders() -> Vec<u32> {
    (2..=256).collect()
}

/// Rényi epsilon per order. `f64::INFINITY` marks an order whose bound
/// overflowed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpCurve {
    pub orders: Vec<f64>,
    pub eps: Vec<f64>,
}

/// Parameters of one DP-SGD phase as recorded by the accountant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpSgdParams {
    pub sampling_rate: f64,
    pub noise_multiplier: f64,
    pub steps: u64,
    pub clip_norm: f64,
    pub expected_batch: f64,
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `ln(e^x - 1)` for `x > 0`.
fn ln_expm1(x: f64) -> f64 {
    if x > 30.0 {
        x + (-(-x).exp()).ln_1p()
    } else {
        x.exp_m1().ln()
    }
}

/// `ln(1 + e^l)`.
fn ln1p_exp(l: f64) -> f64 {
    if l > 0.0 {
        l + (-l).exp().ln_1p()
    } else {
        l.exp().ln_1p()
    }
}

fn rdp_at_order(q: f64, sigma: f64, alpha: u32) -> f64 {
    let a = f64::from(alpha);
    if q == 1.0 {
        return a / (2.0 * sigma * sigma);
    }
    // sum_j C(a,j) (1-q)^(a-j) q^j exp(j(j-1)/2s^2)
    //   = 1 + sum_{j>=2} C(a,j) (1-q)^(a-j) q^j (exp(j(j-1)/2s^2) - 1)
    // because the j = 0, 1 terms have a zero exponent and the plain binomial
    // terms sum to 1; the remainder is summed in log space.
    let ln_q = q.ln();
    let ln_1mq = (-q).ln_1p();
    let two_s2 = 2.0 * sigma * sigma;
    let mut ln_binom = a.ln(); // ln C(a, 1)
    let mut acc = f64::NEG_INFINITY;
    for j in 2..=alpha {
        let jf = f64::from(j);
        ln_binom += ((a - jf + 1.0) / jf).ln();
        let x = jf * (jf - 1.0) / two_s2;
        if !x.is_finite() {
            return f64::INFINITY;
        }
        let term = ln_binom + (a - jf) * ln_1mq + jf * ln_q + ln_expm1(x);
        acc = log_add_exp(acc, term);
    }
    let eps = ln1p_exp(acc) / (a - 1.0);
    if eps.is_nan() {
        f64::INFINITY
    } else {
        eps
    }
}

/// Rényi DP of one step of the Poisson-subsampled Gaussian mechanism with
/// sampling rate `q` and noise multiplier `sigma`, at each integer order.
pub fn rdp_subsampled_gaussian(q: f64, sigma: f64, orders: &[u32]) -> Result<RdpCurve> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Domain(format!(
            "sampling rate must lie in (0, 1], got {q}"
        )));
    }
    if !(sigma > 0.0) || sigma.is_nan() {
        return Err(Error::Domain(format!(
            "noise multiplier must be positive, got {sigma}"
        )));
    }
    if let Some(&a) = orders.iter().find(|&&a| a < 2) {
        return Err(Error::Domain(format!(
            "orders must be integers >= 2, got {a}"
        )));
    }
    let mut sorted = orders.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    Ok(RdpCurve {
        orders: sorted.iter().map(|&a| f64::from(a)).collect(),
        eps: sorted.iter().map(|&a| rdp_at_order(q, sigma, a)).collect(),
    })
}

/// Result of converting a composed curve to `(eps, delta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Conversion {
    pub epsilon: f64,
    /// Order at which the minimum was attained.
    pub order: f64,
}

/// Composes `steps` copies of `curve` and returns
/// `min_a steps * eps(a) + ln(1/delta) / (a - 1)`.
pub fn compose_and_convert(curve: &RdpCurve, steps: u64, delta: f64) -> Result<Conversion> {
    if steps == 0 {
        return Err(Error::Domain("steps must be at least 1".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    let log_inv_delta = -delta.ln();
    let t = steps as f64;
    let mut best: Option<Conversion> = None;
    for (&a, &e) in curve.orders.iter().zip(&curve.eps) {
        if !e.is_finite() {
            continue;
        }
        let eps = t * e + log_inv_delta / (a - 1.0);
        if best.is_none_or(|b| eps < b.epsilon) {
            best = Some(Conversion {
                epsilon: eps,
                order: a,
            });
        }
    }
    best.ok_or(Error::Unbounded)
}

fn epsilon_for(sigma: f64, q: f64, steps: u64, delta: f64, orders: &[u32]) -> Result<f64> {
    let curve = rdp_subsampled_gaussian(q, sigma, orders)?;
    match compose_and_convert(&curve, steps, delta) {
        Ok(c) => Ok(c.epsilon),
        Err(Error::Unbounded) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}

/// Epsilon spent by `steps` rounds of the subsampled Gaussian mechanism,
/// over the default order grid; infinite when unbounded.
pub fn epsilon_for_sigma(sigma: f64, q: f64, steps: u64, delta: f64) -> Result<f64> {
    epsilon_for(sigma, q, steps, delta, &default_orders())
}

/// Noise multiplier for `steps` rounds at sampling rate `q` such that the
/// accountant reports an epsilon in `[eps_target - 1e-3, eps_target]`.
pub fn calibrate_sigma(eps_target: f64, delta: f64, q: f64, steps: u64) -> Result<f64> {
    calibrate_sigma_with(eps_target, delta, q, steps, &default_orders())
}

/// [`calibrate_sigma`] over a custom order grid.
pub fn calibrate_sigma_with(
    eps_target: f64,
    delta: f64,
    q: f64,
    steps: u64,
    orders: &[u32],
) -> Result<f64> {
    if !(eps_target > 0.0 && eps_target.is_finite()) {
        return Err(Error::Domain(format!(
            "target epsilon must be positive, got {eps_target}"
        )));
    }
    let (mut lo, mut hi) = SIGMA_BRACKET;
    let eps_lo = epsilon_for(lo, q, steps, delta, orders)?;
    let eps_hi = epsilon_for(hi, q, steps, delta, orders)?;
    let bracket_error = || Error::Calibration {
        target: eps_target,
        sigma_lo: SIGMA_BRACKET.0,
        eps_at_lo: eps_lo,
        sigma_hi: SIGMA_BRACKET.1,
        eps_at_hi: eps_hi,
    };
    let in_window = |e: f64| e <= eps_target && e >= eps_target - CALIBRATION_SLACK;
    if eps_hi > eps_target {
        return Err(bracket_error());
    }
    if eps_lo <= eps_target {
        return if in_window(eps_lo) {
            Ok(lo)
        } else {
            Err(bracket_error())
        };
    }
    // eps is continuous and nonincreasing in sigma; bisect on log(sigma)
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        let e = epsilon_for(mid, q, steps, delta, orders)?;
        if e <= eps_target {
            hi = mid;
            if in_window(e) {
                return Ok(mid);
            }
        } else {
            lo = mid;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    let e = epsilon_for(hi, q, steps, delta, orders)?;
    if in_window(e) {
        Ok(hi)
    } else {
        Err(bracket_error())
    }
}
