use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{ExampleGrad, GradVector, Layout, Scope};
use crate::rng::{stream_rng, Stream};

/// `e^eps / (1 + e^eps)`: probability that randomized response keeps a label.
pub fn keep_probability(eps: f64) -> f64 {
    crate::model::sigmoid(eps)
}

/// Flips each label independently with probability `1 / (1 + e^eps1)`.
pub fn randomized_response(labels: &[u8], eps1: f64, seed: u64) -> Result<Vec<u8>> {
    if !(eps1 > 0.0) {
        return Err(Error::Domain(format!(
            "randomized response needs eps1 > 0, got {eps1}"
        )));
    }
    let flip = crate::model::sigmoid(-eps1);
    let mut rng = stream_rng(seed, Stream::RandomizedResponse, 0);
    Ok(labels
        .iter()
        .map(|&y| if rng.random::<f64>() < flip { y ^ 1 } else { y })
        .collect())
}

/// Coefficients `(c0, c1)` of the debiased loss `c0 l(z, 0) + c1 l(z, 1)` for
/// a label observed through randomized response with parameter `eps1`.
///
/// With `p = 1 / (1 + e^-eps1)`, the coefficient on the flipped label is
/// `(1 - p) / (1 - 2p) = -1 / (e^eps1 - 1)` and the coefficient on the
/// observed label is `-p / (1 - 2p) = 1 + 1 / (e^eps1 - 1)`. The expectation
/// over the randomization equals the clean-label loss.
pub fn debias_coefficients(eps1: f64, noisy_label: u8) -> Result<(f64, f64)> {
    if !(eps1 > 0.0) {
        return Err(Error::Domain(format!(
            "debiasing needs eps1 > 0, got {eps1}"
        )));
    }
    if noisy_label > 1 {
        return Err(Error::Domain(format!(
            "label must be 0 or 1, got {noisy_label}"
        )));
    }
    let a = 1.0 / eps1.exp_m1();
    let observed = 1.0 + a;
    let flipped = -a;
    Ok(if noisy_label == 1 {
        (flipped, observed)
    } else {
        (observed, flipped)
    })
}

fn clip_factor(norm: f64, clip_norm: f64) -> f64 {
    if norm > clip_norm {
        clip_norm / norm
    } else {
        1.0
    }
}

/// `(1/B) sum_i clip_C(g_i) + N(0, C^2 sigma^2 / B^2 I)`.
///
/// Gradients are summed sequentially in input order; noise is drawn one
/// coordinate at a time from `rng`.
pub fn clip_and_noise<R: Rng + ?Sized>(
    grads: &[GradVector],
    clip_norm: f64,
    sigma: f64,
    expected_batch: f64,
    scope: Scope,
    len: usize,
    rng: &mut R,
) -> Result<GradVector> {
    check_clip_args(clip_norm, sigma, expected_batch)?;
    let mut sum = vec![0.0; len];
    for g in grads {
        if g.len() != len {
            return Err(Error::Shape {
                expected: len,
                actual: g.len(),
            });
        }
        if g.scope != scope {
            return Err(Error::Domain("gradients must share one scope".into()));
        }
        let f = clip_factor(g.norm(), clip_norm);
        for (s, v) in sum.iter_mut().zip(&g.values) {
            *s += f * v;
        }
    }
    finish(&mut sum, clip_norm, sigma, expected_batch, rng);
    Ok(GradVector { scope, values: sum })
}

fn check_clip_args(clip_norm: f64, sigma: f64, expected_batch: f64) -> Result<()> {
    if !(clip_norm > 0.0 && clip_norm.is_finite()) {
        return Err(Error::Domain(format!(
            "clip norm must be positive, got {clip_norm}"
        )));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Domain(format!(
            "noise multiplier must be >= 0, got {sigma}"
        )));
    }
    if !(expected_batch > 0.0) {
        return Err(Error::Domain(format!(
            "expected batch size must be positive, got {expected_batch}"
        )));
    }
    Ok(())
}

fn finish<R: Rng + ?Sized>(
    sum: &mut [f64],
    clip_norm: f64,
    sigma: f64,
    expected_batch: f64,
    rng: &mut R,
) {
    let std = clip_norm * sigma;
    for s in sum.iter_mut() {
        let noise: f64 = if std > 0.0 {
            rng.sample::<f64, _>(StandardNormal) * std
        } else {
            0.0
        };
        *s = (*s + noise) / expected_batch;
    }
}

/// Running sum of clipped per-example gradients over the full parameter
/// vector. Used by the DP-SGD loop so that sparse embedding gradients never
/// have to be densified per example.
#[derive(Debug, Clone)]
pub struct ClipAccumulator {
    sum: Vec<f64>,
    dense_start: usize,
    clip_norm: f64,
    count: usize,
}

impl ClipAccumulator {
    pub fn new(layout: &Layout, clip_norm: f64) -> Self {
        ClipAccumulator {
            sum: vec![0.0; layout.len],
            dense_start: layout.dense_start,
            clip_norm,
            count: 0,
        }
    }

    /// An accumulator that sums gradients without clipping.
    pub(crate) fn unclipped(layout: &Layout) -> Self {
        ClipAccumulator {
            sum: vec![0.0; layout.len],
            dense_start: layout.dense_start,
            clip_norm: f64::INFINITY,
            count: 0,
        }
    }

    pub(crate) fn add(&mut self, g: &ExampleGrad) {
        let f = clip_factor(g.sq_norm().sqrt(), self.clip_norm);
        g.add_scaled_to(self.dense_start, f, &mut self.sum);
        self.count += 1;
    }

    /// Adds another accumulator's sum (used to merge per-chunk partial sums
    /// in a fixed order).
    pub fn merge(&mut self, other: &ClipAccumulator) {
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        self.count += other.count;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Restricts to `scope`, adds noise and divides by the expected batch.
    pub fn finish<R: Rng + ?Sized>(
        self,
        layout: &Layout,
        scope: Scope,
        sigma: f64,
        expected_batch: f64,
        rng: &mut R,
    ) -> Result<GradVector> {
        check_clip_args(self.clip_norm, sigma, expected_batch)?;
        let mut g = GradVector::from_full(layout, scope, &self.sum);
        finish(&mut g.values, self.clip_norm, sigma, expected_batch, rng);
        Ok(g)
    }
}

impl ClipAccumulator {
    /// Restricts to `scope` and divides by `divisor`, without noise.
    pub(crate) fn into_mean(self, layout: &Layout, scope: Scope, divisor: f64) -> GradVector {
        let mut g = GradVector::from_full(layout, scope, &self.sum);
        for v in &mut g.values {
            *v /= divisor;
        }
        g
    }
}

/// Poisson sampling: each of `0..n` is included independently with
/// probability `q`.
pub fn poisson_sample<R: Rng + ?Sized>(n: usize, q: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Domain(format!(
            "sampling rate must lie in (0, 1], got {q}"
        )));
    }
    if q == 1.0 {
        return Ok((0..n).collect());
    }
    Ok((0..n).filter(|_| rng.random::<f64>() < q).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gv(values: Vec<f64>) -> GradVector {
        GradVector {
            scope: Scope::Full,
            values,
        }
    }

    #[test]
    fn keep_probability_at_ln3() {
        assert!((keep_probability(3f64.ln()) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn rr_rejects_nonpositive_eps() {
        assert!(randomized_response(&[0, 1], 0.0, 0).is_err());
        assert!(randomized_response(&[0, 1], -1.0, 0).is_err());
    }

    #[test]
    fn rr_large_eps_never_flips() {
        let labels: Vec<u8> = (0..100_000).map(|i| (i % 2) as u8).collect();
        assert_eq!(randomized_response(&labels, 20.0, 1).unwrap(), labels);
    }

    #[test]
    fn rr_flip_rate_eps_one() {
        let n = 100_000;
        let labels = vec![1u8; n];
        let out = randomized_response(&labels, 1.0, 3).unwrap();
        let flips = out.iter().filter(|&&y| y == 0).count() as f64;
        let p = 1.0 / (1.0 + 1f64.exp());
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((flips - n as f64 * p).abs() < 3.0 * sd);
        assert_eq!(out, randomized_response(&labels, 1.0, 3).unwrap());
    }

    #[test]
    fn debias_at_ln3() {
        let (c0, c1) = debias_coefficients(3f64.ln(), 1).unwrap();
        assert!((c1 - 1.5).abs() < 1e-12 && (c0 + 0.5).abs() < 1e-12);
        let (c0, c1) = debias_coefficients(3f64.ln(), 0).unwrap();
        assert!((c0 - 1.5).abs() < 1e-12 && (c1 + 0.5).abs() < 1e-12);
        assert!(debias_coefficients(0.0, 1).is_err());
    }

    #[test]
    fn debias_matches_printed_formula() {
        for &eps in &[0.1, 0.5, 1.0, 3.0, 7.0] {
            let p = 1.0 / (1.0 + (-eps as f64).exp());
            for y in [0u8, 1] {
                let (c0, c1) = debias_coefficients(eps, y).unwrap();
                let (flipped, kept) = if y == 1 { (c0, c1) } else { (c1, c0) };
                assert!(
                    (flipped - (1.0 - p) / (1.0 - 2.0 * p)).abs() < 1e-9 * flipped.abs().max(1.0)
                );
                assert!((kept - (-p / (1.0 - 2.0 * p))).abs() < 1e-9 * kept.abs().max(1.0));
                assert!((c0 + c1 - 1.0).abs() <= f64::EPSILON * 4.0 * (1.0 + kept.abs()));
            }
        }
    }

    #[test]
    fn clip_halves_long_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = clip_and_noise(
            &[gv(vec![3.0, 4.0])],
            2.5,
            0.0,
            1.0,
            Scope::Full,
            2,
            &mut rng,
        )
        .unwrap();
        assert_eq!(out.values, vec![1.5, 2.0]);
        assert_eq!(out.norm(), 2.5);
    }

    #[test]
    fn short_gradient_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = vec![0.3, -0.4, 0.1];
        let out =
            clip_and_noise(&[gv(g.clone())], 1.0, 0.0, 1.0, Scope::Full, 3, &mut rng).unwrap();
        assert_eq!(out.values, g);
    }

    #[test]
    fn noise_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let out =
            clip_and_noise(&[gv(vec![0.0; n])], 1.0, 1.0, 1.0, Scope::Full, n, &mut rng).unwrap();
        let mean = out.values.iter().sum::<f64>() / n as f64;
        let sd =
            (out.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((sd - 1.0).abs() < 0.02, "{sd}");
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = clip_and_noise(
            &[gv(vec![1.0]), gv(vec![1.0, 2.0])],
            1.0,
            0.0,
            1.0,
            Scope::Full,
            1,
            &mut rng,
        );
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    #[test]
    fn empty_batch_is_noise_over_b() {
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        let out = clip_and_noise(&[], 2.0, 1.5, 10.0, Scope::Full, 4, &mut a).unwrap();
        for v in out.values {
            let z: f64 = b.sample(StandardNormal);
            assert_eq!(v, z * 3.0 / 10.0);
        }
    }

    #[test]
    fn poisson_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(
            poisson_sample(10, 1.0, &mut rng).unwrap(),
            (0..10).collect::<Vec<_>>()
        );
        let n = 1_000_000;
        let s = poisson_sample(n, 0.01, &mut rng).unwrap();
        let sd = (n as f64 * 0.01 * 0.99).sqrt();
        assert!((s.len() as f64 - 10_000.0).abs() < 5.0 * sd);
        let a = poisson_sample(1000, 0.1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = poisson_sample(1000, 0.1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(poisson_sample(10, 0.0, &mut rng).is_err());
    }
}
