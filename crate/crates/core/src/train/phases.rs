//! The training loops: debiased mini-batch training of the truncated model,
//! DP-SGD on the full model, and plain mini-batch training.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DpSgdConfig, LabelDpConfig, NonPrivateConfig};
use crate::data::ExampleSource;
use crate::error::{Error, Result};
use crate::model::{bce_loss, sigmoid, ModelParams, Scope, Workspace};
use crate::optim::{lr_at, OptimizerConfig, OptimizerState};
use crate::privacy::{
    calibrate_sigma, debias_coefficients, epsilon_for_sigma, poisson_sample, randomized_response,
    ClipAccumulator, DpSgdParams, SIGMA_BRACKET,
};
use crate::rng::{stream_rng, Stream};

/// Examples per parallel work unit. Partial sums are merged in chunk order,
/// so results do not depend on the number of threads.
const CHUNK: usize = 64;

/// What a training loop did, for tests and diagnostics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PhaseOutcome {
    pub steps: u64,
    /// Mean training loss per epoch, measured on the batches as they were
    /// trained on.
    pub epoch_losses: Vec<f64>,
}

/// Resolved parameters of a DP-SGD phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpSgdPlan {
    pub params: DpSgdParams,
    /// Epsilon reported by the accountant for `params`.
    pub epsilon: f64,
    pub delta: f64,
}

/// Loss coefficients `(c0, c1)` per example: the per-example loss is
/// `c0 l(z, 0) + c1 l(z, 1)`.
type Coefficients = [(f64, f64)];

/// Sums per-example gradients of the weighted loss over `idx`, clipping each
/// to `clip` when given. Returns the accumulator and the summed loss.
fn accumulate<S: ExampleSource + ?Sized>(
    params: &ModelParams,
    source: &S,
    idx: &[usize],
    scope: Scope,
    coeffs: &Coefficients,
    clip: Option<f64>,
) -> Result<(ClipAccumulator, f64)> {
    let layout = params.layout();
    let partial: Vec<Result<(ClipAccumulator, f64)>> = idx
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = match clip {
                Some(c) => ClipAccumulator::new(layout, c),
                None => ClipAccumulator::unclipped(layout),
            };
            let mut ws = Workspace::new();
            let mut loss = 0.0;
            for &i in chunk {
                let sensitive = (scope == Scope::Full).then(|| source.sensitive(i));
                let z = ws.forward(params, source.nonsensitive(i), sensitive)?;
                let (c0, c1) = coeffs[i];
                loss += c0 * bce_loss(z, 0.0) + c1 * bce_loss(z, 1.0);
                ws.backward(params, (c0 + c1) * sigmoid(z) - c1)?;
                acc.add(&ws.grad);
            }
            Ok((acc, loss))
        })
        .collect();
    let mut total = match clip {
        Some(c) => ClipAccumulator::new(layout, c),
        None => ClipAccumulator::unclipped(layout),
    };
    let mut loss = 0.0;
    for p in partial {
        let (acc, l) = p?;
        total.merge(&acc);
        loss += l;
    }
    Ok((total, loss))
}

/// Shuffled mini-batch training over `scope` with per-example loss
/// coefficients. The sensitive fields are only read when `scope` is full.
fn minibatch_loop<S: ExampleSource + ?Sized>(
    source: &S,
    params: &mut ModelParams,
    coeffs: &Coefficients,
    scope: Scope,
    epochs: u32,
    batch_size: usize,
    optimizer: &OptimizerConfig,
    shuffle_seed: u64,
) -> Result<PhaseOutcome> {
    let n = source.len();
    if n == 0 {
        return Err(Error::Config("training set is empty".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    optimizer.validate()?;
    let per_epoch = n.div_ceil(batch_size) as u64;
    let schedule = optimizer.schedule(per_epoch * u64::from(epochs));
    let mut state = OptimizerState::new(*optimizer, params.layout(), scope);
    let mut order: Vec<usize> = (0..n).collect();
    let mut out = PhaseOutcome::default();
    for epoch in 0..epochs {
        order.shuffle(&mut stream_rng(
            shuffle_seed,
            Stream::Shuffle,
            u64::from(epoch),
        ));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(batch_size) {
            let (acc, loss) = accumulate(params, source, batch, scope, coeffs, None)?;
            epoch_loss += loss;
            let g = acc.into_mean(params.layout(), scope, batch.len() as f64);
            let lr = lr_at(&schedule, out.steps);
            state.apply(params, &g, lr)?;
            out.steps += 1;
        }
        out.epoch_losses.push(epoch_loss / n as f64);
    }
    Ok(out)
}

/// Reads every true label exactly once and passes it through randomized
/// response.
pub fn randomize_labels<S: ExampleSource + ?Sized>(
    source: &S,
    eps1: f64,
    seed: u64,
) -> Result<Vec<u8>> {
    let labels: Vec<u8> = (0..source.len()).map(|i| source.label(i)).collect();
    randomized_response(&labels, eps1, seed)
}

/// Trains the truncated model on `labels`. With `eps1 = Some(e)` the labels
/// are taken to be randomized-response outputs and the debiased loss is
/// used; with `None` it is plain cross entropy.
///
/// Neither the sensitive fields nor the true labels of `source` are read.
pub fn train_truncated<S: ExampleSource + ?Sized>(
    source: &S,
    params: &mut ModelParams,
    labels: &[u8],
    eps1: Option<f64>,
    cfg: &LabelDpConfig,
    shuffle_seed: u64,
) -> Result<PhaseOutcome> {
    if labels.len() != source.len() {
        return Err(Error::Shape {
            expected: source.len(),
            actual: labels.len(),
        });
    }
    let coeffs = labels
        .iter()
        .map(|&y| match eps1 {
            Some(e) => debias_coefficients(e, y),
            None => Ok(plain(y)),
        })
        .collect::<Result<Vec<_>>>()?;
    minibatch_loop(
        source,
        params,
        &coeffs,
        Scope::Truncated,
        cfg.epochs,
        cfg.batch_size,
        &cfg.optimizer,
        shuffle_seed,
    )
}

fn plain(y: u8) -> (f64, f64) {
    if y == 1 {
        (0.0, 1.0)
    } else {
        (1.0, 0.0)
    }
}

/// Label-DP phase: randomizes the labels once with `eps1`, then trains the
/// truncated model on the debiased loss. Only the non-sensitive tower and
/// the common layers change.
pub fn run_label_dp_phase<S: ExampleSource + ?Sized>(
    source: &S,
    params: &mut ModelParams,
    cfg: &LabelDpConfig,
    eps1: f64,
    rr_seed: u64,
    shuffle_seed: u64,
) -> Result<PhaseOutcome> {
    if !(eps1 > 0.0 && eps1.is_finite()) {
        return Err(Error::Config(format!(
            "label-DP phase needs a positive finite eps1, got {eps1}; use dpsgd_only to skip it"
        )));
    }
    let noisy = randomize_labels(source, eps1, rr_seed)?;
    train_truncated(source, params, &noisy, Some(eps1), cfg, shuffle_seed)
}

/// Picks `q`, `T` and `σ` for a DP-SGD phase on `n` examples so that the
/// phase is `(eps2, delta)`-DP. `fixed_steps` overrides the step count
/// derived from the configured epochs.
///
/// When even the smallest noise multiplier in the calibration bracket spends
/// less than `eps2`, that multiplier is used and the smaller spend is
/// reported.
pub fn plan_dpsgd(
    n: usize,
    cfg: &DpSgdConfig,
    eps2: f64,
    delta: f64,
    fixed_steps: Option<u64>,
) -> Result<DpSgdPlan> {
    if n == 0 {
        return Err(Error::Config("training set is empty".into()));
    }
    if !(eps2 > 0.0 && eps2.is_finite()) {
        return Err(Error::Config(format!(
            "DP-SGD phase needs a positive finite eps2, got {eps2}; use rr_only to skip it"
        )));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Config(format!(
            "DP-SGD phase needs delta in (0, 1), got {delta}"
        )));
    }
    if !(cfg.expected_batch >= 1.0) {
        return Err(Error::Config(format!(
            "expected batch must be at least 1, got {}",
            cfg.expected_batch
        )));
    }
    let q = (cfg.expected_batch / n as f64).min(1.0);
    let expected_batch = q * n as f64;
    let steps = match (fixed_steps, cfg.steps) {
        (Some(t), _) | (None, Some(t)) => t,
        (None, None) => (f64::from(cfg.epochs) * n as f64 / expected_batch).ceil() as u64,
    };
    if steps == 0 {
        return Err(Error::Config("DP-SGD phase has zero steps".into()));
    }
    let sigma = match calibrate_sigma(eps2, delta, q, steps) {
        Ok(s) => s,
        Err(Error::Calibration { eps_at_lo, .. }) if eps_at_lo <= eps2 => SIGMA_BRACKET.0,
        Err(e) => return Err(e),
    };
    let epsilon = epsilon_for_sigma(sigma, q, steps, delta)?;
    Ok(DpSgdPlan {
        params: DpSgdParams {
            sampling_rate: q,
            noise_multiplier: sigma,
            steps,
            clip_norm: cfg.clip_norm,
            expected_batch,
        },
        epsilon,
        delta,
    })
}

/// Runs `params.steps` rounds of DP-SGD on the full model: Poisson batches
/// at rate `q`, per-example clipping to `C`, Gaussian noise of scale `C σ`,
/// division by the expected batch size. No accounting is done here.
pub fn run_dpsgd_steps<S: ExampleSource + ?Sized>(
    source: &S,
    params: &mut ModelParams,
    plan: &DpSgdParams,
    optimizer: &OptimizerConfig,
    noise_seed: u64,
) -> Result<PhaseOutcome> {
    optimizer.validate()?;
    let n = source.len();
    let coeffs: Vec<(f64, f64)> = (0..n).map(|i| plain(source.label(i))).collect();
    let schedule = optimizer.schedule(plan.steps);
    let mut state = OptimizerState::new(*optimizer, params.layout(), Scope::Full);
    let per_epoch = ((n as f64 / plan.expected_batch).ceil() as u64).max(1);
    let mut out = PhaseOutcome::default();
    let (mut bucket_loss, mut bucket_count) = (0.0, 0usize);
    for t in 0..plan.steps {
        let batch = poisson_sample(
            n,
            plan.sampling_rate,
            &mut stream_rng(noise_seed, Stream::Sampling, t),
        )?;
        let (acc, loss) = accumulate(
            params,
            source,
            &batch,
            Scope::Full,
            &coeffs,
            Some(plan.clip_norm),
        )?;
        bucket_loss += loss;
        bucket_count += batch.len();
        let mut noise_rng = stream_rng(noise_seed, Stream::Noise, t);
        let g = acc.finish(
            params.layout(),
            Scope::Full,
            plan.noise_multiplier,
            plan.expected_batch,
            &mut noise_rng,
        )?;
        state.apply(params, &g, lr_at(&schedule, t))?;
        out.steps += 1;
        if out.steps % per_epoch == 0 || out.steps == plan.steps {
            out.epoch_losses
                .push(bucket_loss / bucket_count.max(1) as f64);
            (bucket_loss, bucket_count) = (0.0, 0);
        }
    }
    Ok(out)
}

/// DP-SGD phase: plans and runs DP-SGD on the full model so that it is
/// `(eps2, delta)`-DP with respect to the examples of `source`.
pub fn run_dpsgd_phase<S: ExampleSource + ?Sized>(
    source: &S,
    params: &mut ModelParams,
    cfg: &DpSgdConfig,
    eps2: f64,
    delta: f64,
    fixed_steps: Option<u64>,
    noise_seed: u64,
) -> Result<(PhaseOutcome, DpSgdPlan)> {
    let plan = plan_dpsgd(source.len(), cfg, eps2, delta, fixed_steps)?;
    let out = run_dpsgd_steps(source, params, &plan.params, &cfg.optimizer, noise_seed)?;
    Ok((out, plan))
}

/// Plain shuffled mini-batch training of the full model on the true labels.
pub fn run_nonprivate<S: ExampleSource + ?Sized>(
    source: &S,
    params: &mut ModelParams,
    cfg: &NonPrivateConfig,
    shuffle_seed: u64,
) -> Result<PhaseOutcome> {
    let coeffs: Vec<(f64, f64)> = (0..source.len()).map(|i| plain(source.label(i))).collect();
    minibatch_loop(
        source,
        params,
        &coeffs,
        Scope::Full,
        cfg.epochs,
        cfg.batch_size,
        &cfg.optimizer,
        shuffle_seed,
    )
}
