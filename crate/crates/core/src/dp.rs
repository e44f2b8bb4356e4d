//! DP-SGD training: subsampling, per-sample clipping, calibrated Gaussian
//! noise, an RDP accountant, and deliberate fault injection.
//!
//! Each step samples a batch, clips every example's gradient to L2 norm R_g,
//! averages, adds N(0, (sigma*R_g/B)^2) noise per coordinate, and applies a
//! plain gradient step. The accountant composes subsampled-Gaussian Renyi
//! bounds at integer orders and converts to (epsilon, delta).
//!
//! Fault modes each break exactly one named stage of that recipe, producing
//! trainers whose real privacy is worse than their claimed budget; the audit
//! pipeline exists to catch them.

use crate::error::{Error, Result};
use crate::nn::{self, Batch, LossSpec, ModelParams};
use crate::streams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Integer Renyi orders the accountant evaluates. Wide enough for budgets
/// roughly in [0.3, 15] at the batch sizes and step counts used here.
pub const RDP_ORDERS: std::ops::RangeInclusive<u64> = 2..=64;

/// Calibration searches sigma inside this bracket.
pub const SIGMA_BRACKET: (f64, f64) = (1e-2, 1e3);

/// A claimed privacy guarantee. `epsilon` may be `f64::INFINITY`, the
/// sentinel for "no guarantee" (sigma = 0 training).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if epsilon < 0.0 || epsilon.is_nan() {
            return Err(Error::config(format!("epsilon must be >= 0 or infinite, got {epsilon}")));
        }
        if !(0.0 < delta && delta < 1.0) {
            return Err(Error::config(format!("delta must lie in (0,1), got {delta}")));
        }
        Ok(PrivacyBudget { epsilon, delta })
    }
}

/// How each step draws its batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchMode {
    /// Each example joins independently with probability q. The accountant
    /// assumes this mode.
    Poisson,
    /// A uniformly random subset of exactly floor(q*n) examples; accounting
    /// treats it as approximately Poisson.
    FixedUniform,
}

/// Deliberately broken DP-SGD variants. Each changes exactly one stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FaultMode {
    None,
    /// Noise term dropped entirely.
    NoNoise,
    /// Noise multiplier scaled down by this factor in (0,1).
    UnderNoise(f64),
    /// Clips the averaged gradient instead of each per-example gradient,
    /// leaving single-example influence unbounded.
    NoPerSampleClip,
    /// Every step trains on the same leading block instead of a fresh
    /// random batch.
    DeterministicBatches,
}

#[derive(Clone, Copy, Debug)]
pub struct DPTrainConfig {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub sampling_rate: f64,
    pub steps: u64,
    pub learning_rate: f64,
    pub batch_mode: BatchMode,
    pub fault: FaultMode,
    pub seed: u64,
}

impl Default for DPTrainConfig {
    fn default() -> Self {
        DPTrainConfig {
            clip_norm: 1.0,
            noise_multiplier: 0.0,
            sampling_rate: 1.0,
            steps: 100,
            learning_rate: 1e-3,
            batch_mode: BatchMode::Poisson,
            fault: FaultMode::None,
            seed: 0,
        }
    }
}

impl DPTrainConfig {
    /// `steps = 0` is allowed and returns the initial model untouched.
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(Error::config(format!("clip_norm must be > 0, got {}", self.clip_norm)));
        }
        if !(self.noise_multiplier.is_finite() && self.noise_multiplier >= 0.0) {
            return Err(Error::config(format!(
                "noise_multiplier must be >= 0, got {}",
                self.noise_multiplier
            )));
        }
        if !(self.sampling_rate > 0.0 && self.sampling_rate <= 1.0) {
            return Err(Error::config(format!(
                "sampling_rate must lie in (0,1], got {}",
                self.sampling_rate
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if let FaultMode::UnderNoise(f) = self.fault {
            if !(0.0 < f && f < 1.0) {
                return Err(Error::config(format!(
                    "under-noise factor must lie strictly in (0,1), got {f}"
                )));
            }
        }
        Ok(())
    }

    fn effective_sigma(&self) -> f64 {
        match self.fault {
            FaultMode::NoNoise => 0.0,
            FaultMode::UnderNoise(f) => f * self.noise_multiplier,
            _ => self.noise_multiplier,
        }
    }
}

/// Per-step diagnostics. Never exposed to the auditor role; the audit sees
/// only the final model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStat {
    pub step: u64,
    pub batch_size: usize,
    /// Mean L2 norm of the per-example contributions actually summed
    /// (post-clip normally, raw under the no-clip fault). 0 when skipped.
    pub mean_grad_norm: f64,
    pub skipped: bool,
}

/// Draws the index set for one step. Poisson keeps each index with
/// probability q; fixed_uniform picks a uniform floor(q*n)-subset. The
/// deterministic-batches fault always returns the leading floor(q*n) block.
/// Indices come back sorted so downstream float sums have a fixed order.
pub fn subsample<R: Rng>(n: usize, cfg: &DPTrainConfig, rng: &mut R) -> Vec<usize> {
    assert!(n >= 1, "subsample needs a nonempty dataset");
    let q = cfg.sampling_rate;
    if cfg.fault == FaultMode::DeterministicBatches {
        return (0..((q * n as f64).floor() as usize).min(n)).collect();
    }
    match cfg.batch_mode {
        BatchMode::Poisson => (0..n).filter(|_| rng.gen::<f64>() < q).collect(),
        BatchMode::FixedUniform => {
            let k = ((q * n as f64).floor() as usize).min(n);
            let mut idx = rand::seq::index::sample(rng, n, k).into_vec();
            idx.sort_unstable();
            idx
        }
    }
}

/// Scales each gradient set by min{R_g/|g|, 1} over its flattened L2 norm.
pub fn clip_per_sample(mut grads: Vec<ModelParams>, clip_norm: f64) -> Vec<ModelParams> {
    assert!(clip_norm > 0.0, "clip_norm must be positive");
    for g in &mut grads {
        let norm = g.sq_norm().sqrt();
        if norm > clip_norm {
            g.scale(clip_norm / norm);
        }
    }
    grads
}

/// Aggregates sum_i weights[i] * g_i from rank-1 gradient factors without
/// materializing any per-example tensor.
fn weighted_gradient_sum(
    params: &ModelParams,
    batch: &Batch,
    pieces: &nn::GradPieces,
    weights: &[f64],
) -> Result<ModelParams> {
    let d_h = params.d_h();
    let classes = params.classes();
    let w1 = batch.features.matmul_at_weighted(&pieces.d_act, weights);
    let w2 = pieces.hidden.matmul_at_weighted(&pieces.d_logits, weights);
    let mut b1 = vec![0.0; d_h];
    let mut b2 = vec![0.0; classes];
    for i in 0..batch.len() {
        crate::linalg::vec_axpy(&mut b1, weights[i], pieces.d_act.row(i));
        crate::linalg::vec_axpy(&mut b2, weights[i], pieces.d_logits.row(i));
    }
    let tag_head = match (params.tag_classes(), &pieces.d_tag) {
        (Some(ce), Some(dt)) => {
            let wt = pieces.hidden.matmul_at_weighted(dt, weights);
            let mut bt = vec![0.0; ce];
            for i in 0..batch.len() {
                crate::linalg::vec_axpy(&mut bt, weights[i], dt.row(i));
            }
            Some(nn::TagHead { w: wt, b: bt })
        }
        (Some(ce), None) => Some(nn::TagHead {
            w: crate::linalg::Matrix::zeros(d_h, ce),
            b: vec![0.0; ce],
        }),
        (None, _) => None,
    };
    ModelParams::new(w1, b1, w2, b2, tag_head)
}

/// One DP-SGD step. Samples a batch from `data`, forms the clipped noisy
/// mean gradient, and returns the stepped parameters. An empty sampled
/// batch skips the update and says so in the stat.
pub fn dp_sgd_step<R: Rng>(
    params: &ModelParams,
    data: &Batch,
    cfg: &DPTrainConfig,
    loss_spec: LossSpec,
    rng: &mut R,
) -> Result<(ModelParams, StepStat)> {
    if data.is_empty() {
        return Err(Error::config("dp_sgd_step needs a nonempty dataset"));
    }
    let idx = subsample(data.len(), cfg, rng);
    let mut stat = StepStat { step: 0, batch_size: idx.len(), mean_grad_norm: 0.0, skipped: false };
    if idx.is_empty() {
        stat.skipped = true;
        return Ok((params.clone(), stat));
    }
    let batch = data.select(&idx);
    let b = batch.len() as f64;
    let pieces = nn::grad_pieces(params, &batch, loss_spec)?;
    let norms: Vec<f64> = pieces.sq_norms.iter().map(|s| s.sqrt()).collect();

    let clip_each = cfg.fault != FaultMode::NoPerSampleClip;
    let weights: Vec<f64> = if clip_each {
        norms
            .iter()
            .map(|&n| if n > cfg.clip_norm { cfg.clip_norm / n / b } else { 1.0 / b })
            .collect()
    } else {
        vec![1.0 / b; batch.len()]
    };
    let mut grad = weighted_gradient_sum(params, &batch, &pieces, &weights)?;
    if !clip_each {
        let norm = grad.sq_norm().sqrt();
        if norm > cfg.clip_norm {
            grad.scale(cfg.clip_norm / norm);
        }
    }

    stat.mean_grad_norm = if clip_each {
        norms.iter().map(|&n| n.min(cfg.clip_norm)).sum::<f64>() / b
    } else {
        norms.iter().sum::<f64>() / b
    };

    // Draw noise only when it can be nonzero, so a no-noise faulty run is
    // bit-identical to an honest sigma = 0 run under the same seed.
    let sigma = cfg.effective_sigma();
    if sigma > 0.0 {
        grad.add_gaussian_noise(sigma * cfg.clip_norm / b, rng);
    }

    let mut next = params.clone();
    next.axpy(-cfg.learning_rate, &grad);
    Ok((next, stat))
}

/// Runs `cfg.steps` DP-SGD steps from `params0`. The trajectory is fully
/// determined by (cfg.seed, cfg, dataset): the step rng derives from
/// cfg.seed on a stream reserved for training.
pub fn train(
    params0: &ModelParams,
    data: &Batch,
    cfg: &DPTrainConfig,
    loss_spec: LossSpec,
) -> Result<(ModelParams, Vec<StepStat>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::config("train needs a nonempty dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(streams::TRAINING);
    let mut params = params0.clone();
    let mut log = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let (next, mut stat) = dp_sgd_step(&params, data, cfg, loss_spec, &mut rng)?;
        stat.step = step;
        params = next;
        log.push(stat);
    }
    Ok((params, log))
}

// ---------------------------------------------------------------------------
// Accountant
// ---------------------------------------------------------------------------

fn ln_binomials(n: u64) -> Vec<f64> {
    // ln C(n, k) for k = 0..=n via a log-factorial table; n <= 64 here.
    let mut lf = vec![0.0];
    for k in 1..=n {
        lf.push(lf[k as usize - 1] + (k as f64).ln());
    }
    (0..=n).map(|k| lf[n as usize] - lf[k as usize] - lf[(n - k) as usize]).collect()
}

/// Renyi divergence bound of one subsampled-Gaussian step at integer order
/// lambda: ln E_k[exp(k(k-1)/(2 sigma^2))] / (lambda - 1) with k binomial
/// over the sampling rate. q = 1 reduces to the plain Gaussian lambda/(2
/// sigma^2).
pub fn subsampled_gaussian_rdp(sigma: f64, q: f64, lambda: u64) -> f64 {
    assert!(lambda >= 2, "Renyi order must be at least 2");
    if q >= 1.0 {
        return lambda as f64 / (2.0 * sigma * sigma);
    }
    let lnb = ln_binomials(lambda);
    let ln_q = q.ln();
    let ln_1q = (-q).ln_1p();
    let mut max_term = f64::NEG_INFINITY;
    let mut terms = Vec::with_capacity(lambda as usize + 1);
    for k in 0..=lambda {
        let t = lnb[k as usize]
            + k as f64 * ln_q
            + (lambda - k) as f64 * ln_1q
            + (k * k.saturating_sub(1)) as f64 / (2.0 * sigma * sigma);
        terms.push(t);
        max_term = max_term.max(t);
    }
    let sum: f64 = terms.iter().map(|t| (t - max_term).exp()).sum();
    (max_term + sum.ln()) / (lambda as f64 - 1.0)
}

/// (epsilon, delta) budget of T composed subsampled-Gaussian steps:
/// min over orders of [T * RDP(lambda) + ln(1/delta)/(lambda-1)].
/// sigma = 0 returns the infinite sentinel.
pub fn rdp_epsilon(sigma: f64, q: f64, steps: u64, delta: f64) -> f64 {
    assert!(sigma >= 0.0 && sigma.is_finite(), "sigma must be finite >= 0");
    assert!(q > 0.0 && q <= 1.0, "q must lie in (0,1]");
    assert!(delta > 0.0 && delta < 1.0, "delta must lie in (0,1)");
    if sigma == 0.0 {
        return f64::INFINITY;
    }
    let ln_inv_delta = -delta.ln();
    RDP_ORDERS
        .map(|lambda| {
            steps as f64 * subsampled_gaussian_rdp(sigma, q, lambda)
                + ln_inv_delta / (lambda as f64 - 1.0)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Smallest sigma in the bracket whose accounted epsilon meets or beats the
/// target, by bisection to |epsilon - target| < 1e-3.
pub fn calibrate_sigma(target: &PrivacyBudget, q: f64, steps: u64) -> Result<f64> {
    if !(target.epsilon.is_finite() && target.epsilon > 0.0) {
        return Err(Error::config(format!(
            "calibration target epsilon must be finite and > 0, got {}",
            target.epsilon
        )));
    }
    let (mut lo, mut hi) = SIGMA_BRACKET;
    let eps_at = |s: f64| rdp_epsilon(s, q, steps, target.delta);
    if eps_at(lo) < target.epsilon {
        return Err(Error::calibration(format!(
            "target epsilon {} is looser than the bracket floor sigma={lo} provides",
            target.epsilon
        )));
    }
    if eps_at(hi) > target.epsilon {
        return Err(Error::calibration(format!(
            "target epsilon {} is tighter than the bracket ceiling sigma={hi} reaches",
            target.epsilon
        )));
    }
    for _ in 0..200 {
        if target.epsilon - eps_at(hi) < 1e-3 {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if eps_at(mid) <= target.epsilon {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    if target.epsilon - eps_at(hi) > 1e-3 {
        return Err(Error::calibration("sigma bisection failed to converge"));
    }
    Ok(hi)
}
