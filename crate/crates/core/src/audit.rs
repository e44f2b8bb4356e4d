//! The auditing games.
//!
//! Three flows produce membership evidence from a single training run:
//!
//! * baseline include/exclude: a secret coin per canary decides whether it
//!   enters the training set, and post-hoc confidence separates the two
//!   groups;
//! * self-comparison: the model trains on every canary, and the coin decides
//!   which of two labels (member vs comparison) the score treats as the
//!   evaluation target;
//! * multi-task: canaries hide inside a realistic base set and carry secret
//!   tag sets learned by an auxiliary head, so the membership signal decouples
//!   from main-task utility.
//!
//! The auditor side only issues loss queries against the final model; the
//! trainer is an opaque function from a training set to parameters.

use crate::canary::{AuditDataset, MultiTaskDataset, ToyDataset};
use crate::dp::DPTrainConfig;
use crate::error::{Error, Result};
use crate::estimator::{self, CPCounts, EstimatorKind, EstimatorQuery};
use crate::nn::{self, Batch, LossSpec, ModelParams};
use crate::streams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Secret coin per canary: +1 marks the member role, -1 the excluded or
/// comparison role. Empty vectors are allowed so flows without canaries
/// degrade gracefully.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MembershipVector(Vec<i8>);

impl MembershipVector {
    pub fn new(signs: Vec<i8>) -> Result<Self> {
        if signs.iter().any(|&s| s != 1 && s != -1) {
            return Err(Error::config("membership signs must be +1 or -1"));
        }
        Ok(MembershipVector(signs))
    }

    pub fn signs(&self) -> &[i8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn negated(&self) -> Self {
        MembershipVector(self.0.iter().map(|&s| -s).collect())
    }
}

/// Per-canary membership score; higher means more member-like.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::numeric("membership scores must be finite"));
        }
        Ok(ScoreVector(scores))
    }

    pub fn scores(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Guesses in {-1, 0, +1}; zero entries abstain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GuessVector(Vec<i8>);

impl GuessVector {
    pub fn new(guesses: Vec<i8>) -> Result<Self> {
        if guesses.iter().any(|&g| g < -1 || g > 1) {
            return Err(Error::config("guesses must lie in {-1, 0, +1}"));
        }
        Ok(GuessVector(guesses))
    }

    pub fn guesses(&self) -> &[i8] {
        &self.0
    }

    pub fn r(&self) -> u64 {
        self.0.iter().filter(|&&g| g != 0).count() as u64
    }
}

/// Which game produced an outcome.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuditFlow {
    Baseline,
    SelfComparison,
    MultiTask,
}

impl AuditFlow {
    pub fn as_str(self) -> &'static str {
        match self {
            AuditFlow::Baseline => "baseline",
            AuditFlow::SelfComparison => "self_comp",
            AuditFlow::MultiTask => "multitask",
        }
    }
}

/// Main-task accuracy of a trained model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UtilityMetrics {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Everything one audit run reports.
#[derive(Clone, Debug, PartialEq)]
pub struct AuditOutcome {
    /// Correct nonzero guesses.
    pub w: u64,
    /// Nonzero guesses.
    pub r: u64,
    pub m: u64,
    /// Estimated privacy lower bound from (S, guesses).
    pub epsilon_lower: f64,
    /// Best value any auditor could reach at this m (all guesses correct).
    pub epsilon_opt: f64,
    pub mia_auc: f64,
    /// Set when the two-proportion estimator saw an empty side.
    pub estimator_degenerate: bool,
    pub utility: Option<UtilityMetrics>,
    pub seed: u64,
    pub flow: AuditFlow,
}

/// i.i.d. uniform signs over {-1, +1}.
pub fn sample_membership<R: Rng>(m: usize, rng: &mut R) -> MembershipVector {
    assert!(m >= 1, "need at least one canary");
    MembershipVector((0..m).map(|_| if rng.gen_bool(0.5) { 1 } else { -1 }).collect())
}

/// Result of the include/exclude baseline. `s_used` differs from the input
/// only when the original draw excluded every canary and was resampled.
pub struct BaselineRun {
    pub scores: ScoreVector,
    pub s_used: MembershipVector,
    pub model: ModelParams,
    pub resampled: usize,
}

/// Trains on the subset of canaries with S = +1 and scores every canary by
/// negative cross-entropy on its member label. An all-excluded draw (odds
/// 2^-m) is replaced by fresh draws derived from the training seed until a
/// nonempty training set appears; the count is reported.
pub fn run_baseline_o1<F>(
    dataset: &AuditDataset,
    s: &MembershipVector,
    train_fn: F,
    cfg: &DPTrainConfig,
) -> Result<BaselineRun>
where
    F: Fn(&Batch, &DPTrainConfig, LossSpec) -> Result<ModelParams>,
{
    if s.len() != dataset.m() {
        return Err(Error::config("membership vector length must match the canary count"));
    }
    let mut s_used = s.clone();
    let mut resampled = 0;
    let members = loop {
        let members: Vec<usize> = s_used
            .signs()
            .iter()
            .enumerate()
            .filter_map(|(i, &si)| (si == 1).then_some(i))
            .collect();
        if !members.is_empty() {
            break members;
        }
        resampled += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(resampled as u64));
        rng.set_stream(streams::MEMBERSHIP);
        s_used = sample_membership(dataset.m(), &mut rng);
    };
    let full = Batch::new(dataset.features.clone(), dataset.member_labels.clone())?;
    let model = train_fn(&full.select(&members), cfg, LossSpec::Main)?;
    let losses = nn::per_sample_losses(&model, &full, LossSpec::Main)?;
    let scores = ScoreVector::new(losses.into_iter().map(|l| -l).collect())?;
    Ok(BaselineRun { scores, s_used, model, resampled })
}

pub struct SelfComparisonRun {
    pub scores: ScoreVector,
    pub model: ModelParams,
}

/// Trains on the full canary set with member labels; the secret coin only
/// decides which label each score treats as the evaluation target. The score
/// is the loss of the counterfactual label minus the loss of the target,
/// which works out to S_i * (L(comp_i) - L(member_i)).
pub fn run_self_comparison<F>(
    dataset: &AuditDataset,
    s: &MembershipVector,
    train_fn: F,
    cfg: &DPTrainConfig,
) -> Result<SelfComparisonRun>
where
    F: Fn(&Batch, &DPTrainConfig, LossSpec) -> Result<ModelParams>,
{
    if s.len() != dataset.m() {
        return Err(Error::config("membership vector length must match the canary count"));
    }
    if dataset.comp_labels.len() != dataset.m() {
        return Err(Error::config("dataset lacks comparison labels"));
    }
    let member_batch = Batch::new(dataset.features.clone(), dataset.member_labels.clone())?;
    let comp_batch = Batch::new(dataset.features.clone(), dataset.comp_labels.clone())?;
    let model = train_fn(&member_batch, cfg, LossSpec::Main)?;
    let member_losses = nn::per_sample_losses(&model, &member_batch, LossSpec::Main)?;
    let comp_losses = nn::per_sample_losses(&model, &comp_batch, LossSpec::Main)?;
    let scores = ScoreVector::new(
        s.signs()
            .iter()
            .zip(member_losses.iter().zip(&comp_losses))
            .map(|(&si, (lm, lc))| si as f64 * (lc - lm))
            .collect(),
    )?;
    Ok(SelfComparisonRun { scores, model })
}

pub struct MultiTaskRun {
    pub scores: ScoreVector,
    pub utility: UtilityMetrics,
    pub model: ModelParams,
}

/// Trains on the full multi-task set with loss L_main + lambda * L_tag,
/// where the tag term applies only to audit rows whose coin is +1. Scores
/// apply self-comparison on the separated tag loss: member tag set vs
/// comparison tag set, evaluated on the audit rows of the final model.
/// Utility is main-task accuracy on the training rows and on a clean
/// held-out test set.
pub fn run_multitask<F>(
    dataset: &MultiTaskDataset,
    s: &MembershipVector,
    train_fn: F,
    cfg: &DPTrainConfig,
    lambda: f64,
    test: &ToyDataset,
) -> Result<MultiTaskRun>
where
    F: Fn(&Batch, &DPTrainConfig, LossSpec) -> Result<ModelParams>,
{
    if s.len() != dataset.m() {
        return Err(Error::config("membership vector length must match the audit row count"));
    }
    let n = dataset.n();
    let mut tags = vec![Vec::new(); n];
    let mut flags = vec![0i8; n];
    for (k, &i) in dataset.audit_indices.iter().enumerate() {
        tags[i] = dataset.member_tags[k].clone();
        flags[i] = s.signs()[k];
    }
    let batch = Batch::new(dataset.features.clone(), dataset.labels.clone())?
        .with_tags(tags)?
        .with_member_flags(flags)?;
    let model = train_fn(&batch, cfg, LossSpec::Combined { lambda })?;

    let audit_features = dataset.features.select_rows(&dataset.audit_indices);
    let (_, hidden) = nn::forward(&model, &audit_features)?;
    let tag_logits = nn::tag_forward(&model, &hidden)?;
    let scores = ScoreVector::new(
        (0..dataset.m())
            .map(|k| {
                let row = tag_logits.row(k);
                let l_member = nn::tag_set_score_loss(row, &dataset.member_tags[k]);
                let l_comp = nn::tag_set_score_loss(row, &dataset.comp_tags[k]);
                s.signs()[k] as f64 * (l_comp - l_member)
            })
            .collect(),
    )?;

    let utility = UtilityMetrics {
        train_accuracy: accuracy(&model, &batch.features, &batch.labels)?,
        test_accuracy: accuracy(&model, &test.features, &test.labels)?,
    };
    Ok(MultiTaskRun { scores, utility, model })
}

/// Fraction of rows whose argmax logit matches the given label.
pub fn accuracy(model: &ModelParams, features: &crate::linalg::Matrix, labels: &[usize]) -> Result<f64> {
    let (logits, _) = nn::forward(model, features)?;
    let predicted = nn::predict_labels(&logits);
    let hits = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Turns scores into r guesses: the r/2 highest-scoring canaries get +1, the
/// r/2 lowest get -1, everything else abstains. Odd r rounds down to keep the
/// two groups equal. Ties break toward the lower index, a fixed rule that
/// never sees the secret coins.
pub fn mia_decide(scores: &ScoreVector, r: usize) -> Result<GuessVector> {
    let m = scores.len();
    if r == 0 || r > m {
        return Err(Error::config(format!("r = {r} must lie in [1, m = {m}]")));
    }
    let half = (r - r % 2) / 2;
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        scores.scores()[b]
            .partial_cmp(&scores.scores()[a])
            .expect("scores are finite")
            .then(a.cmp(&b))
    });
    let mut guesses = vec![0i8; m];
    for &i in &order[..half] {
        guesses[i] = 1;
    }
    for &i in &order[m - half..] {
        guesses[i] = -1;
    }
    GuessVector::new(guesses)
}

/// Scores an audit: counts correct guesses, runs the chosen estimator, and
/// attaches the score AUC split by the true coins. Flow tag, seed and
/// utility are left at defaults for the caller to fill in.
pub fn compute_outcome(
    s: &MembershipVector,
    guesses: &GuessVector,
    scores: &ScoreVector,
    delta: f64,
    confidence: f64,
    estimator_kind: EstimatorKind,
) -> Result<AuditOutcome> {
    let m = s.len();
    if guesses.guesses().len() != m || scores.len() != m {
        return Err(Error::config("S, guesses and scores must share one length"));
    }
    if m == 0 {
        return Err(Error::config("cannot score an empty audit"));
    }
    let r = guesses.r();
    let w = s
        .signs()
        .iter()
        .zip(guesses.guesses())
        .filter(|(&si, &gi)| gi != 0 && gi == si)
        .count() as u64;

    let (epsilon_lower, estimator_degenerate) = match estimator_kind {
        EstimatorKind::BinomialTail => {
            let q = EstimatorQuery::new(w, r, m as u64, delta, confidence)?;
            (estimator::epsilon_lower_tail(&q), false)
        }
        EstimatorKind::ClopperPearson => {
            let counts = CPCounts::from_signs(s.signs(), guesses.guesses());
            let est = estimator::epsilon_lower_cp(&counts, delta, confidence);
            (est.epsilon, est.degenerate)
        }
    };

    let members: Vec<f64> = scores
        .scores()
        .iter()
        .zip(s.signs())
        .filter_map(|(&sc, &si)| (si == 1).then_some(sc))
        .collect();
    let nonmembers: Vec<f64> = scores
        .scores()
        .iter()
        .zip(s.signs())
        .filter_map(|(&sc, &si)| (si == -1).then_some(sc))
        .collect();
    let mia_auc = if members.is_empty() || nonmembers.is_empty() {
        0.5
    } else {
        estimator::auc(&members, &nonmembers)
    };

    Ok(AuditOutcome {
        w,
        r,
        m: m as u64,
        epsilon_lower,
        epsilon_opt: estimator::epsilon_optimal(m as u64, delta, confidence),
        mia_auc,
        estimator_degenerate,
        utility: None,
        seed: 0,
        flow: AuditFlow::Baseline,
    })
}
