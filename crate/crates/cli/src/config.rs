//! Experiment configuration: desk-scale defaults, a flat `key = value` config
//! file, and CLI flags that share the file's key names. Layers merge in a
//! fixed order (defaults, then file, then `DPAUDIT_SEED`, then flags), so the
//! most explicit source always wins.

use dpaudit_core::canary::CanaryMode;
use dpaudit_core::dp::{BatchMode, FaultMode};
use dpaudit_core::error::{Error, Result};
use dpaudit_core::estimator::EstimatorKind;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flow {
    BaselineO1,
    SelfComp,
    MultiTask,
    Toy,
}

impl Flow {
    pub fn as_str(self) -> &'static str {
        match self {
            Flow::BaselineO1 => "baseline_o1",
            Flow::SelfComp => "self_comp",
            Flow::MultiTask => "multitask",
            Flow::Toy => "toy",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline_o1" => Ok(Flow::BaselineO1),
            "self_comp" => Ok(Flow::SelfComp),
            "multitask" => Ok(Flow::MultiTask),
            "toy" => Ok(Flow::Toy),
            other => Err(Error::config(format!(
                "unknown flow {other:?}, expected baseline_o1, self_comp, multitask or toy"
            ))),
        }
    }
}

/// Where audit canaries come from. The first two are the synthetic geometries;
/// `MislabeledToy` draws in-distribution toy features and assigns labels
/// uniformly at random, the classic mislabeled-sample baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CanarySource {
    Gaussian,
    Orthogonal,
    MislabeledToy,
}

impl CanarySource {
    pub fn as_str(self) -> &'static str {
        match self {
            CanarySource::Gaussian => "gaussian",
            CanarySource::Orthogonal => "orthogonal",
            CanarySource::MislabeledToy => "mislabeled_toy",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(CanarySource::Gaussian),
            "orthogonal" => Ok(CanarySource::Orthogonal),
            "mislabeled_toy" => Ok(CanarySource::MislabeledToy),
            other => Err(Error::config(format!(
                "unknown canary_mode {other:?}, expected gaussian, orthogonal or mislabeled_toy"
            ))),
        }
    }

    /// Feature geometry for the synthetic generator; `None` for the toy-based
    /// source, which is built outside `gen_synthetic`.
    pub fn synthetic_mode(self) -> Option<CanaryMode> {
        match self {
            CanarySource::Gaussian => Some(CanaryMode::Gaussian),
            CanarySource::Orthogonal => Some(CanaryMode::Orthogonal),
            CanarySource::MislabeledToy => None,
        }
    }
}

pub fn estimator_str(kind: EstimatorKind) -> &'static str {
    match kind {
        EstimatorKind::BinomialTail => "binomial_tail",
        EstimatorKind::ClopperPearson => "clopper_pearson",
    }
}

pub fn parse_estimator(s: &str) -> Result<EstimatorKind> {
    match s {
        "binomial_tail" => Ok(EstimatorKind::BinomialTail),
        "clopper_pearson" => Ok(EstimatorKind::ClopperPearson),
        other => Err(Error::config(format!(
            "unknown estimator {other:?}, expected binomial_tail or clopper_pearson"
        ))),
    }
}

pub fn fault_str(fault: FaultMode) -> String {
    match fault {
        FaultMode::None => "none".into(),
        FaultMode::NoNoise => "no_noise".into(),
        FaultMode::UnderNoise(f) => format!("under_noise:{f}"),
        FaultMode::NoPerSampleClip => "no_clip".into(),
        FaultMode::DeterministicBatches => "fixed_batches".into(),
    }
}

pub fn parse_fault(s: &str) -> Result<FaultMode> {
    if let Some(rest) = s.strip_prefix("under_noise:") {
        let f: f64 = rest
            .parse()
            .map_err(|_| Error::config(format!("bad under_noise factor {rest:?}")))?;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::config("under_noise factor must lie in (0,1)"));
        }
        return Ok(FaultMode::UnderNoise(f));
    }
    match s {
        "none" => Ok(FaultMode::None),
        "no_noise" => Ok(FaultMode::NoNoise),
        "no_clip" => Ok(FaultMode::NoPerSampleClip),
        "fixed_batches" => Ok(FaultMode::DeterministicBatches),
        other => Err(Error::config(format!(
            "unknown fault {other:?}, expected none, no_noise, under_noise:<f>, no_clip or fixed_batches"
        ))),
    }
}

fn parse_batch_mode(s: &str) -> Result<BatchMode> {
    match s {
        "poisson" => Ok(BatchMode::Poisson),
        "fixed_uniform" => Ok(BatchMode::FixedUniform),
        other => Err(Error::config(format!(
            "unknown batch_mode {other:?}, expected poisson or fixed_uniform"
        ))),
    }
}

fn batch_mode_str(mode: BatchMode) -> &'static str {
    match mode {
        BatchMode::Poisson => "poisson",
        BatchMode::FixedUniform => "fixed_uniform",
    }
}

pub fn parse_u64_list(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<u64>()
                .map_err(|_| Error::config(format!("bad seed list entry {t:?}")))
        })
        .collect()
}

/// One layer of settings; every field optional. Built from a config file, from
/// the environment, from CLI flags, or from a sweep-grid assignment, and
/// merged in that order.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub flow: Option<Flow>,
    pub canary_mode: Option<CanarySource>,
    pub m: Option<usize>,
    pub n: Option<usize>,
    pub test_n: Option<usize>,
    pub d_x: Option<usize>,
    pub d_h: Option<usize>,
    pub classes: Option<usize>,
    pub tag_classes: Option<usize>,
    pub tag_size: Option<usize>,
    pub trigger_dim: Option<usize>,
    pub lambda: Option<f64>,
    pub eps_target: Option<f64>,
    pub sigma: Option<f64>,
    pub sigma0: Option<f64>,
    pub delta: Option<f64>,
    pub q: Option<f64>,
    pub epochs: Option<u64>,
    pub eta: Option<f64>,
    pub clip: Option<f64>,
    pub batch_mode: Option<BatchMode>,
    pub r: Option<usize>,
    pub estimator: Option<EstimatorKind>,
    pub confidence: Option<f64>,
    pub seed: Option<u64>,
    pub num_seeds: Option<usize>,
    pub seeds: Option<Vec<u64>>,
    pub fault: Option<FaultMode>,
    pub a: Option<u8>,
    pub b: Option<f64>,
    pub full_scale: Option<bool>,
    pub out: Option<PathBuf>,
}

impl Overrides {
    /// Applies one `key = value` assignment. This is the single catalogue of
    /// key names; the config file, sweep grids and flag conversion all funnel
    /// through it.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::config(format!("bad value {value:?} for key {key}")))
        }
        match key {
            "flow" => self.flow = Some(Flow::parse(value)?),
            "canary_mode" => self.canary_mode = Some(CanarySource::parse(value)?),
            "m" => self.m = Some(num(key, value)?),
            "n" => self.n = Some(num(key, value)?),
            "test_n" => self.test_n = Some(num(key, value)?),
            "d_x" => self.d_x = Some(num(key, value)?),
            "d_h" => self.d_h = Some(num(key, value)?),
            "classes" => self.classes = Some(num(key, value)?),
            "tag_classes" => self.tag_classes = Some(num(key, value)?),
            "tag_size" => self.tag_size = Some(num(key, value)?),
            "trigger_dim" => self.trigger_dim = Some(num(key, value)?),
            "lambda" => self.lambda = Some(num(key, value)?),
            "eps_target" => self.eps_target = Some(num(key, value)?),
            "sigma" => self.sigma = Some(num(key, value)?),
            "sigma0" => self.sigma0 = Some(num(key, value)?),
            "delta" => self.delta = Some(num(key, value)?),
            "q" => self.q = Some(num(key, value)?),
            "epochs" => self.epochs = Some(num(key, value)?),
            "eta" => self.eta = Some(num(key, value)?),
            "clip" => self.clip = Some(num(key, value)?),
            "batch_mode" => self.batch_mode = Some(parse_batch_mode(value)?),
            "r" => self.r = Some(num(key, value)?),
            "estimator" => self.estimator = Some(parse_estimator(value)?),
            "confidence" => self.confidence = Some(num(key, value)?),
            "seed" => self.seed = Some(num(key, value)?),
            "num_seeds" => self.num_seeds = Some(num(key, value)?),
            "seeds" => self.seeds = Some(parse_u64_list(value)?),
            "fault" => self.fault = Some(parse_fault(value)?),
            "a" => self.a = Some(num(key, value)?),
            "b" => self.b = Some(num(key, value)?),
            "full_scale" => self.full_scale = Some(num(key, value)?),
            "out" => self.out = Some(PathBuf::from(value)),
            other => {
                return Err(Error::config(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut ov = Overrides::default();
        for (k, v) in pairs {
            ov.set(k, v)?;
        }
        Ok(ov)
    }
}

/// Parses flat `key = value` text. `#` starts a comment, whole-line or
/// trailing; blank lines are skipped.
pub fn parse_config_text(text: &str) -> Result<Overrides> {
    let mut ov = Overrides::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("line {}: expected `key = value`", lineno + 1))
        })?;
        ov.set(key.trim(), value.trim())
            .map_err(|e| Error::config(format!("line {}: {e}", lineno + 1)))?;
    }
    Ok(ov)
}

pub fn load_config_file(path: &Path) -> Result<Overrides> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read config file {}: {e}", path.display())))?;
    parse_config_text(&text)
}

/// Layer holding `DPAUDIT_SEED` when set; sits between the config file and
/// CLI flags, so the environment pins the master seed for CI but an explicit
/// `--seed` still wins.
pub fn env_overrides() -> Result<Overrides> {
    env_overrides_from(std::env::var("DPAUDIT_SEED").ok().as_deref())
}

fn env_overrides_from(raw: Option<&str>) -> Result<Overrides> {
    let mut ov = Overrides::default();
    if let Some(s) = raw {
        let seed: u64 = s
            .parse()
            .map_err(|_| Error::config(format!("DPAUDIT_SEED must be an unsigned integer, got {s:?}")))?;
        ov.seed = Some(seed);
    }
    Ok(ov)
}

/// Which default set a subcommand starts from. Desk scale keeps every run
/// laptop-sized while preserving the regimes that matter (canary count below
/// the feature dimension, class count at least the canary count); the full
/// scale mirrors the reference setup behind the `full_scale` key.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaseDefaults {
    Desk,
    FullScale,
    /// Small non-private setup for the toy memorization study.
    ToyDesk,
}

/// A fully resolved experiment. `eps_target` and `sigma` stay optional:
/// exactly one may be given (target calibrates the noise), or neither
/// (non-private training).
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub flow: Flow,
    pub canary_mode: CanarySource,
    pub m: usize,
    pub n: usize,
    pub test_n: usize,
    pub d_x: usize,
    pub d_h: usize,
    pub classes: usize,
    pub tag_classes: usize,
    pub tag_size: usize,
    pub trigger_dim: usize,
    pub lambda: f64,
    pub eps_target: Option<f64>,
    pub sigma: Option<f64>,
    pub sigma0: f64,
    pub delta: f64,
    pub q: f64,
    pub epochs: u64,
    pub eta: f64,
    pub clip: f64,
    pub batch_mode: BatchMode,
    pub r: Option<usize>,
    pub estimator: EstimatorKind,
    pub confidence: f64,
    pub seeds: Vec<u64>,
    pub fault: FaultMode,
    pub a: u8,
    pub b: f64,
    pub out: Option<PathBuf>,
}

fn desk_defaults() -> ExperimentConfig {
    ExperimentConfig {
        flow: Flow::SelfComp,
        canary_mode: CanarySource::Orthogonal,
        m: 512,
        n: 2048,
        test_n: 1000,
        d_x: 512,
        d_h: 4096,
        classes: 256,
        tag_classes: 64,
        tag_size: 16,
        trigger_dim: 8,
        lambda: 1.0,
        eps_target: None,
        sigma: None,
        sigma0: 1.0,
        delta: 1e-5,
        q: 0.1,
        epochs: 1000,
        eta: 0.5,
        clip: 1.0,
        batch_mode: BatchMode::Poisson,
        r: None,
        estimator: EstimatorKind::BinomialTail,
        confidence: 0.95,
        seeds: vec![0],
        fault: FaultMode::None,
        a: 1,
        b: 0.0,
        out: None,
    }
}

fn full_scale_defaults() -> ExperimentConfig {
    ExperimentConfig {
        m: 2000,
        n: 10_000,
        d_x: 1000,
        d_h: 100_000,
        classes: 1000,
        ..desk_defaults()
    }
}

fn toy_desk_defaults() -> ExperimentConfig {
    ExperimentConfig {
        flow: Flow::Toy,
        m: 0,
        n: 256,
        d_x: 16,
        classes: 4,
        d_h: 64,
        epochs: 100,
        q: 1.0,
        eta: 0.5,
        // Base scale 0.1 keeps the label signal partially learnable at b = 50
        // (pooled SNR ~ sqrt(d_x)/(b*sigma0)), the regime the insight grid probes.
        sigma0: 0.1,
        ..desk_defaults()
    }
}

fn apply(cfg: &mut ExperimentConfig, ov: &Overrides, master: &mut u64, num_seeds: &mut usize,
         explicit_seeds: &mut Option<Vec<u64>>) {
    macro_rules! take {
        ($($field:ident),*) => {
            $(if let Some(v) = &ov.$field { cfg.$field = v.clone(); })*
        };
    }
    take!(flow, canary_mode, m, n, test_n, d_x, d_h, classes, tag_classes, tag_size,
          trigger_dim, lambda, sigma0, delta, q, epochs, eta, clip, batch_mode,
          estimator, confidence, fault, a, b);
    if let Some(v) = ov.eps_target {
        cfg.eps_target = Some(v);
    }
    if let Some(v) = ov.sigma {
        cfg.sigma = Some(v);
    }
    if let Some(v) = ov.r {
        cfg.r = Some(v);
    }
    if let Some(v) = &ov.out {
        cfg.out = Some(v.clone());
    }
    if let Some(v) = ov.seed {
        *master = v;
    }
    if let Some(v) = ov.num_seeds {
        *num_seeds = v;
    }
    if let Some(v) = &ov.seeds {
        *explicit_seeds = Some(v.clone());
    }
}

/// Merges `layers` (later wins) onto the chosen defaults and validates the
/// result. The seeds list is either the last explicit `seeds` value or
/// `seed, seed+1, ..., seed+num_seeds-1`.
pub fn resolve(base: BaseDefaults, layers: &[&Overrides]) -> Result<ExperimentConfig> {
    let full = layers
        .iter()
        .filter_map(|ov| ov.full_scale)
        .last()
        .unwrap_or(false);
    let mut cfg = match (base, full) {
        (BaseDefaults::ToyDesk, _) => toy_desk_defaults(),
        (_, true) | (BaseDefaults::FullScale, _) => full_scale_defaults(),
        (BaseDefaults::Desk, false) => desk_defaults(),
    };
    let mut master = 0u64;
    let mut num_seeds = 1usize;
    let mut explicit: Option<Vec<u64>> = None;
    for ov in layers {
        apply(&mut cfg, ov, &mut master, &mut num_seeds, &mut explicit);
    }
    cfg.seeds = match explicit {
        Some(list) if !list.is_empty() => list,
        Some(_) => return Err(Error::config("seeds list is empty")),
        None => (master..master + num_seeds as u64).collect(),
    };
    if num_seeds == 0 {
        return Err(Error::config("num_seeds must be at least 1"));
    }
    if cfg.eps_target.is_some() && cfg.sigma.is_some() {
        return Err(Error::config(
            "give eps_target (noise is calibrated) or sigma (noise is explicit), not both",
        ));
    }
    if let Some(e) = cfg.eps_target {
        if !(e.is_finite() && e > 0.0) {
            return Err(Error::config("eps_target must be finite and positive"));
        }
    }
    if let Some(r) = cfg.r {
        if r > cfg.m {
            return Err(Error::config(format!(
                "guess budget r = {r} exceeds canary count m = {}",
                cfg.m
            )));
        }
    }
    Ok(cfg)
}

/// 64-bit FNV-1a; stable fingerprint for run ids.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Canonical text of every field that shapes the experiment (seeds and output
/// path excluded), hashed into the run id so rows from different sweep cells
/// never collide.
pub fn config_hash(cfg: &ExperimentConfig) -> u64 {
    let mut s = String::new();
    let _ = write!(
        s,
        "{};{};{};{};{};{};{};{};{};{};{};{};{:?};{:?};{};{};{};{};{};{};{};{:?};{};{};{};{};{}",
        cfg.flow.as_str(),
        cfg.canary_mode.as_str(),
        cfg.m,
        cfg.n,
        cfg.test_n,
        cfg.d_x,
        cfg.d_h,
        cfg.classes,
        cfg.tag_classes,
        cfg.tag_size,
        cfg.trigger_dim,
        cfg.lambda,
        cfg.eps_target,
        cfg.sigma,
        cfg.sigma0,
        cfg.delta,
        cfg.q,
        cfg.epochs,
        cfg.eta,
        cfg.clip,
        batch_mode_str(cfg.batch_mode),
        cfg.r,
        estimator_str(cfg.estimator),
        cfg.confidence,
        fault_str(cfg.fault),
        cfg.a,
        cfg.b,
    );
    fnv1a(s.as_bytes())
}

pub fn run_id(cfg: &ExperimentConfig, seed: u64) -> String {
    format!(
        "{}-{:08x}-s{}",
        cfg.flow.as_str(),
        config_hash(cfg) as u32,
        seed
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_text_parses_comments_and_blanks() {
        let ov = parse_config_text(
            "# experiment\n\nm = 128   # canaries\nflow=baseline_o1\n  q = 0.5\n",
        )
        .unwrap();
        assert_eq!(ov.m, Some(128));
        assert_eq!(ov.flow, Some(Flow::BaselineO1));
        assert_eq!(ov.q, Some(0.5));
    }

    #[test]
    fn malformed_line_is_a_config_error() {
        let err = parse_config_text("m 128").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        assert!(err.to_string().contains("line 1"));
    }

    #[test]
    fn unknown_key_is_rejected_with_its_line() {
        let err = parse_config_text("m = 4\nwat = 7\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(err.to_string().contains("wat"), "{err}");
    }

    #[test]
    fn later_layers_win() {
        let file = Overrides::from_pairs([("m", "100"), ("eta", "0.1")]).unwrap();
        let cli = Overrides::from_pairs([("m", "200")]).unwrap();
        let cfg = resolve(BaseDefaults::Desk, &[&file, &cli]).unwrap();
        assert_eq!(cfg.m, 200);
        assert_eq!(cfg.eta, 0.1);
        assert_eq!(cfg.d_x, 512);
    }

    #[test]
    fn seed_expansion_and_explicit_list() {
        let a = Overrides::from_pairs([("seed", "10"), ("num_seeds", "3")]).unwrap();
        let cfg = resolve(BaseDefaults::Desk, &[&a]).unwrap();
        assert_eq!(cfg.seeds, vec![10, 11, 12]);

        let b = Overrides::from_pairs([("seeds", "5, 9,1")]).unwrap();
        let cfg = resolve(BaseDefaults::Desk, &[&a, &b]).unwrap();
        assert_eq!(cfg.seeds, vec![5, 9, 1]);
    }

    #[test]
    fn env_seed_sits_between_file_and_flags() {
        let file = Overrides::from_pairs([("seed", "1")]).unwrap();
        let env = env_overrides_from(Some("7")).unwrap();
        let cfg = resolve(BaseDefaults::Desk, &[&file, &env]).unwrap();
        assert_eq!(cfg.seeds, vec![7]);

        let cli = Overrides::from_pairs([("seed", "3")]).unwrap();
        let cfg = resolve(BaseDefaults::Desk, &[&file, &env, &cli]).unwrap();
        assert_eq!(cfg.seeds, vec![3]);

        assert!(env_overrides_from(Some("nope")).is_err());
    }

    #[test]
    fn eps_target_and_sigma_conflict() {
        let ov = Overrides::from_pairs([("eps_target", "1.0"), ("sigma", "2.0")]).unwrap();
        let err = resolve(BaseDefaults::Desk, &[&ov]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn full_scale_swaps_the_defaults() {
        let ov = Overrides::from_pairs([("full_scale", "true")]).unwrap();
        let cfg = resolve(BaseDefaults::Desk, &[&ov]).unwrap();
        assert_eq!((cfg.d_x, cfg.d_h, cfg.classes), (1000, 100_000, 1000));
        // Explicit keys still override the swapped base.
        let narrow = Overrides::from_pairs([("full_scale", "true"), ("d_h", "64")]).unwrap();
        let cfg = resolve(BaseDefaults::Desk, &[&narrow]).unwrap();
        assert_eq!(cfg.d_h, 64);
    }

    #[test]
    fn fault_strings_round_trip() {
        for s in ["none", "no_noise", "no_clip", "fixed_batches", "under_noise:0.25"] {
            let f = parse_fault(s).unwrap();
            assert_eq!(fault_str(f), s);
        }
        assert!(parse_fault("under_noise:2").is_err());
        assert!(parse_fault("noiseless").is_err());
    }

    #[test]
    fn run_ids_separate_sweep_cells_but_not_reruns() {
        let a = resolve(BaseDefaults::Desk, &[]).unwrap();
        let b = resolve(BaseDefaults::Desk, &[]).unwrap();
        assert_eq!(run_id(&a, 3), run_id(&b, 3));
        let ov = Overrides::from_pairs([("m", "64")]).unwrap();
        let c = resolve(BaseDefaults::Desk, &[&ov]).unwrap();
        assert_ne!(run_id(&a, 3), run_id(&c, 3));
    }

    #[test]
    fn guess_budget_cannot_exceed_canaries() {
        let ov = Overrides::from_pairs([("m", "64"), ("r", "65")]).unwrap();
        assert!(resolve(BaseDefaults::Desk, &[&ov]).is_err());
    }
}
