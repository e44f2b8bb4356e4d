//! Turns a resolved `ExperimentConfig` into result rows: dataset generation,
//! noise calibration, training, scoring, guessing and estimation for one
//! seed, plus a bounded worker pool for sweeps and the fault-demo wrapper.

use crate::config::{self, ExperimentConfig, Flow};
use crate::results::{CsvWriter, ResultRow};
use crate::toy::{self, ToyProtocol};
use dpaudit_core::audit::{
    compute_outcome, mia_decide, run_baseline_o1, run_multitask, run_self_comparison,
    sample_membership, MembershipVector,
};
use dpaudit_core::canary::{
    build_multitask, gen_synthetic, gen_toy, AuditDataset, CanaryMode, Dataset,
    MULTITASK_BASE_B, MULTITASK_BASE_SIGMA0,
};
use dpaudit_core::dp::{self, DPTrainConfig, PrivacyBudget};
use dpaudit_core::error::{Error, Result};
use dpaudit_core::nn::{Batch, LossSpec, ModelParams};
use dpaudit_core::streams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;
use std::io::Write;
use std::sync::Mutex;
use std::time::Instant;

/// Fresh 2-layer model trained under the given DP config. The architecture is
/// fixed by the experiment, not inferred from batch contents: a subsampled
/// batch may miss the top class entirely.
pub fn trainer_for(
    d_h: usize,
    classes: usize,
    tag_classes: Option<usize>,
) -> impl Fn(&Batch, &DPTrainConfig, LossSpec) -> Result<ModelParams> + Send + Sync {
    move |batch, cfg, spec| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(streams::TRAINING);
        let params0 = ModelParams::init(batch.features.cols(), d_h, classes, tag_classes, &mut rng);
        let (model, _) = dp::train(&params0, batch, cfg, spec)?;
        Ok(model)
    }
}

/// Noise multiplier and the claimed budget column. An epsilon target
/// calibrates sigma through the accountant; an explicit sigma is taken as-is;
/// neither means non-private training.
pub fn effective_noise(cfg: &ExperimentConfig) -> Result<(f64, f64)> {
    match (cfg.eps_target, cfg.sigma) {
        (Some(_), Some(_)) => Err(Error::config("eps_target and sigma are exclusive")),
        (Some(eps), None) => {
            let budget = PrivacyBudget::new(eps, cfg.delta)?;
            Ok((dp::calibrate_sigma(&budget, cfg.q, cfg.epochs)?, eps))
        }
        (None, Some(sigma)) => Ok((sigma, f64::NAN)),
        (None, None) => Ok((0.0, f64::NAN)),
    }
}

fn membership_for(seed: u64, m: usize) -> MembershipVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(streams::MEMBERSHIP);
    sample_membership(m, &mut rng)
}

/// Audit canaries for the configured source. The mislabeled-toy source is the
/// classic baseline: in-distribution features, labels drawn uniformly so they
/// carry no signal. The stored `mode` tag only matters to the dataset file
/// format; no audit flow reads it.
pub fn build_audit_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<AuditDataset> {
    match cfg.canary_mode.synthetic_mode() {
        Some(mode) => gen_synthetic(cfg.m, cfg.d_x, cfg.classes, mode, cfg.sigma0, seed),
        None => {
            let toy = gen_toy(cfg.m, cfg.d_x, cfg.classes, 1, cfg.b, cfg.sigma0, seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(streams::MISC);
            let member_labels: Vec<usize> =
                (0..cfg.m).map(|_| rng.gen_range(0..cfg.classes)).collect();
            let comp_labels = member_labels
                .iter()
                .map(|&y| loop {
                    let c = rng.gen_range(0..cfg.classes);
                    if c != y {
                        break c;
                    }
                })
                .collect();
            Ok(AuditDataset {
                features: toy.features,
                member_labels,
                comp_labels,
                num_classes: cfg.classes,
                mode: CanaryMode::Gaussian,
                sigma0: cfg.sigma0,
                seed,
            })
        }
    }
}

/// Dataset for the `gen` subcommand.
pub fn build_dataset(kind: &str, cfg: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    match kind {
        "synthetic" => Ok(Dataset::Audit(build_audit_dataset(cfg, seed)?)),
        "multitask" => Ok(Dataset::MultiTask(build_multitask(
            cfg.n,
            cfg.m,
            cfg.d_x,
            cfg.classes,
            cfg.tag_classes,
            cfg.tag_size,
            cfg.trigger_dim,
            seed,
        )?)),
        "toy" => Ok(Dataset::Toy(gen_toy(
            cfg.n, cfg.d_x, cfg.classes, cfg.a, cfg.b, cfg.sigma0, seed,
        )?)),
        other => Err(Error::config(format!(
            "unknown dataset kind {other:?}, expected synthetic, multitask or toy"
        ))),
    }
}

fn base_row(cfg: &ExperimentConfig, seed: u64) -> ResultRow {
    ResultRow {
        run_id: config::run_id(cfg, seed),
        seed,
        flow: cfg.flow.as_str().into(),
        canary_mode: cfg.canary_mode.as_str().into(),
        m: cfg.m as u64,
        n: cfg.n as u64,
        eps_target: f64::NAN,
        sigma: f64::NAN,
        delta: cfg.delta,
        r: 0,
        w: 0,
        eps_lower: f64::NAN,
        eps_opt: f64::NAN,
        auc: f64::NAN,
        train_acc: f64::NAN,
        test_acc: f64::NAN,
        wall_seconds: 0.0,
    }
}

/// Identity columns only; written when a seed aborts so the sweep records the
/// failure instead of silently shrinking.
pub fn failed_row(cfg: &ExperimentConfig, seed: u64, wall: f64) -> ResultRow {
    let mut row = base_row(cfg, seed);
    row.wall_seconds = wall;
    row
}

/// One seed end to end: generate, calibrate, train, score, decide, estimate.
pub fn run_one(cfg: &ExperimentConfig, seed: u64) -> Result<ResultRow> {
    let t0 = Instant::now();
    let mut row = base_row(cfg, seed);
    match cfg.flow {
        Flow::Toy => {
            let cell = toy::run_toy_cell(cfg.a, cfg.b, &ToyProtocol::from_config(cfg), seed)?;
            row.m = 0;
            row.sigma = 0.0;
            row.auc = cell.auc;
            row.train_acc = cell.train_acc;
            row.test_acc = cell.test_acc;
        }
        Flow::BaselineO1 | Flow::SelfComp => {
            let (sigma, eps_t) = effective_noise(cfg)?;
            let ds = build_audit_dataset(cfg, seed)?;
            let s = membership_for(seed, cfg.m);
            let dp_cfg = dp_config(cfg, sigma, seed);
            let train = trainer_for(cfg.d_h, cfg.classes, None);
            let r = cfg.r.unwrap_or(cfg.m);
            let (scores, s_used) = if cfg.flow == Flow::SelfComp {
                let run = run_self_comparison(&ds, &s, train, &dp_cfg)?;
                (run.scores, s)
            } else {
                let run = run_baseline_o1(&ds, &s, train, &dp_cfg)?;
                (run.scores, run.s_used)
            };
            let guesses = mia_decide(&scores, r)?;
            let out = compute_outcome(
                &s_used,
                &guesses,
                &scores,
                cfg.delta,
                cfg.confidence,
                cfg.estimator,
            )?;
            row.eps_target = eps_t;
            row.sigma = sigma;
            row.r = out.r;
            row.w = out.w;
            row.eps_lower = out.epsilon_lower;
            row.eps_opt = out.epsilon_opt;
            row.auc = out.mia_auc;
        }
        Flow::MultiTask => {
            let (sigma, eps_t) = effective_noise(cfg)?;
            let ds = build_multitask(
                cfg.n,
                cfg.m,
                cfg.d_x,
                cfg.classes,
                cfg.tag_classes,
                cfg.tag_size,
                cfg.trigger_dim,
                seed,
            )?;
            let test = gen_toy(
                cfg.test_n,
                cfg.d_x,
                cfg.classes,
                1,
                MULTITASK_BASE_B,
                MULTITASK_BASE_SIGMA0,
                seed + 1,
            )?;
            let s = membership_for(seed, cfg.m);
            let dp_cfg = dp_config(cfg, sigma, seed);
            let train = trainer_for(cfg.d_h, cfg.classes, Some(cfg.tag_classes));
            let run = run_multitask(&ds, &s, train, &dp_cfg, cfg.lambda, &test)?;
            let r = cfg.r.unwrap_or(cfg.m);
            let guesses = mia_decide(&run.scores, r)?;
            let out = compute_outcome(
                &s,
                &guesses,
                &run.scores,
                cfg.delta,
                cfg.confidence,
                cfg.estimator,
            )?;
            row.eps_target = eps_t;
            row.sigma = sigma;
            row.r = out.r;
            row.w = out.w;
            row.eps_lower = out.epsilon_lower;
            row.eps_opt = out.epsilon_opt;
            row.auc = out.mia_auc;
            row.train_acc = run.utility.train_accuracy;
            row.test_acc = run.utility.test_accuracy;
        }
    }
    row.wall_seconds = t0.elapsed().as_secs_f64();
    debug_assert!(row.bound_is_consistent(), "estimated bound above optimum");
    Ok(row)
}

fn dp_config(cfg: &ExperimentConfig, sigma: f64, seed: u64) -> DPTrainConfig {
    DPTrainConfig {
        clip_norm: cfg.clip,
        noise_multiplier: sigma,
        sampling_rate: cfg.q,
        steps: cfg.epochs,
        learning_rate: cfg.eta,
        batch_mode: cfg.batch_mode,
        fault: cfg.fault,
        seed,
    }
}

/// Runs every seed of every config on a bounded pool of `workers` threads.
/// Completed rows stream through the single shared writer as they finish;
/// the returned list is ordered by job, independent of completion order.
pub fn run_jobs<W: Write + Send>(
    configs: &[ExperimentConfig],
    workers: usize,
    mut writer: Option<&mut CsvWriter<W>>,
) -> Result<Vec<ResultRow>>
{
    let jobs: Vec<(usize, usize, u64)> = configs
        .iter()
        .enumerate()
        .flat_map(|(ci, cfg)| cfg.seeds.iter().map(move |&s| (ci, s)))
        .enumerate()
        .map(|(ji, (ci, s))| (ji, ci, s))
        .collect();
    let queue: Mutex<VecDeque<(usize, usize, u64)>> = Mutex::new(jobs.iter().copied().collect());
    let sink: Mutex<(Option<&mut CsvWriter<W>>, Vec<(usize, ResultRow)>)> =
        Mutex::new((writer.take(), Vec::with_capacity(jobs.len())));

    let n_workers = workers.clamp(1, jobs.len().max(1));
    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for _ in 0..n_workers {
            handles.push(scope.spawn(|| -> Result<()> {
                loop {
                    let job = queue.lock().unwrap().pop_front();
                    let Some((ji, ci, seed)) = job else {
                        return Ok(());
                    };
                    let cfg = &configs[ci];
                    let t0 = Instant::now();
                    let row = match run_one(cfg, seed) {
                        Ok(row) => row,
                        Err(e) => {
                            eprintln!(
                                "dpaudit: seed {seed} of {} failed: {e}",
                                config::run_id(cfg, seed)
                            );
                            failed_row(cfg, seed, t0.elapsed().as_secs_f64())
                        }
                    };
                    let mut sink = sink.lock().unwrap();
                    if let Some(w) = sink.0.as_deref_mut() {
                        w.write_row(&row)?;
                    }
                    sink.1.push((ji, row));
                }
            }));
        }
        for h in handles {
            h.join().expect("worker panicked")?;
        }
        Ok(())
    })?;

    let (_, mut rows) = sink.into_inner().unwrap();
    rows.sort_by_key(|(ji, _)| *ji);
    Ok(rows.into_iter().map(|(_, r)| r).collect())
}

/// One config across its seeds, sequentially.
pub fn run_experiment<W: Write + Send>(
    cfg: &ExperimentConfig,
    writer: Option<&mut CsvWriter<W>>,
) -> Result<Vec<ResultRow>> {
    run_jobs(std::slice::from_ref(cfg), 1, writer)
}

#[derive(Debug)]
pub struct FaultReport {
    pub claimed: f64,
    pub rows: Vec<ResultRow>,
    /// True when any seed certified a lower bound above the claimed budget.
    pub violation: bool,
}

/// Audits a trainer that claims `eps_target` while running with `cfg.fault`
/// injected. Any seed whose certified lower bound exceeds the claim is a
/// violation; each certificate independently carries the configured
/// confidence level.
pub fn run_fault_demo<W: Write + Send>(
    cfg: &ExperimentConfig,
    writer: Option<&mut CsvWriter<W>>,
) -> Result<FaultReport> {
    let claimed = cfg
        .eps_target
        .ok_or_else(|| Error::config("fault-demo needs eps_target, the budget the trainer claims"))?;
    let rows = run_experiment(cfg, writer)?;
    let violation = rows
        .iter()
        .any(|r| r.eps_lower.is_finite() && r.eps_lower > claimed);
    Ok(FaultReport { claimed, rows, violation })
}
