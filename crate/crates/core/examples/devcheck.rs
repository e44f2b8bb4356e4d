// Scratch harness for sizing experiment configurations. Not part of the
// shipped surface; run with `cargo run --release --example devcheck -- <part>`.

use dpaudit_core::audit::{
    accuracy, compute_outcome, mia_decide, run_baseline_o1, run_multitask,
    run_self_comparison, sample_membership,
};
use dpaudit_core::canary::{build_multitask, gen_synthetic, gen_toy, CanaryMode,
    MULTITASK_BASE_B, MULTITASK_BASE_SIGMA0};
use dpaudit_core::dp::{self, BatchMode, DPTrainConfig, FaultMode, PrivacyBudget};
use dpaudit_core::estimator::{epsilon_optimal, EstimatorKind};
use dpaudit_core::nn::{self, Batch, LossSpec, ModelParams};
use dpaudit_core::streams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn trainer(d_h: usize, classes: usize, tag_classes: Option<usize>) -> impl Fn(&Batch, &DPTrainConfig, LossSpec) -> dpaudit_core::error::Result<ModelParams> {
    move |batch: &Batch, cfg: &DPTrainConfig, spec: LossSpec| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(streams::TRAINING);
        let params0 = ModelParams::init(batch.features.cols(), d_h, classes, tag_classes, &mut rng);
        let (model, _) = dp::train(&params0, batch, cfg, spec)?;
        Ok(model)
    }
}

fn crit6() {
    let eps_o = epsilon_optimal(1000, 1e-5, 0.95);
    println!("eps_o(1000) = {eps_o:.4}, target {:.4}", 0.8 * eps_o);
    let ds = gen_synthetic(1000, 1024, 256, CanaryMode::Orthogonal, 1.0, 41).unwrap();
    for (d_h, lr, steps) in [(512usize, 1.0, 300u64), (512, 2.0, 300), (512, 2.0, 450), (256, 2.0, 450)] {
        let t0 = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        rng.set_stream(streams::MEMBERSHIP);
        let s = sample_membership(ds.m(), &mut rng);
        let cfg = DPTrainConfig {
            clip_norm: 1e4,
            noise_multiplier: 0.0,
            sampling_rate: 1.0,
            steps,
            learning_rate: lr,
            batch_mode: BatchMode::Poisson,
            fault: FaultMode::None,
            seed: 41,
        };
        let run = run_self_comparison(&ds, &s, trainer(d_h, 256, None), &cfg).unwrap();
        print!("d_h={d_h} lr={lr} steps={steps}:");
        for r in [400usize, 500, 600, 800, 1000] {
            let guesses = mia_decide(&run.scores, r).unwrap();
            let out = compute_outcome(&s, &guesses, &run.scores, 1e-5, 0.95, EstimatorKind::BinomialTail).unwrap();
            print!(" r={r}:W={},eps={:.3}", out.w, out.epsilon_lower);
        }
        println!(" wall={:.1}s", t0.elapsed().as_secs_f64());
    }
}

fn crit9() {
    let (n, m, d_x, c, c_e, h, d_g) = (2000usize, 200usize, 64usize, 4usize, 64usize, 16usize, 8usize);
    let seed = 51u64;
    let ds = build_multitask(n, m, d_x, c, c_e, h, d_g, seed).unwrap();
    let test = gen_toy(1000, d_x, c, 1, MULTITASK_BASE_B, MULTITASK_BASE_SIGMA0, seed + 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(streams::MEMBERSHIP);
    let s = sample_membership(m, &mut rng);

    for (steps, lr) in [(600u64, 0.05), (1200, 0.05), (1200, 0.02)] {
        let cfg = DPTrainConfig {
            clip_norm: 1e4,
            noise_multiplier: 0.0,
            sampling_rate: 1.0,
            steps,
            learning_rate: lr,
            batch_mode: BatchMode::Poisson,
            fault: FaultMode::None,
            seed,
        };
        let t0 = Instant::now();
        let run = run_multitask(&ds, &s, trainer(256, c, Some(c_e)), &cfg, 1.0, &test).unwrap();
        let guesses = mia_decide(&run.scores, m).unwrap();
        let out = compute_outcome(&s, &guesses, &run.scores, 1e-5, 0.95, EstimatorKind::BinomialTail).unwrap();

        // m = 0 arm: identical base law, no audit rows, plain training.
        let base = gen_toy(n, d_x, c, 1, MULTITASK_BASE_B, MULTITASK_BASE_SIGMA0, seed).unwrap();
        let clean_batch = Batch::new(base.features.clone(), base.labels.clone()).unwrap();
        let clean = trainer(256, c, None)(&clean_batch, &cfg, LossSpec::Main).unwrap();
        let clean_acc = accuracy(&clean, &test.features, &test.labels).unwrap();

        // Mislabeled arm: same fraction of base rows, labels resampled.
        let mut bad = base.labels.clone();
        let mut mis_rng = ChaCha8Rng::seed_from_u64(seed + 7);
        mis_rng.set_stream(streams::MISC);
        let idx = rand::seq::index::sample(&mut mis_rng, n, m).into_vec();
        for &i in &idx {
            bad[i] = mis_rng.gen_range(0..c);
        }
        let bad_batch = Batch::new(base.features.clone(), bad).unwrap();
        let noisy = trainer(256, c, None)(&bad_batch, &cfg, LossSpec::Main).unwrap();
        let noisy_acc = accuracy(&noisy, &test.features, &test.labels).unwrap();

        println!(
            "steps={steps} lr={lr}: auc={:.4} W={} multi_test={:.4} clean_test={:.4} mislabeled_test={:.4} wall={:.1}s",
            out.mia_auc, out.w, run.utility.test_accuracy, clean_acc, noisy_acc,
            t0.elapsed().as_secs_f64()
        );
    }
}

fn crit57() {
    let budget = PrivacyBudget::new(1.0, 1e-5).unwrap();
    let sigma = dp::calibrate_sigma(&budget, 0.1, 1000).unwrap();
    println!("calibrated sigma = {sigma:.4}, check eps = {:.4}", dp::rdp_epsilon(sigma, 0.1, 1000, 1e-5));
    let (m, d_x, c, d_h) = (512usize, 128usize, 64usize, 256usize);
    for lr in [0.3f64, 0.5] {
        for fault in [FaultMode::None, FaultMode::NoNoise] {
            let mut eps_list = Vec::new();
            let t0 = Instant::now();
            for seed in 0..5u64 {
                let ds = gen_synthetic(m, d_x, c, CanaryMode::Orthogonal, 1.0, 900 + seed).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
                rng.set_stream(streams::MEMBERSHIP);
                let s = sample_membership(m, &mut rng);
                let cfg = DPTrainConfig {
                    clip_norm: 1.0,
                    noise_multiplier: if fault == FaultMode::NoNoise { sigma } else { sigma },
                    sampling_rate: 0.1,
                    steps: 1000,
                    learning_rate: lr,
                    batch_mode: BatchMode::Poisson,
                    fault,
                    seed: 900 + seed,
                };
                let run = run_self_comparison(&ds, &s, trainer(d_h, c, None), &cfg).unwrap();
                let guesses = mia_decide(&run.scores, m).unwrap();
                let out = compute_outcome(&s, &guesses, &run.scores, 1e-5, 0.95, EstimatorKind::BinomialTail).unwrap();
                eps_list.push((out.w, out.epsilon_lower));
            }
            println!(
                "lr={lr} fault={fault:?}: {:?} wall={:.1}s",
                eps_list, t0.elapsed().as_secs_f64()
            );
        }
    }
}

fn crit8() {
    let (m, c, d_h) = (512usize, 512usize, 256usize);
    for (d_x, steps, lr) in [(8usize, 200u64, 0.5), (8, 300, 0.5)] {
        let mut wins = 0;
        let t0 = Instant::now();
        for seed in 0..10u64 {
            let ds = gen_synthetic(m, d_x, c, CanaryMode::Gaussian, 1.0, 700 + seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
            rng.set_stream(streams::MEMBERSHIP);
            let s = sample_membership(m, &mut rng);
            let cfg = DPTrainConfig {
                clip_norm: 1e4,
                noise_multiplier: 0.0,
                sampling_rate: 1.0,
                steps,
                learning_rate: lr,
                batch_mode: BatchMode::Poisson,
                fault: FaultMode::None,
                seed: 700 + seed,
            };
            let sc = run_self_comparison(&ds, &s, trainer(d_h, c, None), &cfg).unwrap();
            let g1 = mia_decide(&sc.scores, m).unwrap();
            let o1 = compute_outcome(&s, &g1, &sc.scores, 1e-5, 0.95, EstimatorKind::BinomialTail).unwrap();
            let base = run_baseline_o1(&ds, &s, trainer(d_h, c, None), &cfg).unwrap();
            let g2 = mia_decide(&base.scores, m).unwrap();
            let o2 = compute_outcome(&base.s_used, &g2, &base.scores, 1e-5, 0.95, EstimatorKind::BinomialTail).unwrap();
            println!(
                "d_x={d_x} steps={steps} lr={lr} seed={seed}: self W={} eps={:.3} | base W={} eps={:.3}",
                o1.w, o1.epsilon_lower, o2.w, o2.epsilon_lower
            );
            if o1.epsilon_lower >= o2.epsilon_lower {
                wins += 1;
            }
        }
        println!("d_x={d_x} steps={steps} lr={lr}: wins {wins}/10 wall={:.1}s", t0.elapsed().as_secs_f64());
    }
}

fn main() {
    let part = std::env::args().nth(1).unwrap_or_default();
    match part.as_str() {
        "crit6" => crit6(),
        "crit9" => crit9(),
        "crit57" => crit57(),
        "crit8" => crit8(),
        other => eprintln!("unknown part {other:?}"),
    }
}
