//! Toy memorization study: how the label-signal weight `a` and the
//! sample-specific noise weight `b` trade off generalization against
//! membership leakage. Each grid cell trains the 2-layer network without any
//! privacy mechanism, then reports the train-test accuracy gap and the AUC of
//! a loss-threshold membership attack against a fresh holdout.

use crate::config::ExperimentConfig;
use dpaudit_core::audit::accuracy;
use dpaudit_core::canary::gen_toy;
use dpaudit_core::dp::{self, BatchMode, DPTrainConfig, FaultMode};
use dpaudit_core::error::Result;
use dpaudit_core::estimator::auc;
use dpaudit_core::linalg::Matrix;
use dpaudit_core::nn::{self, Batch, LossSpec, ModelParams};
use dpaudit_core::streams;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;

#[derive(Clone, Copy, Debug)]
pub struct ToyProtocol {
    pub n_train: usize,
    pub n_test: usize,
    pub d_x: usize,
    pub classes: usize,
    pub sigma0: f64,
    pub d_h: usize,
    pub eta: f64,
    pub epochs: u64,
}

impl ToyProtocol {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        ToyProtocol {
            n_train: cfg.n,
            n_test: cfg.test_n,
            d_x: cfg.d_x,
            classes: cfg.classes,
            sigma0: cfg.sigma0,
            d_h: cfg.d_h,
            eta: cfg.eta,
            epochs: cfg.epochs,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ToyCell {
    pub a: u8,
    pub b: f64,
    pub seed: u64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub gap: f64,
    pub auc: f64,
}

/// Per-coordinate z-scoring with train-set statistics. The toy law's feature
/// scale grows with both the class index and `b`; without normalization no
/// single learning rate serves every grid cell.
fn standardize(train: &Matrix, test: &Matrix) -> (Matrix, Matrix) {
    let (n, d) = (train.rows(), train.cols());
    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for i in 0..n {
        for (j, v) in train.row(i).iter().enumerate() {
            mean[j] += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    for i in 0..n {
        for (j, v) in train.row(i).iter().enumerate() {
            sd[j] += (v - mean[j]).powi(2);
        }
    }
    for s in &mut sd {
        *s = (*s / n as f64).sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    }
    let scale = |m: &Matrix| {
        Matrix::from_fn(m.rows(), m.cols(), |i, j| (m.get(i, j) - mean[j]) / sd[j])
    };
    (scale(train), scale(test))
}

pub fn run_toy_cell(a: u8, b: f64, proto: &ToyProtocol, seed: u64) -> Result<ToyCell> {
    let train = gen_toy(proto.n_train, proto.d_x, proto.classes, a, b, proto.sigma0, seed)?;
    let test = gen_toy(proto.n_test, proto.d_x, proto.classes, a, b, proto.sigma0, seed + 1)?;
    let (train_x, test_x) = standardize(&train.features, &test.features);

    let cfg = DPTrainConfig {
        clip_norm: 1e9,
        noise_multiplier: 0.0,
        sampling_rate: 1.0,
        steps: proto.epochs,
        learning_rate: proto.eta,
        batch_mode: BatchMode::Poisson,
        fault: FaultMode::None,
        seed,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(streams::TRAINING);
    let params0 = ModelParams::init(proto.d_x, proto.d_h, proto.classes, None, &mut rng);
    let batch = Batch::new(train_x.clone(), train.labels.clone())?;
    let (model, _) = dp::train(&params0, &batch, &cfg, LossSpec::Main)?;

    let train_acc = accuracy(&model, &train_x, &train.labels)?;
    let test_acc = accuracy(&model, &test_x, &test.labels)?;
    let member_scores: Vec<f64> = nn::per_sample_losses(&model, &batch, LossSpec::Main)?
        .iter()
        .map(|l| -l)
        .collect();
    let test_batch = Batch::new(test_x, test.labels.clone())?;
    let nonmember_scores: Vec<f64> = nn::per_sample_losses(&model, &test_batch, LossSpec::Main)?
        .iter()
        .map(|l| -l)
        .collect();

    Ok(ToyCell {
        a,
        b,
        seed,
        train_acc,
        test_acc,
        gap: train_acc - test_acc,
        auc: auc(&member_scores, &nonmember_scores),
    })
}

/// Runs every (a, b) cell for every seed; flat list in grid-major order.
pub fn run_toy_insight(
    grid: &[(u8, f64)],
    proto: &ToyProtocol,
    seeds: &[u64],
) -> Result<Vec<ToyCell>> {
    let mut cells = Vec::with_capacity(grid.len() * seeds.len());
    for &(a, b) in grid {
        for &seed in seeds {
            cells.push(run_toy_cell(a, b, proto, seed)?);
        }
    }
    Ok(cells)
}

pub fn format_toy_table(cells: &[ToyCell]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:>3} {:>8} {:>6} {:>10} {:>9} {:>8} {:>7}",
        "a", "b", "seed", "train_acc", "test_acc", "gap", "auc");
    for c in cells {
        let _ = writeln!(
            out,
            "{:>3} {:>8} {:>6} {:>10.4} {:>9.4} {:>8.4} {:>7.4}",
            c.a, c.b, c.seed, c.train_acc, c.test_acc, c.gap, c.auc
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ToyProtocol {
        ToyProtocol {
            n_train: 64,
            n_test: 128,
            d_x: 8,
            classes: 4,
            sigma0: 1.0,
            d_h: 16,
            eta: 0.5,
            epochs: 30,
        }
    }

    #[test]
    fn cells_are_deterministic_per_seed() {
        let a = run_toy_cell(1, 10.0, &tiny(), 5).unwrap();
        let b = run_toy_cell(1, 10.0, &tiny(), 5).unwrap();
        assert_eq!(a.train_acc, b.train_acc);
        assert_eq!(a.auc, b.auc);
        let c = run_toy_cell(1, 10.0, &tiny(), 6).unwrap();
        assert!(a.auc != c.auc || a.train_acc != c.train_acc);
    }

    #[test]
    fn standardized_columns_have_unit_scale() {
        let m = Matrix::from_fn(50, 3, |i, j| (i * 7 % 13) as f64 * (j as f64 + 1.0) + 100.0);
        let (s, _) = standardize(&m, &m);
        for j in 0..3 {
            let mean: f64 = (0..50).map(|i| s.get(i, j)).sum::<f64>() / 50.0;
            let var: f64 = (0..50).map(|i| (s.get(i, j) - mean).powi(2)).sum::<f64>() / 50.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_columns_survive_standardization() {
        let m = Matrix::zeros(10, 2);
        let (s, _) = standardize(&m, &m);
        assert!(s.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn table_lists_one_line_per_cell() {
        let cells = run_toy_insight(&[(1, 0.0), (0, 5.0)], &tiny(), &[1, 2]).unwrap();
        assert_eq!(cells.len(), 4);
        let table = format_toy_table(&cells);
        assert_eq!(table.lines().count(), 5);
        assert!(table.lines().next().unwrap().contains("auc"));
    }
}
