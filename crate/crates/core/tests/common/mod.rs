//! Independent oracles for cross-checking the library's numerics. Everything
//! here is written the slow, obvious way on purpose: exact rational
//! arithmetic, scalar loops, brute-force pair counting.

#![allow(dead_code)]

use dpaudit_core::linalg::Matrix;
use dpaudit_core::nn::{self, Batch, LossSpec, ModelParams, TagHead};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

/// P[X >= v] for X ~ Binomial(r, p), summed exactly. p is a double and
/// therefore an exact dyadic rational a/2^t, so the whole tail is an integer
/// numerator over the common denominator 2^(t*r).
pub fn rational_binom_tail(r: u64, p: f64, v: u64) -> f64 {
    if v == 0 {
        return 1.0;
    }
    if v > r {
        return 0.0;
    }
    let p_rat = BigRational::from_float(p).expect("p is finite");
    let a = p_rat.numer().clone();
    let d = p_rat.denom().clone();
    let b = &d - &a;
    if a.is_zero() {
        return 0.0; // v >= 1 but X = 0 almost surely
    }
    if b.is_zero() {
        return 1.0; // X = r almost surely and v <= r
    }
    // Start at k = v and walk upward, maintaining C(r,k), a^k and b^(r-k).
    let mut coeff = BigInt::one();
    for i in 0..v {
        coeff = coeff * BigInt::from(r - i) / BigInt::from(i + 1);
    }
    let mut apow = pow_bigint(&a, v);
    let mut bpow = pow_bigint(&b, r - v);
    let mut sum = BigInt::zero();
    for k in v..=r {
        sum += &coeff * &apow * &bpow;
        if k < r {
            coeff = coeff * BigInt::from(r - k) / BigInt::from(k + 1);
            apow *= &a;
            bpow /= &b; // exact: bpow is a power of b
        }
    }
    rational_to_f64(&BigRational::new(sum, pow_bigint(&d, r)))
}

fn pow_bigint(x: &BigInt, e: u64) -> BigInt {
    let mut acc = BigInt::one();
    let mut base = x.clone();
    let mut e = e;
    while e > 0 {
        if e & 1 == 1 {
            acc *= &base;
        }
        base = &base * &base;
        e >>= 1;
    }
    acc
}

/// Correctly rounded conversion of a non-negative rational to f64: scale the
/// quotient into [2^52, 2^53) using bit lengths, then round half to even.
pub fn rational_to_f64(x: &BigRational) -> f64 {
    assert!(!x.is_negative());
    if x.is_zero() {
        return 0.0;
    }
    let (mut num, mut den) = (x.numer().clone(), x.denom().clone());
    // One coarse shift by bit-length difference, then at most a couple of
    // single-bit corrections.
    let mut exp: i64 = num.bits() as i64 - den.bits() as i64 - 53;
    if exp > 0 {
        den <<= exp as u64;
    } else {
        num <<= (-exp) as u64;
    }
    let lo = BigInt::one() << 52;
    let hi = BigInt::one() << 53;
    let mantissa = loop {
        let q = &num / &den;
        if q >= hi {
            den <<= 1u32;
            exp += 1;
        } else if q < lo {
            num <<= 1u32;
            exp -= 1;
        } else {
            break q;
        }
    };
    let rem = &num - &mantissa * &den;
    let mantissa = mantissa.to_u64().expect("53-bit mantissa");
    let round_up = match (&rem << 1u32).cmp(&den) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Equal => mantissa & 1 == 1,
        std::cmp::Ordering::Less => false,
    };
    let mantissa = if round_up { mantissa + 1 } else { mantissa };
    // Scaling by an exact power of two rounds at most once. Below the normal
    // range a second rounding could intrude; oracle comparisons never go
    // there.
    if exp >= -1021 {
        mantissa as f64 * 2f64.powi(exp as i32)
    } else {
        (mantissa as f64 * 2f64.powi(-1000)) * 2f64.powi((exp + 1000) as i32)
    }
}

/// Forward pass with scalar loops, independent of the matrix kernels.
/// Returns (hidden, logits, tag_logits) per row.
pub fn naive_forward(
    params: &ModelParams,
    features: &Matrix,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Option<Vec<Vec<f64>>>) {
    let (d_x, d_h, c) = (params.d_x(), params.d_h(), params.classes());
    let mut hidden_rows = Vec::with_capacity(features.rows());
    let mut logit_rows = Vec::with_capacity(features.rows());
    let mut tag_rows = params.tag_head().map(|_| Vec::with_capacity(features.rows()));
    for i in 0..features.rows() {
        let x = features.row(i);
        let mut h = vec![0.0; d_h];
        for j in 0..d_h {
            let mut acc = params.b1()[j];
            for (k, &xk) in x.iter().enumerate().take(d_x) {
                acc += xk * params.w1().row(k)[j];
            }
            h[j] = acc.max(0.0);
        }
        let mut logits = vec![0.0; c];
        for (j, l) in logits.iter_mut().enumerate() {
            let mut acc = params.b2()[j];
            for (k, &hk) in h.iter().enumerate() {
                acc += hk * params.w2().row(k)[j];
            }
            *l = acc;
        }
        if let (Some(rows), Some(head)) = (tag_rows.as_mut(), params.tag_head()) {
            let ce = head.b.len();
            let mut t = vec![0.0; ce];
            for (j, tj) in t.iter_mut().enumerate() {
                let mut acc = head.b[j];
                for (k, &hk) in h.iter().enumerate() {
                    acc += hk * head.w.row(k)[j];
                }
                *tj = acc;
            }
            rows.push(t);
        }
        hidden_rows.push(h);
        logit_rows.push(logits);
    }
    (hidden_rows, logit_rows, tag_rows)
}

/// Flat view of every parameter coordinate: (block, len) pairs in a fixed
/// order matching `read_coord` / `with_perturbed_coord`.
pub fn param_block_lens(p: &ModelParams) -> Vec<usize> {
    let mut lens = vec![
        p.d_x() * p.d_h(),
        p.d_h(),
        p.d_h() * p.classes(),
        p.classes(),
    ];
    if let Some(ce) = p.tag_classes() {
        lens.push(p.d_h() * ce);
        lens.push(ce);
    }
    lens
}

pub fn read_coord(p: &ModelParams, block: usize, idx: usize) -> f64 {
    match block {
        0 => p.w1().data()[idx],
        1 => p.b1()[idx],
        2 => p.w2().data()[idx],
        3 => p.b2()[idx],
        4 => p.tag_head().unwrap().w.data()[idx],
        5 => p.tag_head().unwrap().b[idx],
        _ => unreachable!(),
    }
}

/// Clone of `p` with one coordinate shifted by `dh`, built through the
/// public constructor.
pub fn with_perturbed_coord(p: &ModelParams, block: usize, idx: usize, dh: f64) -> ModelParams {
    let mut w1 = p.w1().data().to_vec();
    let mut b1 = p.b1().to_vec();
    let mut w2 = p.w2().data().to_vec();
    let mut b2 = p.b2().to_vec();
    let mut tag = p.tag_head().map(|h| (h.w.data().to_vec(), h.b.clone()));
    match block {
        0 => w1[idx] += dh,
        1 => b1[idx] += dh,
        2 => w2[idx] += dh,
        3 => b2[idx] += dh,
        4 => tag.as_mut().unwrap().0[idx] += dh,
        5 => tag.as_mut().unwrap().1[idx] += dh,
        _ => unreachable!(),
    }
    let tag_head = tag.map(|(w, b)| {
        let ce = b.len();
        TagHead { w: Matrix::new(p.d_h(), ce, w).unwrap(), b }
    });
    ModelParams::new(
        Matrix::new(p.d_x(), p.d_h(), w1).unwrap(),
        b1,
        Matrix::new(p.d_h(), p.classes(), w2).unwrap(),
        b2,
        tag_head,
    )
    .unwrap()
}

/// Area under the ROC curve by brute-force pair comparison.
pub fn pairwise_auc(members: &[f64], nonmembers: &[f64]) -> f64 {
    let mut score = 0.0;
    for &a in members {
        for &b in nonmembers {
            if a > b {
                score += 1.0;
            } else if a == b {
                score += 0.5;
            }
        }
    }
    score / (members.len() as f64 * nonmembers.len() as f64)
}

/// Renyi divergence of one subsampled-Gaussian step by direct summation of
/// the binomial expectation in plain f64. Valid while the largest exponent
/// lambda(lambda-1)/(2 sigma^2) stays far from overflow.
pub fn rdp_direct(sigma: f64, q: f64, lambda: u64) -> f64 {
    let l = lambda as usize;
    // Pascal-triangle binomial coefficients.
    let mut row = vec![1.0f64];
    for _ in 0..l {
        let mut next = vec![1.0; row.len() + 1];
        for j in 1..row.len() {
            next[j] = row[j - 1] + row[j];
        }
        row = next;
    }
    let mut a = 0.0;
    for (k, c) in row.iter().enumerate() {
        let e = (k * k.saturating_sub(1)) as f64 / (2.0 * sigma * sigma);
        a += c * q.powi(k as i32) * (1.0 - q).powi((l - k) as i32) * e.exp();
    }
    a.ln() / (lambda as f64 - 1.0)
}

fn ks_pvalue(d: f64, ne: f64) -> f64 {
    let sqrt_ne = ne.sqrt();
    let lambda = (sqrt_ne + 0.12 + 0.11 / sqrt_ne) * d;
    let mut p = 0.0;
    for j in 1..=100 {
        let sign = if j % 2 == 1 { 2.0 } else { -2.0 };
        p += sign * (-2.0 * (j as f64) * (j as f64) * lambda * lambda).exp();
    }
    p.clamp(0.0, 1.0)
}

/// Two-sample Kolmogorov-Smirnov p-value (asymptotic).
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (n1, n2) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < n1 && j < n2 {
        if a[i] <= b[j] {
            i += 1;
        } else {
            j += 1;
        }
        d = d.max((i as f64 / n1 as f64 - j as f64 / n2 as f64).abs());
    }
    let ne = (n1 * n2) as f64 / (n1 + n2) as f64;
    ks_pvalue(d, ne)
}

/// One-sample Kolmogorov-Smirnov p-value against a supplied CDF.
pub fn ks_one_sample(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let n = s.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in s.iter().enumerate() {
        let f = cdf(x);
        d = d.max((f - i as f64 / n).abs());
        d = d.max(((i + 1) as f64 / n - f).abs());
    }
    ks_pvalue(d, n)
}

/// Abramowitz-Stegun 7.1.26 erf approximation, |error| < 1.5e-7.
pub fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

pub fn normal_cdf(x: f64, mean: f64, sd: f64) -> f64 {
    0.5 * (1.0 + erf((x - mean) / (sd * std::f64::consts::SQRT_2)))
}

/// Upper-tail chi-square p-value via the Wilson-Hilferty cube-root normal
/// approximation; adequate for the 0.01-level screens used in tests.
pub fn chi_square_pvalue(stat: f64, dof: usize) -> f64 {
    let k = dof as f64;
    let z = ((stat / k).powf(1.0 / 3.0) - (1.0 - 2.0 / (9.0 * k))) / (2.0 / (9.0 * k)).sqrt();
    1.0 - normal_cdf(z, 0.0, 1.0)
}

pub fn random_model(rng: &mut ChaCha8Rng, with_tag: bool) -> ModelParams {
    let d_x = rng.gen_range(2..=8);
    let d_h = rng.gen_range(2..=6);
    let c = rng.gen_range(2..=5);
    let ce = if with_tag { Some(rng.gen_range(3..=7)) } else { None };
    ModelParams::init(d_x, d_h, c, ce, rng)
}

/// Features resampled until every ReLU pre-activation clears the kink by a
/// margin, so finite differences stay on one linear piece.
pub fn smooth_features(params: &ModelParams, n: usize, rng: &mut ChaCha8Rng) -> Matrix {
    'outer: for _ in 0..200 {
        let features = Matrix::randn(n, params.d_x(), rng);
        for i in 0..n {
            let x = features.row(i);
            for j in 0..params.d_h() {
                let mut pre = params.b1()[j];
                for (k, &xk) in x.iter().enumerate() {
                    pre += xk * params.w1().row(k)[j];
                }
                if pre.abs() < 1e-3 {
                    continue 'outer;
                }
            }
        }
        return features;
    }
    panic!("no kink-free feature draw found");
}

pub fn random_batch(params: &ModelParams, spec: LossSpec, rng: &mut ChaCha8Rng) -> Batch {
    let n = rng.gen_range(1..=4);
    let features = smooth_features(params, n, rng);
    let labels = (0..n).map(|_| rng.gen_range(0..params.classes())).collect();
    let mut batch = Batch::new(features, labels).unwrap();
    if !matches!(spec, LossSpec::Main) {
        let ce = params.tag_classes().unwrap();
        let h = rng.gen_range(1..=2.min(ce));
        let tags: Vec<Vec<usize>> = (0..n)
            .map(|_| {
                let mut t = rand::seq::index::sample(rng, ce, h).into_vec();
                t.sort_unstable();
                t
            })
            .collect();
        batch = batch.with_tags(tags).unwrap();
        if matches!(spec, LossSpec::Combined { .. }) {
            let flags = (0..n).map(|_| rng.gen_range(-1i8..=1)).collect();
            batch = batch.with_member_flags(flags).unwrap();
        }
    }
    batch
}

pub fn max_fd_error(params: &ModelParams, batch: &Batch, spec: LossSpec) -> f64 {
    let grads = nn::per_sample_grads(params, batch, spec).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (block, len) in param_block_lens(params).iter().enumerate() {
        for idx in 0..*len {
            let plus = with_perturbed_coord(params, block, idx, h);
            let minus = with_perturbed_coord(params, block, idx, -h);
            let l_plus = nn::per_sample_losses(&plus, batch, spec).unwrap();
            let l_minus = nn::per_sample_losses(&minus, batch, spec).unwrap();
            for i in 0..batch.len() {
                let fd = (l_plus[i] - l_minus[i]) / (2.0 * h);
                let analytic = read_coord(&grads[i], block, idx);
                let err = (fd - analytic).abs() / analytic.abs().max(1e-3);
                worst = worst.max(err);
            }
        }
    }
    worst
}
