//! Converts membership guesses into privacy lower bounds.
//!
//! Two estimators are provided. The binomial-tail estimator tests, for a
//! candidate ε, whether the observed number of correct guesses W is
//! plausible under any (ε, δ)-DP trainer: the tail bound
//! `P[W >= v] <= β + α·m·δ` with `β = P[Binomial(r, e^ε/(e^ε+1)) >= v]` is
//! inverted by bisection to find the largest rejectable ε. The
//! Clopper-Pearson estimator upper-bounds the attack's false-positive and
//! false-negative rates with exact binomial intervals and maps them through
//! `ε_L = max{ln((1-ᾱ-δ)/β̄), ln((1-β̄-δ)/ᾱ), 0}`.
//!
//! Binomial tails are computed without normal approximation: exactly in
//! big-integer arithmetic for small trial counts, and by log-space summation
//! with compensated accumulation otherwise.

use crate::error::{Error, Result};
use num_bigint::BigUint;
use num_traits::{One, Zero};

/// Trial counts below this bound use exact big-rational summation; the
/// result is then a correctly rounded f64 of the true tail probability.
pub const EXACT_TAIL_MAX_R: u64 = 64;

/// Upper end of the ε search bracket; far beyond any desk-scale budget.
pub const EPS_SEARCH_MAX: f64 = 20.0;

/// Absolute bisection tolerance for ε searches.
pub const EPS_SEARCH_TOL: f64 = 1e-3;

/// Inputs of a lower-bound estimate: v correct guesses out of r made on m
/// canaries, at privacy slack δ and the given test confidence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EstimatorQuery {
    pub v: u64,
    pub r: u64,
    pub m: u64,
    pub delta: f64,
    pub confidence: f64,
}

impl EstimatorQuery {
    pub fn new(v: u64, r: u64, m: u64, delta: f64, confidence: f64) -> Result<Self> {
        if !(v <= r && r <= m) {
            return Err(Error::config(format!("need v <= r <= m, got v={v} r={r} m={m}")));
        }
        if !(0.0..1.0).contains(&delta) {
            return Err(Error::config(format!("delta must lie in [0,1), got {delta}")));
        }
        if !(delta.is_finite() && confidence.is_finite()) || !(0.0 < confidence && confidence < 1.0)
        {
            return Err(Error::config(format!("confidence must lie in (0,1), got {confidence}")));
        }
        Ok(EstimatorQuery { v, r, m, delta, confidence })
    }
}

/// Confusion counts of a guessing attack over T = sum of the four fields
/// trials (abstentions are not trials).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CPCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub true_neg: u64,
    pub false_neg: u64,
}

impl CPCounts {
    /// Tallies non-abstaining guesses against the true membership signs.
    /// Entries are +1/-1 for members/non-members; 0 guesses are skipped.
    pub fn from_signs(s: &[i8], guesses: &[i8]) -> Self {
        let mut c = CPCounts { true_pos: 0, false_pos: 0, true_neg: 0, false_neg: 0 };
        for (&si, &gi) in s.iter().zip(guesses) {
            match (gi, si) {
                (1, 1) => c.true_pos += 1,
                (1, -1) => c.false_pos += 1,
                (-1, -1) => c.true_neg += 1,
                (-1, 1) => c.false_neg += 1,
                _ => {}
            }
        }
        c
    }
}

/// Which lower-bound estimator an audit outcome should use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EstimatorKind {
    BinomialTail,
    ClopperPearson,
}

/// Clopper-Pearson ε estimate plus a flag for degenerate inputs
/// (no positive or no negative trials), which force ε to 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CpEstimate {
    pub epsilon: f64,
    pub degenerate: bool,
}

// ---------------------------------------------------------------------------
// Binomial tails
// ---------------------------------------------------------------------------

/// `P[X >= v]` for `X ~ Binomial(r, p)`.
///
/// Exact big-integer summation for `r <= EXACT_TAIL_MAX_R` (the f64 value of
/// p is treated as the exact dyadic rational it is, and rounding happens once
/// at the end); otherwise log-space summation of every term, which keeps
/// relative error near 1e-12 even at r = 10^6.
pub fn binom_tail_ge(r: u64, p: f64, v: u64) -> f64 {
    assert!((0.0..=1.0).contains(&p), "p must lie in [0,1], got {p}");
    assert!(v <= r + 1, "v must be at most r+1");
    if v == 0 {
        return 1.0;
    }
    if v > r {
        return 0.0;
    }
    if p == 0.0 {
        return 0.0; // v >= 1 here
    }
    if p == 1.0 {
        return 1.0; // X = r surely and v <= r
    }
    if r <= EXACT_TAIL_MAX_R {
        exact_tail_ge(r, p, v)
    } else {
        log_space_sum(r, p, v, r)
    }
}

/// `P[X <= k]`, the complementary side, by direct summation of the low terms.
pub fn binom_cdf_le(r: u64, p: f64, k: u64) -> f64 {
    assert!((0.0..=1.0).contains(&p), "p must lie in [0,1], got {p}");
    if k >= r {
        return 1.0;
    }
    if p == 0.0 {
        return 1.0;
    }
    if p == 1.0 {
        return 0.0; // k < r
    }
    log_space_sum(r, p, 0, k)
}

/// Exact dyadic decomposition of a float in [0, 1]: returns (a, s) with
/// p = a / 2^s.
fn dyadic(p: f64) -> (u64, u32) {
    debug_assert!((0.0..=1.0).contains(&p));
    let mut x = p;
    let mut s = 0u32;
    while x.fract() != 0.0 {
        x *= 2.0;
        s += 1;
    }
    (x as u64, s)
}

fn exact_tail_ge(r: u64, p: f64, v: u64) -> f64 {
    let (a, s) = dyadic(p);
    let big_a = BigUint::from(a);
    let big_b = (BigUint::one() << (s as u64)) - &big_a; // 2^s - a, exactly 1-p
    // Powers of a and b up to r.
    let mut apow = vec![BigUint::one()];
    let mut bpow = vec![BigUint::one()];
    for i in 1..=r as usize {
        apow.push(&apow[i - 1] * &big_a);
        bpow.push(&bpow[i - 1] * &big_b);
    }
    // Binomial coefficients via the multiplicative recurrence.
    let mut coeff = BigUint::one();
    let mut sum = BigUint::zero();
    for k in 0..=r {
        if k >= v {
            sum += &coeff * &apow[k as usize] * &bpow[(r - k) as usize];
        }
        if k < r {
            coeff = coeff * BigUint::from(r - k) / BigUint::from(k + 1);
        }
    }
    // Tail = sum / 2^(s*r).
    shifted_to_f64(&sum, s as u64 * r)
}

/// Correctly rounded conversion of `num / 2^shift` to f64 (ties to even).
fn shifted_to_f64(num: &BigUint, shift: u64) -> f64 {
    if num.is_zero() {
        return 0.0;
    }
    let bits = num.bits() as i64;
    let e = bits - 1 - shift as i64; // floor(log2 of the value)
    if e > 1024 {
        return f64::INFINITY;
    }
    if e < -1075 {
        return 0.0;
    }
    let ulp = (e - 52).max(-1074);
    // mant = round(num / 2^(shift + ulp)); drop counts bits cut off.
    let drop = shift as i64 + ulp;
    let mut mant: u64;
    if drop <= 0 {
        let widened = num << ((-drop) as u64);
        mant = widened.try_into().expect("mantissa fits u64");
    } else {
        let drop = drop as u64;
        let q: BigUint = num >> drop;
        mant = (&q).try_into().expect("mantissa fits u64");
        let round_bit = num.bit(drop - 1);
        if round_bit {
            let sticky = num.trailing_zeros().unwrap_or(0) < drop - 1;
            if sticky || mant & 1 == 1 {
                mant += 1;
            }
        }
    }
    let mut ulp = ulp;
    if mant == 1 << 53 {
        mant >>= 1;
        ulp += 1;
    }
    if ulp + 52 > 1023 {
        return f64::INFINITY;
    }
    mant as f64 * pow2(ulp)
}

/// 2^k as f64 for k in [-1074, 1023].
fn pow2(k: i64) -> f64 {
    debug_assert!((-1074..=1023).contains(&k));
    if k >= -1022 {
        f64::from_bits(((k + 1023) as u64) << 52)
    } else {
        f64::from_bits(1u64 << (k + 1074))
    }
}

/// Natural-log factorial table 0..=n with compensated accumulation.
fn ln_factorials(n: u64) -> Vec<f64> {
    let mut table = Vec::with_capacity(n as usize + 1);
    table.push(0.0);
    let mut sum = 0.0;
    let mut comp = 0.0;
    for k in 1..=n {
        let term = (k as f64).ln();
        let y = term - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
        table.push(sum);
    }
    table
}

/// `P[lo <= X <= hi]` in log space; every term summed, no approximation.
fn log_space_sum(r: u64, p: f64, lo: u64, hi: u64) -> f64 {
    debug_assert!(lo <= hi && hi <= r);
    debug_assert!(0.0 < p && p < 1.0);
    let lf = ln_factorials(r);
    let ln_p = p.ln();
    let ln_q = (-p).ln_1p();
    let ln_pmf = |k: u64| {
        lf[r as usize] - lf[k as usize] - lf[(r - k) as usize]
            + k as f64 * ln_p
            + (r - k) as f64 * ln_q
    };
    // The pmf is unimodal; anchor the sum at the largest term in range.
    let mode = ((r + 1) as f64 * p).floor() as u64;
    let anchor = ln_pmf(mode.clamp(lo, hi));
    let mut sum = 0.0;
    let mut comp = 0.0;
    for k in lo..=hi {
        let term = (ln_pmf(k) - anchor).exp();
        let y = term - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    (anchor.exp() * sum).clamp(0.0, 1.0)
}

// ---------------------------------------------------------------------------
// Guess-count test and ε search
// ---------------------------------------------------------------------------

/// P-value of observing at least `q.v` correct guesses under an
/// (ε, q.delta)-DP trainer: `β + α·m·δ` where β is the binomial tail at
/// success rate e^ε/(e^ε+1) and α = max_i (2/i)·P[v-i <= X < v].
pub fn guess_count_pvalue(q: &EstimatorQuery, eps: f64) -> f64 {
    assert!(eps >= 0.0, "eps must be non-negative");
    let p = 1.0 / (1.0 + (-eps).exp());
    let beta = binom_tail_ge(q.r, p, q.v);
    let mut pv = beta;
    if q.delta > 0.0 && q.v > 0 && p < 1.0 {
        pv += alpha_coefficient(q, p) * q.m as f64 * q.delta;
    }
    pv.clamp(0.0, 1.0)
}

/// max over i in 1..=m of (2/i) * P[v-i <= X < v], X ~ Binomial(r, p).
fn alpha_coefficient(q: &EstimatorQuery, p: f64) -> f64 {
    let v = q.v;
    // pmf over the window [max(0, v-m), v-1] by downward recurrence from v-1.
    let top = v - 1;
    let lf = ln_factorials(q.r);
    let ln_pmf_top = lf[q.r as usize] - lf[top as usize] - lf[(q.r - top) as usize]
        + top as f64 * p.ln()
        + (q.r - top) as f64 * (-p).ln_1p();
    let mut pmf = ln_pmf_top.exp();
    let mut cum = 0.0;
    let mut best = 0.0;
    for i in 1..=q.m {
        if i > v {
            // Window no longer grows and 2/i only shrinks.
            break;
        }
        let k = v - i; // index entering the window
        cum += pmf;
        if k > 0 {
            pmf *= (k as f64 * (1.0 - p)) / ((q.r - k + 1) as f64 * p);
        }
        let cand = 2.0 / i as f64 * cum;
        if cand > best {
            best = cand;
        }
    }
    best
}

/// Largest ε in [0, EPS_SEARCH_MAX] still rejected at the query's confidence,
/// found by bisection (the p-value grows with ε); 0 when even ε = 0 survives.
pub fn epsilon_lower_tail(q: &EstimatorQuery) -> f64 {
    let threshold = 1.0 - q.confidence;
    if guess_count_pvalue(q, 0.0) > threshold {
        return 0.0;
    }
    let mut lo = 0.0;
    let mut hi = EPS_SEARCH_MAX;
    if guess_count_pvalue(q, hi) <= threshold {
        return hi;
    }
    while hi - lo > EPS_SEARCH_TOL {
        let mid = 0.5 * (lo + hi);
        if guess_count_pvalue(q, mid) <= threshold {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// The bound a perfect attack would reach: every canary guessed, every guess
/// correct (v = r = m).
pub fn epsilon_optimal(m: u64, delta: f64, confidence: f64) -> f64 {
    let q = EstimatorQuery::new(m, m, m, delta, confidence)
        .expect("v = r = m is always a valid query");
    epsilon_lower_tail(&q)
}

// ---------------------------------------------------------------------------
// Clopper-Pearson
// ---------------------------------------------------------------------------

/// Smallest p with `P[Binomial(n, p) <= k] <= 1 - confidence`, by bisection
/// on the exact binomial CDF. The exact one-sided upper confidence limit.
pub fn clopper_pearson_upper(k: u64, n_trials: u64, confidence: f64) -> f64 {
    assert!(n_trials >= 1, "need at least one trial");
    assert!(k <= n_trials, "k must be at most n_trials");
    assert!(0.0 < confidence && confidence < 1.0, "confidence must lie in (0,1)");
    if k == n_trials {
        return 1.0;
    }
    let gamma = 1.0 - confidence;
    let mut lo = 0.0; // CDF(lo) = 1 > gamma
    let mut hi = 1.0; // CDF(hi) = 0 <= gamma since k < n
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if binom_cdf_le(n_trials, mid, k) <= gamma {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo < 1e-13 {
            break;
        }
    }
    hi
}

/// ε lower bound from attack error rates, Clopper-Pearson style.
///
/// Upper-bounds the false-positive rate over the negative trials and the
/// false-negative rate over the positive trials, splitting the confidence
/// budget evenly across the two one-sided intervals, then evaluates
/// `max{ln((1-ᾱ-δ)/β̄), ln((1-β̄-δ)/ᾱ), 0}`.
pub fn epsilon_lower_cp(counts: &CPCounts, delta: f64, confidence: f64) -> CpEstimate {
    let positives = counts.true_pos + counts.false_neg;
    let negatives = counts.true_neg + counts.false_pos;
    if positives == 0 || negatives == 0 {
        return CpEstimate { epsilon: 0.0, degenerate: true };
    }
    let side = 1.0 - (1.0 - confidence) / 2.0;
    let alpha_bar = clopper_pearson_upper(counts.false_pos, negatives, side);
    let beta_bar = clopper_pearson_upper(counts.false_neg, positives, side);
    let t1 = ((1.0 - alpha_bar - delta) / beta_bar).ln();
    let t2 = ((1.0 - beta_bar - delta) / alpha_bar).ln();
    let eps = t1.max(t2).max(0.0);
    CpEstimate { epsilon: if eps.is_nan() { 0.0 } else { eps }, degenerate: false }
}

// ---------------------------------------------------------------------------
// AUC
// ---------------------------------------------------------------------------

/// Mann-Whitney AUC of member scores against non-member scores, counting
/// ties as 1/2 via midranks. Panics on empty inputs or non-finite scores.
pub fn auc(scores_members: &[f64], scores_nonmembers: &[f64]) -> f64 {
    assert!(
        !scores_members.is_empty() && !scores_nonmembers.is_empty(),
        "auc requires nonempty score lists"
    );
    let n1 = scores_members.len();
    let n2 = scores_nonmembers.len();
    let mut all: Vec<(f64, bool)> = scores_members
        .iter()
        .map(|&s| (s, true))
        .chain(scores_nonmembers.iter().map(|&s| (s, false)))
        .collect();
    assert!(all.iter().all(|(s, _)| s.is_finite()), "scores must be finite");
    all.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));
    let mut rank_sum_members = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // Positions i..j share the midrank (1-based average).
        let midrank = (i + 1 + j) as f64 / 2.0;
        for item in &all[i..j] {
            if item.1 {
                rank_sum_members += midrank;
            }
        }
        i = j;
    }
    let u = rank_sum_members - (n1 * (n1 + 1)) as f64 / 2.0;
    u / (n1 as f64 * n2 as f64)
}
