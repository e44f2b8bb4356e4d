//! Audit dataset construction.
//!
//! Canaries are synthetic samples whose labels carry no information about
//! their features, so the only way a model can predict them is memorization.
//! Three dataset families live here: plain canary sets with independently
//! drawn comparison labels, the multi-task set that plants triggered samples
//! with secret tag sets inside a realistic base distribution, and a toy
//! law with a tunable label-correlated component used to study when
//! self-comparison beats retraining-style baselines.
//!
//! Every generator is deterministic in its seed, and datasets round-trip
//! through a columnar text format for replay across runs.

use crate::error::{Error, Result};
use crate::linalg::{dot, haar_orthogonal, Matrix};
use crate::streams;
use num_bigint::BigUint;
use num_traits::{One, ToPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::io::{BufRead, Write};

/// Feature geometry of a canary set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CanaryMode {
    /// i.i.d. Gaussian features at scale sigma0^2 per coordinate (an
    /// N(0, sigma0^2) draw scaled by sigma0 once more; the double scale is
    /// deliberate and documented in [`gen_synthetic`]).
    Gaussian,
    /// Unit-norm rows spread near-orthogonally over the sphere.
    Orthogonal,
}

impl CanaryMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CanaryMode::Gaussian => "gaussian",
            CanaryMode::Orthogonal => "orthogonal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(CanaryMode::Gaussian),
            "orthogonal" => Ok(CanaryMode::Orthogonal),
            other => Err(Error::config(format!(
                "unknown canary mode {other:?}, expected gaussian or orthogonal"
            ))),
        }
    }
}

/// m canaries with member labels and an independently drawn comparison
/// label per canary.
#[derive(Clone, Debug, PartialEq)]
pub struct AuditDataset {
    pub features: Matrix,
    pub member_labels: Vec<usize>,
    pub comp_labels: Vec<usize>,
    pub num_classes: usize,
    pub mode: CanaryMode,
    pub sigma0: f64,
    pub seed: u64,
}

impl AuditDataset {
    pub fn m(&self) -> usize {
        self.features.rows()
    }

    pub fn d_x(&self) -> usize {
        self.features.cols()
    }

    fn validate(&self) -> Result<()> {
        if self.m() == 0 {
            return Err(Error::config("audit dataset needs at least one canary"));
        }
        if self.member_labels.len() != self.m() || self.comp_labels.len() != self.m() {
            return Err(Error::config("label counts must match the canary count"));
        }
        if self
            .member_labels
            .iter()
            .chain(&self.comp_labels)
            .any(|&y| y >= self.num_classes)
        {
            return Err(Error::config("label out of class range"));
        }
        if !(self.sigma0.is_finite() && self.sigma0 > 0.0) {
            return Err(Error::config("sigma0 must be positive"));
        }
        if self.mode == CanaryMode::Orthogonal {
            for i in 0..self.m() {
                let norm = dot(self.features.row(i), self.features.row(i)).sqrt();
                if (norm - 1.0).abs() > 1e-6 {
                    return Err(Error::config(format!("orthogonal row {i} has norm {norm}")));
                }
            }
        }
        Ok(())
    }
}

/// A base dataset with m triggered rows carrying secret tag sets. Non-audit
/// rows are bit-identical to the underlying toy draw.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiTaskDataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    /// Sorted indices of the m triggered rows.
    pub audit_indices: Vec<usize>,
    /// One trigger row per audit index, in the same order.
    pub triggers: Matrix,
    pub member_tags: Vec<Vec<usize>>,
    pub comp_tags: Vec<Vec<usize>>,
    /// 1 on audit rows, 0 elsewhere.
    pub s_flags: Vec<u8>,
    pub num_classes: usize,
    pub tag_classes: usize,
    pub tag_size: usize,
    pub seed: u64,
}

impl MultiTaskDataset {
    pub fn n(&self) -> usize {
        self.features.rows()
    }

    pub fn m(&self) -> usize {
        self.audit_indices.len()
    }
}

/// Samples from `a*(y + sigma0*z1) + b*sigma0*z2` per coordinate: a mixes in
/// a component determined by the label, b a label-independent one.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub a: u8,
    pub b: f64,
    pub sigma0: f64,
    pub num_classes: usize,
    pub seed: u64,
}

/// Base-distribution constants for the multi-task builder: the stand-in for
/// real data is the toy law with the label component on and unit-weight
/// noise. The noise scale leaves class clouds close enough that fitting
/// mislabeled rows visibly distorts nearby decision boundaries.
pub const MULTITASK_BASE_B: f64 = 1.0;
pub const MULTITASK_BASE_SIGMA0: f64 = 1.0;

fn data_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(streams::DATA);
    rng
}

fn std_normal<R: Rng>(rng: &mut R) -> f64 {
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

/// Generates m canaries. Orthogonal mode: rotate unit-normalized Gaussian
/// rows by a Haar-random orthogonal matrix, giving unit-norm rows that are
/// near-orthogonal whenever m is not much larger than d_x. Gaussian mode
/// follows the construction literally: an N(0, sigma0^2) draw scaled by
/// sigma0 again, so the effective per-coordinate scale is sigma0^2.
/// Member and comparison labels are independent uniform draws over [C].
pub fn gen_synthetic(
    m: usize,
    d_x: usize,
    num_classes: usize,
    mode: CanaryMode,
    sigma0: f64,
    seed: u64,
) -> Result<AuditDataset> {
    if m == 0 || d_x == 0 || num_classes == 0 {
        return Err(Error::config("m, d_x and C must all be at least 1"));
    }
    if !(sigma0.is_finite() && sigma0 > 0.0) {
        return Err(Error::config(format!("sigma0 must be positive, got {sigma0}")));
    }
    let mut rng = data_rng(seed);
    let features = match mode {
        CanaryMode::Orthogonal => {
            let q = haar_orthogonal(d_x, &mut rng);
            let mut u = Matrix::randn(m, d_x, &mut rng);
            for i in 0..m {
                let row = u.row_mut(i);
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    row.iter_mut().for_each(|v| *v /= norm);
                }
            }
            u.matmul_bt(&q)
        }
        CanaryMode::Gaussian => {
            Matrix::from_fn(m, d_x, |_, _| sigma0 * (sigma0 * std_normal(&mut rng)))
        }
    };
    let member_labels = (0..m).map(|_| rng.gen_range(0..num_classes)).collect();
    let comp_labels = (0..m).map(|_| rng.gen_range(0..num_classes)).collect();
    let ds = AuditDataset { features, member_labels, comp_labels, num_classes, mode, sigma0, seed };
    ds.validate()?;
    Ok(ds)
}

/// Fresh independent uniform comparison labels for an existing canary set.
/// Collisions with member labels are kept: uniformity is what makes the
/// membership test valid, and a collision only blanks one canary's signal.
pub fn gen_comp_labels<R: Rng>(dataset: &AuditDataset, rng: &mut R) -> Vec<usize> {
    (0..dataset.m()).map(|_| rng.gen_range(0..dataset.num_classes)).collect()
}

/// Uniform k-subset of [n], sorted.
fn sample_subset<R: Rng>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let mut s = rand::seq::index::sample(rng, n, k).into_vec();
    s.sort_unstable();
    s
}

/// Builds the multi-task audit set: a toy base of `base_n` samples, m of
/// which get their leading `d_g` feature coordinates overwritten by a
/// per-sample N(0,1) trigger and a secret uniform H-subset of [C_e] as tag.
/// Each comparison tag is an independent fresh subset, resampled until it
/// differs from the member tag as a set.
#[allow(clippy::too_many_arguments)]
pub fn build_multitask(
    base_n: usize,
    m: usize,
    d_x: usize,
    num_classes: usize,
    tag_classes: usize,
    tag_size: usize,
    trigger_dim: usize,
    seed: u64,
) -> Result<MultiTaskDataset> {
    if m > base_n {
        return Err(Error::config(format!("m = {m} audit rows exceed base_n = {base_n}")));
    }
    if trigger_dim > d_x {
        return Err(Error::config(format!("trigger_dim {trigger_dim} exceeds d_x {d_x}")));
    }
    if tag_size == 0 || tag_size > tag_classes {
        return Err(Error::config(format!(
            "tag size {tag_size} must lie in [1, C_e = {tag_classes}]"
        )));
    }
    // The base draw comes first and consumes a fixed amount of randomness,
    // so two builds from one seed differing only in m share the same base.
    let base = gen_toy(base_n, d_x, num_classes, 1, MULTITASK_BASE_B, MULTITASK_BASE_SIGMA0, seed)?;
    let mut rng = data_rng(seed);
    rng.set_stream(streams::MISC); // base already used the data stream
    let audit_indices = sample_subset(base_n, m, &mut rng);
    let triggers = Matrix::randn(m, trigger_dim, &mut rng);

    let mut features = base.features;
    for (k, &i) in audit_indices.iter().enumerate() {
        features.row_mut(i)[..trigger_dim].copy_from_slice(triggers.row(k));
    }

    let mut member_tags = Vec::with_capacity(m);
    let mut comp_tags = Vec::with_capacity(m);
    for _ in 0..m {
        let member = sample_subset(tag_classes, tag_size, &mut rng);
        let comp = loop {
            let c = sample_subset(tag_classes, tag_size, &mut rng);
            if c != member {
                break c;
            }
            if tag_size == tag_classes {
                return Err(Error::config(
                    "H = C_e leaves a single possible tag set; comparison tags cannot differ",
                ));
            }
        };
        member_tags.push(member);
        comp_tags.push(comp);
    }

    let mut s_flags = vec![0u8; base_n];
    for &i in &audit_indices {
        s_flags[i] = 1;
    }

    Ok(MultiTaskDataset {
        features,
        labels: base.labels,
        audit_indices,
        triggers,
        member_tags,
        comp_tags,
        s_flags,
        num_classes,
        tag_classes,
        tag_size,
        seed,
    })
}

/// Collision statistics of the tag space.
#[derive(Clone, Debug, PartialEq)]
pub struct CollisionStats {
    /// Effective space size N = (C_e choose H).
    pub space: BigUint,
    /// Exact birthday probability that any two of m uniform draws collide.
    pub exact_collision: f64,
    /// Pair-count approximation m(m-1)/(2N).
    pub approx_collision: f64,
    /// Head-size factor relative to one output unit per distinct tag set.
    pub head_reduction: f64,
    /// Smallest space size keeping the approximate collision probability at
    /// or below 1% for this m.
    pub min_space_for_m: BigUint,
}

fn binomial_coefficient(n: u64, k: u64) -> BigUint {
    let k = k.min(n - k);
    let mut c = BigUint::one();
    for i in 0..k {
        c = c * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    c
}

/// How likely two of m uniform tag draws coincide, exactly and in the
/// pair-count approximation, plus the space sizes involved.
pub fn tag_collision_stats(m: u64, tag_classes: u64, tag_size: u64) -> CollisionStats {
    assert!(
        tag_size >= 1 && tag_size <= tag_classes,
        "tag size must lie in [1, C_e]"
    );
    let space = binomial_coefficient(tag_classes, tag_size);
    let n_f64 = space.to_f64().unwrap_or(f64::INFINITY);
    let exact_collision = if BigUint::from(m) > space {
        1.0
    } else if m < 2 {
        0.0
    } else {
        // 1 - prod_{i=1}^{m-1} (1 - i/N), summed in log space.
        let log_keep: f64 = (1..m).map(|i| (-(i as f64) / n_f64).ln_1p()).sum();
        -log_keep.exp_m1()
    };
    let approx_collision = (m as f64 * (m as f64 - 1.0) / (2.0 * n_f64)).min(1.0);
    // Approximation <= 0.01 needs N >= m(m-1)/0.02 = 50 m(m-1).
    let min_space_for_m = BigUint::from(50u64) * BigUint::from(m) * BigUint::from(m.saturating_sub(1));
    CollisionStats {
        head_reduction: 1.0 / n_f64,
        space,
        exact_collision,
        approx_collision,
        min_space_for_m,
    }
}

/// Toy samples: uniform labels over [C], every feature coordinate drawn as
/// `a*(y + sigma0*z1) + b*sigma0*z2` with fresh standard normals z1, z2.
pub fn gen_toy(
    n: usize,
    d: usize,
    num_classes: usize,
    a: u8,
    b: f64,
    sigma0: f64,
    seed: u64,
) -> Result<ToyDataset> {
    if n == 0 || d == 0 || num_classes == 0 {
        return Err(Error::config("n, d and C must all be at least 1"));
    }
    if a > 1 {
        return Err(Error::config(format!("a must be 0 or 1, got {a}")));
    }
    if !(b.is_finite() && b >= 0.0) {
        return Err(Error::config(format!("b must be finite >= 0, got {b}")));
    }
    if !(sigma0.is_finite() && sigma0 > 0.0) {
        return Err(Error::config(format!("sigma0 must be positive, got {sigma0}")));
    }
    let mut rng = data_rng(seed);
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..num_classes)).collect();
    let features = Matrix::from_fn(n, d, |i, _| {
        let z1 = std_normal(&mut rng);
        let z2 = std_normal(&mut rng);
        a as f64 * (labels[i] as f64 + sigma0 * z1) + b * sigma0 * z2
    });
    Ok(ToyDataset { features, labels, a, b, sigma0, num_classes, seed })
}

// ---------------------------------------------------------------------------
// Columnar text serialization
// ---------------------------------------------------------------------------
//
// Layout: a schema line, `key value` header lines, a `data` line, then one
// comma-separated row per sample. Multi-valued cells (tag sets, triggers)
// separate their elements with `|`; an absent cell is empty. Floats print in
// Rust's shortest round-trip form, so reading back is bit-exact.

const SCHEMA_LINE: &str = "dpaudit-dataset v1";

/// Any dataset the toolkit can persist.
#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Audit(AuditDataset),
    MultiTask(MultiTaskDataset),
    Toy(ToyDataset),
}

impl Dataset {
    pub fn kind(&self) -> &'static str {
        match self {
            Dataset::Audit(_) => "audit",
            Dataset::MultiTask(_) => "multitask",
            Dataset::Toy(_) => "toy",
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "{SCHEMA_LINE}")?;
        writeln!(w, "kind {}", self.kind())?;
        match self {
            Dataset::Audit(ds) => {
                writeln!(w, "m {}", ds.m())?;
                writeln!(w, "d_x {}", ds.d_x())?;
                writeln!(w, "C {}", ds.num_classes)?;
                writeln!(w, "mode {}", ds.mode.as_str())?;
                writeln!(w, "sigma0 {}", ds.sigma0)?;
                writeln!(w, "seed {}", ds.seed)?;
                writeln!(w, "data")?;
                for i in 0..ds.m() {
                    write_row(w, ds.features.row(i))?;
                    writeln!(w, ",{},{}", ds.member_labels[i], ds.comp_labels[i])?;
                }
            }
            Dataset::MultiTask(ds) => {
                writeln!(w, "m {}", ds.n())?;
                writeln!(w, "d_x {}", ds.features.cols())?;
                writeln!(w, "C {}", ds.num_classes)?;
                writeln!(w, "mode multitask")?;
                writeln!(w, "seed {}", ds.seed)?;
                writeln!(w, "audit_m {}", ds.m())?;
                writeln!(w, "C_e {}", ds.tag_classes)?;
                writeln!(w, "H {}", ds.tag_size)?;
                writeln!(w, "d_g {}", ds.triggers.cols())?;
                writeln!(w, "data")?;
                let mut audit_pos = vec![None; ds.n()];
                for (k, &i) in ds.audit_indices.iter().enumerate() {
                    audit_pos[i] = Some(k);
                }
                for i in 0..ds.n() {
                    write_row(w, ds.features.row(i))?;
                    write!(w, ",{},{}", ds.labels[i], ds.s_flags[i])?;
                    match audit_pos[i] {
                        Some(k) => {
                            write!(w, ",")?;
                            write_bar_floats(w, ds.triggers.row(k))?;
                            write!(w, ",")?;
                            write_bar_ints(w, &ds.member_tags[k])?;
                            write!(w, ",")?;
                            write_bar_ints(w, &ds.comp_tags[k])?;
                            writeln!(w)?;
                        }
                        None => writeln!(w, ",,,")?,
                    }
                }
            }
            Dataset::Toy(ds) => {
                writeln!(w, "m {}", ds.features.rows())?;
                writeln!(w, "d_x {}", ds.features.cols())?;
                writeln!(w, "C {}", ds.num_classes)?;
                writeln!(w, "mode toy")?;
                writeln!(w, "a {}", ds.a)?;
                writeln!(w, "b {}", ds.b)?;
                writeln!(w, "sigma0 {}", ds.sigma0)?;
                writeln!(w, "seed {}", ds.seed)?;
                writeln!(w, "data")?;
                for i in 0..ds.features.rows() {
                    write_row(w, ds.features.row(i))?;
                    writeln!(w, ",{}", ds.labels[i])?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl BufRead) -> Result<Dataset> {
        let mut lines = r.lines();
        let schema = next_line(&mut lines)?;
        if schema != SCHEMA_LINE {
            return Err(Error::parse(format!("unknown schema line {schema:?}")));
        }
        let mut header = std::collections::HashMap::new();
        loop {
            let line = next_line(&mut lines)?;
            if line == "data" {
                break;
            }
            let (key, value) = line
                .split_once(' ')
                .ok_or_else(|| Error::parse(format!("malformed header line {line:?}")))?;
            header.insert(key.to_string(), value.to_string());
        }
        let kind = req(&header, "kind")?;
        let n: usize = parse_field(&header, "m")?;
        let d_x: usize = parse_field(&header, "d_x")?;
        let classes: usize = parse_field(&header, "C")?;
        let seed: u64 = parse_field(&header, "seed")?;
        match kind.as_str() {
            "audit" => {
                let mode = CanaryMode::parse(&req(&header, "mode")?)?;
                let sigma0: f64 = parse_field(&header, "sigma0")?;
                let mut data = Vec::with_capacity(n * d_x);
                let mut member = Vec::with_capacity(n);
                let mut comp = Vec::with_capacity(n);
                for i in 0..n {
                    let line = next_line(&mut lines)?;
                    let cells: Vec<&str> = line.split(',').collect();
                    if cells.len() != d_x + 2 {
                        return Err(Error::parse(format!(
                            "row {i}: expected {} cells, got {}",
                            d_x + 2,
                            cells.len()
                        )));
                    }
                    for c in &cells[..d_x] {
                        data.push(parse_f64(c)?);
                    }
                    member.push(parse_usize(cells[d_x])?);
                    comp.push(parse_usize(cells[d_x + 1])?);
                }
                expect_end(&mut lines)?;
                let ds = AuditDataset {
                    features: Matrix::new(n, d_x, data)?,
                    member_labels: member,
                    comp_labels: comp,
                    num_classes: classes,
                    mode,
                    sigma0,
                    seed,
                };
                ds.validate().map_err(|e| Error::parse(e.to_string()))?;
                Ok(Dataset::Audit(ds))
            }
            "multitask" => {
                let audit_m: usize = parse_field(&header, "audit_m")?;
                let tag_classes: usize = parse_field(&header, "C_e")?;
                let tag_size: usize = parse_field(&header, "H")?;
                let d_g: usize = parse_field(&header, "d_g")?;
                let mut data = Vec::with_capacity(n * d_x);
                let mut labels = Vec::with_capacity(n);
                let mut s_flags = Vec::with_capacity(n);
                let mut audit_indices = Vec::new();
                let mut trig = Vec::new();
                let mut member_tags = Vec::new();
                let mut comp_tags = Vec::new();
                for i in 0..n {
                    let line = next_line(&mut lines)?;
                    let cells: Vec<&str> = line.split(',').collect();
                    if cells.len() != d_x + 5 {
                        return Err(Error::parse(format!(
                            "row {i}: expected {} cells, got {}",
                            d_x + 5,
                            cells.len()
                        )));
                    }
                    for c in &cells[..d_x] {
                        data.push(parse_f64(c)?);
                    }
                    labels.push(parse_usize(cells[d_x])?);
                    let flag = parse_usize(cells[d_x + 1])? as u8;
                    s_flags.push(flag);
                    let (t, mt, ct) = (cells[d_x + 2], cells[d_x + 3], cells[d_x + 4]);
                    if flag == 1 {
                        audit_indices.push(i);
                        let tvals = parse_bar_floats(t)?;
                        if tvals.len() != d_g {
                            return Err(Error::parse(format!("row {i}: trigger length mismatch")));
                        }
                        trig.extend(tvals);
                        member_tags.push(parse_bar_ints(mt)?);
                        comp_tags.push(parse_bar_ints(ct)?);
                    } else if !(t.is_empty() && mt.is_empty() && ct.is_empty()) {
                        return Err(Error::parse(format!("row {i}: non-audit row carries audit cells")));
                    }
                }
                expect_end(&mut lines)?;
                if audit_indices.len() != audit_m {
                    return Err(Error::parse(format!(
                        "header declares {audit_m} audit rows, found {}",
                        audit_indices.len()
                    )));
                }
                Ok(Dataset::MultiTask(MultiTaskDataset {
                    features: Matrix::new(n, d_x, data)?,
                    labels,
                    audit_indices,
                    triggers: Matrix::new(audit_m, d_g, trig)?,
                    member_tags,
                    comp_tags,
                    s_flags,
                    num_classes: classes,
                    tag_classes,
                    tag_size,
                    seed,
                }))
            }
            "toy" => {
                let a: u8 = parse_field(&header, "a")?;
                let b: f64 = parse_field(&header, "b")?;
                let sigma0: f64 = parse_field(&header, "sigma0")?;
                let mut data = Vec::with_capacity(n * d_x);
                let mut labels = Vec::with_capacity(n);
                for i in 0..n {
                    let line = next_line(&mut lines)?;
                    let cells: Vec<&str> = line.split(',').collect();
                    if cells.len() != d_x + 1 {
                        return Err(Error::parse(format!(
                            "row {i}: expected {} cells, got {}",
                            d_x + 1,
                            cells.len()
                        )));
                    }
                    for c in &cells[..d_x] {
                        data.push(parse_f64(c)?);
                    }
                    labels.push(parse_usize(cells[d_x])?);
                }
                expect_end(&mut lines)?;
                Ok(Dataset::Toy(ToyDataset {
                    features: Matrix::new(n, d_x, data)?,
                    labels,
                    a,
                    b,
                    sigma0,
                    num_classes: classes,
                    seed,
                }))
            }
            other => Err(Error::parse(format!("unknown dataset kind {other:?}"))),
        }
    }
}

fn write_row(w: &mut impl Write, vals: &[f64]) -> Result<()> {
    let mut first = true;
    for v in vals {
        if !first {
            write!(w, ",")?;
        }
        write!(w, "{v}")?;
        first = false;
    }
    Ok(())
}

fn write_bar_floats(w: &mut impl Write, vals: &[f64]) -> Result<()> {
    let mut first = true;
    for v in vals {
        if !first {
            write!(w, "|")?;
        }
        write!(w, "{v}")?;
        first = false;
    }
    Ok(())
}

fn write_bar_ints(w: &mut impl Write, vals: &[usize]) -> Result<()> {
    let mut first = true;
    for v in vals {
        if !first {
            write!(w, "|")?;
        }
        write!(w, "{v}")?;
        first = false;
    }
    Ok(())
}

fn next_line(lines: &mut impl Iterator<Item = std::io::Result<String>>) -> Result<String> {
    match lines.next() {
        Some(line) => Ok(line?),
        None => Err(Error::parse("unexpected end of file")),
    }
}

fn expect_end(lines: &mut impl Iterator<Item = std::io::Result<String>>) -> Result<()> {
    match lines.next() {
        None => Ok(()),
        Some(Ok(line)) if line.is_empty() => Ok(()),
        Some(_) => Err(Error::parse("trailing content after declared rows")),
    }
}

fn req(header: &std::collections::HashMap<String, String>, key: &str) -> Result<String> {
    header
        .get(key)
        .cloned()
        .ok_or_else(|| Error::parse(format!("missing header field {key:?}")))
}

fn parse_field<T: std::str::FromStr>(
    header: &std::collections::HashMap<String, String>,
    key: &str,
) -> Result<T> {
    req(header, key)?
        .parse()
        .map_err(|_| Error::parse(format!("header field {key:?} is malformed")))
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse::<f64>().map_err(|_| Error::parse(format!("bad float {s:?}")))
}

fn parse_usize(s: &str) -> Result<usize> {
    s.parse::<usize>().map_err(|_| Error::parse(format!("bad integer {s:?}")))
}

fn parse_bar_floats(s: &str) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split('|').map(parse_f64).collect()
}

fn parse_bar_ints(s: &str) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split('|').map(parse_usize).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthogonal_rows_have_unit_norm() {
        let ds = gen_synthetic(64, 48, 16, CanaryMode::Orthogonal, 1.0, 0).unwrap();
        for i in 0..ds.m() {
            let norm = dot(ds.features.row(i), ds.features.row(i)).sqrt();
            assert!((norm - 1.0).abs() < 1e-9, "row {i}: {norm}");
        }
    }

    #[test]
    fn orthogonal_rows_are_nearly_orthogonal() {
        let d_x = 1000;
        let ds = gen_synthetic(1000, d_x, 10, CanaryMode::Orthogonal, 1.0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut total = 0.0;
        let pairs = 1000;
        for _ in 0..pairs {
            let i = rng.gen_range(0..ds.m());
            let j = loop {
                let j = rng.gen_range(0..ds.m());
                if j != i {
                    break j;
                }
            };
            total += dot(ds.features.row(i), ds.features.row(j)).abs();
        }
        let mean_abs_cos = total / pairs as f64;
        assert!(
            mean_abs_cos <= 5.0 / (d_x as f64).sqrt(),
            "mean |cos| {mean_abs_cos} too large"
        );
    }

    #[test]
    fn labels_are_uniform() {
        let m = 100_000;
        let c = 10;
        let ds = gen_synthetic(m, 2, c, CanaryMode::Gaussian, 0.5, 3).unwrap();
        let mut counts = vec![0usize; c];
        for &y in &ds.member_labels {
            counts[y] += 1;
        }
        let expected = m as f64 / c as f64;
        let bound = 4.0 * (m as f64 * (1.0 / c as f64) * (1.0 - 1.0 / c as f64)).sqrt();
        for (y, &n) in counts.iter().enumerate() {
            assert!((n as f64 - expected).abs() < bound, "class {y}: {n}");
        }
    }

    #[test]
    fn gaussian_row_norms_concentrate_at_sigma0_sq_sqrt_d() {
        let sigma0 = 0.5;
        let d_x = 400;
        let ds = gen_synthetic(200, d_x, 4, CanaryMode::Gaussian, sigma0, 4).unwrap();
        let want = sigma0 * sigma0 * (d_x as f64).sqrt();
        let mean_norm = (0..ds.m())
            .map(|i| dot(ds.features.row(i), ds.features.row(i)).sqrt())
            .sum::<f64>()
            / ds.m() as f64;
        assert!((mean_norm - want).abs() / want < 0.05, "{mean_norm} vs {want}");
    }

    #[test]
    fn comp_labels_single_class_always_collide() {
        let ds = gen_synthetic(50, 4, 1, CanaryMode::Gaussian, 1.0, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let comp = gen_comp_labels(&ds, &mut rng);
        assert_eq!(comp, ds.member_labels);
    }

    #[test]
    fn comp_label_collision_rate_is_one_over_c() {
        let m = 10_000;
        let c = 1000;
        let ds = gen_synthetic(m, 2, c, CanaryMode::Gaussian, 1.0, 7).unwrap();
        let collisions = ds
            .member_labels
            .iter()
            .zip(&ds.comp_labels)
            .filter(|(a, b)| a == b)
            .count();
        let p = 1.0 / c as f64;
        let bound = 5.0 * (m as f64 * p * (1.0 - p)).sqrt();
        assert!(
            ((collisions as f64) - m as f64 * p).abs() < bound,
            "{collisions} collisions"
        );
    }

    #[test]
    fn comp_labels_are_uncorrelated_with_member_labels() {
        let m = 100_000;
        let ds = gen_synthetic(m, 1, 10, CanaryMode::Gaussian, 1.0, 8).unwrap();
        let mean = |v: &[usize]| v.iter().sum::<usize>() as f64 / v.len() as f64;
        let (ma, mb) = (mean(&ds.member_labels), mean(&ds.comp_labels));
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for i in 0..m {
            let da = ds.member_labels[i] as f64 - ma;
            let db = ds.comp_labels[i] as f64 - mb;
            cov += da * db;
            va += da * da;
            vb += db * db;
        }
        let corr = cov / (va.sqrt() * vb.sqrt());
        assert!(corr.abs() < 0.01, "correlation {corr}");
    }

    #[test]
    fn generators_are_deterministic_per_seed() {
        let a = gen_synthetic(20, 8, 4, CanaryMode::Orthogonal, 1.0, 9).unwrap();
        let b = gen_synthetic(20, 8, 4, CanaryMode::Orthogonal, 1.0, 9).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic(20, 8, 4, CanaryMode::Orthogonal, 1.0, 10).unwrap();
        assert_ne!(a.features.data(), c.features.data());

        let t1 = gen_toy(30, 3, 5, 1, 2.0, 0.1, 11).unwrap();
        let t2 = gen_toy(30, 3, 5, 1, 2.0, 0.1, 11).unwrap();
        assert_eq!(t1, t2);

        let m1 = build_multitask(40, 10, 6, 4, 12, 3, 2, 12).unwrap();
        let m2 = build_multitask(40, 10, 6, 4, 12, 3, 2, 12).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn multitask_without_audit_rows_is_plain() {
        let ds = build_multitask(25, 0, 4, 3, 10, 2, 2, 13).unwrap();
        assert!(ds.audit_indices.is_empty());
        assert!(ds.member_tags.is_empty());
        assert!(ds.s_flags.iter().all(|&s| s == 0));
    }

    #[test]
    fn multitask_full_overwrite_boundary() {
        let n = 15;
        let d = 5;
        let ds = build_multitask(n, n, d, 3, 10, 2, d, 14).unwrap();
        assert_eq!(ds.audit_indices, (0..n).collect::<Vec<_>>());
        for (k, &i) in ds.audit_indices.iter().enumerate() {
            assert_eq!(ds.features.row(i), ds.triggers.row(k), "row {i} not fully overwritten");
        }
        assert!(ds.s_flags.iter().all(|&s| s == 1));
    }

    #[test]
    fn multitask_preserves_non_audit_rows() {
        // Same seed, different m: the base draw is shared, so rows outside
        // the audit set must be bit-identical.
        let with_audit = build_multitask(60, 20, 5, 4, 16, 4, 3, 15).unwrap();
        let plain = build_multitask(60, 0, 5, 4, 16, 4, 3, 15).unwrap();
        let audit: std::collections::HashSet<_> = with_audit.audit_indices.iter().collect();
        for i in 0..60 {
            if !audit.contains(&i) {
                assert_eq!(with_audit.features.row(i), plain.features.row(i), "row {i}");
            }
            assert_eq!(with_audit.labels[i], plain.labels[i], "label {i}");
        }
    }

    #[test]
    fn multitask_tags_differ_and_have_fixed_size() {
        let ds = build_multitask(80, 30, 4, 3, 20, 5, 2, 16).unwrap();
        for k in 0..30 {
            assert_eq!(ds.member_tags[k].len(), 5);
            assert_eq!(ds.comp_tags[k].len(), 5);
            assert_ne!(ds.member_tags[k], ds.comp_tags[k], "tag pair {k} collided");
            assert!(ds.member_tags[k].windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn multitask_member_tags_stay_distinct_across_seeds() {
        // Space (100 choose 50) ~ 1e29 makes a birthday collision among
        // 1000 draws essentially impossible.
        for seed in 0..20 {
            let ds = build_multitask(1000, 1000, 2, 2, 100, 50, 1, seed).unwrap();
            let distinct: std::collections::HashSet<_> = ds.member_tags.iter().collect();
            assert_eq!(distinct.len(), 1000, "seed {seed} produced a collision");
        }
    }

    #[test]
    fn collision_stats_trivial_and_example_values() {
        let one = tag_collision_stats(1, 10, 2);
        assert_eq!(one.exact_collision, 0.0);

        // H = 1, C_e = 1e6: space is exactly 1e6.
        let s = tag_collision_stats(100, 1_000_000, 1);
        assert_eq!(s.space, BigUint::from(1_000_000u64));
        assert!((s.approx_collision - 0.00495).abs() < 1e-10);
        assert!((s.exact_collision - s.approx_collision).abs() / s.exact_collision < 0.01);
        assert!((s.exact_collision - 0.004938).abs() < 1e-5);
        assert_eq!(s.head_reduction, 1e-6);
        assert_eq!(s.min_space_for_m, BigUint::from(50u64 * 100 * 99));
    }

    #[test]
    fn collision_space_peaks_at_half() {
        for ce in (2..=30u64).step_by(2) {
            let mut best_h = 0;
            let mut best = BigUint::one();
            for h in 1..=ce {
                let n = binomial_coefficient(ce, h);
                if n > best {
                    best = n;
                    best_h = h;
                }
            }
            assert_eq!(best_h, ce / 2, "C_e = {ce}");
        }
    }

    #[test]
    fn collision_certain_when_space_smaller_than_m() {
        let s = tag_collision_stats(10, 3, 1);
        assert_eq!(s.exact_collision, 1.0);
    }

    #[test]
    fn toy_independent_mode_has_classless_means() {
        let n = 40_000;
        let c = 4;
        let ds = gen_toy(n, 1, c, 0, 1.0, 0.5, 17).unwrap();
        let global: f64 = ds.features.data().iter().sum::<f64>() / n as f64;
        let sd = 0.5; // b * sigma0
        for y in 0..c {
            let vals: Vec<f64> = (0..n)
                .filter(|&i| ds.labels[i] == y)
                .map(|i| ds.features.row(i)[0])
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let bound = 4.0 * sd / (vals.len() as f64).sqrt();
            assert!((mean - global).abs() < bound + 4.0 * sd / (n as f64).sqrt(), "class {y}");
        }
    }

    #[test]
    fn toy_label_mode_centers_classes_at_labels() {
        let n = 20_000;
        let c = 4;
        let sigma0 = 0.1;
        let ds = gen_toy(n, 1, c, 1, 0.0, sigma0, 18).unwrap();
        for y in 0..c {
            let vals: Vec<f64> = (0..n)
                .filter(|&i| ds.labels[i] == y)
                .map(|i| ds.features.row(i)[0])
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let bound = 4.0 * sigma0 / (vals.len() as f64).sqrt();
            assert!((mean - y as f64).abs() < bound, "class {y}: {mean}");
        }
    }

    #[test]
    fn toy_heavy_noise_dominates_within_class_variance() {
        let n = 50_000;
        let sigma0 = 0.1;
        let b = 50.0;
        let ds = gen_toy(n, 1, 2, 1, b, sigma0, 19).unwrap();
        let want = (1.0 + b * b) * sigma0 * sigma0;
        for y in 0..2 {
            let vals: Vec<f64> = (0..n)
                .filter(|&i| ds.labels[i] == y)
                .map(|i| ds.features.row(i)[0])
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var =
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert!((var - want).abs() / want < 0.1, "class {y}: var {var} vs {want}");
        }
    }

    #[test]
    fn validation_rejects_bad_requests() {
        assert!(gen_synthetic(0, 4, 2, CanaryMode::Gaussian, 1.0, 0).is_err());
        assert!(gen_synthetic(4, 4, 2, CanaryMode::Gaussian, 0.0, 0).is_err());
        assert!(gen_toy(10, 1, 2, 2, 1.0, 0.1, 0).is_err());
        assert!(gen_toy(10, 1, 2, 1, -1.0, 0.1, 0).is_err());
        assert!(build_multitask(5, 6, 4, 2, 10, 2, 2, 0).is_err(), "m > base_n");
        assert!(build_multitask(5, 2, 4, 2, 10, 11, 2, 0).is_err(), "H > C_e");
        assert!(build_multitask(5, 2, 4, 2, 10, 2, 5, 0).is_err(), "d_g > d_x");
    }

    #[test]
    fn audit_dataset_round_trips_exactly() {
        let ds = gen_synthetic(12, 7, 5, CanaryMode::Orthogonal, 1.0, 20).unwrap();
        let mut buf = Vec::new();
        Dataset::Audit(ds.clone()).write_to(&mut buf).unwrap();
        let back = Dataset::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, Dataset::Audit(ds));
    }

    #[test]
    fn multitask_dataset_round_trips_exactly() {
        let ds = build_multitask(30, 8, 5, 3, 12, 3, 2, 21).unwrap();
        let mut buf = Vec::new();
        Dataset::MultiTask(ds.clone()).write_to(&mut buf).unwrap();
        let back = Dataset::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, Dataset::MultiTask(ds));
    }

    #[test]
    fn toy_dataset_round_trips_exactly() {
        let ds = gen_toy(9, 3, 4, 1, 2.5, 0.1, 22).unwrap();
        let mut buf = Vec::new();
        Dataset::Toy(ds.clone()).write_to(&mut buf).unwrap();
        let back = Dataset::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, Dataset::Toy(ds));
    }

    #[test]
    fn reader_rejects_malformed_input() {
        let cases: &[&str] = &[
            "",
            "wrong schema\n",
            "dpaudit-dataset v1\nkind audit\n",
            "dpaudit-dataset v1\nkind audit\nm 1\nd_x 2\nC 2\nmode gaussian\nsigma0 1\nseed 0\ndata\n1.0\n",
            "dpaudit-dataset v1\nkind audit\nm 2\nd_x 1\nC 2\nmode gaussian\nsigma0 1\nseed 0\ndata\n1.0,0,1\n",
            "dpaudit-dataset v1\nkind mystery\nm 1\nd_x 1\nC 2\nseed 0\ndata\n1.0,0\n",
        ];
        for (i, case) in cases.iter().enumerate() {
            let got = Dataset::read_from(&mut case.as_bytes());
            assert!(got.is_err(), "case {i} should fail");
        }
    }

    #[test]
    fn reader_validates_label_ranges() {
        let text = "dpaudit-dataset v1\nkind audit\nm 1\nd_x 1\nC 2\nmode gaussian\nsigma0 1\nseed 0\ndata\n1.0,5,0\n";
        assert!(matches!(
            Dataset::read_from(&mut text.as_bytes()),
            Err(Error::Parse(_))
        ));
    }
}
