//! The 2-layer ReLU network with exact analytic per-sample gradients.
//!
//! The audited model is `logits = ReLU(x·W1 + b1)·W2 + b2`, optionally with a
//! second linear head on the shared hidden layer that scores tag classes.
//! Per-sample gradients are what DP-SGD clips, so they are first-class here:
//! [`per_sample_grads`] materializes one gradient set per example, and
//! `grad_pieces` exposes the rank-1 factors (each example's gradient is an
//! outer product of its input/hidden row with a backpropagated row) that the
//! training loop aggregates without materializing per-example tensors.

use crate::error::{Error, Result};
use crate::linalg::{vec_axpy, Matrix};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Second linear head on the hidden layer; scores tag classes.
#[derive(Clone, Debug, PartialEq)]
pub struct TagHead {
    pub w: Matrix,
    pub b: Vec<f64>,
}

/// All trainable parameters. `w1` is d_x × d_h, `w2` is d_h × C; biases
/// match the output sides. Gradients reuse this type since they share shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    w1: Matrix,
    b1: Vec<f64>,
    w2: Matrix,
    b2: Vec<f64>,
    tag_head: Option<TagHead>,
}

impl ModelParams {
    pub fn new(
        w1: Matrix,
        b1: Vec<f64>,
        w2: Matrix,
        b2: Vec<f64>,
        tag_head: Option<TagHead>,
    ) -> Result<Self> {
        if b1.len() != w1.cols() || w2.rows() != w1.cols() || b2.len() != w2.cols() {
            return Err(Error::config(format!(
                "inconsistent layer shapes: w1 {}x{}, b1 {}, w2 {}x{}, b2 {}",
                w1.rows(),
                w1.cols(),
                b1.len(),
                w2.rows(),
                w2.cols(),
                b2.len()
            )));
        }
        if let Some(head) = &tag_head {
            if head.w.rows() != w1.cols() || head.b.len() != head.w.cols() {
                return Err(Error::config(format!(
                    "tag head {}x{} with bias {} does not sit on hidden width {}",
                    head.w.rows(),
                    head.w.cols(),
                    head.b.len(),
                    w1.cols()
                )));
            }
        }
        if !(b1.iter().all(|v| v.is_finite()) && b2.iter().all(|v| v.is_finite())) {
            return Err(Error::numeric("non-finite bias entry"));
        }
        Ok(ModelParams { w1, b1, w2, b2, tag_head })
    }

    pub fn zeros(d_x: usize, d_h: usize, classes: usize, tag_classes: Option<usize>) -> Self {
        ModelParams {
            w1: Matrix::zeros(d_x, d_h),
            b1: vec![0.0; d_h],
            w2: Matrix::zeros(d_h, classes),
            b2: vec![0.0; classes],
            tag_head: tag_classes
                .map(|ce| TagHead { w: Matrix::zeros(d_h, ce), b: vec![0.0; ce] }),
        }
    }

    /// He-style initialization: W1 ~ N(0, 2/d_x) for the ReLU layer, output
    /// heads ~ N(0, 1/d_h) so initial logits are O(1) and the starting loss
    /// sits near ln C. Biases start at zero.
    pub fn init<R: Rng>(
        d_x: usize,
        d_h: usize,
        classes: usize,
        tag_classes: Option<usize>,
        rng: &mut R,
    ) -> Self {
        let s1 = (2.0 / d_x as f64).sqrt();
        let s2 = (1.0 / d_h as f64).sqrt();
        let mut draw = |rows: usize, cols: usize, s: f64| {
            Matrix::from_fn(rows, cols, |_, _| {
                s * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
            })
        };
        let w1 = draw(d_x, d_h, s1);
        let w2 = draw(d_h, classes, s2);
        let tag_head = tag_classes.map(|ce| TagHead { w: draw(d_h, ce, s2), b: vec![0.0; ce] });
        ModelParams { w1, b1: vec![0.0; d_h], w2, b2: vec![0.0; classes], tag_head }
    }

    pub fn d_x(&self) -> usize {
        self.w1.rows()
    }

    pub fn d_h(&self) -> usize {
        self.w1.cols()
    }

    pub fn classes(&self) -> usize {
        self.w2.cols()
    }

    pub fn tag_classes(&self) -> Option<usize> {
        self.tag_head.as_ref().map(|h| h.w.cols())
    }

    pub fn w1(&self) -> &Matrix {
        &self.w1
    }

    pub fn w2(&self) -> &Matrix {
        &self.w2
    }

    pub fn b1(&self) -> &[f64] {
        &self.b1
    }

    pub fn b2(&self) -> &[f64] {
        &self.b2
    }

    pub fn tag_head(&self) -> Option<&TagHead> {
        self.tag_head.as_ref()
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams::zeros(self.d_x(), self.d_h(), self.classes(), self.tag_classes())
    }

    pub fn num_params(&self) -> usize {
        let head = self
            .tag_head
            .as_ref()
            .map_or(0, |h| h.w.rows() * h.w.cols() + h.b.len());
        self.w1.rows() * self.w1.cols()
            + self.b1.len()
            + self.w2.rows() * self.w2.cols()
            + self.b2.len()
            + head
    }

    /// self += a * other. Shapes must match.
    pub fn axpy(&mut self, a: f64, other: &ModelParams) {
        self.w1.axpy(a, &other.w1);
        vec_axpy(&mut self.b1, a, &other.b1);
        self.w2.axpy(a, &other.w2);
        vec_axpy(&mut self.b2, a, &other.b2);
        match (&mut self.tag_head, &other.tag_head) {
            (Some(h), Some(o)) => {
                h.w.axpy(a, &o.w);
                vec_axpy(&mut h.b, a, &o.b);
            }
            (None, None) => {}
            _ => panic!("axpy across mismatched tag heads"),
        }
    }

    pub fn scale(&mut self, a: f64) {
        self.w1.scale(a);
        self.b1.iter_mut().for_each(|v| *v *= a);
        self.w2.scale(a);
        self.b2.iter_mut().for_each(|v| *v *= a);
        if let Some(h) = &mut self.tag_head {
            h.w.scale(a);
            h.b.iter_mut().for_each(|v| *v *= a);
        }
    }

    pub fn sq_norm(&self) -> f64 {
        let head = self
            .tag_head
            .as_ref()
            .map_or(0.0, |h| h.w.sq_norm() + h.b.iter().map(|v| v * v).sum::<f64>());
        self.w1.sq_norm()
            + self.b1.iter().map(|v| v * v).sum::<f64>()
            + self.w2.sq_norm()
            + self.b2.iter().map(|v| v * v).sum::<f64>()
            + head
    }

    /// Adds independent N(0, sigma^2) noise to every parameter.
    pub fn add_gaussian_noise<R: Rng>(&mut self, sigma: f64, rng: &mut R) {
        let mut perturb = |slice: &mut [f64]| {
            for v in slice {
                *v += sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
            }
        };
        perturb(self.w1.data_mut());
        perturb(&mut self.b1);
        perturb(self.w2.data_mut());
        perturb(&mut self.b2);
        if let Some(h) = &mut self.tag_head {
            perturb(h.w.data_mut());
            perturb(&mut h.b);
        }
    }

    #[cfg(test)]
    pub(crate) fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut blocks = vec![
            self.w1.data_mut(),
            self.b1.as_mut_slice(),
            self.w2.data_mut(),
            self.b2.as_mut_slice(),
        ];
        if let Some(h) = &mut self.tag_head {
            blocks.push(h.w.data_mut());
            blocks.push(h.b.as_mut_slice());
        }
        blocks
    }
}

/// A training or evaluation batch. `tags` and `member_flags` are only set in
/// multi-task mode; rows without a tag term carry an empty tag set and must
/// not be flagged 1 (the flag that gates the tag loss on).
#[derive(Clone, Debug)]
pub struct Batch {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub tags: Option<Vec<Vec<usize>>>,
    pub member_flags: Option<Vec<i8>>,
}

impl Batch {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::config(format!(
                "{} labels for {} feature rows",
                labels.len(),
                features.rows()
            )));
        }
        Ok(Batch { features, labels, tags: None, member_flags: None })
    }

    /// Attaches one tag set per row. Non-empty sets must share one size and
    /// be strictly increasing (sets, stored sorted).
    pub fn with_tags(mut self, tags: Vec<Vec<usize>>) -> Result<Self> {
        if tags.len() != self.labels.len() {
            return Err(Error::config("one tag set per example required"));
        }
        let mut size = None;
        for set in &tags {
            if set.is_empty() {
                continue;
            }
            if !set.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::config("tag sets must be strictly increasing"));
            }
            match size {
                None => size = Some(set.len()),
                Some(h) if h != set.len() => {
                    return Err(Error::config("all non-empty tag sets must share one size"))
                }
                _ => {}
            }
        }
        self.tags = Some(tags);
        Ok(self)
    }

    pub fn with_member_flags(mut self, flags: Vec<i8>) -> Result<Self> {
        if flags.len() != self.labels.len() {
            return Err(Error::config("one member flag per example required"));
        }
        if !flags.iter().all(|f| (-1..=1).contains(f)) {
            return Err(Error::config("member flags must lie in {-1, 0, 1}"));
        }
        self.member_flags = Some(flags);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copies the chosen rows into a new batch, preserving order.
    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            tags: self
                .tags
                .as_ref()
                .map(|t| idx.iter().map(|&i| t[i].clone()).collect()),
            member_flags: self
                .member_flags
                .as_ref()
                .map(|f| idx.iter().map(|&i| f[i]).collect()),
        }
    }
}

/// Which per-sample loss the gradients differentiate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossSpec {
    /// Cross-entropy on the class labels only.
    Main,
    /// Per-coordinate binary cross-entropy on the tag head only.
    Tag,
    /// Main plus `lambda` times the tag loss, the latter only on rows whose
    /// member flag is 1.
    Combined { lambda: f64 },
}

/// Runs the network. Returns (logits, hidden); the hidden activations feed
/// [`tag_forward`] without recomputation.
pub fn forward(params: &ModelParams, features: &Matrix) -> Result<(Matrix, Matrix)> {
    if features.cols() != params.d_x() {
        return Err(Error::config(format!(
            "feature width {} does not match input width {}",
            features.cols(),
            params.d_x()
        )));
    }
    let mut hidden = features.matmul(&params.w1);
    for i in 0..hidden.rows() {
        let row = hidden.row_mut(i);
        for (v, b) in row.iter_mut().zip(&params.b1) {
            *v = (*v + b).max(0.0);
        }
    }
    let mut logits = hidden.matmul(&params.w2);
    for i in 0..logits.rows() {
        let row = logits.row_mut(i);
        for (v, b) in row.iter_mut().zip(&params.b2) {
            *v += b;
        }
    }
    Ok((logits, hidden))
}

/// Tag-class logits from shared hidden activations.
pub fn tag_forward(params: &ModelParams, hidden: &Matrix) -> Result<Matrix> {
    let head = params
        .tag_head
        .as_ref()
        .ok_or_else(|| Error::config("tag_forward requires a tag head"))?;
    if hidden.cols() != head.w.rows() {
        return Err(Error::config("hidden width does not match tag head"));
    }
    let mut logits = hidden.matmul(&head.w);
    for i in 0..logits.rows() {
        let row = logits.row_mut(i);
        for (v, b) in row.iter_mut().zip(&head.b) {
            *v += b;
        }
    }
    Ok(logits)
}

/// Per-row cross-entropy `-log softmax(logits_i)[label_i]`, stabilized by
/// max subtraction so huge logits cannot overflow.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
    if labels.len() != logits.rows() {
        return Err(Error::config("one label per logit row required"));
    }
    let mut losses = Vec::with_capacity(labels.len());
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        if y >= row.len() {
            return Err(Error::config(format!(
                "label {y} out of range for {} classes",
                row.len()
            )));
        }
        if !row.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric(format!("non-finite logit in row {i}")));
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        losses.push(lse - row[y]);
    }
    Ok(losses)
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Training tag loss for one row: independent binary cross-entropy over all
/// tag coordinates, with the set's coordinates as the positive targets.
pub fn tag_bce_loss(tag_logits_row: &[f64], tag_set: &[usize]) -> f64 {
    let mut loss: f64 = tag_logits_row.iter().map(|&t| softplus(t)).sum();
    for &j in tag_set {
        loss -= tag_logits_row[j];
    }
    loss
}

/// Scoring loss for a candidate tag set: minus the summed log-probabilities
/// of its coordinates, `sum_j softplus(-t_j)`. Lower means the model rates
/// the set more likely.
pub fn tag_set_score_loss(tag_logits_row: &[f64], tag_set: &[usize]) -> f64 {
    tag_set.iter().map(|&j| softplus(-tag_logits_row[j])).sum()
}

/// Per-sample loss values under a loss spec; the scalar counterpart of
/// [`per_sample_grads`].
pub fn per_sample_losses(params: &ModelParams, batch: &Batch, spec: LossSpec) -> Result<Vec<f64>> {
    let (logits, hidden) = forward(params, &batch.features)?;
    let mut losses = match spec {
        LossSpec::Tag => vec![0.0; batch.len()],
        _ => cross_entropy(&logits, &batch.labels)?,
    };
    if let Some(weights) = tag_row_weights(params, batch, spec)? {
        let tag_logits = tag_forward(params, &hidden)?;
        let tags = batch.tags.as_ref().expect("checked by tag_row_weights");
        for i in 0..batch.len() {
            if weights[i] != 0.0 {
                losses[i] += weights[i] * tag_bce_loss(tag_logits.row(i), &tags[i]);
            }
        }
    }
    Ok(losses)
}

/// Per-row weight of the tag loss term, or None when the spec has no tag
/// term. Validates head/tags/flags presence and tag indices.
fn tag_row_weights(
    params: &ModelParams,
    batch: &Batch,
    spec: LossSpec,
) -> Result<Option<Vec<f64>>> {
    let lambda = match spec {
        LossSpec::Main => return Ok(None),
        LossSpec::Tag => 1.0,
        LossSpec::Combined { lambda } => {
            if !lambda.is_finite() || lambda < 0.0 {
                return Err(Error::config(format!("tag weight must be finite >= 0, got {lambda}")));
            }
            lambda
        }
    };
    let head = params
        .tag_head
        .as_ref()
        .ok_or_else(|| Error::config("tag loss requires a tag head"))?;
    let tags = batch
        .tags
        .as_ref()
        .ok_or_else(|| Error::config("tag loss requires batch tags"))?;
    let ce = head.w.cols();
    let mut weights = vec![0.0; batch.len()];
    for i in 0..batch.len() {
        let on = match spec {
            LossSpec::Tag => true,
            LossSpec::Combined { .. } => {
                let flags = batch
                    .member_flags
                    .as_ref()
                    .ok_or_else(|| Error::config("combined loss requires member flags"))?;
                flags[i] == 1
            }
            LossSpec::Main => unreachable!(),
        };
        if !on {
            continue;
        }
        if tags[i].is_empty() {
            return Err(Error::config(format!("row {i} has the tag loss on but no tag set")));
        }
        if tags[i].iter().any(|&j| j >= ce) {
            return Err(Error::config(format!("row {i} tag index out of range for {ce} classes")));
        }
        weights[i] = lambda;
    }
    Ok(Some(weights))
}

/// Rank-1 factors of every per-sample gradient plus each sample's exact
/// gradient square norm. For sample i the gradient blocks are
/// `x_i (x) d_act_i`, `d_act_i`, `hidden_i (x) d_logits_i`, `d_logits_i`,
/// and for the tag head `hidden_i (x) d_tag_i`, `d_tag_i`.
pub(crate) struct GradPieces {
    pub hidden: Matrix,
    pub d_act: Matrix,
    pub d_logits: Matrix,
    pub d_tag: Option<Matrix>,
    pub sq_norms: Vec<f64>,
}

pub(crate) fn grad_pieces(
    params: &ModelParams,
    batch: &Batch,
    spec: LossSpec,
) -> Result<GradPieces> {
    let (logits, hidden) = forward(params, &batch.features)?;
    let n = batch.len();
    let classes = params.classes();

    // d_logits = softmax - onehot(label); zero for tag-only runs.
    let mut d_logits = Matrix::zeros(n, classes);
    if spec != LossSpec::Tag {
        for i in 0..n {
            let row = logits.row(i);
            let y = batch.labels[i];
            if y >= classes {
                return Err(Error::config(format!("label {y} out of range")));
            }
            if !row.iter().all(|v| v.is_finite()) {
                return Err(Error::numeric(format!("non-finite logit in row {i}")));
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let out = d_logits.row_mut(i);
            for j in 0..classes {
                out[j] = (row[j] - max).exp() / denom;
            }
            out[y] -= 1.0;
        }
    }

    // d_tag = weight * (sigmoid - target) on rows with the tag loss on.
    let d_tag = match tag_row_weights(params, batch, spec)? {
        None => None,
        Some(weights) => {
            let tags = batch.tags.as_ref().expect("checked by tag_row_weights");
            let tag_logits = tag_forward(params, &hidden)?;
            let ce = tag_logits.cols();
            let mut dt = Matrix::zeros(n, ce);
            for i in 0..n {
                let w = weights[i];
                if w == 0.0 {
                    continue;
                }
                let trow = tag_logits.row(i);
                let out = dt.row_mut(i);
                for j in 0..ce {
                    out[j] = w * sigmoid(trow[j]);
                }
                for &j in &tags[i] {
                    out[j] -= w;
                }
            }
            Some(dt)
        }
    };

    // Backprop into the hidden layer, masked by ReLU activity. The stored
    // hidden value is already post-ReLU, so zero means inactive.
    let mut d_act = d_logits.matmul_bt(&params.w2);
    if let Some(dt) = &d_tag {
        let head = params.tag_head.as_ref().expect("tag gradients imply a head");
        let extra = dt.matmul_bt(&head.w);
        d_act.axpy(1.0, &extra);
    }
    for i in 0..n {
        let hrow = hidden.row(i);
        let drow = d_act.row_mut(i);
        for j in 0..drow.len() {
            if hrow[j] <= 0.0 {
                drow[j] = 0.0;
            }
        }
    }

    // |g_i|^2 from the rank-1 structure, exactly.
    let x_sq = batch.features.row_sq_norms();
    let h_sq = hidden.row_sq_norms();
    let a_sq = d_act.row_sq_norms();
    let s_sq = d_logits.row_sq_norms();
    let t_sq = d_tag.as_ref().map(|dt| dt.row_sq_norms());
    let sq_norms = (0..n)
        .map(|i| {
            let tag = t_sq.as_ref().map_or(0.0, |t| h_sq[i] * t[i] + t[i]);
            x_sq[i] * a_sq[i] + a_sq[i] + h_sq[i] * s_sq[i] + s_sq[i] + tag
        })
        .collect();

    Ok(GradPieces { hidden, d_act, d_logits, d_tag, sq_norms })
}

fn outer(a: &[f64], b: &[f64]) -> Matrix {
    Matrix::from_fn(a.len(), b.len(), |i, j| a[i] * b[j])
}

/// One gradient set per example, no cross-example aggregation. Memory is
/// B times the model size; meant for verification and small batches, the
/// training loop aggregates from `grad_pieces` instead.
pub fn per_sample_grads(
    params: &ModelParams,
    batch: &Batch,
    spec: LossSpec,
) -> Result<Vec<ModelParams>> {
    let pieces = grad_pieces(params, batch, spec)?;
    let mut grads = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let x = batch.features.row(i);
        let h = pieces.hidden.row(i);
        let da = pieces.d_act.row(i);
        let ds = pieces.d_logits.row(i);
        // Gradient sets mirror the full params shape: a tag-headed model
        // gets a zero tag block even when the loss has no tag term.
        let tag_head = match (&pieces.d_tag, params.tag_classes()) {
            (Some(dt), _) => {
                let dtr = dt.row(i);
                Some(TagHead { w: outer(h, dtr), b: dtr.to_vec() })
            }
            (None, Some(ce)) => {
                Some(TagHead { w: Matrix::zeros(params.d_h(), ce), b: vec![0.0; ce] })
            }
            (None, None) => None,
        };
        grads.push(ModelParams {
            w1: outer(x, da),
            b1: da.to_vec(),
            w2: outer(h, ds),
            b2: ds.to_vec(),
            tag_head,
        });
    }
    Ok(grads)
}

/// Argmax per row; ties go to the lowest index.
pub fn predict_labels(logits: &Matrix) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
