//! Basic MIL module: two-stream proposal scoring, the image-level
//! cross-entropy loss, proposal clustering and the cluster-weighted
//! refinement loss.
//!
//! Every loss returns its analytic gradient next to the value. The
//! `*_backward` helpers push gradients from probabilities back to logits so
//! the toy trainer can assemble a full chain without an autodiff engine.

use ndarray::{Array2, ArrayView1, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

/// Lower/upper clamp applied to every probability before it enters a log.
pub const PROB_EPS: f64 = 1e-8;

/// Proposals scoring below this never open an additional cluster.
pub const CLUSTER_CENTER_FLOOR: f64 = 0.01;

/// Default IoU for joining a cluster centre.
pub const DEFAULT_CLUSTER_IOU: f64 = 0.5;

/// Number of refinement branches.
pub const DEFAULT_REFINEMENT_BRANCHES: usize = 3;

const NORM_TOL: f64 = 1e-9;

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// What the entries of a [`ScoreMatrix`] represent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreKind {
    /// Unnormalised real scores.
    Logits,
    /// Each column (proposal) sums to one over classes.
    ClassNormalized,
    /// Each row (class) sums to one over proposals.
    ProposalNormalized,
    /// Entries in `[0, 1]` without a sum constraint.
    Probabilities,
}

/// Class-by-proposal grid of scores: `rows` classes (optionally plus a
/// trailing background row) and `cols` proposals.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    values: Array2<f64>,
    kind: ScoreKind,
}

impl ScoreMatrix {
    /// Wraps `values`, checking the invariants implied by `kind`.
    pub fn new(values: Array2<f64>, kind: ScoreKind) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("score matrix has non-finite entries"));
        }
        if kind != ScoreKind::Logits {
            if let Some(v) = values
                .iter()
                .find(|&&v| !(-NORM_TOL..=1.0 + NORM_TOL).contains(&v))
            {
                return Err(Error::input(format!("probability entry {v} outside [0, 1]")));
            }
        }
        let axis = match kind {
            ScoreKind::ClassNormalized => Some(Axis(0)),
            ScoreKind::ProposalNormalized => Some(Axis(1)),
            _ => None,
        };
        if let Some(axis) = axis {
            if values.len_of(axis) > 0 {
                for (i, s) in values.sum_axis(axis).iter().enumerate() {
                    if (s - 1.0).abs() > NORM_TOL {
                        return Err(Error::input(format!(
                            "{kind:?} matrix: slice {i} sums to {s}"
                        )));
                    }
                }
            }
        }
        Ok(Self { values, kind })
    }

    /// Builds a matrix from class rows.
    pub fn from_rows(rows: &[Vec<f64>], kind: ScoreKind) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_cols) {
            return Err(Error::input("score rows have unequal lengths"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let values = Array2::from_shape_vec((n_rows, n_cols), flat)
            .map_err(|e| Error::input(e.to_string()))?;
        Self::new(values, kind)
    }

    pub fn logits(values: Array2<f64>) -> Result<Self> {
        Self::new(values, ScoreKind::Logits)
    }

    pub fn kind(&self) -> ScoreKind {
        self.kind
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    #[inline]
    pub fn get(&self, class: usize, proposal: usize) -> f64 {
        self.values[[class, proposal]]
    }

    pub fn row(&self, class: usize) -> ArrayView1<'_, f64> {
        self.values.row(class)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    /// Transpose; row/column normalisation tags swap accordingly.
    pub fn transpose(&self) -> ScoreMatrix {
        let kind = match self.kind {
            ScoreKind::ClassNormalized => ScoreKind::ProposalNormalized,
            ScoreKind::ProposalNormalized => ScoreKind::ClassNormalized,
            k => k,
        };
        ScoreMatrix {
            values: self.values.t().to_owned(),
            kind,
        }
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.values.rows().into_iter().map(|r| r.to_vec()).collect()
    }
}

/// Binary image-level class indicators.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "Vec<u8>", try_from = "Vec<u8>")]
pub struct ImageLabel(Vec<bool>);

impl ImageLabel {
    pub fn new(indicators: Vec<bool>) -> Self {
        Self(indicators)
    }

    /// Label with exactly the given positive classes out of `num_classes`.
    pub fn from_positives(num_classes: usize, positives: &[usize]) -> Result<Self> {
        let mut y = vec![false; num_classes];
        for &c in positives {
            *y.get_mut(c)
                .ok_or_else(|| Error::input(format!("class {c} out of range")))? = true;
        }
        Ok(Self(y))
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn is_positive(&self, class: usize) -> bool {
        self.0.get(class).copied().unwrap_or(false)
    }

    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &p)| p).map(|(c, _)| c)
    }

    pub fn has_positive(&self) -> bool {
        self.0.iter().any(|&p| p)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }
}

impl From<ImageLabel> for Vec<u8> {
    fn from(y: ImageLabel) -> Self {
        y.0.into_iter().map(u8::from).collect()
    }
}

impl TryFrom<Vec<u8>> for ImageLabel {
    type Error = Error;

    fn try_from(v: Vec<u8>) -> Result<Self> {
        v.into_iter()
            .map(|b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::input(format!("label entry {other} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(ImageLabel)
    }
}

/// A scalar loss together with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrad<G> {
    pub loss: f64,
    pub grad: G,
}

fn softmax_along(x: &ScoreMatrix, axis: Axis, kind: ScoreKind) -> Result<ScoreMatrix> {
    if x.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("softmax input has non-finite entries"));
    }
    let mut out = x.values.clone();
    for mut lane in out.lanes_mut(axis) {
        let max = lane.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        lane.mapv_inplace(|v| (v - max).exp());
        let sum = lane.sum();
        lane.mapv_inplace(|v| v / sum);
    }
    Ok(ScoreMatrix { values: out, kind })
}

/// Softmax of each column over the class axis.
pub fn softmax_over_classes(x: &ScoreMatrix) -> Result<ScoreMatrix> {
    softmax_along(x, Axis(0), ScoreKind::ClassNormalized)
}

/// Softmax of each row over the proposal axis.
pub fn softmax_over_proposals(x: &ScoreMatrix) -> Result<ScoreMatrix> {
    softmax_along(x, Axis(1), ScoreKind::ProposalNormalized)
}

fn softmax_backward_along(probs: &Array2<f64>, grad: &Array2<f64>, axis: Axis) -> Array2<f64> {
    let mut out = Array2::zeros(probs.dim());
    for ((p, g), mut o) in probs
        .lanes(axis)
        .into_iter()
        .zip(grad.lanes(axis))
        .zip(out.lanes_mut(axis))
    {
        let dot: f64 = p.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        Zip::from(&mut o)
            .and(&p)
            .and(&g)
            .for_each(|o, &p, &g| *o = p * (g - dot));
    }
    out
}

/// Gradient wrt logits given the class-softmax output and the upstream gradient.
pub fn softmax_over_classes_backward(probs: &ScoreMatrix, grad: &Array2<f64>) -> Array2<f64> {
    softmax_backward_along(&probs.values, grad, Axis(0))
}

/// Gradient wrt logits given the proposal-softmax output and the upstream gradient.
pub fn softmax_over_proposals_backward(probs: &ScoreMatrix, grad: &Array2<f64>) -> Array2<f64> {
    softmax_backward_along(&probs.values, grad, Axis(1))
}

/// Elementwise product of the classification and detection streams.
pub fn wsddn_scores(sigma_cls: &ScoreMatrix, sigma_det: &ScoreMatrix) -> Result<ScoreMatrix> {
    if sigma_cls.shape() != sigma_det.shape() {
        return Err(Error::input(format!(
            "stream shapes differ: {:?} vs {:?}",
            sigma_cls.shape(),
            sigma_det.shape()
        )));
    }
    if sigma_cls.kind != ScoreKind::ClassNormalized {
        return Err(Error::input("classification stream must be class-normalized"));
    }
    if sigma_det.kind != ScoreKind::ProposalNormalized {
        return Err(Error::input("detection stream must be proposal-normalized"));
    }
    Ok(ScoreMatrix {
        values: &sigma_cls.values * &sigma_det.values,
        kind: ScoreKind::Probabilities,
    })
}

/// Gradients wrt both streams given the gradient wrt their product.
pub fn wsddn_backward(
    sigma_cls: &ScoreMatrix,
    sigma_det: &ScoreMatrix,
    grad_phi0: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    (grad_phi0 * &sigma_det.values, grad_phi0 * &sigma_cls.values)
}

/// Image-level class scores: sum of proposal scores per class.
pub fn image_scores(phi0: &ScoreMatrix) -> Vec<f64> {
    phi0.values.sum_axis(Axis(1)).to_vec()
}

/// Image-level binary cross-entropy summed over classes.
///
/// Scores are clamped to `[PROB_EPS, 1 - PROB_EPS]`; the returned gradient
/// is `(phi - y) / (phi (1 - phi))` evaluated at the clamped score.
pub fn mil_loss(phi: &[f64], y: &ImageLabel) -> Result<LossAndGrad<Vec<f64>>> {
    if phi.len() != y.num_classes() {
        return Err(Error::input(format!(
            "{} image scores for {} classes",
            phi.len(),
            y.num_classes()
        )));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(phi.len());
    for (c, &p) in phi.iter().enumerate() {
        // A small overshoot from floating-point summation is tolerated.
        if !(-NORM_TOL..=1.0 + NORM_TOL).contains(&p) {
            return Err(Error::input(format!("image score {p} for class {c} outside [0, 1]")));
        }
        let p = clamp_prob(p);
        let target = if y.is_positive(c) { 1.0 } else { 0.0 };
        loss -= target * p.ln() + (1.0 - target) * (1.0 - p).ln();
        grad.push((p - target) / (p * (1.0 - p)));
    }
    Ok(LossAndGrad { loss, grad })
}

/// One foreground proposal cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    /// Proposal indices; the centre comes first.
    pub members: Vec<usize>,
    /// Class the cluster is a bag for.
    pub label: usize,
    /// Cluster confidence in `[0, 1]`.
    pub confidence: f64,
}

impl Cluster {
    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn center(&self) -> usize {
        self.members[0]
    }
}

/// Foreground clusters plus the background bag with per-proposal weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSet {
    num_proposals: usize,
    clusters: Vec<Cluster>,
    /// `(proposal, weight)` pairs of the background cluster.
    background: Vec<(usize, f64)>,
}

impl ClusterSet {
    /// Assembles a cluster set, checking that it partitions `0..num_proposals`.
    pub fn new(
        num_proposals: usize,
        clusters: Vec<Cluster>,
        background: Vec<(usize, f64)>,
    ) -> Result<Self> {
        let set = Self {
            num_proposals,
            clusters,
            background,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.num_proposals];
        let mut mark = |r: usize| -> Result<()> {
            match seen.get_mut(r) {
                None => Err(Error::input(format!("proposal {r} out of range"))),
                Some(true) => Err(Error::input(format!("proposal {r} in two clusters"))),
                Some(s) => {
                    *s = true;
                    Ok(())
                }
            }
        };
        for (n, cl) in self.clusters.iter().enumerate() {
            if cl.members.is_empty() {
                return Err(Error::input(format!("cluster {n} is empty")));
            }
            if !(0.0..=1.0).contains(&cl.confidence) {
                return Err(Error::input(format!(
                    "cluster {n} confidence {} outside [0, 1]",
                    cl.confidence
                )));
            }
            for &r in &cl.members {
                mark(r)?;
            }
        }
        for &(r, w) in &self.background {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::input(format!("background weight {w} outside [0, 1]")));
            }
            mark(r)?;
        }
        if let Some(r) = seen.iter().position(|&s| !s) {
            return Err(Error::input(format!("proposal {r} is in no cluster")));
        }
        Ok(())
    }

    pub fn num_proposals(&self) -> usize {
        self.num_proposals
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    pub fn background(&self) -> &[(usize, f64)] {
        &self.background
    }
}

/// Greedy IoU clustering of proposals around high-scoring centres.
///
/// For each positive class in ascending order the best unassigned proposal
/// opens a cluster and absorbs every unassigned proposal with
/// IoU >= `iou_threshold`. Further centres are opened while some unassigned
/// proposal scores at least [`CLUSTER_CENTER_FLOOR`]. Leftovers form the
/// background bag, weighted by one minus their best foreground score.
///
/// `scores` may carry a trailing background row; only the first
/// `y.num_classes()` rows are read.
pub fn build_clusters(
    scores: &ScoreMatrix,
    boxes: &[BBox],
    y: &ImageLabel,
    iou_threshold: f64,
) -> Result<ClusterSet> {
    let num_classes = y.num_classes();
    if scores.rows() < num_classes {
        return Err(Error::input(format!(
            "{} score rows for {num_classes} classes",
            scores.rows()
        )));
    }
    if boxes.len() != scores.cols() {
        return Err(Error::input(format!(
            "{} boxes for {} score columns",
            boxes.len(),
            scores.cols()
        )));
    }
    if !y.has_positive() {
        return Err(Error::input("image label has no positive class"));
    }

    let r_count = boxes.len();
    let mut assigned = vec![false; r_count];
    let mut clusters = Vec::new();
    for c in y.positives() {
        let row = scores.row(c);
        let mut first = true;
        loop {
            let best = (0..r_count)
                .filter(|&r| !assigned[r])
                .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)));
            let Some(center) = best else { break };
            if !first && row[center] < CLUSTER_CENTER_FLOOR {
                break;
            }
            first = false;
            assigned[center] = true;
            let mut members = vec![center];
            for r in 0..r_count {
                if !assigned[r] && iou(&boxes[center], &boxes[r]) >= iou_threshold {
                    assigned[r] = true;
                    members.push(r);
                }
            }
            clusters.push(Cluster {
                members,
                label: c,
                confidence: row[center].clamp(0.0, 1.0),
            });
        }
    }

    let background = (0..r_count)
        .filter(|&r| !assigned[r])
        .map(|r| {
            let best_fg = (0..num_classes)
                .map(|c| scores.get(c, r))
                .fold(f64::NEG_INFINITY, f64::max);
            (r, (1.0 - best_fg).clamp(0.0, 1.0))
        })
        .collect();

    let set = ClusterSet {
        num_proposals: r_count,
        clusters,
        background,
    };
    debug_assert!(set.validate().is_ok(), "clusters must partition proposals");
    Ok(set)
}

/// Cluster-weighted cross-entropy of one refinement branch.
///
/// `phi_k` has `C + 1` rows (background last) and is class-normalized. Log
/// arguments are clamped to `[PROB_EPS, 1 - PROB_EPS]` and the gradient is
/// evaluated at the clamped argument.
pub fn refinement_loss(phi_k: &ScoreMatrix, clusters: &ClusterSet) -> Result<LossAndGrad<Array2<f64>>> {
    let (rows, r_count) = phi_k.shape();
    if rows < 2 {
        return Err(Error::input("refinement scores need a background row"));
    }
    if clusters.num_proposals != r_count {
        return Err(Error::input(format!(
            "clusters cover {} proposals, scores have {r_count}",
            clusters.num_proposals
        )));
    }
    let bg_row = rows - 1;
    let scale = 1.0 / r_count as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros((rows, r_count));

    for (n, cl) in clusters.clusters.iter().enumerate() {
        if cl.label >= bg_row {
            return Err(Error::input(format!(
                "cluster {n} label {} is not a foreground class",
                cl.label
            )));
        }
        let m = cl.size() as f64;
        let sum: f64 = cl.members.iter().map(|&r| phi_k.get(cl.label, r)).sum();
        let arg = sum / m;
        if !arg.is_finite() || arg < 0.0 {
            return Err(Error::numerical(format!(
                "cluster {n}: log argument {arg} is not a positive probability"
            )));
        }
        let arg = clamp_prob(arg);
        loss -= scale * cl.confidence * m * arg.ln();
        let g = -scale * cl.confidence / arg;
        for &r in &cl.members {
            grad[[cl.label, r]] += g;
        }
    }

    for &(r, weight) in &clusters.background {
        let p = phi_k.get(bg_row, r);
        if !p.is_finite() || p < 0.0 {
            return Err(Error::numerical(format!(
                "background cluster {}: proposal {r} has score {p}",
                clusters.clusters.len()
            )));
        }
        let p = clamp_prob(p);
        loss -= scale * weight * p.ln();
        grad[[bg_row, r]] += -scale * weight / p;
    }

    Ok(LossAndGrad { loss, grad })
}

/// Entrywise mean of the refinement branch outputs.
pub fn average_refined_scores(branches: &[ScoreMatrix]) -> Result<ScoreMatrix> {
    let (first, rest) = branches
        .split_first()
        .ok_or_else(|| Error::input("no refinement branches to average"))?;
    let mut acc = first.values.clone();
    for b in rest {
        if b.shape() != first.shape() {
            return Err(Error::input(format!(
                "branch shapes differ: {:?} vs {:?}",
                first.shape(),
                b.shape()
            )));
        }
        acc += &b.values;
    }
    acc /= branches.len() as f64;
    let kind = if branches.iter().all(|b| b.kind == first.kind) {
        first.kind
    } else {
        ScoreKind::Probabilities
    };
    Ok(ScoreMatrix { values: acc, kind })
}
