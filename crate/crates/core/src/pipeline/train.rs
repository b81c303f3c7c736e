//! Full-batch gradient descent on a linear proposal scorer.
//!
//! Each head maps a proposal's feature vector to logits: two WSDDN streams,
//! `K` refinement branches, and the SLV re-classification and regression
//! heads. One iteration runs the whole dataset forward, builds the losses
//! from the analytic gradients in [`crate::mil`] and [`crate::supervision`],
//! and takes one step on their image mean.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Detection;
use crate::geometry::{nms, BBox};
use crate::mil::{
    average_refined_scores, build_clusters, image_scores, mil_loss, refinement_loss, softmax_over_classes,
    softmax_over_classes_backward, softmax_over_proposals, softmax_over_proposals_backward, wsddn_backward,
    wsddn_scores, ImageLabel, ScoreMatrix, DEFAULT_CLUSTER_IOU, DEFAULT_REFINEMENT_BRANCHES,
};
use crate::pipeline::dataset::{Dataset, DatasetRecord};
use crate::supervision::{
    assign_targets, decode_offsets, slv_loss, total_loss, LossWeightSchedule, Offsets, DEFAULT_BG_IOU,
    DEFAULT_FG_IOU,
};
use crate::voting::{generate_supervision, VoteConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    pub learning_rate: f64,
    pub refinement_branches: usize,
    pub cluster_iou: f64,
    /// `false` removes the SLV branch and its heads entirely.
    pub slv_branch: bool,
    /// Weight schedule of the SLV loss.
    pub ramp: LossWeightSchedule,
    pub fg_iou: f64,
    pub bg_iou: (f64, f64),
    /// Standard deviation of the initial weights.
    pub init_scale: f64,
    pub nms_iou: f64,
    /// Detections kept per image and class after NMS.
    pub max_detections: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            learning_rate: 1.0,
            refinement_branches: DEFAULT_REFINEMENT_BRANCHES,
            cluster_iou: DEFAULT_CLUSTER_IOU,
            slv_branch: true,
            // Three epochs; with full-batch descent one iteration is one epoch.
            ramp: LossWeightSchedule::linear(3).expect("positive ramp"),
            fg_iou: DEFAULT_FG_IOU,
            bg_iou: DEFAULT_BG_IOU,
            init_scale: 0.01,
            nms_iou: 0.3,
            max_detections: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.refinement_branches == 0 {
            return Err(Error::config("at least one refinement branch is required"));
        }
        if !(self.cluster_iou > 0.0 && self.cluster_iou <= 1.0) {
            return Err(Error::config(format!("cluster IoU {} outside (0, 1]", self.cluster_iou)));
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(Error::config(format!("init scale {} must be non-negative", self.init_scale)));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(Error::config(format!("NMS IoU {} outside (0, 1)", self.nms_iou)));
        }
        self.ramp.validate()?;
        if !(0.0..=self.bg_iou.1).contains(&self.bg_iou.0) || self.fg_iou < self.bg_iou.1 || self.fg_iou > 1.0 {
            return Err(Error::config(format!(
                "assignment thresholds fg {} / bg [{}, {}) are inconsistent",
                self.fg_iou, self.bg_iou.0, self.bg_iou.1
            )));
        }
        Ok(())
    }
}

/// Linear heads over `D`-dimensional proposal features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyScorer {
    pub feature_dim: usize,
    pub num_classes: usize,
    pub learning_rate: f64,
    /// Completed gradient steps.
    pub iteration: u64,
    /// `C x D`.
    pub w_cls: Array2<f64>,
    /// `C x D`.
    pub w_det: Array2<f64>,
    /// `K` matrices of `(C + 1) x D`.
    pub w_ref: Vec<Array2<f64>>,
    /// `(C + 1) x D`; absent when the SLV branch is removed.
    pub w_slv: Option<Array2<f64>>,
    /// `4 x D` class-agnostic box offsets.
    pub w_reg: Option<Array2<f64>>,
}

impl ToyScorer {
    pub fn new(num_classes: usize, feature_dim: usize, config: &TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_classes == 0 || feature_dim == 0 {
            return Err(Error::input("scorer needs at least one class and one feature"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init_scale).map_err(|e| Error::config(e.to_string()))?;
        let mut init = |rows: usize| Array2::from_shape_simple_fn((rows, feature_dim), || normal.sample(&mut rng));
        let w_cls = init(num_classes);
        let w_det = init(num_classes);
        let w_ref = (0..config.refinement_branches).map(|_| init(num_classes + 1)).collect();
        let (w_slv, w_reg) = if config.slv_branch {
            (Some(init(num_classes + 1)), Some(init(4)))
        } else {
            (None, None)
        };
        Ok(Self {
            feature_dim,
            num_classes,
            learning_rate: config.learning_rate,
            iteration: 0,
            w_cls,
            w_det,
            w_ref,
            w_slv,
            w_reg,
        })
    }

    fn params(&self) -> impl Iterator<Item = &Array2<f64>> {
        [&self.w_cls, &self.w_det]
            .into_iter()
            .chain(&self.w_ref)
            .chain(self.w_slv.iter())
            .chain(self.w_reg.iter())
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut Array2<f64>> {
        [&mut self.w_cls, &mut self.w_det]
            .into_iter()
            .chain(&mut self.w_ref)
            .chain(self.w_slv.iter_mut())
            .chain(self.w_reg.iter_mut())
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|w| w.iter().all(|v| v.is_finite()))
    }

    fn features(&self, record: &DatasetRecord) -> Result<Array2<f64>> {
        let f = record
            .features
            .as_ref()
            .ok_or_else(|| Error::input(format!("record `{}` has no features", record.image_id)))?;
        if f.len() != record.proposals.len() || f.iter().any(|v| v.len() != self.feature_dim) {
            return Err(Error::input(format!(
                "record `{}`: features do not match {} proposals of dimension {}",
                record.image_id,
                record.proposals.len(),
                self.feature_dim
            )));
        }
        let flat: Vec<f64> = f.iter().flatten().copied().collect();
        Array2::from_shape_vec((f.len(), self.feature_dim), flat).map_err(|e| Error::input(e.to_string()))
    }

    /// Test-time outputs for one image.
    pub fn predict(&self, record: &DatasetRecord) -> Result<Prediction> {
        let f = self.features(record)?;
        let ft = f.t();
        let refined = self
            .w_ref
            .iter()
            .map(|w| softmax_over_classes(&ScoreMatrix::logits(w.dot(&ft))?))
            .collect::<Result<Vec<_>>>()?;
        let phi_bar = average_refined_scores(&refined)?;
        let slv = match (&self.w_slv, &self.w_reg) {
            (Some(ws), Some(wr)) => Some((
                softmax_over_classes(&ScoreMatrix::logits(ws.dot(&ft))?)?,
                offsets_from(wr.dot(&ft).view()),
            )),
            _ => None,
        };
        Ok(Prediction { refined, phi_bar, slv })
    }

    /// Scored, box-shifted and NMS-filtered detections for every class.
    pub fn detect(&self, record: &DatasetRecord, nms_iou: f64, max_per_class: usize) -> Result<Vec<Detection>> {
        let pred = self.predict(record)?;
        let mut boxes: Vec<Option<BBox>> = record.proposals.iter().copied().map(Some).collect();
        if let Some((_, offsets)) = &pred.slv {
            for (b, t) in boxes.iter_mut().zip(offsets) {
                if let Some(p) = *b {
                    *b = match decode_offsets(&p, t, record.height, record.width) {
                        Ok(shifted) => Some(shifted),
                        Err(Error::EmptyBox) => None,
                        Err(e) => return Err(e),
                    };
                }
            }
        }
        let scores = pred.final_scores();
        let mut dets = Vec::new();
        for c in 0..self.num_classes {
            let (kept_boxes, kept_scores): (Vec<(usize, BBox)>, Vec<f64>) = boxes
                .iter()
                .enumerate()
                .filter_map(|(r, b)| b.map(|b| ((r, b), scores[[c, r]])))
                .unzip();
            let only_boxes: Vec<BBox> = kept_boxes.iter().map(|(_, b)| *b).collect();
            for i in nms(&only_boxes, &kept_scores, nms_iou)?.into_iter().take(max_per_class) {
                dets.push(Detection {
                    image_id: record.image_id.clone(),
                    class: c,
                    bbox: only_boxes[i],
                    score: kept_scores[i],
                });
            }
        }
        Ok(dets)
    }
}

fn offsets_from(t: ArrayView2<f64>) -> Vec<Offsets> {
    t.axis_iter(Axis(1)).map(|col| [col[0], col[1], col[2], col[3]]).collect()
}

#[derive(Debug, Clone)]
pub struct Prediction {
    /// Class-normalized outputs of the refinement branches, `(C + 1) x R`.
    pub refined: Vec<ScoreMatrix>,
    pub phi_bar: ScoreMatrix,
    /// Re-classification scores and box offsets.
    pub slv: Option<(ScoreMatrix, Vec<Offsets>)>,
}

impl Prediction {
    /// Entrywise mean of the refinement branches and, when present, the SLV
    /// re-classification branch.
    pub fn final_scores(&self) -> Array2<f64> {
        let mut acc = self.phi_bar.values() * self.refined.len() as f64;
        let mut n = self.refined.len() as f64;
        if let Some((s, _)) = &self.slv {
            acc += s.values();
            n += 1.0;
        }
        acc / n
    }
}

/// Losses of one iteration, averaged over images. `l_s` is zero whenever
/// the SLV loss was not evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: u64,
    pub l_w: f64,
    pub l_r: Vec<f64>,
    pub l_s: f64,
    pub w_s: f64,
    pub total: f64,
}

struct ImageStep {
    l_w: f64,
    l_r: Vec<f64>,
    l_s: f64,
    grads: Vec<Array2<f64>>,
}

fn image_step(
    scorer: &ToyScorer,
    f: &Array2<f64>,
    record: &DatasetRecord,
    w_s: f64,
    config: &TrainConfig,
    vote: &VoteConfig,
) -> Result<ImageStep> {
    let ft = f.t();
    let y: &ImageLabel = &record.labels;
    let boxes = &record.proposals;
    let mut grads = Vec::with_capacity(4 + scorer.w_ref.len());

    let sc = softmax_over_classes(&ScoreMatrix::logits(scorer.w_cls.dot(&ft))?)?;
    let sd = softmax_over_proposals(&ScoreMatrix::logits(scorer.w_det.dot(&ft))?)?;
    let phi0 = wsddn_scores(&sc, &sd)?;
    let lw = mil_loss(&image_scores(&phi0), y)?;
    let g_phi0 = Array2::from_shape_fn(phi0.shape(), |(c, _)| lw.grad[c]);
    let (g_sc, g_sd) = wsddn_backward(&sc, &sd, &g_phi0);
    grads.push(softmax_over_classes_backward(&sc, &g_sc).dot(f));
    grads.push(softmax_over_proposals_backward(&sd, &g_sd).dot(f));

    let mut l_r = Vec::with_capacity(scorer.w_ref.len());
    let mut refined: Vec<ScoreMatrix> = Vec::with_capacity(scorer.w_ref.len());
    for w in &scorer.w_ref {
        let prev = refined.last().unwrap_or(&phi0);
        let clusters = build_clusters(prev, boxes, y, config.cluster_iou)?;
        let pk = softmax_over_classes(&ScoreMatrix::logits(w.dot(&ft))?)?;
        let lr = refinement_loss(&pk, &clusters)?;
        grads.push(softmax_over_classes_backward(&pk, &lr.grad).dot(f));
        l_r.push(lr.loss);
        refined.push(pk);
    }

    let mut l_s = 0.0;
    if let (Some(ws), Some(wr)) = (&scorer.w_slv, &scorer.w_reg) {
        if w_s > 0.0 {
            // The vote is a constant target: no gradient flows into phi_bar.
            let phi_bar = average_refined_scores(&refined)?;
            let sup = generate_supervision(
                &phi_bar,
                boxes,
                y,
                record.height as usize,
                record.width as usize,
                vote,
            )?;
            let targets = assign_targets(boxes, &sup, config.fg_iou, config.bg_iou)?;
            let ps = softmax_over_classes(&ScoreMatrix::logits(ws.dot(&ft))?)?;
            let ts = offsets_from(wr.dot(&ft).view());
            let ls = slv_loss(&ps, &ts, &targets)?;
            l_s = ls.loss;
            grads.push(softmax_over_classes_backward(&ps, &(ls.grad_scores * w_s)).dot(f));
            let g_t = Array2::from_shape_fn((4, ts.len()), |(j, r)| w_s * ls.grad_offsets[r][j]);
            grads.push(g_t.dot(f));
        } else {
            grads.push(Array2::zeros(ws.raw_dim()));
            grads.push(Array2::zeros(wr.raw_dim()));
        }
    }
    Ok(ImageStep { l_w: lw.loss, l_r, l_s, grads })
}

fn diverged(iteration: u64, what: impl std::fmt::Display) -> Error {
    Error::numerical(format!("training diverged at iteration {iteration}: {what}"))
}

/// Runs `config.iterations` full-batch steps from a seeded initialization.
pub fn train_toy(dataset: &Dataset, config: &TrainConfig, vote: &VoteConfig, seed: u64) -> Result<(ToyScorer, Vec<TraceEntry>)> {
    config.validate()?;
    vote.validate()?;
    if dataset.is_empty() {
        return Err(Error::input("cannot train on an empty dataset"));
    }
    let dim = dataset
        .feature_dim()
        .ok_or_else(|| Error::input("training needs per-proposal features"))?;
    if let Some(r) = dataset.records.iter().find(|r| !r.labels.has_positive()) {
        return Err(Error::input(format!("record `{}` has no positive label", r.image_id)));
    }
    let mut scorer = ToyScorer::new(dataset.num_classes(), dim, config, seed)?;
    let features = dataset
        .records
        .iter()
        .map(|r| scorer.features(r))
        .collect::<Result<Vec<_>>>()?;
    let n = dataset.len() as f64;
    let mut trace = Vec::with_capacity(config.iterations as usize);

    for i in 0..config.iterations {
        let w_s = if config.slv_branch { config.ramp.weight(i) } else { 0.0 };
        let steps = dataset
            .records
            .par_iter()
            .zip(features.par_iter())
            .map(|(rec, f)| image_step(&scorer, f, rec, w_s, config, vote))
            .collect::<Vec<_>>();

        // Summed in dataset order so the result does not depend on scheduling.
        let mut l_w = 0.0;
        let mut l_r = vec![0.0; config.refinement_branches];
        let mut l_s = 0.0;
        let mut grads: Vec<Array2<f64>> = scorer.params().map(|w| Array2::zeros(w.raw_dim())).collect();
        for step in steps {
            let step = step.map_err(|e| match e {
                Error::Numerical(m) => diverged(i, m),
                other => other,
            })?;
            l_w += step.l_w / n;
            for (acc, v) in l_r.iter_mut().zip(&step.l_r) {
                *acc += v / n;
            }
            l_s += step.l_s / n;
            for (acc, g) in grads.iter_mut().zip(&step.grads) {
                acc.scaled_add(1.0 / n, g);
            }
        }
        let total = total_loss(l_w, &l_r, l_s, w_s);
        if !total.is_finite() {
            return Err(diverged(i, format!("total loss {total}")));
        }
        trace.push(TraceEntry {
            iteration: i,
            l_w,
            l_r,
            l_s,
            w_s,
            total,
        });

        let lr = scorer.learning_rate;
        for (w, g) in scorer.params_mut().zip(&grads) {
            w.scaled_add(-lr, g);
        }
        scorer.iteration += 1;
        if !scorer.is_finite() {
            return Err(diverged(i, "non-finite weights"));
        }
    }
    Ok((scorer, trace))
}

/// Tab-separated loss trace: `iteration l_w l_r1 .. l_rK l_s w_s total`.
pub fn format_trace(trace: &[TraceEntry]) -> String {
    use std::fmt::Write as _;
    let k = trace.first().map_or(0, |t| t.l_r.len());
    let mut out = String::from("iteration\tl_w");
    for j in 1..=k {
        let _ = write!(out, "\tl_r{j}");
    }
    out.push_str("\tl_s\tw_s\ttotal\n");
    for t in trace {
        let _ = write!(out, "{}\t{:.9}", t.iteration, t.l_w);
        for v in &t.l_r {
            let _ = write!(out, "\t{v:.9}");
        }
        let _ = writeln!(out, "\t{:.9}\t{:.6}\t{:.9}", t.l_s, t.w_s, t.total);
    }
    out
}


/// Detections for every record, in dataset order.
pub fn detect_dataset(model: &ToyScorer, dataset: &Dataset, config: &TrainConfig) -> Result<Vec<Detection>> {
    let per_image = dataset
        .records
        .par_iter()
        .map(|r| model.detect(r, config.nms_iou, config.max_detections))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

pub fn save_model(path: &Path, model: &ToyScorer) -> Result<()> {
    let text = serde_json::to_string(model).map_err(|e| Error::io(path, e.into()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<ToyScorer> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let model: ToyScorer = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        record: "model".into(),
        field: "-".into(),
        message: e.to_string(),
    })?;
    let d = model.feature_dim;
    let c = model.num_classes;
    let shapes_ok = model.w_cls.dim() == (c, d)
        && model.w_det.dim() == (c, d)
        && model.w_ref.iter().all(|w| w.dim() == (c + 1, d))
        && model.w_slv.as_ref().is_none_or(|w| w.dim() == (c + 1, d))
        && model.w_reg.as_ref().is_none_or(|w| w.dim() == (4, d));
    if !shapes_ok || model.w_ref.is_empty() {
        return Err(Error::input(format!("{}: weight shapes do not match {c} classes x {d} features", path.display())));
    }
    if !model.is_finite() {
        return Err(Error::input(format!("{}: non-finite weights", path.display())));
    }
    Ok(model)
}
