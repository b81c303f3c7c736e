//! PASCAL-style detection metrics: greedy matching at IoU > threshold,
//! per-class average precision, mAP and CorLoc.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{descending_order, iou, BBox};

/// PASCAL criterion: a match needs IoU strictly above this.
pub const PASCAL_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub class: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

/// Ground-truth boxes per image and class.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroundTruthSet {
    images: BTreeMap<String, BTreeMap<usize, Vec<BBox>>>,
}

impl GroundTruthSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers an image even if it carries no boxes.
    pub fn add_image(&mut self, image_id: &str) {
        self.images.entry(image_id.to_owned()).or_default();
    }

    pub fn insert(&mut self, image_id: &str, class: usize, bbox: BBox) {
        self.images
            .entry(image_id.to_owned())
            .or_default()
            .entry(class)
            .or_default()
            .push(bbox);
    }

    pub fn boxes(&self, image_id: &str, class: usize) -> &[BBox] {
        self.images
            .get(image_id)
            .and_then(|m| m.get(&class))
            .map_or(&[], Vec::as_slice)
    }

    pub fn contains_image(&self, image_id: &str) -> bool {
        self.images.contains_key(image_id)
    }

    pub fn image_ids(&self) -> impl Iterator<Item = &str> {
        self.images.keys().map(String::as_str)
    }

    /// Classes with at least one box anywhere.
    pub fn classes(&self) -> BTreeSet<usize> {
        self.images
            .values()
            .flat_map(|m| m.iter().filter(|(_, b)| !b.is_empty()).map(|(c, _)| *c))
            .collect()
    }

    pub fn num_boxes(&self, class: usize) -> usize {
        self.images
            .values()
            .filter_map(|m| m.get(&class))
            .map(Vec::len)
            .sum()
    }

    /// Images containing at least one box of `class`.
    pub fn images_with(&self, class: usize) -> impl Iterator<Item = &str> {
        self.images
            .iter()
            .filter(move |(_, m)| m.get(&class).is_some_and(|b| !b.is_empty()))
            .map(|(id, _)| id.as_str())
    }
}

/// Greedy TP/FP assignment, returned in input order.
///
/// Detections are visited by descending score (ties in input order); each
/// claims the unclaimed ground truth of its image and class with the highest
/// IoU, provided that IoU exceeds `iou_threshold`.
pub fn match_detections(dets: &[Detection], gt: &GroundTruthSet, iou_threshold: f64) -> Vec<bool> {
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let mut claimed: HashMap<(&str, usize), Vec<bool>> = HashMap::new();
    let mut tp = vec![false; dets.len()];
    for idx in descending_order(&scores) {
        let d = &dets[idx];
        let gts = gt.boxes(&d.image_id, d.class);
        if gts.is_empty() {
            continue;
        }
        let used = claimed
            .entry((d.image_id.as_str(), d.class))
            .or_insert_with(|| vec![false; gts.len()]);
        let best = gts
            .iter()
            .enumerate()
            .filter(|(g, _)| !used[*g])
            .map(|(g, b)| (g, iou(&d.bbox, b)))
            .fold(None, |acc: Option<(usize, f64)>, cur| match acc {
                Some(a) if a.1 >= cur.1 => Some(a),
                _ => Some(cur),
            });
        if let Some((g, o)) = best {
            if o > iou_threshold {
                used[g] = true;
                tp[idx] = true;
            }
        }
    }
    tp
}

/// How the precision/recall curve is integrated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMethod {
    /// Area under the monotone precision envelope (VOC2010 onward).
    #[default]
    AllPoints,
    /// Mean of the envelope sampled at recall 0, 0.1, ..., 1 (VOC2007).
    ElevenPoint,
}

/// Average precision of ranked `(score, is_tp)` pairs against `n_gt` objects.
///
/// Defined as 0 when `n_gt == 0`.
pub fn average_precision(flags: &[(f64, bool)], n_gt: usize, method: ApMethod) -> f64 {
    if n_gt == 0 || flags.is_empty() {
        return 0.0;
    }
    let scores: Vec<f64> = flags.iter().map(|f| f.0).collect();
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for idx in descending_order(&scores) {
        if flags[idx].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }

    match method {
        ApMethod::AllPoints => {
            let mut envelope = precision.clone();
            for i in (0..envelope.len().saturating_sub(1)).rev() {
                envelope[i] = envelope[i].max(envelope[i + 1]);
            }
            let mut ap = 0.0;
            let mut prev_recall = 0.0;
            for (r, p) in recall.iter().zip(&envelope) {
                ap += (r - prev_recall) * p;
                prev_recall = *r;
            }
            ap
        }
        ApMethod::ElevenPoint => {
            (0..=10)
                .map(|t| {
                    let t = t as f64 / 10.0;
                    recall
                        .iter()
                        .zip(&precision)
                        .filter(|(r, _)| **r >= t)
                        .map(|(_, p)| *p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    }
}

pub fn mean_ap(per_class_ap: &BTreeMap<usize, f64>) -> Result<f64> {
    if per_class_ap.is_empty() {
        return Err(Error::input("mAP over an empty class set"));
    }
    Ok(per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64)
}

/// Highest-scoring detection per `(image, class)`; ties keep the earlier one.
pub fn top_detections(dets: &[Detection]) -> BTreeMap<(String, usize), Detection> {
    let mut top: BTreeMap<(String, usize), Detection> = BTreeMap::new();
    for d in dets {
        let key = (d.image_id.clone(), d.class);
        match top.get(&key) {
            Some(cur) if cur.score >= d.score => {}
            _ => {
                top.insert(key, d.clone());
            }
        }
    }
    top
}

/// Fraction of images containing a class whose top detection for it hits a
/// ground truth at IoU > 0.5. Classes without ground truth are absent.
pub fn corloc(top: &BTreeMap<(String, usize), Detection>, gt: &GroundTruthSet) -> BTreeMap<usize, f64> {
    gt.classes()
        .into_iter()
        .map(|c| {
            let mut total = 0usize;
            let mut hit = 0usize;
            for image in gt.images_with(c) {
                total += 1;
                if let Some(d) = top.get(&(image.to_owned(), c)) {
                    if gt.boxes(image, c).iter().any(|g| iou(&d.bbox, g) > PASCAL_IOU) {
                        hit += 1;
                    }
                }
            }
            (c, hit as f64 / total as f64)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub ap: f64,
    pub corloc: Option<f64>,
    pub num_gt: usize,
    pub num_detections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_class: BTreeMap<usize, ClassMetrics>,
    pub map: f64,
    pub mean_corloc: Option<f64>,
}

/// AP and CorLoc for every class that has ground truth or detections.
pub fn evaluate_detections(dets: &[Detection], gt: &GroundTruthSet, method: ApMethod) -> Result<MetricReport> {
    let flags = match_detections(dets, gt, PASCAL_IOU);
    let mut by_class: BTreeMap<usize, Vec<(f64, bool)>> = BTreeMap::new();
    for (d, tp) in dets.iter().zip(&flags) {
        by_class.entry(d.class).or_default().push((d.score, *tp));
    }
    let corlocs = corloc(&top_detections(dets), gt);

    let classes: BTreeSet<usize> = gt.classes().into_iter().chain(by_class.keys().copied()).collect();
    let per_class: BTreeMap<usize, ClassMetrics> = classes
        .into_iter()
        .map(|c| {
            let f = by_class.get(&c).map_or(&[][..], Vec::as_slice);
            let n_gt = gt.num_boxes(c);
            (
                c,
                ClassMetrics {
                    ap: average_precision(f, n_gt, method),
                    corloc: corlocs.get(&c).copied(),
                    num_gt: n_gt,
                    num_detections: f.len(),
                },
            )
        })
        .collect();

    let aps: BTreeMap<usize, f64> = per_class.iter().map(|(c, m)| (*c, m.ap)).collect();
    let map = mean_ap(&aps)?;
    let mean_corloc = if corlocs.is_empty() {
        None
    } else {
        Some(corlocs.values().sum::<f64>() / corlocs.len() as f64)
    };
    Ok(MetricReport {
        per_class,
        map,
        mean_corloc,
    })
}

/// Fixed text rendering of a [`MetricReport`].
///
/// One tab-separated line per class (`name AP CorLoc`, CorLoc `-` when the
/// class has no ground truth), then `mCorLoc` and a final `mAP` line. All
/// numbers use six decimals.
pub fn format_report(report: &MetricReport, class_name: impl Fn(usize) -> String) -> String {
    let mut out = String::from("class\tAP\tCorLoc\n");
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_owned(), |v| format!("{v:.6}"));
    for (c, m) in &report.per_class {
        let _ = writeln!(out, "{}\t{:.6}\t{}", class_name(*c), m.ap, opt(m.corloc));
    }
    let _ = writeln!(out, "mCorLoc\t{}", opt(report.mean_corloc));
    let _ = writeln!(out, "mAP\t{:.6}", report.map);
    out
}
