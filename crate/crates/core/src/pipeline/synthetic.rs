//! Seeded synthetic scenes with known ground truth.
//!
//! Each object gets a "discriminative part", a sub-rectangle covering 20-40%
//! of its area. Proposals are jittered copies of the full box, jittered
//! copies of the part, and random background boxes. The in-file score model
//! imitates a MIL detector: with probability `bias` an object is scored
//! part-first (part proposals outrank full ones), otherwise full proposals
//! dominate and part proposals get almost nothing.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{clip_box, iou, BBox};
use crate::mil::ImageLabel;
use crate::pipeline::dataset::{Dataset, DatasetRecord, GtBox};

/// Score of the best proposals in a scene.
const PEAK: f64 = 0.1;
/// Upper bound of the noise given to unrelated (class, proposal) pairs; it
/// stays below the default candidate threshold.
const NOISE: f64 = 0.0005;
const FULL_SHARE: f64 = 0.45;
const PART_SHARE: f64 = 0.15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSceneConfig {
    pub num_images: usize,
    pub height: u32,
    pub width: u32,
    pub num_classes: usize,
    /// Each image holds between 1 and this many non-overlapping objects.
    pub max_objects: usize,
    pub proposals_per_image: usize,
    /// Standard deviation of proposal corner noise, relative to box size.
    pub jitter: f64,
    /// Probability that an object is scored part-first.
    pub bias: f64,
    /// Standard deviation of the additive feature noise.
    pub feature_noise: f64,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        Self {
            num_images: 50,
            height: 128,
            width: 128,
            num_classes: 4,
            max_objects: 2,
            proposals_per_image: 60,
            jitter: 0.08,
            bias: 0.5,
            feature_noise: 0.05,
        }
    }
}

impl SyntheticSceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.bias) {
            return Err(Error::config(format!("bias {} outside [0, 1]", self.bias)));
        }
        if !(self.jitter.is_finite() && self.jitter >= 0.0) {
            return Err(Error::config(format!("jitter {} must be non-negative", self.jitter)));
        }
        if !(self.feature_noise.is_finite() && self.feature_noise >= 0.0) {
            return Err(Error::config(format!(
                "feature noise {} must be non-negative",
                self.feature_noise
            )));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::config("synthetic images must be at least 16x16"));
        }
        if self.num_classes == 0 || self.max_objects == 0 || self.proposals_per_image == 0 {
            return Err(Error::config(
                "classes, objects per image and proposals per image must be positive",
            ));
        }
        Ok(())
    }

    /// Per-proposal feature length: 4 geometry values, one signal per class,
    /// a part signal and a constant.
    pub fn feature_dim(&self) -> usize {
        self.num_classes + 6
    }
}

#[derive(Debug, Clone, Copy)]
struct Object {
    class: usize,
    full: BBox,
    part: BBox,
    biased: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Origin {
    Full(usize),
    Part(usize),
    Background,
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn place_object(rng: &mut ChaCha8Rng, cfg: &SyntheticSceneConfig, placed: &[Object]) -> Option<(BBox, BBox)> {
    let (h, w) = (f64::from(cfg.height), f64::from(cfg.width));
    for _ in 0..50 {
        let ow = ((uniform(rng, 0.25, 0.6) * w).round() as u32).max(4);
        let oh = ((uniform(rng, 0.25, 0.6) * h).round() as u32).max(4);
        let x0 = rng.random_range(0..=cfg.width - ow);
        let y0 = rng.random_range(0..=cfg.height - oh);
        let full = BBox::new(x0, y0, x0 + ow, y0 + oh).ok()?;
        if placed.iter().any(|o| o.full.intersection_area(&full) > 0) {
            continue;
        }
        let area = uniform(rng, 0.2, 0.4);
        let fw = uniform(rng, area, 1.0);
        let pw = ((fw * f64::from(ow)).round() as u32).clamp(1, ow);
        let ph = (((area / fw) * f64::from(oh)).round() as u32).clamp(1, oh);
        let px = x0 + rng.random_range(0..=ow - pw);
        let py = y0 + rng.random_range(0..=oh - ph);
        let part = BBox::new(px, py, px + pw, py + ph).ok()?;
        return Some((full, part));
    }
    None
}

fn jittered(rng: &mut ChaCha8Rng, b: &BBox, jitter: f64, cfg: &SyntheticSceneConfig) -> BBox {
    if jitter == 0.0 {
        return *b;
    }
    let sx = Normal::new(0.0, jitter * f64::from(b.width())).expect("finite sigma");
    let sy = Normal::new(0.0, jitter * f64::from(b.height())).expect("finite sigma");
    let x0 = (f64::from(b.x0()) + sx.sample(rng)).round() as i64;
    let y0 = (f64::from(b.y0()) + sy.sample(rng)).round() as i64;
    let x1 = ((f64::from(b.x1()) + sx.sample(rng)).round() as i64).max(x0 + 1);
    let y1 = ((f64::from(b.y1()) + sy.sample(rng)).round() as i64).max(y0 + 1);
    clip_box(x0, y0, x1, y1, cfg.height, cfg.width).unwrap_or(*b)
}

fn random_box(rng: &mut ChaCha8Rng, cfg: &SyntheticSceneConfig) -> BBox {
    let bw = rng.random_range(4..=cfg.width / 2);
    let bh = rng.random_range(4..=cfg.height / 2);
    let x0 = rng.random_range(0..=cfg.width - bw);
    let y0 = rng.random_range(0..=cfg.height - bh);
    BBox::new(x0, y0, x0 + bw, y0 + bh).expect("positive size")
}

fn score(rng: &mut ChaCha8Rng, origin: Origin, b: &BBox, class: usize, objects: &[Object]) -> f64 {
    let noise = rng.random_range(0.0..NOISE);
    match origin {
        Origin::Full(o) if objects[o].class == class => {
            let range = if objects[o].biased { (0.3, 0.55) } else { (0.6, 1.0) };
            PEAK * rng.random_range(range.0..range.1)
        }
        Origin::Part(o) if objects[o].class == class => {
            let obj = &objects[o];
            if obj.biased {
                PEAK * rng.random_range(0.6..1.0)
            } else {
                PEAK * iou(b, &obj.full).powi(3) + noise
            }
        }
        Origin::Background => {
            let overlap = objects
                .iter()
                .filter(|o| o.class == class)
                .map(|o| iou(b, &o.full))
                .fold(0.0, f64::max);
            PEAK * 0.2 * overlap * overlap + noise
        }
        _ => noise,
    }
}

fn features(
    rng: &mut ChaCha8Rng,
    b: &BBox,
    objects: &[Object],
    cfg: &SyntheticSceneConfig,
    noise: &Option<Normal<f64>>,
) -> Vec<f64> {
    let (h, w) = (f64::from(cfg.height), f64::from(cfg.width));
    let mut f = Vec::with_capacity(cfg.feature_dim());
    f.extend([
        f64::from(b.x0()) / w,
        f64::from(b.y0()) / h,
        f64::from(b.x1()) / w,
        f64::from(b.y1()) / h,
    ]);
    for c in 0..cfg.num_classes {
        f.push(
            objects
                .iter()
                .filter(|o| o.class == c)
                .map(|o| iou(b, &o.full))
                .fold(0.0, f64::max),
        );
    }
    f.push(objects.iter().map(|o| iou(b, &o.part)).fold(0.0, f64::max));
    if let Some(n) = noise {
        for v in &mut f {
            *v += n.sample(rng);
        }
    }
    f.push(1.0);
    f
}

/// Deterministic synthetic dataset with ground truth, features and in-file
/// scores.
pub fn generate_synthetic(cfg: &SyntheticSceneConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = (cfg.feature_noise > 0.0)
        .then(|| Normal::new(0.0, cfg.feature_noise).expect("validated noise"));
    let names = (0..cfg.num_classes).map(|c| format!("class{c}")).collect();
    let mut dataset = Dataset::new(cfg.num_classes, names);

    for i in 0..cfg.num_images {
        let wanted = rng.random_range(1..=cfg.max_objects);
        let mut objects: Vec<Object> = Vec::with_capacity(wanted);
        for _ in 0..wanted {
            let class = rng.random_range(0..cfg.num_classes);
            let biased = rng.random_bool(cfg.bias);
            match place_object(&mut rng, cfg, &objects) {
                Some((full, part)) => objects.push(Object {
                    class,
                    full,
                    part,
                    biased,
                }),
                None => break,
            }
        }
        if objects.is_empty() {
            return Err(Error::config("could not place any object; enlarge the image"));
        }

        let n = objects.len();
        let r_total = cfg.proposals_per_image as f64;
        let per_full = ((FULL_SHARE * r_total / n as f64).round() as usize).max(1);
        let per_part = ((PART_SHARE * r_total / n as f64).round() as usize).max(1);
        let mut props: Vec<(BBox, Origin)> = Vec::with_capacity(cfg.proposals_per_image);
        for (o, obj) in objects.iter().enumerate() {
            for _ in 0..per_full {
                props.push((jittered(&mut rng, &obj.full, cfg.jitter, cfg), Origin::Full(o)));
            }
            for _ in 0..per_part {
                props.push((jittered(&mut rng, &obj.part, cfg.jitter, cfg), Origin::Part(o)));
            }
        }
        for _ in props.len()..cfg.proposals_per_image {
            props.push((random_box(&mut rng, cfg), Origin::Background));
        }
        props.shuffle(&mut rng);

        let scores: Vec<Vec<f64>> = (0..cfg.num_classes)
            .map(|c| {
                props
                    .iter()
                    .map(|(b, origin)| score(&mut rng, *origin, b, c, &objects))
                    .collect()
            })
            .collect();
        let feats: Vec<Vec<f64>> = props
            .iter()
            .map(|(b, _)| features(&mut rng, b, &objects, cfg, &noise))
            .collect();
        let positives: Vec<usize> = objects.iter().map(|o| o.class).collect();

        dataset.records.push(DatasetRecord {
            image_id: format!("syn_{i:05}"),
            height: cfg.height,
            width: cfg.width,
            labels: ImageLabel::from_positives(cfg.num_classes, &positives)?,
            proposals: props.into_iter().map(|(b, _)| b).collect(),
            features: Some(feats),
            gt: Some(
                objects
                    .iter()
                    .map(|o| GtBox {
                        class: o.class,
                        bbox: o.full,
                    })
                    .collect(),
            ),
            scores: Some(scores),
        });
    }
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::dataset::{load_dataset, save_dataset};

    fn top_proposal_iou(d: &Dataset) -> Vec<f64> {
        let mut out = Vec::new();
        for r in &d.records {
            let scores = r.scores.as_ref().unwrap();
            for g in r.gt.as_ref().unwrap() {
                let row = &scores[g.class];
                let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
                let gts: Vec<&GtBox> = r.gt.as_ref().unwrap().iter().filter(|o| o.class == g.class).collect();
                if gts.len() == 1 {
                    out.push(iou(&r.proposals[best], &g.bbox));
                }
            }
        }
        out
    }

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    #[test]
    fn unbiased_top_proposal_covers_the_object() {
        let cfg = SyntheticSceneConfig {
            bias: 0.0,
            ..Default::default()
        };
        let ious = top_proposal_iou(&generate_synthetic(&cfg, 1).unwrap());
        assert!(mean(&ious) > 0.7, "mean IoU {}", mean(&ious));
    }

    #[test]
    fn fully_biased_top_proposal_sits_on_the_part() {
        let cfg = SyntheticSceneConfig {
            bias: 1.0,
            ..Default::default()
        };
        let ious = top_proposal_iou(&generate_synthetic(&cfg, 1).unwrap());
        assert!(ious.iter().all(|&v| v < 0.5 + 0.1), "{ious:?}");
        assert!(mean(&ious) < 0.45, "mean IoU {}", mean(&ious));
    }

    #[test]
    fn records_satisfy_invariants() {
        let cfg = SyntheticSceneConfig::default();
        let d = generate_synthetic(&cfg, 3).unwrap();
        assert_eq!(d.len(), cfg.num_images);
        for r in &d.records {
            assert!(r.labels.has_positive());
            assert!(r.proposals.iter().all(|b| b.fits(r.height, r.width)));
            assert_eq!(r.proposals.len(), cfg.proposals_per_image);
            let f = r.features.as_ref().unwrap();
            assert!(f.iter().all(|v| v.len() == cfg.feature_dim()));
            let gt = r.gt.as_ref().unwrap();
            for (i, a) in gt.iter().enumerate() {
                assert!(r.labels.is_positive(a.class));
                for b in &gt[i + 1..] {
                    assert_eq!(a.bbox.intersection_area(&b.bbox), 0);
                }
            }
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticSceneConfig::default();
        let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        save_dataset(&a, &generate_synthetic(&cfg, 42).unwrap()).unwrap();
        save_dataset(&b, &generate_synthetic(&cfg, 42).unwrap()).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let other = generate_synthetic(&cfg, 43).unwrap();
        assert_ne!(load_dataset(&a).unwrap(), other);
    }

    #[test]
    fn saved_dataset_loads_back_equal() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_synthetic(&SyntheticSceneConfig::default(), 5).unwrap();
        let p = dir.path().join("d.jsonl");
        save_dataset(&p, &d).unwrap();
        assert_eq!(load_dataset(&p).unwrap(), d);
    }

    #[test]
    fn rejects_bad_config() {
        let bad = SyntheticSceneConfig {
            bias: 1.5,
            ..Default::default()
        };
        assert!(generate_synthetic(&bad, 0).is_err());
    }
}
