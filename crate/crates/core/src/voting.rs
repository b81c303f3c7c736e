//! Spatial likelihood voting.
//!
//! For every positive class of an image: keep proposals whose averaged
//! refined score exceeds `t_score`, splat those scores onto an `H x W`
//! likelihood map, scale the map to `[0, 1]`, threshold it at the class's
//! `t_b` and report the bounding rectangle of each 8-connected region. The
//! rectangles become the pseudo ground truth for the re-classification and
//! re-localization heads.
//!
//! Two accumulators are provided. [`accumulate_fast`] is a 2D difference
//! array: each box costs four updates and a pair of prefix-sum passes
//! resolves the map in `O(H W + |B|)`. [`accumulate_naive`] adds every score
//! to every covered pixel and exists as the reference the fast path is
//! checked against.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{connected_components, min_bounding_rect, BBox, BinaryGrid};
use crate::mil::{ImageLabel, ScoreMatrix};

/// PASCAL VOC class names in the canonical order.
pub const VOC_CLASSES: [&str; 20] = [
    "aeroplane",
    "bicycle",
    "bird",
    "boat",
    "bottle",
    "bus",
    "car",
    "cat",
    "chair",
    "cow",
    "diningtable",
    "dog",
    "horse",
    "motorbike",
    "person",
    "pottedplant",
    "sheep",
    "sofa",
    "train",
    "tvmonitor",
];

/// Index of `person` in [`VOC_CLASSES`].
pub const VOC_PERSON: usize = 14;

pub const DEFAULT_T_SCORE: f64 = 0.001;
pub const DEFAULT_T_B: f64 = 0.5;
pub const VOC_PERSON_T_B: f64 = 0.2;

/// Candidate and binarization thresholds. Fields missing from a serialized
/// config fall back to the `voc2007` preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VoteConfig {
    /// Proposals need a score strictly above this to vote.
    pub t_score: f64,
    /// Binarization threshold for classes without an override.
    pub t_b_default: f64,
    /// Per-class binarization overrides, keyed by class index.
    #[serde(with = "class_keyed")]
    pub t_b_per_class: BTreeMap<usize, f64>,
}

impl Default for VoteConfig {
    fn default() -> Self {
        Self::voc2007()
    }
}

impl VoteConfig {
    /// `t_score = 0.001`, `t_b = 0.5`, and `0.2` for `person`.
    pub fn voc2007() -> Self {
        Self {
            t_score: DEFAULT_T_SCORE,
            t_b_default: DEFAULT_T_B,
            t_b_per_class: BTreeMap::from([(VOC_PERSON, VOC_PERSON_T_B)]),
        }
    }

    /// Looks up a named preset.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "voc2007" => Ok(Self::voc2007()),
            other => Err(Error::config(format!("unknown vote preset `{other}`"))),
        }
    }

    /// Uniform thresholds without per-class overrides.
    pub fn uniform(t_score: f64, t_b: f64) -> Self {
        Self {
            t_score,
            t_b_default: t_b,
            t_b_per_class: BTreeMap::new(),
        }
    }

    pub fn t_b_for(&self, class: usize) -> f64 {
        self.t_b_per_class
            .get(&class)
            .copied()
            .unwrap_or(self.t_b_default)
    }

    pub fn validate(&self) -> Result<()> {
        // t_score = 0 is accepted: every positive score then votes.
        if !(0.0..1.0).contains(&self.t_score) {
            return Err(Error::config(format!("t_score {} outside [0, 1)", self.t_score)));
        }
        let open = |v: f64| v > 0.0 && v < 1.0;
        if !open(self.t_b_default) {
            return Err(Error::config(format!(
                "t_b_default {} outside (0, 1)",
                self.t_b_default
            )));
        }
        for (c, &t) in &self.t_b_per_class {
            if !open(t) {
                return Err(Error::config(format!("t_b for class {c} is {t}, outside (0, 1)")));
            }
        }
        Ok(())
    }
}

mod class_keyed {
    //! TOML only has string keys, so class indices travel as strings.
    use std::collections::BTreeMap;

    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(map: &BTreeMap<usize, f64>, s: S) -> Result<S::Ok, S::Error> {
        let m: BTreeMap<String, f64> = map.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        m.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<usize, f64>, D::Error> {
        BTreeMap::<String, f64>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| {
                k.parse::<usize>()
                    .map(|k| (k, v))
                    .map_err(|_| D::Error::custom(format!("class key `{k}` is not an index")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapState {
    /// Raw accumulated scores.
    Raw,
    /// Divided by its maximum; the maximum entry is 1.
    Normalized,
    /// No proposal contributed; every entry is zero.
    Empty,
}

/// Per-pixel accumulated likelihood for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodMap {
    class: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
    state: MapState,
}

impl LikelihoodMap {
    pub fn from_values(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::input(format!(
                "map of {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if values.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::input("likelihood values must be finite and non-negative"));
        }
        Ok(Self {
            class: 0,
            height,
            width,
            values,
            state: MapState::Raw,
        })
    }

    pub fn with_class(mut self, class: usize) -> Self {
        self.class = class;
        self
    }

    pub fn class(&self) -> usize {
        self.class
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn state(&self) -> MapState {
        self.state
    }

    pub fn is_empty(&self) -> bool {
        self.state == MapState::Empty
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

/// Indices `r` with `phi_bar[class, r] > t_score`.
pub fn select_candidates(phi_bar: &ScoreMatrix, boxes: &[BBox], class: usize, t_score: f64) -> Vec<usize> {
    debug_assert_eq!(boxes.len(), phi_bar.cols());
    phi_bar
        .row(class)
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > t_score)
        .map(|(r, _)| r)
        .collect()
}

fn check_accumulate_input(
    candidates: &[usize],
    boxes: &[BBox],
    scores: &[f64],
    height: usize,
    width: usize,
) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::input("likelihood map needs positive dimensions"));
    }
    if boxes.len() != scores.len() {
        return Err(Error::input(format!(
            "{} boxes but {} scores",
            boxes.len(),
            scores.len()
        )));
    }
    for &r in candidates {
        let b = boxes
            .get(r)
            .ok_or_else(|| Error::input(format!("candidate {r} out of range")))?;
        if b.x1() as usize > width || b.y1() as usize > height {
            return Err(Error::input(format!(
                "candidate {r} box {b} exceeds {height}x{width}; clip it first"
            )));
        }
        let s = scores[r];
        if !s.is_finite() || s < 0.0 {
            return Err(Error::input(format!("candidate {r} has score {s}")));
        }
    }
    Ok(())
}

/// Accumulates candidate scores with a 2D difference array.
///
/// Each box adds `+s` at `(y0, x0)` and `(y1, x1)` and `-s` at `(y0, x1)` and
/// `(y1, x0)` of an `(H+1) x (W+1)` grid; a row-wise then a column-wise
/// prefix sum turn the corner marks into per-pixel totals.
pub fn accumulate_fast(
    candidates: &[usize],
    boxes: &[BBox],
    scores: &[f64],
    height: usize,
    width: usize,
) -> Result<LikelihoodMap> {
    check_accumulate_input(candidates, boxes, scores, height, width)?;
    let stride = width + 1;
    let mut diff = vec![0.0f64; (height + 1) * stride];
    for &r in candidates {
        let b = &boxes[r];
        let s = scores[r];
        let (x0, y0, x1, y1) = (b.x0() as usize, b.y0() as usize, b.x1() as usize, b.y1() as usize);
        diff[y0 * stride + x0] += s;
        diff[y0 * stride + x1] -= s;
        diff[y1 * stride + x0] -= s;
        diff[y1 * stride + x1] += s;
    }

    let mut values = vec![0.0f64; height * width];
    let mut above = vec![0.0f64; width];
    for i in 0..height {
        let d = &diff[i * stride..i * stride + width];
        let out = &mut values[i * width..(i + 1) * width];
        let mut run = 0.0;
        for ((o, &dv), a) in out.iter_mut().zip(d).zip(above.iter_mut()) {
            run += dv;
            *a += run;
            // Cancellation can leave -1 ulp residue where the true sum is zero.
            *o = a.max(0.0);
        }
    }

    Ok(LikelihoodMap {
        class: 0,
        height,
        width,
        values,
        state: MapState::Raw,
    })
}

/// Reference accumulator: adds each score to every covered pixel.
pub fn accumulate_naive(
    candidates: &[usize],
    boxes: &[BBox],
    scores: &[f64],
    height: usize,
    width: usize,
) -> Result<LikelihoodMap> {
    check_accumulate_input(candidates, boxes, scores, height, width)?;
    let mut values = vec![0.0f64; height * width];
    for &r in candidates {
        let b = &boxes[r];
        for i in b.y0() as usize..b.y1() as usize {
            for j in b.x0() as usize..b.x1() as usize {
                values[i * width + j] += scores[r];
            }
        }
    }
    Ok(LikelihoodMap {
        class: 0,
        height,
        width,
        values,
        state: MapState::Raw,
    })
}

/// Scales the map so that its maximum is one. An all-zero map is returned
/// unchanged and marked [`MapState::Empty`].
pub fn normalize(map: &LikelihoodMap) -> LikelihoodMap {
    let max = map.max();
    let mut out = map.clone();
    if max > 0.0 {
        out.values.iter_mut().for_each(|v| *v /= max);
        out.state = MapState::Normalized;
    } else {
        out.state = MapState::Empty;
    }
    out
}

/// Cells strictly above `t_b`.
pub fn binarize(map: &LikelihoodMap, t_b: f64) -> Result<BinaryGrid> {
    if map.state == MapState::Raw {
        return Err(Error::input("binarize needs a normalized likelihood map"));
    }
    if !(0.0..1.0).contains(&t_b) {
        return Err(Error::config(format!("t_b {t_b} outside [0, 1)")));
    }
    let cells = map.values.iter().map(|&v| v > t_b).collect();
    BinaryGrid::from_cells(map.height, map.width, cells)
}

/// Bounding rectangles of the 8-connected regions, in region order.
pub fn vote_boxes(grid: &BinaryGrid) -> Vec<BBox> {
    connected_components(grid)
        .iter()
        .map(|comp| min_bounding_rect(comp).expect("components are never empty"))
        .collect()
}

/// Voted boxes for one class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassBoxes {
    pub class: usize,
    pub boxes: Vec<BBox>,
}

/// Pseudo ground truth for one image: voted boxes per positive class.
///
/// Classes that received no boxes are absent.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Supervision {
    pub classes: Vec<ClassBoxes>,
}

impl Supervision {
    pub fn is_empty(&self) -> bool {
        self.classes.iter().all(|c| c.boxes.is_empty())
    }

    pub fn num_boxes(&self) -> usize {
        self.classes.iter().map(|c| c.boxes.len()).sum()
    }

    pub fn boxes_for(&self, class: usize) -> &[BBox] {
        self.classes
            .iter()
            .find(|c| c.class == class)
            .map_or(&[], |c| c.boxes.as_slice())
    }

    /// `(class, box)` pairs in class order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &BBox)> {
        self.classes
            .iter()
            .flat_map(|c| c.boxes.iter().map(move |b| (c.class, b)))
    }
}

/// Full per-class vote, keeping the intermediate map.
#[derive(Debug, Clone)]
pub struct ClassVote {
    pub class: usize,
    pub candidates: Vec<usize>,
    /// Normalized (or empty) likelihood map.
    pub map: LikelihoodMap,
    pub boxes: Vec<BBox>,
}

/// Runs select, accumulate, normalize, binarize and rectangle extraction for
/// one class.
pub fn vote_class(
    phi_bar: &ScoreMatrix,
    boxes: &[BBox],
    class: usize,
    height: usize,
    width: usize,
    config: &VoteConfig,
) -> Result<ClassVote> {
    let candidates = select_candidates(phi_bar, boxes, class, config.t_score);
    let scores = phi_bar.row(class).to_vec();
    let map = normalize(&accumulate_fast(&candidates, boxes, &scores, height, width)?.with_class(class));
    let voted = if map.is_empty() {
        Vec::new()
    } else {
        vote_boxes(&binarize(&map, config.t_b_for(class))?)
    };
    Ok(ClassVote {
        class,
        candidates,
        map,
        boxes: voted,
    })
}

fn check_vote_input(phi_bar: &ScoreMatrix, boxes: &[BBox], y: &ImageLabel, config: &VoteConfig) -> Result<()> {
    config.validate()?;
    if !y.has_positive() {
        return Err(Error::input("image label has no positive class"));
    }
    if phi_bar.rows() < y.num_classes() {
        return Err(Error::input(format!(
            "{} score rows for {} classes",
            phi_bar.rows(),
            y.num_classes()
        )));
    }
    if boxes.len() != phi_bar.cols() {
        return Err(Error::input(format!(
            "{} boxes for {} score columns",
            boxes.len(),
            phi_bar.cols()
        )));
    }
    Ok(())
}

/// Votes every positive class and returns the per-class maps as well.
pub fn generate_supervision_with_maps(
    phi_bar: &ScoreMatrix,
    boxes: &[BBox],
    y: &ImageLabel,
    height: usize,
    width: usize,
    config: &VoteConfig,
) -> Result<(Supervision, Vec<ClassVote>)> {
    check_vote_input(phi_bar, boxes, y, config)?;
    let votes = y
        .positives()
        .map(|c| vote_class(phi_bar, boxes, c, height, width, config))
        .collect::<Result<Vec<_>>>()?;
    let classes = votes
        .iter()
        .filter(|v| !v.boxes.is_empty())
        .map(|v| ClassBoxes {
            class: v.class,
            boxes: v.boxes.clone(),
        })
        .collect();
    Ok((Supervision { classes }, votes))
}

/// Pseudo ground truth for one image.
pub fn generate_supervision(
    phi_bar: &ScoreMatrix,
    boxes: &[BBox],
    y: &ImageLabel,
    height: usize,
    width: usize,
    config: &VoteConfig,
) -> Result<Supervision> {
    generate_supervision_with_maps(phi_bar, boxes, y, height, width, config).map(|(s, _)| s)
}

/// Binary PGM (`P5`) rendering of a likelihood map.
///
/// Layout: the ASCII header `P5\n<W> <H>\n255\n` followed by `H * W` bytes in
/// row-major order, each `round(255 * m)` of the normalized value. Raw maps
/// are normalized first.
pub fn pgm_bytes(map: &LikelihoodMap) -> Vec<u8> {
    let normalized;
    let map = if map.state == MapState::Raw {
        normalized = normalize(map);
        &normalized
    } else {
        map
    };
    let header = format!("P5\n{} {}\n255\n", map.width, map.height);
    let mut out = Vec::with_capacity(header.len() + map.values.len());
    out.extend_from_slice(header.as_bytes());
    out.extend(
        map.values
            .iter()
            .map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8),
    );
    out
}

pub fn write_pgm<W: Write>(map: &LikelihoodMap, mut writer: W) -> std::io::Result<()> {
    writer.write_all(&pgm_bytes(map))
}
