//! Pseudo-label quality of three labeling schemes against known ground
//! truth: the top proposal per positive class, the top proposal of every
//! proposal cluster, and spatial likelihood voting.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::mil::{build_clusters, ImageLabel, ScoreMatrix};
use crate::pipeline::dataset::{Dataset, DatasetRecord};
use crate::pipeline::ScoreSource;
use crate::voting::{generate_supervision, VoteConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelingScheme {
    Conventional,
    Clustering,
    Slv,
}

impl LabelingScheme {
    pub const ALL: [LabelingScheme; 3] = [Self::Conventional, Self::Clustering, Self::Slv];

    pub fn name(self) -> &'static str {
        match self {
            Self::Conventional => "conventional",
            Self::Clustering => "clustering",
            Self::Slv => "slv",
        }
    }
}

/// `(class, box)` labels one scheme assigns to an image.
#[allow(clippy::too_many_arguments)]
pub fn label_boxes(
    scheme: LabelingScheme,
    scores: &ScoreMatrix,
    boxes: &[BBox],
    y: &ImageLabel,
    height: u32,
    width: u32,
    vote: &VoteConfig,
    cluster_iou: f64,
) -> Result<Vec<(usize, BBox)>> {
    if boxes.len() != scores.cols() || scores.rows() < y.num_classes() {
        return Err(Error::input(format!(
            "{:?} scores for {} boxes and {} classes",
            scores.shape(),
            boxes.len(),
            y.num_classes()
        )));
    }
    match scheme {
        LabelingScheme::Conventional => Ok(y
            .positives()
            .filter_map(|c| {
                let row = scores.row(c);
                let best = (0..row.len()).reduce(|b, r| if row[r] > row[b] { r } else { b })?;
                Some((c, boxes[best]))
            })
            .collect()),
        LabelingScheme::Clustering => Ok(build_clusters(scores, boxes, y, cluster_iou)?
            .clusters()
            .iter()
            .map(|cl| (cl.label, boxes[cl.center()]))
            .collect()),
        LabelingScheme::Slv => Ok(generate_supervision(scores, boxes, y, height as usize, width as usize, vote)?
            .iter()
            .map(|(c, b)| (c, *b))
            .collect()),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct IouStat {
    pub sum: f64,
    pub count: usize,
}

impl IouStat {
    fn add(&mut self, v: f64) {
        self.sum += v;
        self.count += 1;
    }

    /// Mean IoU, `None` when no box was labeled.
    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeSummary {
    pub scheme: LabelingScheme,
    pub per_class: BTreeMap<usize, IouStat>,
    pub overall: IouStat,
}

/// One summary per scheme, ordered by scheme name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeReport {
    pub schemes: Vec<SchemeSummary>,
}

impl SchemeReport {
    pub fn get(&self, scheme: LabelingScheme) -> Option<&SchemeSummary> {
        self.schemes.iter().find(|s| s.scheme == scheme)
    }
}

fn image_ious(
    record: &DatasetRecord,
    source: &ScoreSource,
    vote: &VoteConfig,
    cluster_iou: f64,
) -> Result<Vec<Vec<(usize, f64)>>> {
    let gt = record
        .gt
        .as_ref()
        .ok_or_else(|| Error::input(format!("record `{}` has no ground truth", record.image_id)))?;
    let scores = source.scores(record)?;
    LabelingScheme::ALL
        .iter()
        .map(|&scheme| {
            let labels = label_boxes(
                scheme,
                &scores,
                &record.proposals,
                &record.labels,
                record.height,
                record.width,
                vote,
                cluster_iou,
            )?;
            Ok(labels
                .iter()
                .map(|(c, b)| {
                    let best = gt
                        .iter()
                        .filter(|g| g.class == *c)
                        .map(|g| iou(b, &g.bbox))
                        .fold(0.0, f64::max);
                    (*c, best)
                })
                .collect())
        })
        .collect()
}

/// Mean IoU of every scheme's labeled boxes with their best-matching
/// ground truth of the same class.
pub fn compare_schemes(dataset: &Dataset, source: &ScoreSource, vote: &VoteConfig, cluster_iou: f64) -> Result<SchemeReport> {
    vote.validate()?;
    let per_image = dataset
        .records
        .par_iter()
        .map(|r| image_ious(r, source, vote, cluster_iou))
        .collect::<Result<Vec<_>>>()?;

    let mut schemes: Vec<SchemeSummary> = LabelingScheme::ALL
        .iter()
        .enumerate()
        .map(|(s, &scheme)| {
            let mut per_class: BTreeMap<usize, IouStat> = BTreeMap::new();
            let mut overall = IouStat::default();
            for (c, v) in per_image.iter().flat_map(|img| &img[s]) {
                per_class.entry(*c).or_default().add(*v);
                overall.add(*v);
            }
            SchemeSummary {
                scheme,
                per_class,
                overall,
            }
        })
        .collect();
    schemes.sort_by_key(|s| s.scheme.name());
    Ok(SchemeReport { schemes })
}

/// Tab-separated `scheme class mean_iou boxes` lines; the class `all` row
/// closes each scheme.
pub fn format_scheme_report(report: &SchemeReport, class_name: impl Fn(usize) -> String) -> String {
    let mut out = String::from("scheme\tclass\tmean_iou\tboxes\n");
    let mean = |s: &IouStat| s.mean().map_or_else(|| "-".to_owned(), |m| format!("{m:.6}"));
    for s in &report.schemes {
        for (c, stat) in &s.per_class {
            let _ = writeln!(out, "{}\t{}\t{}\t{}", s.scheme.name(), class_name(*c), mean(stat), stat.count);
        }
        let _ = writeln!(out, "{}\tall\t{}\t{}", s.scheme.name(), mean(&s.overall), s.overall.count);
    }
    out
}
