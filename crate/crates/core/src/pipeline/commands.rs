//! File-level commands behind the `slv` binary.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate_detections, format_report, ApMethod, MetricReport};
use crate::pipeline::dataset::{
    heatmap_file_name, load_detections, validate_detections, Dataset, DatasetRecord, FileHeader,
    PseudoLabelRecord, PSEUDO_LABEL_FORMAT,
};
use crate::pipeline::synthetic::SyntheticSceneConfig;
use crate::pipeline::train::TrainConfig;
use crate::pipeline::ScoreSource;
use crate::voting::{generate_supervision_with_maps, pgm_bytes, Supervision, VoteConfig};

pub const PSEUDO_LABEL_FILE: &str = "pseudo_labels.jsonl";
pub const HEATMAP_DIR: &str = "heatmaps";

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ap_method: ApMethod,
}

/// Contents of a `--config` TOML file; every section and key is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub synthetic: SyntheticSceneConfig,
    pub train: TrainConfig,
    pub vote: VoteConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.train.validate()?;
        self.vote.validate()
    }
}

struct ImageVote {
    record: PseudoLabelRecord,
    heatmaps: Vec<(PathBuf, Vec<u8>)>,
}

fn vote_image(
    record: &DatasetRecord,
    dataset: &Dataset,
    source: &ScoreSource,
    vote: &VoteConfig,
    emit_heatmaps: bool,
) -> ImageVote {
    let result = source.scores(record).and_then(|scores| {
        generate_supervision_with_maps(
            &scores,
            &record.proposals,
            &record.labels,
            record.height as usize,
            record.width as usize,
            vote,
        )
    });
    match result {
        Ok((supervision, maps)) => ImageVote {
            record: PseudoLabelRecord {
                image_id: record.image_id.clone(),
                supervision,
                error: None,
            },
            heatmaps: if emit_heatmaps {
                maps.iter()
                    .map(|v| {
                        (
                            heatmap_file_name(&record.image_id, &dataset.class_name(v.class)),
                            pgm_bytes(&v.map),
                        )
                    })
                    .collect()
            } else {
                Vec::new()
            },
        },
        Err(e) => {
            log::error!("{}: {e}", record.image_id);
            ImageVote {
                record: PseudoLabelRecord {
                    image_id: record.image_id.clone(),
                    supervision: Supervision::default(),
                    error: Some(e.to_string()),
                },
                heatmaps: Vec::new(),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteSummary {
    pub images: usize,
    pub boxes: usize,
    pub failed: usize,
    pub heatmaps: usize,
}

/// Votes pseudo ground truth for every image and writes
/// `pseudo_labels.jsonl` (ordered by image id) plus, optionally, one PGM
/// heatmap per (image, positive class) under `heatmaps/`.
///
/// Images whose scores are missing or invalid are recorded with an `error`
/// field and do not stop the run.
pub fn run_vote(
    dataset: &Dataset,
    source: &ScoreSource,
    vote: &VoteConfig,
    out_dir: &Path,
    emit_heatmaps: bool,
) -> Result<VoteSummary> {
    vote.validate()?;
    let mut results: Vec<ImageVote> = dataset
        .records
        .par_iter()
        .map(|r| vote_image(r, dataset, source, vote, emit_heatmaps))
        .collect();
    results.sort_by(|a, b| a.record.image_id.cmp(&b.record.image_id));

    let mut heatmaps = 0;
    if emit_heatmaps {
        let dir = out_dir.join(HEATMAP_DIR);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (name, bytes) in results.iter().flat_map(|r| &r.heatmaps) {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
            heatmaps += 1;
        }
    }

    let records: Vec<PseudoLabelRecord> = results.into_iter().map(|r| r.record).collect();
    let header = FileHeader::new(PSEUDO_LABEL_FORMAT, dataset.num_classes(), dataset.header.class_names.clone());
    crate::pipeline::dataset::save_pseudo_labels(&out_dir.join(PSEUDO_LABEL_FILE), &header, &records)?;
    Ok(VoteSummary {
        images: records.len(),
        boxes: records.iter().map(|r| r.supervision.num_boxes()).sum(),
        failed: records.iter().filter(|r| r.error.is_some()).count(),
        heatmaps,
    })
}

/// Loads a detections file, checks it against the dataset and evaluates it.
/// Returns the report and its fixed text rendering.
pub fn evaluate_file(detections: &Path, dataset: &Dataset, method: ApMethod) -> Result<(MetricReport, String)> {
    let (_, dets) = load_detections(detections)?;
    validate_detections(&dets, dataset)?;
    let report = evaluate_detections(&dets, &dataset.ground_truth(), method)?;
    let text = format_report(&report, |c| dataset.class_name(c));
    Ok((report, text))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::dataset::load_pseudo_labels;
    use crate::pipeline::synthetic::generate_synthetic;

    #[test]
    fn config_sections_are_optional() {
        assert_eq!(PipelineConfig::from_toml("").unwrap(), PipelineConfig::default());
        let cfg = PipelineConfig::from_toml(
            "[synthetic]\nbias = 0.9\n[train]\niterations = 7\nramp = { ramp_length = 10, shape = \"linear\" }\n[vote]\nt_b_default = 0.4\n[eval]\nap_method = \"eleven_point\"\n",
        )
        .unwrap();
        assert_eq!(cfg.synthetic.bias, 0.9);
        assert_eq!(cfg.train.iterations, 7);
        assert_eq!(cfg.train.ramp.ramp_length, 10);
        assert_eq!(cfg.vote.t_b_default, 0.4);
        assert_eq!(cfg.vote.t_b_for(14), 0.2);
        assert_eq!(cfg.eval.ap_method, ApMethod::ElevenPoint);
        assert!(PipelineConfig::from_toml("[vote]\nt_scor = 0.1\n").is_err());
        assert!(PipelineConfig::from_toml("[vote]\nt_b_default = 1.5\n").is_err());
    }

    #[test]
    fn vote_writes_labels_and_heatmaps() {
        let dir = tempfile::tempdir().unwrap();
        let mut d = generate_synthetic(
            &SyntheticSceneConfig {
                num_images: 4,
                ..Default::default()
            },
            2,
        )
        .unwrap();
        d.records[2].scores = None;
        let s = run_vote(&d, &ScoreSource::InFile, &VoteConfig::voc2007(), dir.path(), true).unwrap();
        assert_eq!(s.images, 4);
        assert_eq!(s.failed, 1);
        let positives: usize = d
            .records
            .iter()
            .filter(|r| r.scores.is_some())
            .map(|r| r.labels.positives().count())
            .sum();
        assert_eq!(s.heatmaps, positives);
        let (_, labels) = load_pseudo_labels(&dir.path().join(PSEUDO_LABEL_FILE)).unwrap();
        assert_eq!(labels.len(), 4);
        assert!(labels[2].error.is_some() && labels[2].supervision.is_empty());
    }
}
