//! Dataset I/O, synthetic scenes, the toy trainer and the commands of the
//! `slv` binary.

pub mod commands;
pub mod dataset;
pub mod schemes;
pub mod synthetic;
pub mod train;

pub use commands::{evaluate_file, run_vote, EvalConfig, PipelineConfig, VoteSummary};
pub use dataset::{load_dataset, save_dataset, Dataset, DatasetRecord, GtBox};
pub use schemes::{compare_schemes, format_scheme_report, LabelingScheme, SchemeReport};
pub use synthetic::{generate_synthetic, SyntheticSceneConfig};
pub use train::{detect_dataset, format_trace, load_model, save_model, train_toy, ToyScorer, TraceEntry, TrainConfig};

use crate::error::{Error, Result};
use crate::mil::ScoreMatrix;

/// Where averaged proposal scores come from.
#[derive(Debug, Clone, Copy)]
pub enum ScoreSource<'a> {
    /// The `scores` field of each record.
    InFile,
    /// The averaged refinement branches of a trained scorer.
    Model(&'a ToyScorer),
}

impl ScoreSource<'_> {
    pub fn scores(&self, record: &DatasetRecord) -> Result<ScoreMatrix> {
        match self {
            ScoreSource::InFile => record
                .score_matrix()
                .ok_or_else(|| Error::input(format!("record `{}` has no scores", record.image_id)))?,
            ScoreSource::Model(m) => Ok(m.predict(record)?.phi_bar),
        }
    }
}
