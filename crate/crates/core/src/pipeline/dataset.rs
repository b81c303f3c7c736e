//! Line-delimited JSON files: datasets, pseudo labels and detections.
//!
//! Every file starts with a header object naming its `format` and `version`;
//! each further non-blank line is one record. Dataset records look like
//!
//! ```text
//! {"image_id":"img_0000","height":128,"width":128,"labels":[0,1],
//!  "proposals":[[x0,y0,x1,y1],...],"features":[[...],...],
//!  "gt":[{"class":1,"box":[x0,y0,x1,y1]}],"scores":[[...],[...]]}
//! ```
//!
//! (one line per record). `features`, `gt` and `scores` are optional;
//! `scores` holds one row of `R` averaged refined scores per class.

use std::collections::{HashMap, HashSet};
use std::fmt::Display;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::eval::{Detection, GroundTruthSet};
use crate::geometry::{clip_box, BBox};
use crate::mil::{ImageLabel, ScoreKind, ScoreMatrix};
use crate::voting::Supervision;

pub const DATASET_FORMAT: &str = "slv-dataset";
pub const PSEUDO_LABEL_FORMAT: &str = "slv-pseudo-labels";
pub const DETECTION_FORMAT: &str = "slv-detections";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileHeader {
    pub format: String,
    pub version: u32,
    pub num_classes: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub class_names: Vec<String>,
}

impl FileHeader {
    pub fn new(format: &str, num_classes: usize, class_names: Vec<String>) -> Self {
        Self {
            format: format.to_owned(),
            version: FORMAT_VERSION,
            num_classes,
            class_names,
        }
    }

    pub fn class_name(&self, class: usize) -> String {
        self.class_names
            .get(class)
            .cloned()
            .unwrap_or_else(|| format!("class{class}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GtBox {
    pub class: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetRecord {
    pub image_id: String,
    pub height: u32,
    pub width: u32,
    pub labels: ImageLabel,
    pub proposals: Vec<BBox>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gt: Option<Vec<GtBox>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<Vec<f64>>>,
}

impl DatasetRecord {
    /// In-file scores as a class-by-proposal matrix.
    pub fn score_matrix(&self) -> Option<Result<ScoreMatrix>> {
        self.scores
            .as_ref()
            .map(|rows| ScoreMatrix::from_rows(rows, ScoreKind::Probabilities))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: FileHeader,
    pub records: Vec<DatasetRecord>,
}

impl Dataset {
    pub fn new(num_classes: usize, class_names: Vec<String>) -> Self {
        Self {
            header: FileHeader::new(DATASET_FORMAT, num_classes, class_names),
            records: Vec::new(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.header.num_classes
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn class_name(&self, class: usize) -> String {
        self.header.class_name(class)
    }

    /// Feature dimension, if any record carries features.
    pub fn feature_dim(&self) -> Option<usize> {
        self.records
            .iter()
            .filter_map(|r| r.features.as_ref())
            .find_map(|f| f.first().map(Vec::len))
    }

    /// Ground truth of every record; records without a `gt` field still
    /// count as images.
    pub fn ground_truth(&self) -> GroundTruthSet {
        let mut gt = GroundTruthSet::new();
        for r in &self.records {
            gt.add_image(&r.image_id);
            for g in r.gt.iter().flatten() {
                gt.insert(&r.image_id, g.class, g.bbox);
            }
        }
        gt
    }
}

/// Non-blank lines with their 1-based line numbers.
fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_owned()))
        .collect())
}

struct LineCtx<'a> {
    path: &'a Path,
    line: usize,
    record: String,
}

impl LineCtx<'_> {
    fn err(&self, field: &str, message: impl Display) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line: self.line,
            record: self.record.clone(),
            field: field.to_owned(),
            message: message.to_string(),
        }
    }

    fn object(&self, text: &str) -> Result<Map<String, Value>> {
        match serde_json::from_str::<Value>(text) {
            Ok(Value::Object(m)) => Ok(m),
            Ok(_) => Err(self.err("-", "expected a JSON object")),
            Err(e) => Err(self.err("-", e)),
        }
    }

    fn required<T: DeserializeOwned>(&self, obj: &mut Map<String, Value>, name: &str) -> Result<T> {
        let v = obj.remove(name).ok_or_else(|| self.err(name, "missing"))?;
        serde_json::from_value(v).map_err(|e| self.err(name, e))
    }

    fn optional<T: DeserializeOwned>(&self, obj: &mut Map<String, Value>, name: &str) -> Result<Option<T>> {
        match obj.remove(name) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => serde_json::from_value(v).map(Some).map_err(|e| self.err(name, e)),
        }
    }

    fn no_leftovers(&self, obj: &Map<String, Value>) -> Result<()> {
        match obj.keys().next() {
            Some(k) => Err(self.err(k, "unknown field")),
            None => Ok(()),
        }
    }
}

fn parse_header(path: &Path, line: usize, text: &str, format: &str) -> Result<FileHeader> {
    let ctx = LineCtx {
        path,
        line,
        record: "header".into(),
    };
    let header: FileHeader = serde_json::from_str(text).map_err(|e| ctx.err("-", e))?;
    if header.format != format {
        return Err(ctx.err("format", format!("expected `{format}`, found `{}`", header.format)));
    }
    if header.version != FORMAT_VERSION {
        return Err(ctx.err("version", format!("unsupported version {}", header.version)));
    }
    if !header.class_names.is_empty() && header.class_names.len() != header.num_classes {
        return Err(ctx.err(
            "class_names",
            format!("{} names for {} classes", header.class_names.len(), header.num_classes),
        ));
    }
    Ok(header)
}

/// Clips a raw box, warning when the clip changed it.
fn clip_raw(ctx: &LineCtx, field: &str, raw: [i64; 4], height: u32, width: u32) -> Result<BBox> {
    let [x0, y0, x1, y1] = raw;
    if x0 >= x1 || y0 >= y1 {
        return Err(ctx.err(field, format!("box {raw:?} has non-positive area")));
    }
    let b = clip_box(x0, y0, x1, y1, height, width).map_err(|e| ctx.err(field, e))?;
    if [b.x0(), b.y0(), b.x1(), b.y1()].map(i64::from) != raw {
        log::warn!(
            "{}:{}: {} {field}: {raw:?} clipped to {b}",
            ctx.path.display(),
            ctx.line,
            ctx.record
        );
    }
    Ok(b)
}

fn check_finite_rows(ctx: &LineCtx, field: &str, rows: &[Vec<f64>], cols: usize) -> Result<()> {
    for (i, row) in rows.iter().enumerate() {
        if row.len() != cols {
            return Err(ctx.err(&format!("{field}[{i}]"), format!("{} entries, expected {cols}", row.len())));
        }
        if let Some(v) = row.iter().find(|v| !v.is_finite()) {
            return Err(ctx.err(&format!("{field}[{i}]"), format!("non-finite entry {v}")));
        }
    }
    Ok(())
}

#[derive(Deserialize)]
struct RawGt {
    class: usize,
    #[serde(rename = "box")]
    bbox: [i64; 4],
}

fn parse_record(ctx: &mut LineCtx, text: &str, num_classes: usize, feature_dim: &mut Option<usize>) -> Result<DatasetRecord> {
    let mut obj = ctx.object(text)?;
    let image_id: String = ctx.required(&mut obj, "image_id")?;
    if image_id.is_empty() {
        return Err(ctx.err("image_id", "empty"));
    }
    ctx.record = image_id.clone();

    let height: u32 = ctx.required(&mut obj, "height")?;
    let width: u32 = ctx.required(&mut obj, "width")?;
    if height == 0 || width == 0 {
        return Err(ctx.err("height", format!("image is {height}x{width}")));
    }

    let raw_labels: Vec<u8> = ctx.required(&mut obj, "labels")?;
    let labels = ImageLabel::try_from(raw_labels).map_err(|e| ctx.err("labels", e))?;
    if labels.num_classes() != num_classes {
        return Err(ctx.err(
            "labels",
            format!("{} entries for {num_classes} classes", labels.num_classes()),
        ));
    }

    let raw_props: Vec<[i64; 4]> = ctx.required(&mut obj, "proposals")?;
    if raw_props.is_empty() {
        return Err(ctx.err("proposals", "no proposals"));
    }
    let proposals = raw_props
        .iter()
        .enumerate()
        .map(|(i, &b)| clip_raw(ctx, &format!("proposals[{i}]"), b, height, width))
        .collect::<Result<Vec<_>>>()?;
    let r_count = proposals.len();

    let features: Option<Vec<Vec<f64>>> = ctx.optional(&mut obj, "features")?;
    if let Some(f) = &features {
        if f.len() != r_count {
            return Err(ctx.err("features", format!("{} vectors for {r_count} proposals", f.len())));
        }
        let dim = *feature_dim.get_or_insert(f[0].len());
        if dim == 0 {
            return Err(ctx.err("features", "zero-dimensional features"));
        }
        check_finite_rows(ctx, "features", f, dim)?;
    }

    let gt = ctx
        .optional::<Vec<RawGt>>(&mut obj, "gt")?
        .map(|raw| {
            raw.iter()
                .enumerate()
                .map(|(i, g)| {
                    if g.class >= num_classes {
                        return Err(ctx.err(&format!("gt[{i}].class"), format!("class {} out of range", g.class)));
                    }
                    Ok(GtBox {
                        class: g.class,
                        bbox: clip_raw(ctx, &format!("gt[{i}].box"), g.bbox, height, width)?,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;

    let scores: Option<Vec<Vec<f64>>> = ctx.optional(&mut obj, "scores")?;
    if let Some(s) = &scores {
        if s.len() != num_classes {
            return Err(ctx.err("scores", format!("{} rows for {num_classes} classes", s.len())));
        }
        check_finite_rows(ctx, "scores", s, r_count)?;
        if let Some(v) = s.iter().flatten().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ctx.err("scores", format!("entry {v} outside [0, 1]")));
        }
    }

    ctx.no_leftovers(&obj)?;
    Ok(DatasetRecord {
        image_id,
        height,
        width,
        labels,
        proposals,
        features,
        gt,
        scores,
    })
}

/// Reads and validates a dataset file. A file with no lines is an empty
/// dataset; proposals and ground truth sticking out of the image are
/// clipped with a warning.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let lines = read_lines(path)?;
    let Some(((hline, htext), rest)) = lines.split_first() else {
        return Ok(Dataset::new(0, Vec::new()));
    };
    let header = parse_header(path, *hline, htext, DATASET_FORMAT)?;
    let mut feature_dim = None;
    let mut seen = HashSet::new();
    let mut records = Vec::with_capacity(rest.len());
    for (line, text) in rest {
        let mut ctx = LineCtx {
            path,
            line: *line,
            record: format!("#{}", records.len()),
        };
        let rec = parse_record(&mut ctx, text, header.num_classes, &mut feature_dim)?;
        if !seen.insert(rec.image_id.clone()) {
            return Err(ctx.err("image_id", "duplicate image id"));
        }
        records.push(rec);
    }
    Ok(Dataset { header, records })
}

fn create_writer(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, header: &FileHeader, items: &[T]) -> Result<()> {
    let mut w = create_writer(path)?;
    let io = |e: std::io::Error| Error::io(path, e);
    let json = |e: serde_json::Error| Error::io(path, e.into());
    writeln!(w, "{}", serde_json::to_string(header).map_err(json)?).map_err(io)?;
    for item in items {
        writeln!(w, "{}", serde_json::to_string(item).map_err(json)?).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    write_jsonl(path, &dataset.header, &dataset.records)
}

/// One image's pseudo ground truth. `error` is set when voting failed for
/// the image; its supervision is then empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoLabelRecord {
    pub image_id: String,
    pub supervision: Supervision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn load_records<T: DeserializeOwned>(path: &Path, format: &str) -> Result<(FileHeader, Vec<T>)> {
    let lines = read_lines(path)?;
    let ((hline, htext), rest) = lines.split_first().ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        record: "header".into(),
        field: "-".into(),
        message: "missing header line".into(),
    })?;
    let header = parse_header(path, *hline, htext, format)?;
    let items = rest
        .iter()
        .enumerate()
        .map(|(i, (line, text))| {
            serde_json::from_str(text).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: *line,
                record: format!("#{i}"),
                field: "-".into(),
                message: e.to_string(),
            })
        })
        .collect::<Result<Vec<T>>>()?;
    Ok((header, items))
}

pub fn save_pseudo_labels(path: &Path, header: &FileHeader, records: &[PseudoLabelRecord]) -> Result<()> {
    write_jsonl(path, header, records)
}

pub fn load_pseudo_labels(path: &Path) -> Result<(FileHeader, Vec<PseudoLabelRecord>)> {
    load_records(path, PSEUDO_LABEL_FORMAT)
}

pub fn save_detections(path: &Path, header: &FileHeader, dets: &[Detection]) -> Result<()> {
    write_jsonl(path, header, dets)
}

pub fn load_detections(path: &Path) -> Result<(FileHeader, Vec<Detection>)> {
    load_records(path, DETECTION_FORMAT)
}

/// Checks detections against a dataset: known image, known class, finite
/// score, box inside the image.
pub fn validate_detections(dets: &[Detection], dataset: &Dataset) -> Result<()> {
    let sizes: HashMap<&str, (u32, u32)> = dataset
        .records
        .iter()
        .map(|r| (r.image_id.as_str(), (r.height, r.width)))
        .collect();
    for (i, d) in dets.iter().enumerate() {
        let &(h, w) = sizes
            .get(d.image_id.as_str())
            .ok_or_else(|| Error::input(format!("detection {i}: unknown image `{}`", d.image_id)))?;
        if d.class >= dataset.num_classes() {
            return Err(Error::input(format!("detection {i}: unknown class id {}", d.class)));
        }
        if !d.score.is_finite() {
            return Err(Error::input(format!("detection {i}: score {} is not finite", d.score)));
        }
        if !d.bbox.fits(h, w) {
            return Err(Error::input(format!(
                "detection {i}: box {} outside the {h}x{w} image",
                d.bbox
            )));
        }
    }
    Ok(())
}

/// File name for an `(image, class)` heatmap.
pub fn heatmap_file_name(image_id: &str, class_name: &str) -> PathBuf {
    let safe = |s: &str| -> String {
        s.chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
            .collect()
    };
    PathBuf::from(format!("{}__{}.pgm", safe(image_id), safe(class_name)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voting::ClassBoxes;

    fn write(dir: &tempfile::TempDir, name: &str, text: &str) -> PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, text).unwrap();
        p
    }

    const HEADER: &str = r#"{"format":"slv-dataset","version":1,"num_classes":2}"#;

    #[test]
    fn empty_file_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let d = load_dataset(&write(&dir, "e.jsonl", "")).unwrap();
        assert!(d.is_empty());
        let d = load_dataset(&write(&dir, "h.jsonl", &format!("{HEADER}\n"))).unwrap();
        assert!(d.is_empty());
        assert_eq!(d.num_classes(), 2);
    }

    #[test]
    fn out_of_bounds_proposal_is_clipped() {
        let dir = tempfile::tempdir().unwrap();
        let rec = r#"{"image_id":"a","height":10,"width":10,"labels":[1,0],"proposals":[[-3,2,15,8]]}"#;
        let d = load_dataset(&write(&dir, "c.jsonl", &format!("{HEADER}\n{rec}\n"))).unwrap();
        assert_eq!(d.records[0].proposals, vec![BBox::new(0, 2, 10, 8).unwrap()]);
    }

    fn parse_error(text: &str) -> (usize, String, String) {
        let dir = tempfile::tempdir().unwrap();
        match load_dataset(&write(&dir, "bad.jsonl", text)) {
            Err(Error::Parse { line, record, field, .. }) => (line, record, field),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn errors_name_line_record_and_field() {
        let good = r#"{"image_id":"a","height":10,"width":10,"labels":[1,0],"proposals":[[0,0,5,5]]}"#;
        let bad_label = r#"{"image_id":"b","height":10,"width":10,"labels":[1,2],"proposals":[[0,0,5,5]]}"#;
        assert_eq!(
            parse_error(&format!("{HEADER}\n{good}\n\n{bad_label}\n")),
            (4, "b".into(), "labels".into())
        );

        let outside = r#"{"image_id":"c","height":10,"width":10,"labels":[1,0],"proposals":[[0,0,5,5],[12,0,15,5]]}"#;
        assert_eq!(parse_error(&format!("{HEADER}\n{outside}\n")).2, "proposals[1]");

        let short_scores = r#"{"image_id":"d","height":10,"width":10,"labels":[1,0],"proposals":[[0,0,5,5]],"scores":[[0.5],[0.1,0.2]]}"#;
        assert_eq!(parse_error(&format!("{HEADER}\n{short_scores}\n")).2, "scores[1]");

        let typo = r#"{"image_id":"e","height":10,"width":10,"labels":[1,0],"proposals":[[0,0,5,5]],"featurs":[]}"#;
        assert_eq!(parse_error(&format!("{HEADER}\n{typo}\n")).2, "featurs");

        let feats = r#"{"image_id":"f","height":10,"width":10,"labels":[1,0],"proposals":[[0,0,5,5]],"features":[[1.0,2.0]]}"#;
        let feats3 = r#"{"image_id":"g","height":10,"width":10,"labels":[1,0],"proposals":[[0,0,5,5]],"features":[[1.0,2.0,3.0]]}"#;
        assert_eq!(parse_error(&format!("{HEADER}\n{feats}\n{feats3}\n")).2, "features[0]");

        assert_eq!(parse_error(&format!("{HEADER}\n{good}\n{good}\n")).2, "image_id");
        assert_eq!(parse_error("{\"format\":\"other\",\"version\":1,\"num_classes\":2}\n").2, "format");
    }

    #[test]
    fn pseudo_labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let header = FileHeader::new(PSEUDO_LABEL_FORMAT, 3, vec![]);
        let records = vec![
            PseudoLabelRecord {
                image_id: "a".into(),
                supervision: Supervision {
                    classes: vec![ClassBoxes {
                        class: 2,
                        boxes: vec![BBox::new(1, 2, 3, 4).unwrap()],
                    }],
                },
                error: None,
            },
            PseudoLabelRecord {
                image_id: "b".into(),
                supervision: Supervision::default(),
                error: Some("no scores".into()),
            },
        ];
        let p = dir.path().join("pl.jsonl");
        save_pseudo_labels(&p, &header, &records).unwrap();
        let first = fs::read(&p).unwrap();
        assert_eq!(load_pseudo_labels(&p).unwrap(), (header.clone(), records.clone()));
        let (h, r) = load_pseudo_labels(&p).unwrap();
        save_pseudo_labels(&p, &h, &r).unwrap();
        assert_eq!(fs::read(&p).unwrap(), first);
    }

    #[test]
    fn heatmap_names_are_filesystem_safe() {
        assert_eq!(heatmap_file_name("img/01", "potted plant"), PathBuf::from("img_01__potted_plant.pgm"));
    }
}
