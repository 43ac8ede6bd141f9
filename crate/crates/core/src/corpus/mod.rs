//! Study records, labels and corpus-level operations.

mod generate;
mod io;

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use generate::{
    generate, generate_corpus, BackgroundParams, GeneratedCorpus, GeneratorSpec, ImageSignal,
};
pub use io::{load_corpus, read_corpus, save_corpus, write_corpus};

/// Class probabilities in canonical label order.
pub type Probs = [f64; 3];

/// Tolerance on probability vectors summing to one.
pub const PROB_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid generator spec field `{field}`: {reason}")]
    InvalidSpec { field: &'static str, reason: String },
    #[error("invalid series filter: {0}")]
    InvalidFilter(String),
    #[error("invalid pixel grid: {0}")]
    InvalidPixels(String),
    #[error("invalid label: {0}")]
    InvalidLabel(String),
    #[error("{}: file not found", path.display())]
    NotFound { path: PathBuf },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate accession_id `{accession_id}`")]
    DuplicateAccession { line: usize, accession_id: String },
}

/// The three study-level classes, totally ordered Normal < Abnormal < Arthroplasty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Abnormal,
    Arthroplasty,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Normal, Label::Abnormal, Label::Arthroplasty];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Label> {
        Self::ALL.get(index).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Abnormal => "abnormal",
            Label::Arthroplasty => "arthroplasty",
        }
    }

    /// Index of the largest probability; ties resolve to the lowest label.
    pub fn argmax(probs: &Probs) -> Label {
        let mut best = 0;
        for i in 1..3 {
            if probs[i] > probs[best] {
                best = i;
            }
        }
        Label::ALL[best]
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normal" | "0" => Ok(Label::Normal),
            "abnormal" | "1" => Ok(Label::Abnormal),
            "arthroplasty" | "2" => Ok(Label::Arthroplasty),
            other => Err(CorpusError::InvalidLabel(format!("unknown label `{other}`"))),
        }
    }
}

/// Where a label came from.
#[derive(Debug, Clone, PartialEq)]
pub enum LabelProvenance {
    Manual,
    /// Assigned by the rule engine; stands in for manual annotation.
    Rule,
    /// Assigned by a model; carries the probability vector that produced it.
    Pseudo { probs: Probs },
}

impl LabelProvenance {
    pub fn is_pseudo(&self) -> bool {
        matches!(self, LabelProvenance::Pseudo { .. })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LabelProvenance::Manual => "manual",
            LabelProvenance::Rule => "rule",
            LabelProvenance::Pseudo { .. } => "pseudo",
        }
    }
}

/// A label together with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LabelWire", into = "LabelWire")]
pub struct AssignedLabel {
    pub value: Label,
    pub provenance: LabelProvenance,
}

impl AssignedLabel {
    pub fn manual(value: Label) -> Self {
        Self { value, provenance: LabelProvenance::Manual }
    }

    pub fn rule(value: Label) -> Self {
        Self { value, provenance: LabelProvenance::Rule }
    }

    /// Pseudo label from a probability vector; the value is its argmax.
    pub fn pseudo(probs: Probs) -> Result<Self, CorpusError> {
        check_probs(&probs)?;
        Ok(Self { value: Label::argmax(&probs), provenance: LabelProvenance::Pseudo { probs } })
    }
}

fn check_probs(probs: &Probs) -> Result<(), CorpusError> {
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(CorpusError::InvalidLabel(format!("probabilities {probs:?} out of range")));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > PROB_SUM_TOL {
        return Err(CorpusError::InvalidLabel(format!("probabilities sum to {sum}, expected 1")));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelWire {
    value: Label,
    provenance: String,
    #[serde(default)]
    probs: Option<Probs>,
}

impl TryFrom<LabelWire> for AssignedLabel {
    type Error = CorpusError;

    fn try_from(w: LabelWire) -> Result<Self, Self::Error> {
        let provenance = match (w.provenance.as_str(), w.probs) {
            ("manual", None) => LabelProvenance::Manual,
            ("rule", None) => LabelProvenance::Rule,
            ("pseudo", Some(probs)) => {
                check_probs(&probs)?;
                LabelProvenance::Pseudo { probs }
            }
            ("pseudo", None) => {
                return Err(CorpusError::InvalidLabel("pseudo label without probs".into()))
            }
            ("manual" | "rule", Some(_)) => {
                return Err(CorpusError::InvalidLabel(format!(
                    "{} label must not carry probs",
                    w.provenance
                )))
            }
            (other, _) => {
                return Err(CorpusError::InvalidLabel(format!("unknown provenance `{other}`")))
            }
        };
        Ok(AssignedLabel { value: w.value, provenance })
    }
}

impl From<AssignedLabel> for LabelWire {
    fn from(l: AssignedLabel) -> Self {
        let probs = match l.provenance {
            LabelProvenance::Pseudo { probs } => Some(probs),
            _ => None,
        };
        LabelWire { value: l.value, provenance: l.provenance.kind().to_string(), probs }
    }
}

/// Row-major grid of non-negative pixel intensities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f32>>", into = "Vec<Vec<f32>>")]
pub struct PixelGrid {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl PixelGrid {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, CorpusError> {
        if rows == 0 || cols == 0 {
            return Err(CorpusError::InvalidPixels(format!("empty {rows}x{cols} grid")));
        }
        if data.len() != rows * cols {
            return Err(CorpusError::InvalidPixels(format!(
                "{} values for a {rows}x{cols} grid",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(CorpusError::InvalidPixels(format!("value {v} is not a non-negative real")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols + col]
    }
}

impl TryFrom<Vec<Vec<f32>>> for PixelGrid {
    type Error = CorpusError;

    fn try_from(rows: Vec<Vec<f32>>) -> Result<Self, Self::Error> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_cols) {
            return Err(CorpusError::InvalidPixels("ragged rows".into()));
        }
        PixelGrid::new(n_rows, n_cols, rows.into_iter().flatten().collect())
    }
}

impl From<PixelGrid> for Vec<Vec<f32>> {
    fn from(g: PixelGrid) -> Self {
        g.data.chunks(g.cols).map(<[f32]>::to_vec).collect()
    }
}

/// One imaging study with its report and (optionally) pixels and label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyRecord {
    pub patient_id: String,
    pub accession_id: String,
    pub study_date: NaiveDate,
    pub modality: String,
    pub series_description: String,
    pub report_text: String,
    pub pixels: Option<PixelGrid>,
    pub label: Option<AssignedLabel>,
}

/// Acquisition metadata filter selecting the bilateral PA standing views.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesFilter {
    allowed_modalities: BTreeSet<String>,
    allowed_series: BTreeSet<String>,
}

impl SeriesFilter {
    pub fn new<M, S>(modalities: M, series: S) -> Result<Self, CorpusError>
    where
        M: IntoIterator,
        M::Item: Into<String>,
        S: IntoIterator,
        S::Item: Into<String>,
    {
        let allowed_modalities: BTreeSet<String> = modalities.into_iter().map(Into::into).collect();
        let allowed_series: BTreeSet<String> = series.into_iter().map(Into::into).collect();
        if allowed_modalities.is_empty() {
            return Err(CorpusError::InvalidFilter("no allowed modalities".into()));
        }
        if allowed_series.is_empty() {
            return Err(CorpusError::InvalidFilter("no allowed series descriptions".into()));
        }
        Ok(Self { allowed_modalities, allowed_series })
    }

    pub fn allowed_modalities(&self) -> &BTreeSet<String> {
        &self.allowed_modalities
    }

    pub fn allowed_series(&self) -> &BTreeSet<String> {
        &self.allowed_series
    }

    pub fn accepts(&self, record: &StudyRecord) -> bool {
        self.allowed_modalities.contains(&record.modality)
            && self.allowed_series.contains(&record.series_description)
    }
}

impl Default for SeriesFilter {
    fn default() -> Self {
        Self::new(["CR", "DX"], ["PA Axial", "PA Weight Bearing", "PA Tunnel"])
            .expect("default filter is non-empty")
    }
}

/// Records accepted by `filter`, in input order.
pub fn filter_studies(records: &[StudyRecord], filter: &SeriesFilter) -> Vec<StudyRecord> {
    records.iter().filter(|r| filter.accepts(r)).cloned().collect()
}

/// Largest-remainder apportionment of `total` units over `weights`.
///
/// Weights must be non-negative and sum to a positive value. Remainder
/// ties go to the lower index.
pub fn apportion(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}
