//! The CSV exchange protocol: blank template emission, strict parsing
//! and validation of populated submissions, and per-label score
//! extraction for AUC.
//!
//! The wire format is deliberately narrow: UTF-8, comma separators,
//! `\n` line endings (an optional trailing newline and `\r` before a
//! newline are tolerated), a mandatory header, and ids/labels limited
//! to `[A-Za-z0-9_.-]` so no quoting is ever needed. The minimal header
//! is exactly `ID,Class`; the optional extension appends one
//! `prob_<label>` column per vocabulary label, all or none.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{CohortError, EvaluationSet, ReviewState};
use crate::taxonomy::{CountryCode, LocationTaxonomy, TaxonomyError};

/// Probability rows must sum to 1 within this tolerance.
pub const PROBABILITY_SUM_TOLERANCE: f64 = 1e-3;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum SubmissionError {
    #[error("evaluation set is not approved")]
    NotApproved,
    #[error("bad header: {0}")]
    BadHeader(String),
    #[error("probability columns must cover the vocabulary exactly: {0}")]
    PartialProbabilityColumns(String),
    #[error("line {line}: expected {expected} fields, found {found}")]
    WrongArity { line: u64, expected: usize, found: usize },
    #[error("case `{0}` is missing from the submission")]
    MissingCase(String),
    #[error("line {line}: case `{case_id}` is not in this evaluation set")]
    UnknownCase { line: u64, case_id: String },
    #[error("line {line}: case `{case_id}` appears more than once")]
    DuplicateCase { line: u64, case_id: String },
    #[error("line {line}: Class is blank")]
    BlankClass { line: u64 },
    #[error("line {line}: label `{label}` is not in the vocabulary")]
    UnknownLabel { line: u64, label: String },
    #[error("line {line}: bad probability `{value}` for `{label}`")]
    BadProbability { line: u64, label: String, value: String },
    #[error("line {line}: probabilities sum to {sum}, more than 1e-3 away from 1")]
    ProbabilitySumViolation { line: u64, sum: f64 },
    #[error("line {line}: predicted class `{predicted}` does not attain the maximum probability (`{argmax}` does)")]
    ArgmaxMismatch { line: u64, predicted: String, argmax: String },
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
}

impl From<CohortError> for SubmissionError {
    fn from(e: CohortError) -> Self {
        match e {
            CohortError::NotApproved => SubmissionError::NotApproved,
            other => SubmissionError::BadHeader(other.to_string()),
        }
    }
}

/// Who produced a submission, and from where.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OriginDeclaration {
    pub submitter_id: String,
    #[serde(flatten)]
    pub kind: OriginKind,
}

/// Exactly one country field exists, matching the submitter kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum OriginKind {
    AiSystem { development_country: CountryCode },
    RadiologistRead { radiologist_country: CountryCode },
}

impl OriginDeclaration {
    pub fn ai_system(submitter_id: &str, development_country: CountryCode) -> Self {
        OriginDeclaration {
            submitter_id: submitter_id.to_string(),
            kind: OriginKind::AiSystem {
                development_country,
            },
        }
    }

    pub fn radiologist(submitter_id: &str, radiologist_country: CountryCode) -> Self {
        OriginDeclaration {
            submitter_id: submitter_id.to_string(),
            kind: OriginKind::RadiologistRead {
                radiologist_country,
            },
        }
    }

    /// The one country this origin declares.
    pub fn country(&self) -> &CountryCode {
        match &self.kind {
            OriginKind::AiSystem {
                development_country,
            } => development_country,
            OriginKind::RadiologistRead {
                radiologist_country,
            } => radiologist_country,
        }
    }

    pub fn is_radiologist(&self) -> bool {
        matches!(self.kind, OriginKind::RadiologistRead { .. })
    }

    pub fn validate(&self, taxonomy: &LocationTaxonomy) -> Result<(), TaxonomyError> {
        taxonomy.resolve(self.country()).map(|_| ())
    }
}

impl fmt::Display for OriginDeclaration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            OriginKind::AiSystem {
                development_country,
            } => write!(f, "{} (AiSystem, {development_country})", self.submitter_id),
            OriginKind::RadiologistRead {
                radiologist_country,
            } => write!(
                f,
                "{} (RadiologistRead, {radiologist_country})",
                self.submitter_id
            ),
        }
    }
}

/// One validated prediction row. `probabilities` aligns with the set's
/// vocabulary order when present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmissionRow {
    pub case_id: String,
    pub predicted_class: String,
    pub probabilities: Option<Vec<f64>>,
}

/// A fully validated submission, pinned to one evaluation-set version.
/// Rows are normalized to the set's case order, so two files differing
/// only by row permutation compare equal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmissionFile {
    pub set_id: String,
    pub set_version: u64,
    pub vocabulary: Vec<String>,
    pub origin: OriginDeclaration,
    pub rows: Vec<SubmissionRow>,
}

impl SubmissionFile {
    pub fn has_probabilities(&self) -> bool {
        self.rows.first().is_some_and(|r| r.probabilities.is_some())
    }
}

/// Emits the blank template: header `ID,Class`, one row per case in
/// export order, Class empty. Byte-identical across calls at the same
/// set version.
pub fn emit_template(set: &EvaluationSet) -> Result<String, SubmissionError> {
    if set.review_state != ReviewState::Approved {
        return Err(SubmissionError::NotApproved);
    }
    let mut out = String::from("ID,Class\n");
    for &idx in &set.export_order() {
        out.push_str(&set.cases[idx].case_id);
        out.push_str(",\n");
    }
    Ok(out)
}

struct Header {
    /// Probability column index per vocabulary label, when present.
    prob_columns: Option<Vec<usize>>,
    width: usize,
}

fn parse_header(line: &str, vocabulary: &[String]) -> Result<Header, SubmissionError> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() < 2 || fields[0] != "ID" || fields[1] != "Class" {
        return Err(SubmissionError::BadHeader(format!(
            "expected `ID,Class[,prob_<label>...]`, found `{line}`"
        )));
    }
    if fields.len() == 2 {
        return Ok(Header {
            prob_columns: None,
            width: 2,
        });
    }
    // Probability columns are all-or-none and must cover the vocabulary
    // exactly (any order), without duplicates.
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for (idx, field) in fields.iter().enumerate().skip(2) {
        let label = field.strip_prefix("prob_").ok_or_else(|| {
            SubmissionError::PartialProbabilityColumns(format!(
                "column `{field}` is not a prob_<label> column"
            ))
        })?;
        if !vocabulary.iter().any(|l| l == label) {
            return Err(SubmissionError::PartialProbabilityColumns(format!(
                "`prob_{label}` does not match any vocabulary label"
            )));
        }
        if seen.insert(label, idx).is_some() {
            return Err(SubmissionError::PartialProbabilityColumns(format!(
                "duplicate column `prob_{label}`"
            )));
        }
    }
    if seen.len() != vocabulary.len() {
        let missing: Vec<&str> = vocabulary
            .iter()
            .filter(|l| !seen.contains_key(l.as_str()))
            .map(|l| l.as_str())
            .collect();
        return Err(SubmissionError::PartialProbabilityColumns(format!(
            "missing columns for: {}",
            missing.join(", ")
        )));
    }
    let prob_columns = vocabulary
        .iter()
        .map(|l| seen[l.as_str()])
        .collect();
    Ok(Header {
        prob_columns: Some(prob_columns),
        width: 2 + vocabulary.len(),
    })
}

/// Parses and validates a populated submission against the pinned
/// evaluation set. Rejects on the first defect, identifying the
/// offending physical line (the header is line 1).
pub fn parse_submission(
    csv_text: &str,
    set: &EvaluationSet,
    origin: OriginDeclaration,
) -> Result<SubmissionFile, SubmissionError> {
    if set.review_state != ReviewState::Approved {
        return Err(SubmissionError::NotApproved);
    }
    let vocabulary = &set.label_vocabulary;
    let mut lines = csv_text.lines().enumerate();
    let header = match lines.next() {
        Some((_, line)) => parse_header(line.strip_suffix('\r').unwrap_or(line), vocabulary)?,
        None => return Err(SubmissionError::BadHeader("empty file".into())),
    };

    let case_index: BTreeMap<&str, usize> = set
        .cases
        .iter()
        .enumerate()
        .map(|(i, c)| (c.case_id.as_str(), i))
        .collect();
    let mut parsed: Vec<Option<SubmissionRow>> = vec![None; set.cases.len()];

    for (zero_idx, raw_line) in lines {
        let line = zero_idx as u64 + 1;
        let text = raw_line.strip_suffix('\r').unwrap_or(raw_line);
        if text.is_empty() {
            continue;
        }
        let fields: Vec<&str> = text.split(',').collect();
        if fields.len() != header.width {
            return Err(SubmissionError::WrongArity {
                line,
                expected: header.width,
                found: fields.len(),
            });
        }
        let case_id = fields[0];
        let slot = *case_index.get(case_id).ok_or_else(|| SubmissionError::UnknownCase {
            line,
            case_id: case_id.to_string(),
        })?;
        if parsed[slot].is_some() {
            return Err(SubmissionError::DuplicateCase {
                line,
                case_id: case_id.to_string(),
            });
        }
        let predicted_class = fields[1];
        if predicted_class.is_empty() {
            return Err(SubmissionError::BlankClass { line });
        }
        if !vocabulary.iter().any(|l| l == predicted_class) {
            return Err(SubmissionError::UnknownLabel {
                line,
                label: predicted_class.to_string(),
            });
        }
        let probabilities = match &header.prob_columns {
            None => None,
            Some(columns) => {
                let mut values = Vec::with_capacity(vocabulary.len());
                for (label, &column) in vocabulary.iter().zip(columns) {
                    let raw = fields[column];
                    let value: f64 = raw.parse().map_err(|_| SubmissionError::BadProbability {
                        line,
                        label: label.clone(),
                        value: raw.to_string(),
                    })?;
                    if !(0.0..=1.0).contains(&value) {
                        return Err(SubmissionError::BadProbability {
                            line,
                            label: label.clone(),
                            value: raw.to_string(),
                        });
                    }
                    values.push(value);
                }
                let sum: f64 = values.iter().sum();
                if (sum - 1.0).abs() > PROBABILITY_SUM_TOLERANCE {
                    return Err(SubmissionError::ProbabilitySumViolation { line, sum });
                }
                // canonical argmax: first vocabulary label attaining the max
                let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let argmax_idx = values.iter().position(|v| *v == max).expect("nonempty");
                if vocabulary[argmax_idx] != predicted_class {
                    return Err(SubmissionError::ArgmaxMismatch {
                        line,
                        predicted: predicted_class.to_string(),
                        argmax: vocabulary[argmax_idx].clone(),
                    });
                }
                Some(values)
            }
        };
        parsed[slot] = Some(SubmissionRow {
            case_id: case_id.to_string(),
            predicted_class: predicted_class.to_string(),
            probabilities,
        });
    }

    let mut rows = Vec::with_capacity(set.cases.len());
    for (slot, row) in parsed.into_iter().enumerate() {
        match row {
            Some(row) => rows.push(row),
            None => {
                return Err(SubmissionError::MissingCase(
                    set.cases[slot].case_id.clone(),
                ))
            }
        }
    }
    Ok(SubmissionFile {
        set_id: set.set_id.clone(),
        set_version: set.version,
        vocabulary: vocabulary.clone(),
        origin,
        rows,
    })
}

/// Per-case scores for one label, aligned to the set's case order.
///
/// Probabilistic submissions pass the `prob_<label>` column through;
/// class-only submissions yield a 0/1 indicator vector and are marked
/// degenerate so reports can carry the [`DegenerateScores`] flag.
///
/// [`DegenerateScores`]: crate::metrics::MetricFlag::DegenerateScores
pub fn scores_for_label(
    submission: &SubmissionFile,
    label: &str,
) -> Result<(Vec<f64>, bool), SubmissionError> {
    let label_idx = submission
        .vocabulary
        .iter()
        .position(|l| l == label)
        .ok_or_else(|| SubmissionError::UnknownLabel {
            line: 0,
            label: label.to_string(),
        })?;
    let mut degenerate = false;
    let scores = submission
        .rows
        .iter()
        .map(|row| match &row.probabilities {
            Some(values) => values[label_idx],
            None => {
                degenerate = true;
                if row.predicted_class == label {
                    1.0
                } else {
                    0.0
                }
            }
        })
        .collect();
    Ok((scores, degenerate))
}
