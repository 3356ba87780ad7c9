//! Radiologist baselines: matching test-radiologist reads to location
//! scopes, fallback averaging when a scope has no radiologists, and the
//! AI-vs-radiologist deltas embedded into precision reports.
//!
//! Reads are ordinary submissions with a `RadiologistRead` origin and
//! are scored through the identical metric path as AI submissions.
//! When a scope has no matching radiologist, the chain walks
//! Country -> Region -> Continent -> Global and borrows the first
//! non-empty scope's radiologists, still evaluating them on the
//! original scope's cases so the comparison holds the case set fixed.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::EvaluationSet;
use crate::metrics::{LabelMetrics, MetricFlag, MetricReport};
use crate::strata::{
    build_strata, EvalConfig, PrecisionReport, PreparedSubmission, ReportFlag, StratumKey,
};
use crate::submission::{OriginDeclaration, SubmissionFile};
use crate::taxonomy::{CountryCode, LocationScope, LocationTaxonomy, TaxonomyError};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum BaselineError {
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error("submission is not a radiologist read")]
    NotARadiologistRead,
    #[error("no radiologist read exists at any scope")]
    NoRadiologistsAnywhere,
    #[error("baseline table pins {baseline_set}@v{baseline_version}, report is {report_set}@v{report_version}")]
    VersionMismatch {
        baseline_set: String,
        baseline_version: u64,
        report_set: String,
        report_version: u64,
    },
    #[error("strata failure: {0}")]
    Strata(String),
}

/// A validated test-radiologist read: a submission whose origin kind is
/// `RadiologistRead`. One read per radiologist per set version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadiologistRead {
    submission: SubmissionFile,
}

impl RadiologistRead {
    pub fn new(submission: SubmissionFile) -> Result<Self, BaselineError> {
        if !submission.origin.is_radiologist() {
            return Err(BaselineError::NotARadiologistRead);
        }
        Ok(RadiologistRead { submission })
    }

    pub fn radiologist_id(&self) -> &str {
        &self.submission.origin.submitter_id
    }

    pub fn radiologist_country(&self) -> &CountryCode {
        self.submission.origin.country()
    }

    pub fn submission(&self) -> &SubmissionFile {
        &self.submission
    }
}

/// Which scope actually supplied a baseline's radiologists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Direct,
    FallbackFrom(LocationScope),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadiologistMetrics {
    pub radiologist_id: String,
    pub metrics: MetricReport,
}

/// Baseline for one location scope: contributing radiologists, their
/// individual reports on the scope's cases, and the unweighted mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineEntry {
    pub scope: LocationScope,
    pub n: usize,
    pub provenance: Provenance,
    pub contributing: Vec<String>,
    pub per_radiologist: Vec<RadiologistMetrics>,
    pub mean: MetricReport,
}

/// The `baselines` section of a precision report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSection {
    pub set_id: String,
    pub set_version: u64,
    pub entries: Vec<BaselineEntry>,
}

impl BaselineSection {
    pub fn entry(&self, scope: LocationScope) -> Option<&BaselineEntry> {
        self.entries.iter().find(|e| e.scope == scope)
    }
}

/// Reads whose radiologist country falls inside `scope` relative to
/// `origin_country`. `Global` matches every read.
pub fn radiologists_in_scope<'a>(
    scope: LocationScope,
    origin_country: &CountryCode,
    reads: &'a [RadiologistRead],
    taxonomy: &LocationTaxonomy,
) -> Result<Vec<&'a RadiologistRead>, BaselineError> {
    let mut matched = Vec::new();
    for read in reads {
        let scopes = taxonomy.location_scopes(read.radiologist_country(), origin_country)?;
        if scopes.contains(&scope) {
            matched.push(read);
        }
    }
    Ok(matched)
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.flatten().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Unweighted per-metric mean over radiologist reports. Undefined
/// values are excluded per metric; flags are unioned.
fn mean_report(reports: &[MetricReport], vocabulary: &[String]) -> MetricReport {
    let n = reports.first().map(|r| r.n).unwrap_or(0);
    let mut flags: BTreeSet<MetricFlag> = BTreeSet::new();
    for report in reports {
        flags.extend(report.flags.iter().copied());
    }
    let per_label = vocabulary
        .iter()
        .enumerate()
        .map(|(idx, label)| LabelMetrics {
            label: label.clone(),
            sensitivity: mean_of(reports.iter().map(|r| r.per_label[idx].sensitivity)),
            specificity: mean_of(reports.iter().map(|r| r.per_label[idx].specificity)),
            auc: mean_of(reports.iter().map(|r| r.per_label[idx].auc)),
        })
        .collect();
    MetricReport {
        n,
        accuracy: mean_of(reports.iter().map(|r| r.accuracy)),
        per_label,
        macro_auc: mean_of(reports.iter().map(|r| r.macro_auc)),
        flags,
    }
}

/// Builds the baseline for one scope, walking the fallback chain when
/// the scope itself has no radiologists. Fallback radiologists are
/// still evaluated on the original scope's cases.
pub fn baseline_for_scope(
    scope: LocationScope,
    origin_country: &CountryCode,
    reads: &[RadiologistRead],
    set: &EvaluationSet,
    stratum_cases: &[usize],
    config: &EvalConfig,
    taxonomy: &LocationTaxonomy,
) -> Result<BaselineEntry, BaselineError> {
    let mut chosen: Option<(Vec<&RadiologistRead>, Provenance)> = None;
    let chain = std::iter::once(scope).chain(scope.broader());
    for candidate in chain {
        let matched = radiologists_in_scope(candidate, origin_country, reads, taxonomy)?;
        if !matched.is_empty() {
            let provenance = if candidate == scope {
                Provenance::Direct
            } else {
                Provenance::FallbackFrom(candidate)
            };
            chosen = Some((matched, provenance));
            break;
        }
    }
    let (matched, provenance) = chosen.ok_or(BaselineError::NoRadiologistsAnywhere)?;

    let mut per_radiologist = Vec::with_capacity(matched.len());
    for read in &matched {
        let prepared = PreparedSubmission::new(read.submission(), set)
            .map_err(|e| BaselineError::Strata(e.to_string()))?;
        let mut metrics = prepared
            .evaluate(stratum_cases)
            .map_err(|e| BaselineError::Strata(e.to_string()))?;
        if metrics.n < config.n_min {
            metrics.flags.insert(MetricFlag::BelowMinN);
        }
        per_radiologist.push(RadiologistMetrics {
            radiologist_id: read.radiologist_id().to_string(),
            metrics,
        });
    }
    let mean = mean_report(
        &per_radiologist
            .iter()
            .map(|r| r.metrics.clone())
            .collect::<Vec<_>>(),
        &set.label_vocabulary,
    );
    Ok(BaselineEntry {
        scope,
        n: stratum_cases.len(),
        provenance,
        contributing: matched
            .iter()
            .map(|r| r.radiologist_id().to_string())
            .collect(),
        per_radiologist,
        mean,
    })
}

/// Builds the full baseline table for the scopes retained in an AI
/// report, relative to the AI submitter's origin.
pub fn build_baseline_table(
    origin: &OriginDeclaration,
    reads: &[RadiologistRead],
    set: &EvaluationSet,
    scopes: &[LocationScope],
    config: &EvalConfig,
    taxonomy: &LocationTaxonomy,
) -> Result<BaselineSection, BaselineError> {
    if reads.is_empty() {
        return Err(BaselineError::NoRadiologistsAnywhere);
    }
    for read in reads {
        if read.submission().set_id != set.set_id
            || read.submission().set_version != set.version
        {
            return Err(BaselineError::VersionMismatch {
                baseline_set: read.submission().set_id.clone(),
                baseline_version: read.submission().set_version,
                report_set: set.set_id.clone(),
                report_version: set.version,
            });
        }
    }
    let cells = build_strata(set, origin, config, taxonomy)
        .map_err(|e| BaselineError::Strata(e.to_string()))?;
    let mut entries = Vec::new();
    for &scope in scopes {
        let stratum = cells
            .iter()
            .find(|c| c.key == StratumKey::location(scope))
            .map(|c| c.case_indices.as_slice())
            .unwrap_or(&[]);
        entries.push(baseline_for_scope(
            scope,
            origin.country(),
            reads,
            set,
            stratum,
            config,
            taxonomy,
        )?);
    }
    Ok(BaselineSection {
        set_id: set.set_id.clone(),
        set_version: set.version,
        entries,
    })
}

/// Why a delta is undefined on one side.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum DeltaFlag {
    AiUndefined,
    BaselineUndefined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDelta {
    pub label: String,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub auc: Option<f64>,
}

/// AI minus baseline-mean, per metric, for one location stratum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScopeDelta {
    pub scope: LocationScope,
    pub accuracy: Option<f64>,
    pub macro_auc: Option<f64>,
    pub per_label: Vec<LabelDelta>,
    pub flags: BTreeSet<DeltaFlag>,
}

fn delta(
    ai: Option<f64>,
    baseline: Option<f64>,
    flags: &mut BTreeSet<DeltaFlag>,
) -> Option<f64> {
    match (ai, baseline) {
        (Some(a), Some(b)) => Some(a - b),
        (ai, baseline) => {
            if ai.is_none() {
                flags.insert(DeltaFlag::AiUndefined);
            }
            if baseline.is_none() {
                flags.insert(DeltaFlag::BaselineUndefined);
            }
            None
        }
    }
}

/// Embeds the baseline table and per-scope deltas into an AI report.
/// Both sides must pin the same evaluation-set version.
pub fn compare(
    report: &mut PrecisionReport,
    baselines: &BaselineSection,
) -> Result<(), BaselineError> {
    if report.set_id != baselines.set_id || report.set_version != baselines.set_version {
        return Err(BaselineError::VersionMismatch {
            baseline_set: baselines.set_id.clone(),
            baseline_version: baselines.set_version,
            report_set: report.set_id.clone(),
            report_version: report.set_version,
        });
    }
    let mut deltas = Vec::new();
    for entry in &report.location_section {
        let Some(baseline) = baselines.entry(entry.scope) else {
            continue;
        };
        let mut flags = BTreeSet::new();
        let accuracy = delta(entry.metrics.accuracy, baseline.mean.accuracy, &mut flags);
        let macro_auc = delta(entry.metrics.macro_auc, baseline.mean.macro_auc, &mut flags);
        let per_label = entry
            .metrics
            .per_label
            .iter()
            .zip(&baseline.mean.per_label)
            .map(|(ai, base)| LabelDelta {
                label: ai.label.clone(),
                sensitivity: delta(ai.sensitivity, base.sensitivity, &mut flags),
                specificity: delta(ai.specificity, base.specificity, &mut flags),
                auc: delta(ai.auc, base.auc, &mut flags),
            })
            .collect();
        deltas.push(ScopeDelta {
            scope: entry.scope,
            accuracy,
            macro_auc,
            per_label,
            flags,
        });
    }
    report.baselines = Some(baselines.clone());
    report.baseline_deltas = Some(deltas);
    Ok(())
}

/// Marks a report whose deployment has no radiologist reads at all: the
/// baseline section stays absent and the report carries a flag.
pub fn mark_no_baseline(report: &mut PrecisionReport) {
    report.flags.insert(ReportFlag::NoRadiologistBaseline);
    report.baselines = None;
    report.baseline_deltas = None;
}
