//! The precision-evaluation engine: builds Location/Gender/Age strata
//! and their pairwise intersections relative to the submitter's origin,
//! applies feasibility collapse, evaluates metrics per cell, and
//! assembles the stratified report tree.
//!
//! Location scopes nest (`Country ⊆ Region ⊆ Continent ⊆ Global`),
//! gender and age cells partition the cohort, and every built cell is
//! either reported or logged as collapsed — none vanish.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::cohort::{EvaluationSet, Sex};
use crate::metrics::{self, MetricFlag, MetricReport};
use crate::submission::{scores_for_label, OriginDeclaration, SubmissionFile};
use crate::taxonomy::{AgeBinning, LocationScope, LocationTaxonomy, TaxonomyError};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum StrataError {
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error("submission pins {sub_set}@v{sub_version}, evaluation set is {set}@v{version}")]
    VersionMismatch {
        sub_set: String,
        sub_version: u64,
        set: String,
        version: u64,
    },
    #[error("metrics failure: {0}")]
    Metrics(#[from] metrics::MetricsError),
    #[error("submission failure: {0}")]
    Submission(String),
}

/// Reportable gender categories. `Unknown`-sex cases are excluded from
/// gender cells but participate everywhere else.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    pub const ALL: [Gender; 2] = [Gender::Male, Gender::Female];

    pub fn matches(self, sex: Sex) -> bool {
        matches!(
            (self, sex),
            (Gender::Male, Sex::Male) | (Gender::Female, Sex::Female)
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            Gender::Male => "Male",
            Gender::Female => "Female",
        }
    }
}

/// Identifies one stratum cell. `None` components mean "All" (no
/// restriction); the all-`None` key would denote the overall cohort,
/// which the report anchors as the `Global` location cell.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StratumKey {
    pub location: Option<LocationScope>,
    pub gender: Option<Gender>,
    pub age_group: Option<String>,
}

impl StratumKey {
    pub fn location(scope: LocationScope) -> Self {
        StratumKey {
            location: Some(scope),
            gender: None,
            age_group: None,
        }
    }

    pub fn gender(gender: Gender) -> Self {
        StratumKey {
            location: None,
            gender: Some(gender),
            age_group: None,
        }
    }

    pub fn age(age_group: &str) -> Self {
        StratumKey {
            location: None,
            gender: None,
            age_group: Some(age_group.to_string()),
        }
    }

    /// Primary cells sit in exactly one section; intersections restrict
    /// two of the three axes.
    pub fn is_intersection(&self) -> bool {
        let restricted = usize::from(self.location.is_some())
            + usize::from(self.gender.is_some())
            + usize::from(self.age_group.is_some());
        restricted == 2
    }
}

impl Serialize for StratumKey {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Wire<'a> {
            location: &'a str,
            gender: &'a str,
            age_group: &'a str,
        }
        let location = self.location.map(|s| s.to_string());
        Wire {
            location: location.as_deref().unwrap_or("All"),
            gender: self.gender.map(Gender::name).unwrap_or("All"),
            age_group: self.age_group.as_deref().unwrap_or("All"),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for StratumKey {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Wire {
            location: String,
            gender: String,
            age_group: String,
        }
        let wire = Wire::deserialize(deserializer)?;
        let location = match wire.location.as_str() {
            "All" => None,
            "Country" => Some(LocationScope::Country),
            "Region" => Some(LocationScope::Region),
            "Continent" => Some(LocationScope::Continent),
            "Global" => Some(LocationScope::Global),
            other => return Err(D::Error::custom(format!("bad location `{other}`"))),
        };
        let gender = match wire.gender.as_str() {
            "All" => None,
            "Male" => Some(Gender::Male),
            "Female" => Some(Gender::Female),
            other => return Err(D::Error::custom(format!("bad gender `{other}`"))),
        };
        let age_group = match wire.age_group.as_str() {
            "All" => None,
            other => Some(other.to_string()),
        };
        Ok(StratumKey {
            location,
            gender,
            age_group,
        })
    }
}

/// A stratum and the cases (as indices into the set's case list) that
/// satisfy its key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StratumCell {
    pub key: StratumKey,
    pub case_indices: Vec<usize>,
}

impl StratumCell {
    pub fn n(&self) -> usize {
        self.case_indices.len()
    }
}

/// Which metrics intersection cells carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum IntersectionMetric {
    #[default]
    AucOnly,
    Full,
}

/// Evaluation-time knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Minimum cases for a cell to be reported.
    pub n_min: usize,
    pub age_binning: AgeBinning,
    pub intersection_metric: IntersectionMetric,
}

impl EvalConfig {
    pub fn new(
        n_min: usize,
        age_binning: AgeBinning,
        intersection_metric: IntersectionMetric,
    ) -> Result<Self, StrataError> {
        if n_min < 1 {
            return Err(StrataError::Submission("n_min must be >= 1".into()));
        }
        Ok(EvalConfig {
            n_min,
            age_binning,
            intersection_metric,
        })
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_min: 30,
            age_binning: AgeBinning::decades(),
            intersection_metric: IntersectionMetric::AucOnly,
        }
    }
}

/// Builds every stratum cell for a set relative to an origin:
/// the four location scopes, reportable genders (skipped entirely for
/// single-gender conditions), age bins that actually occur in the
/// cohort, and all pairwise intersections.
pub fn build_strata(
    set: &EvaluationSet,
    origin: &OriginDeclaration,
    config: &EvalConfig,
    taxonomy: &LocationTaxonomy,
) -> Result<Vec<StratumCell>, StrataError> {
    let origin_country = origin.country();
    taxonomy.resolve(origin_country)?;

    // per-case precomputation
    let mut case_scopes = Vec::with_capacity(set.cases.len());
    let mut case_ages = Vec::with_capacity(set.cases.len());
    for case in &set.cases {
        case_scopes.push(taxonomy.location_scopes(&case.country, origin_country)?);
        case_ages.push(
            config
                .age_binning
                .label_of(u16::from(case.age_years))?
                .to_string(),
        );
    }

    let genders: &[Gender] = if set.single_gender_condition {
        &[]
    } else {
        &Gender::ALL
    };
    // Age groups absent from the cohort are not built at all.
    let age_groups: Vec<&str> = config
        .age_binning
        .labels()
        .filter(|label| case_ages.iter().any(|a| a == label))
        .collect();

    let select = |key: StratumKey| -> StratumCell {
        let case_indices = (0..set.cases.len())
            .filter(|&i| {
                key.location
                    .is_none_or(|scope| case_scopes[i].contains(&scope))
                    && key.gender.is_none_or(|g| g.matches(set.cases[i].sex))
                    && key.age_group.as_ref().is_none_or(|a| &case_ages[i] == a)
            })
            .collect();
        StratumCell { key, case_indices }
    };

    let mut cells = Vec::new();
    for scope in LocationScope::ALL {
        cells.push(select(StratumKey::location(scope)));
    }
    for &gender in genders {
        cells.push(select(StratumKey::gender(gender)));
    }
    for age in &age_groups {
        cells.push(select(StratumKey::age(age)));
    }
    for scope in LocationScope::ALL {
        for &gender in genders {
            cells.push(select(StratumKey {
                location: Some(scope),
                gender: Some(gender),
                age_group: None,
            }));
        }
    }
    for scope in LocationScope::ALL {
        for age in &age_groups {
            cells.push(select(StratumKey {
                location: Some(scope),
                gender: None,
                age_group: Some(age.to_string()),
            }));
        }
    }
    for &gender in genders {
        for age in &age_groups {
            cells.push(select(StratumKey {
                location: None,
                gender: Some(gender),
                age_group: Some(age.to_string()),
            }));
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CollapseReason {
    BelowMinN,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseEntry {
    pub key: StratumKey,
    pub reason: CollapseReason,
    pub n: usize,
}

/// Drops cells below `n_min`, logging each. The `Global` location cell
/// is never dropped: when thin it is retained and flagged instead, so
/// the report always has an overall anchor.
pub fn apply_feasibility_collapse(
    cells: Vec<StratumCell>,
    config: &EvalConfig,
) -> (Vec<StratumCell>, Vec<CollapseEntry>) {
    let mut retained = Vec::with_capacity(cells.len());
    let mut collapse_log = Vec::new();
    for cell in cells {
        let is_global_anchor =
            cell.key.location == Some(LocationScope::Global) && !cell.key.is_intersection();
        if cell.n() >= config.n_min || is_global_anchor {
            retained.push(cell);
        } else {
            collapse_log.push(CollapseEntry {
                key: cell.key,
                reason: CollapseReason::BelowMinN,
                n: cell.case_indices.len(),
            });
        }
    }
    (retained, collapse_log)
}

/// A submission unpacked for repeated cell evaluation: truths and
/// predictions in set case order plus one score column per label.
/// Radiologist reads and AI submissions share this one metric path.
pub struct PreparedSubmission<'a> {
    pub set: &'a EvaluationSet,
    pub submission: &'a SubmissionFile,
    truths: Vec<&'a str>,
    predictions: Vec<&'a str>,
    scores_by_label: Vec<Vec<f64>>,
    pub degenerate: bool,
}

impl<'a> PreparedSubmission<'a> {
    pub fn new(
        submission: &'a SubmissionFile,
        set: &'a EvaluationSet,
    ) -> Result<Self, StrataError> {
        if submission.set_id != set.set_id || submission.set_version != set.version {
            return Err(StrataError::VersionMismatch {
                sub_set: submission.set_id.clone(),
                sub_version: submission.set_version,
                set: set.set_id.clone(),
                version: set.version,
            });
        }
        let truths: Vec<&str> = set.cases.iter().map(|c| c.true_label.as_str()).collect();
        let predictions: Vec<&str> = submission
            .rows
            .iter()
            .map(|r| r.predicted_class.as_str())
            .collect();
        let mut degenerate = false;
        let mut scores_by_label = Vec::with_capacity(set.label_vocabulary.len());
        for label in &set.label_vocabulary {
            let (scores, is_degenerate) = scores_for_label(submission, label)
                .map_err(|e| StrataError::Submission(e.to_string()))?;
            degenerate |= is_degenerate;
            scores_by_label.push(scores);
        }
        Ok(PreparedSubmission {
            set,
            submission,
            truths,
            predictions,
            scores_by_label,
            degenerate,
        })
    }

    /// Full metric report over a subset of cases.
    pub fn evaluate(&self, case_indices: &[usize]) -> Result<MetricReport, StrataError> {
        let truths: Vec<&str> = case_indices.iter().map(|&i| self.truths[i]).collect();
        let predictions: Vec<&str> =
            case_indices.iter().map(|&i| self.predictions[i]).collect();
        let scores: Vec<Vec<f64>> = self
            .scores_by_label
            .iter()
            .map(|column| case_indices.iter().map(|&i| column[i]).collect())
            .collect();
        Ok(metrics::evaluate_group(
            &truths,
            &predictions,
            &scores,
            &self.set.label_vocabulary,
            self.degenerate,
        )?)
    }

    fn evaluate_flagged(
        &self,
        case_indices: &[usize],
        n_min: usize,
    ) -> Result<MetricReport, StrataError> {
        let mut report = self.evaluate(case_indices)?;
        if report.n < n_min {
            report.flags.insert(MetricFlag::BelowMinN);
        }
        Ok(report)
    }
}

/// AUC-bearing entry for an intersection cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucCell {
    pub n: usize,
    pub auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
    pub flags: BTreeSet<MetricFlag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenderAuc {
    pub gender: Gender,
    #[serde(flatten)]
    pub cell: AucCell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeAuc {
    pub age_group: String,
    #[serde(flatten)]
    pub cell: AucCell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationEntry {
    pub scope: LocationScope,
    pub n: usize,
    pub metrics: MetricReport,
    pub by_gender: Vec<GenderAuc>,
    pub by_age: Vec<AgeAuc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenderEntry {
    pub gender: Gender,
    pub n: usize,
    pub metrics: MetricReport,
    pub by_age: Vec<AgeAuc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeEntry {
    pub age_group: String,
    pub n: usize,
    pub metrics: MetricReport,
    pub by_gender: Vec<GenderAuc>,
}

/// Report-level annotations.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum ReportFlag {
    /// Scores came from a class-only submission.
    DegenerateScores,
    /// No radiologist read exists anywhere, so the baselines section is
    /// omitted.
    NoRadiologistBaseline,
}

/// The stratified result tree for one submission against one pinned
/// evaluation-set version. Deterministic for identical inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionReport {
    pub schema: String,
    pub set_id: String,
    pub set_version: u64,
    pub condition_name: String,
    pub origin: OriginDeclaration,
    pub taxonomy_version: String,
    pub n_min: usize,
    pub flags: BTreeSet<ReportFlag>,
    pub location_section: Vec<LocationEntry>,
    /// Omitted entirely for single-gender conditions.
    pub gender_section: Option<Vec<GenderEntry>>,
    pub age_section: Vec<AgeEntry>,
    pub collapse_log: Vec<CollapseEntry>,
    /// Filled by the baseline module; absent until then.
    pub baselines: Option<crate::baseline::BaselineSection>,
    pub baseline_deltas: Option<Vec<crate::baseline::ScopeDelta>>,
}

pub const REPORT_SCHEMA: &str = "radbench.report.v1";

impl PrecisionReport {
    pub fn location(&self, scope: LocationScope) -> Option<&LocationEntry> {
        self.location_section.iter().find(|e| e.scope == scope)
    }

    /// Canonical serialized form (stable key order).
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

fn auc_cell(
    prepared: &PreparedSubmission<'_>,
    cell: &StratumCell,
    config: &EvalConfig,
) -> Result<AucCell, StrataError> {
    let report = prepared.evaluate_flagged(&cell.case_indices, config.n_min)?;
    Ok(AucCell {
        n: report.n,
        auc: report.macro_auc,
        accuracy: match config.intersection_metric {
            IntersectionMetric::AucOnly => None,
            IntersectionMetric::Full => report.accuracy,
        },
        flags: report.flags,
    })
}

/// Runs the full stratified evaluation: build, collapse, evaluate every
/// retained cell (in parallel; cells are pure), and assemble the tree.
/// Degenerate cells yield flagged undefined values, never an abort.
pub fn evaluate_stratified(
    submission: &SubmissionFile,
    set: &EvaluationSet,
    config: &EvalConfig,
    taxonomy: &LocationTaxonomy,
) -> Result<PrecisionReport, StrataError> {
    let prepared = PreparedSubmission::new(submission, set)?;
    let cells = build_strata(set, &submission.origin, config, taxonomy)?;
    let (retained, collapse_log) = apply_feasibility_collapse(cells, config);

    enum Evaluated {
        Primary(StratumKey, MetricReport),
        Intersection(StratumKey, AucCell),
    }

    let evaluated: Vec<Evaluated> = retained
        .par_iter()
        .map(|cell| -> Result<Evaluated, StrataError> {
            if cell.key.is_intersection() {
                Ok(Evaluated::Intersection(
                    cell.key.clone(),
                    auc_cell(&prepared, cell, config)?,
                ))
            } else {
                Ok(Evaluated::Primary(
                    cell.key.clone(),
                    prepared.evaluate_flagged(&cell.case_indices, config.n_min)?,
                ))
            }
        })
        .collect::<Result<_, _>>()?;

    let mut primaries: Vec<(StratumKey, MetricReport)> = Vec::new();
    let mut intersections: Vec<(StratumKey, AucCell)> = Vec::new();
    for item in evaluated {
        match item {
            Evaluated::Primary(key, report) => primaries.push((key, report)),
            Evaluated::Intersection(key, cell) => intersections.push((key, cell)),
        }
    }

    let gender_auc_for = |location: Option<LocationScope>, age: Option<&str>| -> Vec<GenderAuc> {
        Gender::ALL
            .iter()
            .filter_map(|&gender| {
                intersections
                    .iter()
                    .find(|(key, _)| {
                        key.location == location
                            && key.gender == Some(gender)
                            && key.age_group.as_deref() == age
                    })
                    .map(|(_, cell)| GenderAuc {
                        gender,
                        cell: cell.clone(),
                    })
            })
            .collect()
    };
    let age_auc_for = |location: Option<LocationScope>, gender: Option<Gender>| -> Vec<AgeAuc> {
        config
            .age_binning
            .labels()
            .filter_map(|age| {
                intersections
                    .iter()
                    .find(|(key, _)| {
                        key.location == location
                            && key.gender == gender
                            && key.age_group.as_deref() == Some(age)
                    })
                    .map(|(_, cell)| AgeAuc {
                        age_group: age.to_string(),
                        cell: cell.clone(),
                    })
            })
            .collect()
    };

    let mut location_section = Vec::new();
    for scope in LocationScope::ALL {
        if let Some((_, metrics)) = primaries
            .iter()
            .find(|(key, _)| key.location == Some(scope) && !key.is_intersection())
        {
            location_section.push(LocationEntry {
                scope,
                n: metrics.n,
                metrics: metrics.clone(),
                by_gender: gender_auc_for(Some(scope), None),
                by_age: age_auc_for(Some(scope), None),
            });
        }
    }

    let gender_section = if set.single_gender_condition {
        None
    } else {
        let mut entries = Vec::new();
        for gender in Gender::ALL {
            if let Some((_, metrics)) = primaries
                .iter()
                .find(|(key, _)| key.gender == Some(gender) && !key.is_intersection())
            {
                entries.push(GenderEntry {
                    gender,
                    n: metrics.n,
                    metrics: metrics.clone(),
                    by_age: age_auc_for(None, Some(gender)),
                });
            }
        }
        Some(entries)
    };

    let mut age_section = Vec::new();
    for age in config.age_binning.labels() {
        if let Some((_, metrics)) = primaries
            .iter()
            .find(|(key, _)| key.age_group.as_deref() == Some(age) && !key.is_intersection())
        {
            age_section.push(AgeEntry {
                age_group: age.to_string(),
                n: metrics.n,
                metrics: metrics.clone(),
                by_gender: gender_auc_for(None, Some(age)),
            });
        }
    }

    let mut flags = BTreeSet::new();
    if prepared.degenerate {
        flags.insert(ReportFlag::DegenerateScores);
    }

    Ok(PrecisionReport {
        schema: REPORT_SCHEMA.to_string(),
        set_id: set.set_id.clone(),
        set_version: set.version,
        condition_name: set.condition_name.clone(),
        origin: submission.origin.clone(),
        taxonomy_version: taxonomy.version().to_string(),
        n_min: config.n_min,
        flags,
        location_section,
        gender_section,
        age_section,
        collapse_log,
        baselines: None,
        baseline_deltas: None,
    })
}
