//! Evaluation sets and their lifecycle: facility metadata ingestion,
//! expert-panel review, date-of-birth abstraction, demographics-free
//! test-package export, and k-anonymity auditing.
//!
//! Case records never hold a date of birth; ingestion accepts only an
//! already-abstracted age in years, and [`abstract_dob`] is the one
//! sanctioned way to derive it (the raw date is dropped by the caller
//! immediately after).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::{Datelike, NaiveDate};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::taxonomy::{CountryCode, LocationTaxonomy, TaxonomyError, MAX_AGE_EXCLUSIVE};

/// Charset allowed for case ids and labels on every CSV surface.
pub fn is_valid_token(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-'))
}

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum CohortError {
    #[error("facility batch is missing column `{0}`")]
    MissingColumn(String),
    #[error("facility batch has unexpected column `{0}`")]
    UnexpectedColumn(String),
    #[error("facility batch has a malformed header")]
    BadHeader,
    #[error("illegal review transition: {action} from {from}")]
    IllegalTransition { from: ReviewState, action: ReviewAction },
    #[error("`{0}` is not a panel member for this condition")]
    NotPanelMember(String),
    #[error("evaluation set is not approved")]
    NotApproved,
    #[error("imaging date precedes date of birth")]
    NegativeAge,
    #[error("invalid label vocabulary: {0}")]
    BadVocabulary(String),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
}

/// Patient sex as recorded by the imaging facility. `M`/`F`/`U` on the
/// wire. `Unknown` cases participate in Location and Age strata but not
/// Gender strata.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum Sex {
    Male,
    Female,
    Unknown,
}

impl Sex {
    pub fn from_wire(raw: &str) -> Option<Sex> {
        match raw {
            "M" => Some(Sex::Male),
            "F" => Some(Sex::Female),
            "U" => Some(Sex::Unknown),
            _ => None,
        }
    }

    pub fn to_wire(self) -> &'static str {
        match self {
            Sex::Male => "M",
            Sex::Female => "F",
            Sex::Unknown => "U",
        }
    }
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Sex::Male => "Male",
            Sex::Female => "Female",
            Sex::Unknown => "Unknown",
        };
        f.write_str(name)
    }
}

/// One radiograph's metadata. The image itself is an opaque reference;
/// no date of birth exists anywhere in this type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub image_ref: String,
    pub true_label: String,
    pub sex: Sex,
    pub age_years: u8,
    pub facility_id: String,
    pub country: CountryCode,
}

/// Review lifecycle of an evaluation set.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum ReviewState {
    Submitted,
    UnderReview,
    Approved,
    Rejected,
}

impl fmt::Display for ReviewState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ReviewState::Submitted => "Submitted",
            ReviewState::UnderReview => "UnderReview",
            ReviewState::Approved => "Approved",
            ReviewState::Rejected => "Rejected",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReviewAction {
    StartReview,
    Approve,
    Reject,
}

impl fmt::Display for ReviewAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ReviewAction::StartReview => "StartReview",
            ReviewAction::Approve => "Approve",
            ReviewAction::Reject => "Reject",
        };
        f.write_str(name)
    }
}

/// Radiologist ids eligible to review a given condition.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanelRoster {
    members: BTreeSet<String>,
}

impl PanelRoster {
    pub fn new<I: IntoIterator<Item = String>>(members: I) -> Self {
        PanelRoster {
            members: members.into_iter().collect(),
        }
    }

    pub fn is_member(&self, id: &str) -> bool {
        self.members.contains(id)
    }
}

/// A reviewed, versioned test cohort for one condition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluationSet {
    pub set_id: String,
    pub condition_name: String,
    pub label_vocabulary: Vec<String>,
    pub single_gender_condition: bool,
    pub cases: Vec<CaseRecord>,
    pub review_state: ReviewState,
    pub panel_credits: Vec<String>,
    pub version: u64,
}

impl EvaluationSet {
    pub fn new(
        set_id: &str,
        condition_name: &str,
        label_vocabulary: Vec<String>,
        single_gender_condition: bool,
    ) -> Result<Self, CohortError> {
        validate_vocabulary(&label_vocabulary)?;
        Ok(EvaluationSet {
            set_id: set_id.to_string(),
            condition_name: condition_name.to_string(),
            label_vocabulary,
            single_gender_condition,
            cases: Vec::new(),
            review_state: ReviewState::Submitted,
            panel_credits: Vec::new(),
            version: 0,
        })
    }

    pub fn case_ids(&self) -> impl Iterator<Item = &str> {
        self.cases.iter().map(|c| c.case_id.as_str())
    }

    /// Ingests a facility metadata CSV batch. Well-formed rows are
    /// appended; malformed rows come back as rejections with their file
    /// line number, never silently dropped. Any accepted row bumps the
    /// set version and returns the set to `Submitted` for re-review.
    pub fn ingest_facility_batch(
        &mut self,
        metadata_csv: &str,
        facility_id: &str,
        taxonomy: &LocationTaxonomy,
    ) -> Result<IngestOutcome, CohortError> {
        let staged = parse_facility_batch(metadata_csv, facility_id, self, taxonomy)?;
        if !staged.accepted.is_empty() {
            self.cases.extend(staged.accepted.iter().cloned());
            self.version += 1;
            self.review_state = ReviewState::Submitted;
        }
        Ok(staged)
    }

    /// Applies a panel review action. Membership is checked before
    /// transition legality; approving credits the reviewer once.
    pub fn review_transition(
        &mut self,
        action: ReviewAction,
        reviewer: &str,
        panel: &PanelRoster,
    ) -> Result<ReviewState, CohortError> {
        if !panel.is_member(reviewer) {
            return Err(CohortError::NotPanelMember(reviewer.to_string()));
        }
        let next = match (self.review_state, action) {
            (ReviewState::Submitted, ReviewAction::StartReview) => ReviewState::UnderReview,
            (ReviewState::UnderReview, ReviewAction::Approve) => ReviewState::Approved,
            (ReviewState::UnderReview, ReviewAction::Reject) => ReviewState::Rejected,
            (from, action) => return Err(CohortError::IllegalTransition { from, action }),
        };
        if next == ReviewState::Approved && !self.panel_credits.iter().any(|c| c == reviewer) {
            self.panel_credits.push(reviewer.to_string());
        }
        self.review_state = next;
        Ok(next)
    }

    /// Case order used by exported manifests and templates: a
    /// pseudo-random shuffle seeded by (set_id, version), so order leaks
    /// nothing about labels yet re-exports are byte-identical.
    pub fn export_order(&self) -> Vec<usize> {
        let mut hasher = Sha256::new();
        hasher.update(b"radbench-export\0");
        hasher.update(self.set_id.as_bytes());
        hasher.update(b"\0");
        hasher.update(self.version.to_le_bytes());
        let seed: [u8; 32] = hasher.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        let mut order: Vec<usize> = (0..self.cases.len()).collect();
        order.shuffle(&mut rng);
        order
    }
}

fn validate_vocabulary(vocabulary: &[String]) -> Result<(), CohortError> {
    if vocabulary.len() < 2 {
        return Err(CohortError::BadVocabulary(
            "classification needs at least 2 labels".into(),
        ));
    }
    let mut seen = BTreeSet::new();
    for label in vocabulary {
        if !is_valid_token(label) {
            return Err(CohortError::BadVocabulary(format!(
                "label `{label}` contains characters outside [A-Za-z0-9_.-]"
            )));
        }
        if !seen.insert(label) {
            return Err(CohortError::BadVocabulary(format!(
                "duplicate label `{label}`"
            )));
        }
    }
    Ok(())
}

/// Why one row of a facility batch was rejected.
#[derive(Error, Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowError {
    #[error("case id `{0}` already exists in this evaluation set")]
    DuplicateCaseId(String),
    #[error("bad age `{0}` (must be an integer in 0..=129)")]
    BadAge(String),
    #[error("bad sex `{0}` (must be M, F or U)")]
    BadSex(String),
    #[error("unknown country `{0}`")]
    UnknownCountry(String),
    #[error("label `{0}` is not in the set vocabulary")]
    UnknownLabel(String),
    #[error("bad case id `{0}` (allowed charset [A-Za-z0-9_.-])")]
    BadCaseId(String),
    #[error("empty image reference")]
    EmptyImageRef,
    #[error("sex `{0}` conflicts with a single-gender condition cohort of `{1}`")]
    MixedSexInSingleGenderSet(String, String),
    #[error("malformed row: {0}")]
    MalformedRow(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowRejection {
    /// Physical line number in the uploaded file (the header is line 1).
    pub line: u64,
    pub reason: RowError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestOutcome {
    pub accepted: Vec<CaseRecord>,
    pub rejections: Vec<RowRejection>,
}

const FACILITY_COLUMNS: [&str; 6] = ["case_id", "image_ref", "label", "sex", "age", "country"];

fn parse_facility_batch(
    metadata_csv: &str,
    facility_id: &str,
    set: &EvaluationSet,
    taxonomy: &LocationTaxonomy,
) -> Result<IngestOutcome, CohortError> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_reader(metadata_csv.as_bytes());
    let header = reader.headers().map_err(|_| CohortError::BadHeader)?.clone();
    let names: Vec<&str> = header.iter().collect();
    for required in FACILITY_COLUMNS {
        if !names.contains(&required) {
            return Err(CohortError::MissingColumn(required.to_string()));
        }
    }
    // Extra columns are rejected outright: in particular nothing that
    // looks like a raw date of birth may enter the pipeline.
    for name in &names {
        if !FACILITY_COLUMNS.contains(name) {
            return Err(CohortError::UnexpectedColumn(name.to_string()));
        }
    }
    let col = |name: &str| names.iter().position(|n| *n == name).unwrap();
    let (c_id, c_ref, c_label, c_sex, c_age, c_country) = (
        col("case_id"),
        col("image_ref"),
        col("label"),
        col("sex"),
        col("age"),
        col("country"),
    );

    let mut accepted: Vec<CaseRecord> = Vec::new();
    let mut rejections = Vec::new();
    let seen: BTreeSet<&str> = set.case_ids().collect();
    let mut cohort_sex: Option<Sex> = if set.single_gender_condition {
        set.cases.first().map(|c| c.sex)
    } else {
        None
    };
    let mut accepted_ids: BTreeSet<String> = BTreeSet::new();

    for (row_idx, record) in reader.records().enumerate() {
        let line = row_idx as u64 + 2;
        let reject = |reason: RowError, rejections: &mut Vec<RowRejection>| {
            rejections.push(RowRejection { line, reason });
        };
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                reject(RowError::MalformedRow(e.to_string()), &mut rejections);
                continue;
            }
        };
        if record.len() != FACILITY_COLUMNS.len() {
            reject(
                RowError::MalformedRow(format!(
                    "expected {} fields, found {}",
                    FACILITY_COLUMNS.len(),
                    record.len()
                )),
                &mut rejections,
            );
            continue;
        }
        let case_id = record[c_id].trim().to_string();
        if !is_valid_token(&case_id) {
            reject(RowError::BadCaseId(case_id), &mut rejections);
            continue;
        }
        if seen.contains(case_id.as_str()) || accepted_ids.contains(&case_id) {
            reject(RowError::DuplicateCaseId(case_id), &mut rejections);
            continue;
        }
        let image_ref = record[c_ref].trim().to_string();
        if image_ref.is_empty() {
            reject(RowError::EmptyImageRef, &mut rejections);
            continue;
        }
        let label = record[c_label].trim().to_string();
        if !set.label_vocabulary.contains(&label) {
            reject(RowError::UnknownLabel(label), &mut rejections);
            continue;
        }
        let sex = match Sex::from_wire(record[c_sex].trim()) {
            Some(s) => s,
            None => {
                reject(RowError::BadSex(record[c_sex].to_string()), &mut rejections);
                continue;
            }
        };
        let age_raw = record[c_age].trim();
        let age_years = match age_raw.parse::<i64>() {
            Ok(a) if (0..i64::from(MAX_AGE_EXCLUSIVE)).contains(&a) => a as u8,
            _ => {
                reject(RowError::BadAge(age_raw.to_string()), &mut rejections);
                continue;
            }
        };
        let country = match CountryCode::parse(record[c_country].trim()) {
            Ok(code) if taxonomy.contains(&code) => code,
            _ => {
                reject(
                    RowError::UnknownCountry(record[c_country].to_string()),
                    &mut rejections,
                );
                continue;
            }
        };
        if set.single_gender_condition {
            match cohort_sex {
                Some(existing) if existing != sex => {
                    reject(
                        RowError::MixedSexInSingleGenderSet(
                            sex.to_string(),
                            existing.to_string(),
                        ),
                        &mut rejections,
                    );
                    continue;
                }
                None => cohort_sex = Some(sex),
                _ => {}
            }
        }
        accepted_ids.insert(case_id.clone());
        accepted.push(CaseRecord {
            case_id,
            image_ref,
            true_label: label,
            sex,
            age_years,
            facility_id: facility_id.to_string(),
            country,
        });
    }
    Ok(IngestOutcome {
        accepted,
        rejections,
    })
}

/// Completed whole years between birth and imaging (birthday-counting:
/// the year increments on the month/day anniversary; a Feb-29 birthday
/// counts on Mar 1 in common years). The caller discards the raw date
/// of birth after this call; nothing downstream ever stores it.
pub fn abstract_dob(
    date_of_birth: NaiveDate,
    imaging_date: NaiveDate,
) -> Result<u16, CohortError> {
    if imaging_date < date_of_birth {
        return Err(CohortError::NegativeAge);
    }
    let mut age = imaging_date.year() - date_of_birth.year();
    if (imaging_date.month(), imaging_date.day()) < (date_of_birth.month(), date_of_birth.day()) {
        age -= 1;
    }
    Ok(age as u16)
}

/// The demographics-stripped bundle a developer downloads: image
/// references plus a blank submission template. Carries no sex, age,
/// country, facility or true-label data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestPackage {
    pub set_id: String,
    pub version: u64,
    pub label_vocabulary: Vec<String>,
    /// `(case_id, image_ref)` pairs in export order.
    pub images: Vec<(String, String)>,
    /// Blank submission CSV (`ID,Class` header, Class empty).
    pub template: String,
}

impl TestPackage {
    /// `case_id,image_ref` manifest in export order.
    pub fn manifest_csv(&self) -> String {
        let mut out = String::from("case_id,image_ref\n");
        for (id, image_ref) in &self.images {
            out.push_str(id);
            out.push(',');
            out.push_str(image_ref);
            out.push('\n');
        }
        out
    }

    /// The `package.json`-style metadata record.
    pub fn metadata_json(&self) -> String {
        serde_json::to_string_pretty(&serde_json::json!({
            "set_id": self.set_id,
            "version": self.version,
            "label_vocabulary": self.label_vocabulary,
            "case_count": self.images.len(),
        }))
        .expect("metadata serializes")
    }
}

/// Builds the download package for an approved set. Deterministic for a
/// given (set_id, version).
pub fn export_test_package(set: &EvaluationSet) -> Result<TestPackage, CohortError> {
    if set.review_state != ReviewState::Approved {
        return Err(CohortError::NotApproved);
    }
    let order = set.export_order();
    let images = order
        .iter()
        .map(|&i| {
            let case = &set.cases[i];
            (case.case_id.clone(), case.image_ref.clone())
        })
        .collect();
    Ok(TestPackage {
        set_id: set.set_id.clone(),
        version: set.version,
        label_vocabulary: set.label_vocabulary.clone(),
        images,
        template: crate::submission::emit_template(set)
            .map_err(|_| CohortError::NotApproved)?,
    })
}

/// A quasi-identifier group smaller than the audit threshold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KAnonymityViolation {
    pub age_years: u8,
    pub sex: Sex,
    pub country: CountryCode,
    pub group_size: usize,
}

/// Groups cases by the (age, sex, country) quasi-identifier and returns
/// every group smaller than `k`, smallest first. An empty result means
/// the cohort passes. Location is audited at country granularity.
pub fn k_anonymity_audit(cases: &[CaseRecord], k: usize) -> Vec<KAnonymityViolation> {
    let mut groups: BTreeMap<(u8, Sex, &CountryCode), usize> = BTreeMap::new();
    for case in cases {
        *groups.entry((case.age_years, case.sex, &case.country)).or_default() += 1;
    }
    let mut violations: Vec<KAnonymityViolation> = groups
        .into_iter()
        .filter(|(_, size)| *size < k)
        .map(|((age_years, sex, country), group_size)| KAnonymityViolation {
            age_years,
            sex,
            country: country.clone(),
            group_size,
        })
        .collect();
    violations.sort_by(|a, b| {
        a.group_size
            .cmp(&b.group_size)
            .then_with(|| a.age_years.cmp(&b.age_years))
            .then_with(|| a.sex.cmp(&b.sex))
            .then_with(|| a.country.cmp(&b.country))
    });
    violations
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tax() -> &'static LocationTaxonomy {
        LocationTaxonomy::builtin()
    }

    fn two_label_set() -> EvaluationSet {
        EvaluationSet::new(
            "ds-0001",
            "pneumonia",
            vec!["Pneumonia".into(), "NoFinding".into()],
            false,
        )
        .unwrap()
    }

    fn date(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    #[test]
    fn ingest_well_formed_row() {
        let mut set = two_label_set();
        let csv = "case_id,image_ref,label,sex,age,country\nx1,uri://a,Pneumonia,F,62,GH\n";
        let outcome = set.ingest_facility_batch(csv, "fac-1", tax()).unwrap();
        assert_eq!(outcome.rejections, vec![]);
        assert_eq!(outcome.accepted.len(), 1);
        let case = &set.cases[0];
        assert_eq!(case.case_id, "x1");
        assert_eq!(case.sex, Sex::Female);
        assert_eq!(case.age_years, 62);
        assert_eq!(case.country.as_str(), "GH");
        assert_eq!(set.version, 1);
        assert_eq!(set.review_state, ReviewState::Submitted);
    }

    #[test]
    fn ingest_rejects_bad_rows_and_keeps_good_ones() {
        let mut set = two_label_set();
        let csv = "case_id,image_ref,label,sex,age,country\n\
                   x1,uri://a,Pneumonia,F,62,GH\n\
                   x2,uri://b,Pneumonia,F,-3,GH\n\
                   x3,uri://c,NoFinding,Q,30,GH\n\
                   x4,uri://d,Fibrosis,M,30,GH\n\
                   x5,uri://e,NoFinding,M,30,ZZ\n\
                   x6,uri://f,NoFinding,M,abc,GH\n";
        let outcome = set.ingest_facility_batch(csv, "fac-1", tax()).unwrap();
        assert_eq!(outcome.accepted.len(), 1);
        let reasons: Vec<(u64, &RowError)> =
            outcome.rejections.iter().map(|r| (r.line, &r.reason)).collect();
        assert_eq!(reasons.len(), 5);
        assert_eq!(reasons[0], (3, &RowError::BadAge("-3".into())));
        assert_eq!(reasons[1], (4, &RowError::BadSex("Q".into())));
        assert_eq!(reasons[2], (5, &RowError::UnknownLabel("Fibrosis".into())));
        assert_eq!(reasons[3], (6, &RowError::UnknownCountry("ZZ".into())));
        assert_eq!(reasons[4], (7, &RowError::BadAge("abc".into())));
    }

    #[test]
    fn duplicate_case_id_within_batch_rejects_second() {
        let mut set = two_label_set();
        let csv = "case_id,image_ref,label,sex,age,country\n\
                   x1,uri://a,Pneumonia,F,62,GH\n\
                   x1,uri://b,NoFinding,M,30,GH\n";
        let outcome = set.ingest_facility_batch(csv, "fac-1", tax()).unwrap();
        assert_eq!(outcome.accepted.len(), 1);
        assert_eq!(
            outcome.rejections,
            vec![RowRejection {
                line: 3,
                reason: RowError::DuplicateCaseId("x1".into())
            }]
        );
    }

    #[test]
    fn reingesting_same_batch_rejects_every_row() {
        let mut set = two_label_set();
        let csv = "case_id,image_ref,label,sex,age,country\n\
                   x1,uri://a,Pneumonia,F,62,GH\n\
                   x2,uri://b,NoFinding,M,35,NG\n";
        let first = set.ingest_facility_batch(csv, "fac-1", tax()).unwrap();
        assert_eq!(first.accepted.len(), 2);
        let version_after_first = set.version;
        let second = set.ingest_facility_batch(csv, "fac-1", tax()).unwrap();
        assert!(second.accepted.is_empty());
        assert_eq!(second.rejections.len(), 2);
        assert!(second
            .rejections
            .iter()
            .all(|r| matches!(r.reason, RowError::DuplicateCaseId(_))));
        // no case-list change, no version bump
        assert_eq!(set.version, version_after_first);
    }

    #[test]
    fn missing_and_unexpected_columns_fail_the_batch() {
        let mut set = two_label_set();
        let no_age = "case_id,image_ref,label,sex,country\nx1,u,Pneumonia,F,GH\n";
        assert_eq!(
            set.ingest_facility_batch(no_age, "f", tax()).unwrap_err(),
            CohortError::MissingColumn("age".into())
        );
        let with_dob =
            "case_id,image_ref,label,sex,age,country,date_of_birth\nx1,u,Pneumonia,F,62,GH,1958-01-02\n";
        assert_eq!(
            set.ingest_facility_batch(with_dob, "f", tax()).unwrap_err(),
            CohortError::UnexpectedColumn("date_of_birth".into())
        );
    }

    #[test]
    fn single_gender_condition_rejects_mixed_sex() {
        let mut set = EvaluationSet::new(
            "ds-0002",
            "breast-screening",
            vec!["Malignant".into(), "Benign".into()],
            true,
        )
        .unwrap();
        let csv = "case_id,image_ref,label,sex,age,country\n\
                   m1,u1,Malignant,F,52,GH\n\
                   m2,u2,Benign,M,47,GH\n\
                   m3,u3,Benign,F,61,GH\n";
        let outcome = set.ingest_facility_batch(csv, "f", tax()).unwrap();
        assert_eq!(outcome.accepted.len(), 2);
        assert!(matches!(
            outcome.rejections[0].reason,
            RowError::MixedSexInSingleGenderSet(..)
        ));
        assert!(set.cases.iter().all(|c| c.sex == Sex::Female));
    }

    #[test]
    fn vocabulary_validation() {
        assert!(matches!(
            EvaluationSet::new("s", "c", vec!["only".into()], false),
            Err(CohortError::BadVocabulary(_))
        ));
        assert!(matches!(
            EvaluationSet::new("s", "c", vec!["a".into(), "a".into()], false),
            Err(CohortError::BadVocabulary(_))
        ));
        assert!(matches!(
            EvaluationSet::new("s", "c", vec!["a b".into(), "c".into()], false),
            Err(CohortError::BadVocabulary(_))
        ));
    }

    /// Calendar-arithmetic oracle: walk anniversaries one year at a time,
    /// shifting Feb-29 anniversaries to Mar 1 in common years.
    fn age_oracle(dob: NaiveDate, imaged: NaiveDate) -> u16 {
        let mut age = 0u16;
        loop {
            let year = dob.year() + i32::from(age) + 1;
            let anniversary = NaiveDate::from_ymd_opt(year, dob.month(), dob.day())
                .unwrap_or_else(|| NaiveDate::from_ymd_opt(year, 3, 1).unwrap());
            if anniversary <= imaged {
                age += 1;
            } else {
                return age;
            }
        }
    }

    #[test]
    fn abstract_dob_examples() {
        assert_eq!(
            abstract_dob(date(1980, 5, 10), date(2017, 5, 9)).unwrap(),
            36
        );
        assert_eq!(age_oracle(date(1980, 5, 10), date(2017, 5, 9)), 36);
        assert_eq!(
            abstract_dob(date(1980, 5, 10), date(2017, 5, 10)).unwrap(),
            37
        );
        assert_eq!(
            abstract_dob(date(2017, 1, 1), date(2017, 6, 1)).unwrap(),
            0
        );
        assert_eq!(
            abstract_dob(date(2017, 6, 2), date(2017, 6, 1)).unwrap_err(),
            CohortError::NegativeAge
        );
    }

    #[test]
    fn abstract_dob_leap_day_convention() {
        let dob = date(2000, 2, 29);
        assert_eq!(abstract_dob(dob, date(2001, 2, 28)).unwrap(), 0);
        assert_eq!(abstract_dob(dob, date(2001, 3, 1)).unwrap(), 1);
        assert_eq!(abstract_dob(dob, date(2004, 2, 29)).unwrap(), 4);
    }

    #[test]
    fn review_happy_path_credits_reviewer() {
        let mut set = two_label_set();
        let panel = PanelRoster::new(vec!["rad-1".into(), "rad-2".into()]);
        assert_eq!(
            set.review_transition(ReviewAction::StartReview, "rad-1", &panel)
                .unwrap(),
            ReviewState::UnderReview
        );
        assert_eq!(
            set.review_transition(ReviewAction::Approve, "rad-2", &panel)
                .unwrap(),
            ReviewState::Approved
        );
        assert_eq!(set.panel_credits, vec!["rad-2".to_string()]);
    }

    #[test]
    fn review_rejects_illegal_transitions_and_non_members() {
        let mut set = two_label_set();
        let panel = PanelRoster::new(vec!["rad-1".into()]);
        assert_eq!(
            set.review_transition(ReviewAction::Approve, "intruder", &panel)
                .unwrap_err(),
            CohortError::NotPanelMember("intruder".into())
        );
        assert!(matches!(
            set.review_transition(ReviewAction::Approve, "rad-1", &panel),
            Err(CohortError::IllegalTransition { .. })
        ));
        set.review_transition(ReviewAction::StartReview, "rad-1", &panel)
            .unwrap();
        set.review_transition(ReviewAction::Approve, "rad-1", &panel)
            .unwrap();
        assert!(matches!(
            set.review_transition(ReviewAction::Approve, "rad-1", &panel),
            Err(CohortError::IllegalTransition { .. })
        ));
    }

    fn approved_set_with_cases(n: usize) -> EvaluationSet {
        let mut set = two_label_set();
        let mut csv = String::from("case_id,image_ref,label,sex,age,country\n");
        for i in 0..n {
            let label = if i % 2 == 0 { "Pneumonia" } else { "NoFinding" };
            let sex = if i % 2 == 0 { "F" } else { "M" };
            csv.push_str(&format!("x{i},uri://img/{i},{label},{sex},{},GH\n", 20 + i % 60));
        }
        set.ingest_facility_batch(&csv, "fac-1", tax()).unwrap();
        let panel = PanelRoster::new(vec!["rad-1".into()]);
        set.review_transition(ReviewAction::StartReview, "rad-1", &panel)
            .unwrap();
        set.review_transition(ReviewAction::Approve, "rad-1", &panel)
            .unwrap();
        set
    }

    #[test]
    fn export_requires_approval() {
        let mut set = two_label_set();
        assert_eq!(
            export_test_package(&set).unwrap_err(),
            CohortError::NotApproved
        );
        let csv = "case_id,image_ref,label,sex,age,country\nx1,u,Pneumonia,F,62,GH\n";
        set.ingest_facility_batch(csv, "f", tax()).unwrap();
        let panel = PanelRoster::new(vec!["rad-1".into()]);
        set.review_transition(ReviewAction::StartReview, "rad-1", &panel)
            .unwrap();
        assert_eq!(
            export_test_package(&set).unwrap_err(),
            CohortError::NotApproved
        );
    }

    #[test]
    fn export_lists_every_case_once_and_is_deterministic() {
        let set = approved_set_with_cases(17);
        let package = export_test_package(&set).unwrap();
        assert_eq!(package.images.len(), 17);
        let ids: BTreeSet<&str> = package.images.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(ids.len(), 17);
        let again = export_test_package(&set).unwrap();
        assert_eq!(package, again);
        assert_eq!(package.manifest_csv(), again.manifest_csv());
        assert_eq!(package.metadata_json(), again.metadata_json());
        // template row count matches the case count plus the header
        assert_eq!(package.template.lines().count(), 18);
    }

    #[test]
    fn export_order_changes_with_version() {
        let mut a = approved_set_with_cases(40);
        let order_v1 = a.export_order();
        a.version += 1;
        let order_v2 = a.export_order();
        assert_ne!(order_v1, order_v2);
    }

    #[test]
    fn package_exposes_no_demographics_fields() {
        let set = approved_set_with_cases(5);
        let package = export_test_package(&set).unwrap();
        let json = serde_json::to_string(&package).unwrap();
        for forbidden in [
            "\"sex\"",
            "\"age\"",
            "\"age_years\"",
            "\"country\"",
            "\"facility_id\"",
            "\"true_label\"",
            "dob",
            "date_of_birth",
            "birth",
        ] {
            assert!(!json.contains(forbidden), "package leaks {forbidden}");
        }
        assert!(!package.manifest_csv().contains("GH"));
        for line in package.template.lines().skip(1) {
            assert!(line.ends_with(','), "template row not blank: {line}");
        }
    }

    #[test]
    fn serialized_case_record_has_no_dob_field() {
        let record = CaseRecord {
            case_id: "x1".into(),
            image_ref: "uri://a".into(),
            true_label: "Pneumonia".into(),
            sex: Sex::Female,
            age_years: 62,
            facility_id: "fac-1".into(),
            country: CountryCode::parse("GH").unwrap(),
        };
        let json = serde_json::to_string(&record).unwrap();
        for forbidden in ["dob", "birth", "date_of_birth"] {
            assert!(!json.to_lowercase().contains(forbidden));
        }
    }

    fn case(age: u8, sex: Sex, country: &str, id: usize) -> CaseRecord {
        CaseRecord {
            case_id: format!("c{id}"),
            image_ref: format!("uri://{id}"),
            true_label: "Pneumonia".into(),
            sex,
            age_years: age,
            facility_id: "f".into(),
            country: CountryCode::parse(country).unwrap(),
        }
    }

    #[test]
    fn k_anonymity_flags_singleton() {
        let mut cases: Vec<CaseRecord> =
            (0..10).map(|i| case(40, Sex::Male, "GH", i)).collect();
        cases.push(case(36, Sex::Female, "LR", 99));
        let violations = k_anonymity_audit(&cases, 5);
        assert_eq!(violations.len(), 1);
        let v = &violations[0];
        assert_eq!(
            (v.age_years, v.sex, v.country.as_str(), v.group_size),
            (36, Sex::Female, "LR", 1)
        );
    }

    #[test]
    fn k_anonymity_passes_large_groups_and_empty_cohorts() {
        let cases: Vec<CaseRecord> = (0..10).map(|i| case(40, Sex::Male, "GH", i)).collect();
        assert!(k_anonymity_audit(&cases, 5).is_empty());
        assert!(k_anonymity_audit(&[], 5).is_empty());
    }

    /// Brute-force oracle: count each tuple's occurrences by scanning the
    /// whole list per distinct tuple.
    fn audit_oracle(cases: &[CaseRecord], k: usize) -> Vec<(u8, Sex, String, usize)> {
        let mut tuples: Vec<(u8, Sex, String)> = cases
            .iter()
            .map(|c| (c.age_years, c.sex, c.country.as_str().to_string()))
            .collect();
        tuples.sort();
        tuples.dedup();
        let mut out: Vec<(u8, Sex, String, usize)> = tuples
            .into_iter()
            .filter_map(|(age, sex, country)| {
                let size = cases
                    .iter()
                    .filter(|c| {
                        c.age_years == age && c.sex == sex && c.country.as_str() == country
                    })
                    .count();
                (size < k).then_some((age, sex, country, size))
            })
            .collect();
        out.sort_by(|a, b| a.3.cmp(&b.3).then_with(|| (a.0, a.1, &a.2).cmp(&(b.0, b.1, &b.2))));
        out
    }

    proptest! {
        #[test]
        fn k_anonymity_matches_oracle(
            raw in proptest::collection::vec((0u8..4, 0u8..3, 0u8..3), 0..60),
            k in 2usize..6
        ) {
            let countries = ["GH", "NG", "KE"];
            let sexes = [Sex::Male, Sex::Female, Sex::Unknown];
            let cases: Vec<CaseRecord> = raw
                .iter()
                .enumerate()
                .map(|(i, (age, sex, country))| {
                    case(20 + age, sexes[*sex as usize], countries[*country as usize], i)
                })
                .collect();
            let audited: Vec<(u8, Sex, String, usize)> = k_anonymity_audit(&cases, k)
                .into_iter()
                .map(|v| (v.age_years, v.sex, v.country.as_str().to_string(), v.group_size))
                .collect();
            prop_assert_eq!(audited, audit_oracle(&cases, k));
        }

        #[test]
        fn review_never_reaches_approved_without_under_review(
            actions in proptest::collection::vec(0u8..3, 1..20)
        ) {
            let mut set = two_label_set();
            let panel = PanelRoster::new(vec!["rad-1".into()]);
            let mut previous = set.review_state;
            for a in actions {
                let action = match a {
                    0 => ReviewAction::StartReview,
                    1 => ReviewAction::Approve,
                    _ => ReviewAction::Reject,
                };
                if let Ok(next) = set.review_transition(action, "rad-1", &panel) {
                    if next == ReviewState::Approved {
                        prop_assert_eq!(previous, ReviewState::UnderReview);
                    }
                    previous = next;
                }
            }
        }

        #[test]
        fn abstract_dob_matches_anniversary_oracle(
            birth_days in 0u32..20_000,
            delta_days in 0u32..40_000
        ) {
            let epoch = date(1940, 1, 1);
            let dob = epoch + chrono::Days::new(birth_days.into());
            let imaged = dob + chrono::Days::new(delta_days.into());
            let got = abstract_dob(dob, imaged).unwrap();
            prop_assert_eq!(got, age_oracle(dob, imaged));
        }
    }
}
