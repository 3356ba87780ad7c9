//! Demographic vocabularies shared by every other module: the
//! country -> (region, continent) table and configurable age binning.
//!
//! The shipped table follows the UN M49 scheme (sub-continental regions
//! such as "Western Africa" or "South-Eastern Asia" under five
//! continental areas plus Antarctica). The table is immutable for a
//! given data-file version; its version label is recorded in every
//! report produced from it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Version label of the table embedded in this build.
pub const BUILTIN_TAXONOMY_VERSION: &str = "un-m49-2019";

/// Exclusive upper bound on ages handled anywhere in the engine.
pub const MAX_AGE_EXCLUSIVE: u16 = 130;

const BUILTIN_TAXONOMY_CSV: &str = include_str!("../data/un_m49.csv");

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum TaxonomyError {
    #[error("unknown country code `{0}`")]
    UnknownCountry(String),
    #[error("age {0} is outside the supported range 0..130")]
    AgeOutOfRange(i64),
    #[error("invalid taxonomy table: {0}")]
    InvalidTable(String),
    #[error("invalid age binning: {0}")]
    InvalidBinning(String),
}

/// ISO 3166-1 alpha-2 code, normalized to uppercase at construction.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CountryCode(String);

impl CountryCode {
    pub fn parse(raw: &str) -> Result<Self, TaxonomyError> {
        let trimmed = raw.trim();
        if trimmed.len() == 2 && trimmed.chars().all(|c| c.is_ascii_alphabetic()) {
            Ok(CountryCode(trimmed.to_ascii_uppercase()))
        } else {
            Err(TaxonomyError::UnknownCountry(raw.to_string()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CountryCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Geographic generality of a stratum, relative to a submitter's origin.
///
/// Ordered from most specific to most general.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum LocationScope {
    Country,
    Region,
    Continent,
    Global,
}

impl LocationScope {
    /// All scopes, most specific first.
    pub const ALL: [LocationScope; 4] = [
        LocationScope::Country,
        LocationScope::Region,
        LocationScope::Continent,
        LocationScope::Global,
    ];

    /// Scopes strictly more general than `self`, in ascending order.
    pub fn broader(self) -> impl Iterator<Item = LocationScope> {
        Self::ALL.into_iter().filter(move |s| *s > self)
    }
}

impl fmt::Display for LocationScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            LocationScope::Country => "Country",
            LocationScope::Region => "Region",
            LocationScope::Continent => "Continent",
            LocationScope::Global => "Global",
        };
        f.write_str(name)
    }
}

/// The country -> (region, continent) table.
#[derive(Debug, Clone)]
pub struct LocationTaxonomy {
    version: String,
    entries: BTreeMap<CountryCode, (String, String)>,
}

impl LocationTaxonomy {
    /// Parses a `country,region,continent` CSV table and validates it:
    /// unique country codes, and every region belonging to exactly one
    /// continent.
    pub fn from_csv(text: &str, version: &str) -> Result<Self, TaxonomyError> {
        let mut lines = text.lines();
        match lines.next() {
            Some("country,region,continent") => {}
            other => {
                return Err(TaxonomyError::InvalidTable(format!(
                    "expected header `country,region,continent`, found {:?}",
                    other.unwrap_or("")
                )))
            }
        }
        let mut entries = BTreeMap::new();
        let mut region_continent: BTreeMap<String, String> = BTreeMap::new();
        for (idx, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let (code, region, continent) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
                (Some(c), Some(r), Some(k), None) => (c, r, k),
                _ => {
                    return Err(TaxonomyError::InvalidTable(format!(
                        "line {}: expected 3 fields",
                        idx + 2
                    )))
                }
            };
            let code = CountryCode::parse(code)
                .map_err(|_| TaxonomyError::InvalidTable(format!("line {}: bad country code `{code}`", idx + 2)))?;
            if region.is_empty() || continent.is_empty() {
                return Err(TaxonomyError::InvalidTable(format!(
                    "line {}: empty region or continent",
                    idx + 2
                )));
            }
            if let Some(prev) = region_continent.get(region) {
                if prev != continent {
                    return Err(TaxonomyError::InvalidTable(format!(
                        "region `{region}` maps to both `{prev}` and `{continent}`"
                    )));
                }
            } else {
                region_continent.insert(region.to_string(), continent.to_string());
            }
            if entries
                .insert(code.clone(), (region.to_string(), continent.to_string()))
                .is_some()
            {
                return Err(TaxonomyError::InvalidTable(format!(
                    "duplicate country code `{code}`"
                )));
            }
        }
        if entries.is_empty() {
            return Err(TaxonomyError::InvalidTable("empty table".into()));
        }
        Ok(LocationTaxonomy {
            version: version.to_string(),
            entries,
        })
    }

    /// The table shipped with this build.
    pub fn builtin() -> &'static LocationTaxonomy {
        static BUILTIN: OnceLock<LocationTaxonomy> = OnceLock::new();
        BUILTIN.get_or_init(|| {
            LocationTaxonomy::from_csv(BUILTIN_TAXONOMY_CSV, BUILTIN_TAXONOMY_VERSION)
                .expect("embedded taxonomy table is valid")
        })
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, code: &CountryCode) -> bool {
        self.entries.contains_key(code)
    }

    pub fn country_codes(&self) -> impl Iterator<Item = &CountryCode> {
        self.entries.keys()
    }

    /// Returns the unique (region, continent) pair for a country code.
    pub fn resolve(&self, code: &CountryCode) -> Result<(&str, &str), TaxonomyError> {
        self.entries
            .get(code)
            .map(|(r, c)| (r.as_str(), c.as_str()))
            .ok_or_else(|| TaxonomyError::UnknownCountry(code.to_string()))
    }

    /// Scopes under which a case from `case_country` counts for a
    /// submitter whose origin is `origin_country`.
    ///
    /// `Global` is always included; `Country` iff the codes are equal;
    /// `Region`/`Continent` iff the respective names match. The result
    /// is upward-closed in the `Country < Region < Continent < Global`
    /// order because every region lies inside one continent.
    pub fn location_scopes(
        &self,
        case_country: &CountryCode,
        origin_country: &CountryCode,
    ) -> Result<BTreeSet<LocationScope>, TaxonomyError> {
        let (case_region, case_continent) = self.resolve(case_country)?;
        let (origin_region, origin_continent) = self.resolve(origin_country)?;
        let mut scopes = BTreeSet::from([LocationScope::Global]);
        if case_continent == origin_continent {
            scopes.insert(LocationScope::Continent);
            if case_region == origin_region {
                scopes.insert(LocationScope::Region);
                if case_country == origin_country {
                    scopes.insert(LocationScope::Country);
                }
            }
        }
        Ok(scopes)
    }
}

/// One half-open age interval `[lo, hi)` with its display label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgeBin {
    pub lo: u16,
    pub hi: u16,
    pub label: String,
}

/// Ordered, contiguous partition of `0..130` into labeled age groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgeBinning {
    bins: Vec<AgeBin>,
}

impl AgeBinning {
    /// Validates that bins are contiguous from 0 to 130, in ascending
    /// order, with at least two distinct non-empty labels. `None` for
    /// `hi` means open-topped (extends to 130).
    pub fn new(rows: Vec<(u16, Option<u16>, String)>) -> Result<Self, TaxonomyError> {
        if rows.len() < 2 {
            return Err(TaxonomyError::InvalidBinning(
                "at least 2 bins are required".into(),
            ));
        }
        let mut bins = Vec::with_capacity(rows.len());
        let mut expected_lo = 0u16;
        let mut labels = BTreeSet::new();
        let last = rows.len() - 1;
        for (i, (lo, hi, label)) in rows.into_iter().enumerate() {
            let hi = hi.unwrap_or(MAX_AGE_EXCLUSIVE);
            if lo != expected_lo {
                return Err(TaxonomyError::InvalidBinning(format!(
                    "bin {i} starts at {lo}, expected {expected_lo}"
                )));
            }
            if hi <= lo {
                return Err(TaxonomyError::InvalidBinning(format!(
                    "bin {i} is empty ([{lo}, {hi}))"
                )));
            }
            if i == last && hi != MAX_AGE_EXCLUSIVE {
                return Err(TaxonomyError::InvalidBinning(format!(
                    "last bin must end at {MAX_AGE_EXCLUSIVE}, ends at {hi}"
                )));
            }
            if label.is_empty() || label == "All" {
                return Err(TaxonomyError::InvalidBinning(format!(
                    "bin {i} has a reserved or empty label"
                )));
            }
            if !labels.insert(label.clone()) {
                return Err(TaxonomyError::InvalidBinning(format!(
                    "duplicate label `{label}`"
                )));
            }
            expected_lo = hi;
            bins.push(AgeBin { lo, hi, label });
        }
        Ok(AgeBinning { bins })
    }

    /// Decade bins `0-9` .. `70-79` plus an open-topped `80+`.
    pub fn decades() -> Self {
        let mut rows: Vec<(u16, Option<u16>, String)> = (0..8)
            .map(|d| (d * 10, Some(d * 10 + 10), format!("{}-{}", d * 10, d * 10 + 9)))
            .collect();
        rows.push((80, None, "80+".to_string()));
        AgeBinning::new(rows).expect("decade binning is valid")
    }

    /// Parses `lo,hi,label` lines; an empty `hi` means open-topped.
    /// A leading `lo,hi,label` header line is accepted and skipped.
    pub fn from_csv(text: &str) -> Result<Self, TaxonomyError> {
        let mut rows = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.is_empty() || (idx == 0 && line == "lo,hi,label") {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(TaxonomyError::InvalidBinning(format!(
                    "line {}: expected `lo,hi,label`",
                    idx + 1
                )));
            }
            let lo: u16 = parts[0].trim().parse().map_err(|_| {
                TaxonomyError::InvalidBinning(format!("line {}: bad lo `{}`", idx + 1, parts[0]))
            })?;
            let hi = match parts[1].trim() {
                "" => None,
                raw => Some(raw.parse::<u16>().map_err(|_| {
                    TaxonomyError::InvalidBinning(format!("line {}: bad hi `{raw}`", idx + 1))
                })?),
            };
            rows.push((lo, hi, parts[2].trim().to_string()));
        }
        AgeBinning::new(rows)
    }

    pub fn bins(&self) -> &[AgeBin] {
        &self.bins
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.bins.iter().map(|b| b.label.as_str())
    }

    /// Label of the unique bin containing `age_years`.
    pub fn label_of(&self, age_years: u16) -> Result<&str, TaxonomyError> {
        if age_years >= MAX_AGE_EXCLUSIVE {
            return Err(TaxonomyError::AgeOutOfRange(i64::from(age_years)));
        }
        self.bins
            .iter()
            .find(|b| b.lo <= age_years && age_years < b.hi)
            .map(|b| b.label.as_str())
            .ok_or(TaxonomyError::AgeOutOfRange(i64::from(age_years)))
    }
}

impl Default for AgeBinning {
    fn default() -> Self {
        AgeBinning::decades()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cc(s: &str) -> CountryCode {
        CountryCode::parse(s).unwrap()
    }

    #[test]
    fn builtin_table_loads_and_is_large() {
        let tax = LocationTaxonomy::builtin();
        assert!(tax.len() >= 240, "table has {} entries", tax.len());
        assert_eq!(tax.version(), BUILTIN_TAXONOMY_VERSION);
    }

    #[test]
    fn resolve_examples() {
        let tax = LocationTaxonomy::builtin();
        assert_eq!(tax.resolve(&cc("GH")).unwrap(), ("Western Africa", "Africa"));
        assert_eq!(tax.resolve(&cc("IN")).unwrap(), ("Southern Asia", "Asia"));
        assert_eq!(tax.resolve(&cc("NG")).unwrap(), ("Western Africa", "Africa"));
        assert_eq!(tax.resolve(&cc("KE")).unwrap(), ("Eastern Africa", "Africa"));
        assert_eq!(tax.resolve(&cc("LR")).unwrap(), ("Western Africa", "Africa"));
        assert!(matches!(
            tax.resolve(&cc("ZZ")),
            Err(TaxonomyError::UnknownCountry(_))
        ));
    }

    #[test]
    fn sub_continental_granularity_present() {
        let tax = LocationTaxonomy::builtin();
        let regions: BTreeSet<&str> = tax
            .country_codes()
            .map(|c| tax.resolve(c).unwrap().0)
            .collect();
        for expected in ["Western Africa", "South-Eastern Asia", "Northern Europe"] {
            assert!(regions.contains(expected), "missing region {expected}");
        }
    }

    #[test]
    fn codes_normalize_to_uppercase() {
        assert_eq!(cc(" gh "), cc("GH"));
        assert!(CountryCode::parse("GHA").is_err());
        assert!(CountryCode::parse("G1").is_err());
        assert!(CountryCode::parse("").is_err());
    }

    #[test]
    fn location_scope_examples() {
        let tax = LocationTaxonomy::builtin();
        let full: BTreeSet<_> = LocationScope::ALL.into_iter().collect();
        assert_eq!(tax.location_scopes(&cc("GH"), &cc("GH")).unwrap(), full);
        assert_eq!(
            tax.location_scopes(&cc("NG"), &cc("GH")).unwrap(),
            BTreeSet::from([
                LocationScope::Region,
                LocationScope::Continent,
                LocationScope::Global
            ])
        );
        assert_eq!(
            tax.location_scopes(&cc("KE"), &cc("GH")).unwrap(),
            BTreeSet::from([LocationScope::Continent, LocationScope::Global])
        );
        assert_eq!(
            tax.location_scopes(&cc("IN"), &cc("GH")).unwrap(),
            BTreeSet::from([LocationScope::Global])
        );
        assert!(tax.location_scopes(&cc("ZZ"), &cc("GH")).is_err());
    }

    #[test]
    fn location_scopes_upward_closed_over_whole_table() {
        // Exhaustive over all country pairs: if a scope is present, every
        // broader scope must be present too, and the identity pair yields
        // the full set.
        let tax = LocationTaxonomy::builtin();
        let codes: Vec<_> = tax.country_codes().cloned().collect();
        for a in &codes {
            let identity = tax.location_scopes(a, a).unwrap();
            assert_eq!(identity.len(), 4, "identity scopes for {a}");
            for b in &codes {
                let scopes = tax.location_scopes(a, b).unwrap();
                for s in &scopes {
                    for broader in s.broader() {
                        assert!(
                            scopes.contains(&broader),
                            "{a}/{b}: {s} present but {broader} missing"
                        );
                    }
                }
                assert!(scopes.contains(&LocationScope::Global));
            }
        }
    }

    #[test]
    fn region_spanning_two_continents_rejected() {
        let table = "country,region,continent\nAA,Western Africa,Africa\nAB,Western Africa,Asia\n";
        let err = LocationTaxonomy::from_csv(table, "test").unwrap_err();
        assert!(matches!(err, TaxonomyError::InvalidTable(_)));
    }

    #[test]
    fn duplicate_country_rejected() {
        let table = "country,region,continent\nAA,R,C\nAA,R,C\n";
        assert!(LocationTaxonomy::from_csv(table, "test").is_err());
    }

    #[test]
    fn default_binning_examples() {
        let bins = AgeBinning::decades();
        assert_eq!(bins.label_of(0).unwrap(), "0-9");
        assert_eq!(bins.label_of(45).unwrap(), "40-49");
        assert_eq!(bins.label_of(129).unwrap(), "80+");
        assert!(matches!(
            bins.label_of(130),
            Err(TaxonomyError::AgeOutOfRange(130))
        ));
    }

    #[test]
    fn every_age_maps_to_exactly_one_bin() {
        let custom = AgeBinning::new(vec![
            (0, Some(18), "child".into()),
            (18, Some(65), "adult".into()),
            (65, None, "senior".into()),
        ])
        .unwrap();
        for binning in [AgeBinning::decades(), custom] {
            for age in 0..MAX_AGE_EXCLUSIVE {
                let label = binning.label_of(age).unwrap();
                let hits = binning
                    .bins()
                    .iter()
                    .filter(|b| b.lo <= age && age < b.hi)
                    .count();
                assert_eq!(hits, 1, "age {age} label {label}");
            }
        }
    }

    #[test]
    fn binning_validation() {
        // gap
        assert!(AgeBinning::new(vec![
            (0, Some(10), "a".into()),
            (20, None, "b".into()),
        ])
        .is_err());
        // overlap
        assert!(AgeBinning::new(vec![
            (0, Some(20), "a".into()),
            (10, None, "b".into()),
        ])
        .is_err());
        // does not start at 0
        assert!(AgeBinning::new(vec![
            (5, Some(20), "a".into()),
            (20, None, "b".into()),
        ])
        .is_err());
        // single bin
        assert!(AgeBinning::new(vec![(0, None, "a".into())]).is_err());
        // last bin not reaching 130
        assert!(AgeBinning::new(vec![
            (0, Some(10), "a".into()),
            (10, Some(20), "b".into()),
        ])
        .is_err());
        // reserved label
        assert!(AgeBinning::new(vec![
            (0, Some(10), "All".into()),
            (10, None, "b".into()),
        ])
        .is_err());
    }

    #[test]
    fn binning_from_csv() {
        let text = "lo,hi,label\n0,40,young\n40,,older\n";
        let bins = AgeBinning::from_csv(text).unwrap();
        assert_eq!(bins.label_of(39).unwrap(), "young");
        assert_eq!(bins.label_of(40).unwrap(), "older");
        assert_eq!(bins.label_of(129).unwrap(), "older");
    }
}
