//! Core engine for benchmarking AI radiological systems from their
//! submitted prediction files.
//!
//! The pipeline is: ingest a labeled cohort ([`cohort`]), export a
//! demographics-free test package, accept an `ID,Class` CSV back
//! ([`submission`]), score it with classification metrics ([`metrics`])
//! stratified by location, gender and age ([`strata`]), and compare each
//! stratum against radiologist baselines ([`baseline`]). Demographic
//! vocabularies live in [`taxonomy`].

pub mod baseline;
pub mod cohort;
pub mod metrics;
pub mod strata;
pub mod submission;
pub mod taxonomy;
