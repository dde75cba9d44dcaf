//! Oracle and invariant harness.
//!
//! Three suites, each returning a [`SuiteReport`]: finite-difference
//! gradients, loss values against the f64 [`reference`], and buffer,
//! schedule and determinism mechanics. [`run_all`] bundles them into one
//! JSON-serializable report.

pub mod equations;
pub mod fixture;
pub mod gradcheck;
pub mod gradients;
pub mod op_grads;
pub mod reference;
pub mod structure;

use serde::Serialize;

pub use equations::run_equation_oracles;
pub use gradients::run_gradient_audit;
pub use structure::run_structure_oracles;

/// One checked property.
#[derive(Clone, Debug, Serialize)]
pub struct CaseReport {
    pub name: String,
    /// Random instances (or entries) examined.
    pub instances: usize,
    /// Largest observed error in the case's own metric.
    pub max_err: f64,
    pub tolerance: f64,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl CaseReport {
    pub fn new(name: impl Into<String>, instances: usize, max_err: f64, tolerance: f64) -> Self {
        CaseReport {
            name: name.into(),
            instances,
            max_err,
            tolerance,
            passed: max_err <= tolerance && max_err.is_finite(),
            note: None,
        }
    }

    /// A case judged by an exact predicate rather than a tolerance.
    pub fn exact(name: impl Into<String>, instances: usize, mismatches: usize) -> Self {
        CaseReport::new(name, instances, mismatches as f64, 0.0)
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = Some(note.into());
        self
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub seed: u64,
    pub seconds: f64,
    pub passed: bool,
    pub cases: Vec<CaseReport>,
}

impl SuiteReport {
    pub(crate) fn finish(suite: &str, seed: u64, start: std::time::Instant, cases: Vec<CaseReport>) -> Self {
        SuiteReport {
            suite: suite.into(),
            seed,
            seconds: start.elapsed().as_secs_f64(),
            passed: cases.iter().all(|c| c.passed),
            cases,
        }
    }

    pub fn case(&self, name: &str) -> Option<&CaseReport> {
        self.cases.iter().find(|c| c.name == name)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AuditReport {
    pub passed: bool,
    pub suites: Vec<SuiteReport>,
}

pub fn run_all(seed: u64) -> crate::Result<AuditReport> {
    let suites = vec![run_gradient_audit(seed)?, run_equation_oracles(seed)?, run_structure_oracles(seed)?];
    Ok(AuditReport { passed: suites.iter().all(|s| s.passed), suites })
}
