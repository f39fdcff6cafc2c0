//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`]. Variants are grouped by how a
//! caller should react: configuration mistakes, bad input data, and numerical
//! failures discovered while running.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied setting is unusable (bad grid, bad order, empty box, ...).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Input observations or states violate a documented precondition.
    #[error("invalid data: {0}")]
    Data(String),

    #[error("need at least {needed} observations, got {got}")]
    InsufficientData { needed: usize, got: usize },

    /// Evaluation requested outside the function's domain.
    #[error("t = {t} lies outside the domain [{lo}, {hi}]")]
    OutsideDomain { t: f64, lo: f64, hi: f64 },

    /// A trajectory component left the admissible range during integration.
    #[error("state component exceeded {cap:e} at t = {t}; integration aborted")]
    Blowup { t: f64, cap: f64 },

    /// The weighted local design could not be solved at one evaluation point.
    #[error("singular local fit at t = {t}: {detail}")]
    SingularFit { t: f64, detail: String },

    #[error("bandwidth selection failed: {0}")]
    BandwidthSelection(String),

    #[error("rank-deficient regression in {stage}: rank {rank} of {cols} columns")]
    RankDeficient {
        stage: &'static str,
        rank: usize,
        cols: usize,
    },

    /// A recovery formula divided by a value too close to zero to trust.
    #[error("degenerate estimate in {stage}: {detail}")]
    Degenerate { stage: &'static str, detail: String },

    #[error("optimization failed: {0}")]
    OptimFailure(String),

    #[error("fit failed: {0}")]
    FitFailure(String),

    /// Wraps an error with the pipeline stage that produced it.
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Attaches a pipeline stage label, preserving the underlying error.
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_wrapping_preserves_source_message() {
        let inner = Error::Config("bad order".into());
        let wrapped = inner.in_stage("stage two");
        let text = wrapped.to_string();
        assert!(text.contains("stage two"));
        assert!(text.contains("bad order"));
    }

    #[test]
    fn blowup_names_time_and_cap() {
        let err = Error::Blowup { t: 3.25, cap: 1e12 };
        let text = err.to_string();
        assert!(text.contains("3.25"));
        assert!(text.contains("1e12"));
    }
}
