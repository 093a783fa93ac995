//! Error taxonomy shared across the crate.
//!
//! Every failure is either a *data* problem (bad configuration, malformed
//! files, out-of-range requests) or a *numeric* problem (divergence,
//! calibration breakdown, degenerate inputs). The distinction drives the
//! CLI exit codes: data errors exit 2, numeric errors exit 3.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, OtdrError>;

#[derive(Debug, Error)]
pub enum OtdrError {
    #[error("config: {0}")]
    Config(String),

    #[error("placement: {0}")]
    Placement(String),

    #[error("extraction: {0}")]
    Extraction(String),

    #[error("shape: {0}")]
    Shape(String),

    #[error("state: {0}")]
    State(String),

    #[error("data: {0}")]
    Data(String),

    #[error("format: {0}")]
    Format(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("domain: {0}")]
    Domain(String),

    #[error("calibration: {0}")]
    Calibration(String),

    #[error("training diverged at epoch {epoch}: {msg}")]
    Training { epoch: usize, msg: String },

    #[error("degenerate template: {0}")]
    DegenerateTemplate(String),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad inputs, bad files, bad configuration — exit code 2.
    Data,
    /// Numeric failures (NaN loss, calibration failure…) — exit code 3.
    Numeric,
}

impl OtdrError {
    pub fn class(&self) -> ErrorClass {
        match self {
            OtdrError::Config(_)
            | OtdrError::Placement(_)
            | OtdrError::Extraction(_)
            | OtdrError::Shape(_)
            | OtdrError::State(_)
            | OtdrError::Data(_)
            | OtdrError::Format(_)
            | OtdrError::Io(_) => ErrorClass::Data,
            OtdrError::Domain(_)
            | OtdrError::Calibration(_)
            | OtdrError::Training { .. }
            | OtdrError::DegenerateTemplate(_) => ErrorClass::Numeric,
        }
    }

    /// Short stable token for machine-parsable diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            OtdrError::Config(_) => "config",
            OtdrError::Placement(_) => "placement",
            OtdrError::Extraction(_) => "extraction",
            OtdrError::Shape(_) => "shape",
            OtdrError::State(_) => "state",
            OtdrError::Data(_) => "data",
            OtdrError::Format(_) => "format",
            OtdrError::Io(_) => "io",
            OtdrError::Domain(_) => "domain",
            OtdrError::Calibration(_) => "calibration",
            OtdrError::Training { .. } => "training",
            OtdrError::DegenerateTemplate(_) => "degenerate-template",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn data_errors_classify_as_data() {
        for e in [
            OtdrError::Config("x".into()),
            OtdrError::Placement("x".into()),
            OtdrError::Extraction("x".into()),
            OtdrError::Shape("x".into()),
            OtdrError::State("x".into()),
            OtdrError::Data("x".into()),
            OtdrError::Format("x".into()),
        ] {
            assert_eq!(e.class(), ErrorClass::Data, "{e}");
        }
    }

    #[test]
    fn numeric_errors_classify_as_numeric() {
        for e in [
            OtdrError::Domain("x".into()),
            OtdrError::Calibration("x".into()),
            OtdrError::Training { epoch: 3, msg: "nan".into() },
            OtdrError::DegenerateTemplate("x".into()),
        ] {
            assert_eq!(e.class(), ErrorClass::Numeric, "{e}");
        }
    }

    #[test]
    fn training_error_reports_epoch() {
        let e = OtdrError::Training { epoch: 7, msg: "loss is NaN".into() };
        assert!(e.to_string().contains("epoch 7"));
        assert_eq!(e.kind(), "training");
    }
}
