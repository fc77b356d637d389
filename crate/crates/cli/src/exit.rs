//! Error classes and their exit codes.
//!
//! | code | class |
//! |------|-------|
//! | 0 | success |
//! | 2 | config, schema, parse or matrix-format error |
//! | 3 | effect-size failures above the configured threshold |
//! | 4 | optimizer did not converge (a partial bundle is written) |
//! | 5 | other analysis error (domain, rank, positive definiteness, clustering, plotting) |
//! | 6 | I/O error |

use metakit::MetaError;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Threshold(String),
    Meta(MetaError),
    Io(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Threshold(_) => 3,
            CliError::Io(_) => 6,
            CliError::Meta(e) => match e {
                MetaError::Parse { .. } | MetaError::Schema(_) | MetaError::Format(_) => 2,
                MetaError::Convergence { .. } => 4,
                MetaError::Io(_) => 6,
                MetaError::Domain(_)
                | MetaError::NotEstimable(_)
                | MetaError::InsufficientData(_)
                | MetaError::SingularDesign { .. }
                | MetaError::NotPositiveDefinite { .. }
                | MetaError::PsdViolation { .. }
                | MetaError::Cr2Adjustment(_)
                | MetaError::InsufficientClusters(_)
                | MetaError::Plot(_) => 5,
            },
        }
    }

    pub fn class(&self) -> &'static str {
        match self.code() {
            2 => "schema",
            3 => "threshold",
            4 => "convergence",
            5 => "analysis",
            _ => "io",
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Threshold(m) => write!(f, "{m}"),
            CliError::Meta(e) => write!(f, "{e}"),
            CliError::Io(m) => write!(f, "I/O error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<MetaError> for CliError {
    fn from(e: MetaError) -> Self {
        CliError::Meta(e)
    }
}
