//! Library side of the `esma` command-line tool.

pub mod commands;
pub mod config;
pub mod ingest;
pub mod plots;

use esma_core::error::Error as CoreError;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const OTHER: i32 = 1;
    /// Unreadable, malformed or semantically invalid configuration.
    pub const CONFIG: i32 = 2;
    /// A required input artifact does not exist.
    pub const MISSING_ARTIFACT: i32 = 3;
    /// Training diverged or a numeric quantity was undefined.
    pub const NUMERIC: i32 = 4;
}

/// Maps an error chain to its exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<config::ConfigError>().is_some() || cause.downcast_ref::<plots::PlotError>().is_some_and(|e| !matches!(e, plots::PlotError::Image(_))) {
            return exit::CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::MissingArtifact(_) => exit::MISSING_ARTIFACT,
                CoreError::Divergence { .. } | CoreError::ZeroVector(_) | CoreError::EmptyNeighborhood { .. } => exit::NUMERIC,
                CoreError::InvalidArgument(_) | CoreError::CapacityExceeded { .. } => exit::CONFIG,
                _ => exit::OTHER,
            };
        }
    }
    exit::OTHER
}
