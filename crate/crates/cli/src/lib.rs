//! Experiment orchestration for CSNN models: configuration, training runs
//! with checkpoints, probes, mismatch reports and exports.

pub mod config;
pub mod data;
pub mod export;
pub mod report;
pub mod run;
pub mod trace;

use csnn_core::oracle::OracleCheck;
use csnn_core::{CsnnError, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_INVARIANT: i32 = 4;

pub fn exit_code(err: &CsnnError) -> i32 {
    match err {
        CsnnError::Config(_) => EXIT_CONFIG,
        CsnnError::Invariant(_) | CsnnError::DegenerateVector { .. } => EXIT_INVARIANT,
        CsnnError::Dimension(_)
        | CsnnError::Format { .. }
        | CsnnError::Data(_)
        | CsnnError::Metric(_)
        | CsnnError::Io { .. } => EXIT_DATA,
    }
}

/// Thread cap from `CSNN_THREADS`, if set.
pub fn thread_cap(value: Option<&str>) -> Result<Option<usize>> {
    match value {
        None => Ok(None),
        Some(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CsnnError::Config(format!("CSNN_THREADS: expected a positive integer, got {v:?}"))),
        },
    }
}

/// Fails with an invariant error if any oracle check missed its tolerance.
pub fn verify_oracle(checks: &[OracleCheck]) -> Result<()> {
    match checks.iter().find(|c| !c.passed) {
        Some(bad) => Err(CsnnError::Invariant(format!(
            "oracle check {} failed: max error {:e} > {:e}",
            bad.name, bad.max_error, bad.tolerance
        ))),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn errors_map_to_documented_exit_codes() {
        assert_eq!(exit_code(&CsnnError::Config("x".into())), 2);
        assert_eq!(exit_code(&CsnnError::Data("x".into())), 3);
        assert_eq!(exit_code(&CsnnError::format("f", "bad")), 3);
        assert_eq!(exit_code(&CsnnError::Invariant("x".into())), 4);
    }

    #[test]
    fn thread_cap_parses_positive_counts() {
        assert_eq!(thread_cap(None).unwrap(), None);
        assert_eq!(thread_cap(Some("4")).unwrap(), Some(4));
        assert!(thread_cap(Some("0")).is_err());
        assert!(thread_cap(Some("many")).is_err());
    }
}
