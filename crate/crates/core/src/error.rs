use thiserror::Error;

/// Errors raised by the simulation library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A threshold fixed-point condition does not change sign over `[0, 1]`.
    #[error("case infeasible: residual {at_zero:.6e} at 0 and {at_one:.6e} at 1 have the same sign")]
    CaseInfeasible { at_zero: f64, at_one: f64 },

    /// Nested threshold search failed to bracket the flow-balance curve.
    #[error("numerical failure: {reason}\nresidual trace:\n{}", format_trace(.trace))]
    NumericalFailure { reason: String, trace: Vec<TraceEntry> },

    #[error("internal error at slot {slot}: {reason}")]
    Internal { slot: u64, reason: String },
}

/// One step of a threshold search, kept for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct TraceEntry {
    pub mu1: f64,
    pub mu2: f64,
    pub residual: f64,
}

fn format_trace(trace: &[TraceEntry]) -> String {
    trace
        .iter()
        .map(|e| format!("  mu1={:.9} mu2={:.9} residual={:+.6e}", e.mu1, e.mu2, e.residual))
        .collect::<Vec<_>>()
        .join("\n")
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
