use std::io;

use thiserror::Error;

pub type Result<T, E = NipError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NipError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("id not found: {0}")]
    NotFound(String),

    #[error("corrupt file: {0}")]
    CorruptStore(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("cannot pool an empty orbit")]
    EmptyOrbit,

    #[error("domain error: {0}")]
    Domain(String),

    #[error("axis {0} was already pooled")]
    AxisReused(String),

    #[error("dimension error: {0}")]
    Dim(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("numerical divergence: {0}")]
    NumericalDivergence(String),

    #[error("oracle too large: {0}")]
    OracleTooLarge(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl NipError {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        NipError::Parse {
            line,
            message: message.into(),
        }
    }

    /// Prefixes the message with `ctx`, keeping the variant.
    pub fn context(self, ctx: impl std::fmt::Display) -> Self {
        use NipError::*;
        match self {
            Io(e) => Io(io::Error::new(e.kind(), format!("{ctx}: {e}"))),
            ShapeMismatch(m) => ShapeMismatch(format!("{ctx}: {m}")),
            Validation(m) => Validation(format!("{ctx}: {m}")),
            NotFound(m) => NotFound(format!("{ctx}: {m}")),
            CorruptStore(m) => CorruptStore(format!("{ctx}: {m}")),
            Parse { line, message } => Parse {
                line,
                message: format!("{ctx}: {message}"),
            },
            EmptyOrbit => Domain(format!("{ctx}: empty orbit")),
            Domain(m) => Domain(format!("{ctx}: {m}")),
            AxisReused(m) => AxisReused(format!("{m} ({ctx})")),
            Dim(m) => Dim(format!("{ctx}: {m}")),
            DegenerateData(m) => DegenerateData(format!("{ctx}: {m}")),
            NumericalDivergence(m) => NumericalDivergence(format!("{ctx}: {m}")),
            OracleTooLarge(m) => OracleTooLarge(format!("{ctx}: {m}")),
            Metric(m) => Metric(format!("{ctx}: {m}")),
            Config(m) => Config(format!("{ctx}: {m}")),
        }
    }

    /// Process exit code for the CLI: 2 for numeric failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            NipError::NumericalDivergence(_) | NipError::DegenerateData(_) => 2,
            _ => 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn context_keeps_variant_and_exit_code() {
        let e = NipError::NumericalDivergence("nan".into()).context("image a");
        assert_eq!(e.exit_code(), 2);
        assert_eq!(e.to_string(), "numerical divergence: image a: nan");
        assert_eq!(NipError::Dim("x".into()).context("y").exit_code(), 1);
    }
}
