use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure classes, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad parameter or configuration value.
    Usage,
    /// Malformed, misaligned or unreadable data.
    Data,
    /// A numerical routine failed (CG, eigendecomposition, Cholesky).
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("asymmetric matrix (max |a_ij - a_ji| = {max_asymmetry:e})")]
    AsymmetricMatrix { max_asymmetry: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("matrix is not positive semidefinite (eigenvalue {min_eigenvalue:e})")]
    NotPositiveSemidefinite { min_eigenvalue: f64 },

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("invalid {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("SNP column {index} has zero variance")]
    ConstantColumn { index: usize },

    #[error(
        "conjugate gradient did not converge after {iterations} iterations \
         (residual norm {residual_norm:e}, relative {relative_residual:e})"
    )]
    CgNotConverged {
        iterations: usize,
        residual_norm: f64,
        relative_residual: f64,
    },

    #[error("SNP alignment failed: {0}")]
    Alignment(String),

    #[error("genetic variance {variance:.4} leaves no room for noise; lower h2")]
    GeneticVarianceTooLarge { variance: f64 },

    #[error("every tuning cell failed; first error: {first}")]
    AllCellsFailed { first: String },

    #[error("Gibbs iteration {iteration}: {source}")]
    Chain {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidParameter { .. } | Error::GeneticVarianceTooLarge { .. } => {
                ErrorKind::Usage
            }
            Error::AsymmetricMatrix { .. }
            | Error::NotPositiveSemidefinite { .. }
            | Error::NotPositiveDefinite
            | Error::CgNotConverged { .. } => ErrorKind::Numerical,
            Error::Chain { source, .. } => source.kind(),
            Error::NonFinite(_)
            | Error::DimensionMismatch { .. }
            | Error::ConstantColumn { .. }
            | Error::Alignment(_)
            | Error::AllCellsFailed { .. }
            | Error::Format(_)
            | Error::Io(_) => ErrorKind::Data,
        }
    }

    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
