use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: String, message: String },

    #[error("check failed: {0}")]
    Check(String),

    #[error(transparent)]
    Model(#[from] pnrcal::Error),
}

impl CliError {
    /// 1 for usage and configuration problems, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        use pnrcal::Error as E;
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Io { .. } | CliError::Parse { .. } => 1,
            CliError::Check(_) => 2,
            CliError::Model(e) => match e {
                E::InvalidParameter { .. } | E::BoundExceeded { .. } | E::DimensionMismatch { .. } => 1,
                E::NumericalInstability { .. }
                | E::DegeneratePoint { .. }
                | E::TooFewPoints { .. }
                | E::SingularDesign(_)
                | E::NonConvergence { .. }
                | E::DivisionByZero(_) => 2,
            },
        }
    }
}
