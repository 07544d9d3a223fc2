use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    /// The diffusion factor is singular (or `g` is not positive definite) at `point`.
    #[error("singular diffusion at {point:?}: {reason}")]
    Singularity { point: Vec<f64>, reason: String },

    #[error("unsupported: {0}")]
    Capability(String),

    #[error("non-finite value in {context} at state {state:?}")]
    Numeric { context: String, state: Vec<f64> },

    #[error("divergence at step {step}: |state| exceeded {threshold:e}")]
    Divergence { step: usize, threshold: f64 },

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("ill-conditioned ratio: denominator {denominator} within 3 std errors ({std_error}) of zero")]
    IllConditionedRatio { denominator: f64, std_error: f64 },

    #[error("reference solver failure: {0}")]
    Oracle(String),

    #[error("positivity lost at step {step}, site {site} (value {value})")]
    PositivityLoss { step: usize, site: usize, value: f64 },
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn numeric(context: impl Into<String>, state: &[f64]) -> Self {
        Error::Numeric {
            context: context.into(),
            state: state.to_vec(),
        }
    }

    /// Short machine-readable tag used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Input(_) => "input",
            Error::Singularity { .. } => "singularity",
            Error::Capability(_) => "capability",
            Error::Numeric { .. } => "numeric",
            Error::Divergence { .. } => "divergence",
            Error::Estimation(_) => "estimation",
            Error::IllConditionedRatio { .. } => "ill_conditioned_ratio",
            Error::Oracle(_) => "oracle",
            Error::PositivityLoss { .. } => "positivity_loss",
        }
    }
}
