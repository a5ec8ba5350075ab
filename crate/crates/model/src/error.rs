use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("config error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("empty subset: fraction {fraction} of {total} items")]
    EmptySubset { fraction: f64, total: usize },
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Nn(#[from] sws_nnkit::NnError),
    #[error(transparent)]
    Io(#[from] sws_core::io::DataError),
    #[error(transparent)]
    Labels(#[from] sws_core::labels::LabelError),
    #[error(transparent)]
    Eval(#[from] sws_core::evalkit::EvalError),
}

impl ModelError {
    /// Whether the failure is numerical (divergence, NaN) rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            ModelError::Numerical(_) | ModelError::Nn(sws_nnkit::NnError::Numerical(_))
        )
    }
}

pub type Result<T> = std::result::Result<T, ModelError>;
