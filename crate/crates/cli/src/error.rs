use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input: configuration, files, arguments. Exit code 1.
    #[error("{0}")]
    Validation(String),
    /// Non-finite values during training or failed gradient checks. Exit code 2.
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Numeric(_) => 2,
        }
    }
}

impl From<rfwnet::Error> for CliError {
    fn from(e: rfwnet::Error) -> Self {
        match e {
            rfwnet::Error::NonFiniteLoss { .. }
            | rfwnet::Error::Tensor(rfw_tensor::TensorError::NonFinite { .. }) => {
                CliError::Numeric(e.to_string())
            }
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<rfw_tensor::TensorError> for CliError {
    fn from(e: rfw_tensor::TensorError) -> Self {
        CliError::from(rfwnet::Error::from(e))
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Validation(e.to_string())
    }
}
