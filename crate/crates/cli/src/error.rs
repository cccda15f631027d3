use dovmm::decoder::DecoderError;
use dovmm::encoder::{PretrainError, ProviderError};
use dovmm::verify::VerifyError;
use dovmm::data::DataError;
use thiserror::Error;

/// Process exit codes. Anything above [`EXIT_ILLEGAL`] is an error.
pub const EXIT_LEGAL: i32 = 0;
pub const EXIT_ILLEGAL: i32 = 10;
pub const EXIT_USAGE: i32 = 11;
pub const EXIT_INPUT: i32 = 12;
pub const EXIT_PROVIDER: i32 = 13;
pub const EXIT_FAILED: i32 = 14;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or config values.
    #[error("{0}")]
    Usage(String),
    /// Unreadable or invalid input files, unwritable outputs.
    #[error("{0}")]
    Input(String),
    /// The encoder could not be reached or answered wrongly.
    #[error("{0}")]
    Provider(String),
    /// The computation itself failed.
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Input(_) => EXIT_INPUT,
            CliError::Provider(_) => EXIT_PROVIDER,
            CliError::Failed(_) => EXIT_FAILED,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::SplitTooLarge { .. } | DataError::NotEnoughSamples { .. } | DataError::UnknownFamily(_) => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<ProviderError> for CliError {
    fn from(e: ProviderError) -> Self {
        CliError::Provider(e.to_string())
    }
}

impl From<PretrainError> for CliError {
    fn from(e: PretrainError) -> Self {
        match e {
            PretrainError::InvalidConfig(_) | PretrainError::ShapeMismatch { .. } => CliError::Usage(e.to_string()),
            PretrainError::Format(_) => CliError::Input(e.to_string()),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

impl From<DecoderError> for CliError {
    fn from(e: DecoderError) -> Self {
        match e {
            DecoderError::InvalidConfig(_) | DecoderError::ProviderMismatch { .. } | DecoderError::DimensionMismatch { .. } => {
                CliError::Usage(e.to_string())
            }
            DecoderError::Provider { .. } => CliError::Provider(e.to_string()),
            DecoderError::Interrupted { ref source, .. } if matches!(**source, DecoderError::Provider { .. }) => {
                CliError::Provider(e.to_string())
            }
            DecoderError::Format(_) => CliError::Input(e.to_string()),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

impl From<VerifyError> for CliError {
    fn from(e: VerifyError) -> Self {
        match e {
            VerifyError::InvalidConfig(_)
            | VerifyError::NotDisjoint(_)
            | VerifyError::TokenLayout { .. }
            | VerifyError::TrivialMask => CliError::Usage(e.to_string()),
            VerifyError::Provider { .. } | VerifyError::ProviderSetup(_) => CliError::Provider(e.to_string()),
            VerifyError::Decoder(d) => d.into(),
            VerifyError::Data(d) => d.into(),
            _ => CliError::Failed(e.to_string()),
        }
    }
}
