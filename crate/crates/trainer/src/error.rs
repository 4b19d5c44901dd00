use thiserror::Error;

/// Failures of a training run, grouped by how the command line reports them.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{0}")]
    Other(String),
}

impl TrainError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            TrainError::Config(_) => 2,
            TrainError::Io(_) => 3,
            TrainError::Numeric(_) => 4,
            TrainError::Other(_) => 1,
        }
    }
}

impl From<mamlab_core::Error> for TrainError {
    fn from(e: mamlab_core::Error) -> Self {
        use mamlab_core::Error as E;
        match e {
            E::Config(_) | E::Param(_) => TrainError::Config(e.to_string()),
            E::Io(_) | E::Wav(_) | E::Format(_) => TrainError::Io(e.to_string()),
            E::Dim(_) | E::Contract(_) | E::Input(_) => TrainError::Other(e.to_string()),
        }
    }
}

impl From<std::io::Error> for TrainError {
    fn from(e: std::io::Error) -> Self {
        TrainError::Io(e.to_string())
    }
}

impl From<csv::Error> for TrainError {
    fn from(e: csv::Error) -> Self {
        TrainError::Io(e.to_string())
    }
}

pub type TrainResult<T> = std::result::Result<T, TrainError>;
