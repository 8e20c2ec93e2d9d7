use std::path::Path;

use romgnn_core::fem::FemError;
use romgnn_core::field::FieldError;
use romgnn_core::mesh::MeshError;
use romgnn_core::pgd::PgdError;
use romgnn_core::rom::RomError;
use romgnn_nn::checkpoint::CheckpointError;
use romgnn_nn::data::DataError;
use romgnn_nn::doe::DoeError;
use romgnn_nn::graph::GraphError;
use romgnn_nn::train::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input: configuration, arguments or files.
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
    /// A solver or training step failed numerically.
    #[error("{0}")]
    Numerical(String),
    /// Some records failed; the rest were written.
    #[error("{0}")]
    PartialFailure(String),
}

impl CliError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) | CliError::Io(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::PartialFailure(_) => 4,
        }
    }
}

impl From<MeshError> for CliError {
    fn from(e: MeshError) -> Self {
        match e {
            MeshError::Io(_) => CliError::Io(e.to_string()),
            MeshError::RejectionExhausted(_) | MeshError::MeshingFailed(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<FemError> for CliError {
    fn from(e: FemError) -> Self {
        match e {
            FemError::SingularSystem(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<RomError> for CliError {
    fn from(e: RomError) -> Self {
        match e {
            RomError::ShapeMismatch(_) => CliError::Validation(e.to_string()),
            RomError::Fem(e) => e.into(),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<FieldError> for CliError {
    fn from(e: FieldError) -> Self {
        match e {
            FieldError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<PgdError> for CliError {
    fn from(e: PgdError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<DoeError> for CliError {
    fn from(e: DoeError) -> Self {
        CliError::Validation(e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Validation(String::new()).exit_code(), 2);
        assert_eq!(CliError::Io(String::new()).exit_code(), 2);
        assert_eq!(CliError::Numerical(String::new()).exit_code(), 3);
        assert_eq!(CliError::PartialFailure(String::new()).exit_code(), 4);
        assert_eq!(CliError::from(TrainError::Diverged(3)).exit_code(), 3);
        assert_eq!(CliError::from(MeshError::RejectionExhausted(1000)).exit_code(), 3);
    }
}
