use slimbio_core::bench::BenchError;
use slimbio_core::datagen::DataError;
use slimbio_core::executor::ExecError;
use slimbio_core::graph::GraphError;
use slimbio_core::metrics::MetricError;
use slimbio_core::pruner::PruneError;
use slimbio_core::quantizer::QuantError;
use slimbio_core::tensor::TensorError;
use slimbio_core::trainer::TrainError;
use thiserror::Error;

/// Every failure of a command. Configuration problems exit with 1, pipeline
/// failures with 2.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("{0}")]
    Pipeline(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 1,
            _ => 2,
        }
    }
}
