//! Adam optimisation, evaluation and checkpointed training runs.

pub mod adam;
pub mod config;
pub mod error;
pub mod report;
pub mod trainer;

pub use adam::Adam;
pub use config::TrainConfig;
pub use error::{Result, TrainError};
pub use report::{EvalRecord, RunReport, RunStatus};
pub use trainer::{checkpoint_arch, checkpoint_config, evaluate_checkpoint, train, Dataset, Trainer};
