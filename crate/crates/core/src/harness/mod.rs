mod ablate;
mod checkpoint;
mod config;
mod evaluate;
mod gradsuite;
mod model;
mod train;

pub use ablate::{ablate, ablation_csv, AblationRun, ABLATION_HEADER};
pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use evaluate::{evaluate_checkpoint, EvalReport};
pub use gradsuite::{eigenvalue_gradient_check, run_all, run_suite, suite_names, EigenCheck, SuiteReport, MIN_EIGEN_GAP, MIN_TRIALS};
pub use model::{total_loss, LossTerms, Model, Target};
pub use train::{evaluate_records, train, EpochRow, TrainOptions, TrainOutcome, LOG_HEADER};
