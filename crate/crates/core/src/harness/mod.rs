//! Persistence, configuration, evaluation sweeps and full experiment runs.

pub mod config;
pub mod experiment;
pub mod format;
pub mod plot;
pub mod store;
pub mod sweep;

pub use config::ConfigText;
pub use experiment::{run_experiment, worker_threads, ExperimentConfig, RunSummary};
pub use format::{load_tensor, save_tensor, Checkpoint, DType, StoredTensor, TensorData};
pub use store::{load_dataset, load_model, save_dataset, save_model};
pub use sweep::{eval_sweep, metrics_csv, Density, DensityPlan, Estimator, MetricRow, METRICS_HEADER};
