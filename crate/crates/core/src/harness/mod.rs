//! Experiment drivers: the 1-D least-squares counterexample, Monte-Carlo
//! gradient checks, toy-model training and sweeps, and dataset loading.

pub mod data;
pub mod lms;
pub mod mlp;
pub mod toy;

pub use data::{load_dataset, two_blobs, DataFormat, Dataset, DatasetSpec};
pub use lms::{detect_oscillation, mc_gradient_estimate, run_lms, LmsConfig, LmsMethod, Oscillation, Trajectory, TrajectoryPoint};
pub use mlp::{Mlp, QatTrainer, SteWeights};
pub use toy::{
    gradcheck_mlp, relative_error, sweep_lambda, train_toy, write_curves_csv, write_sweep_csv, EpochRecord, GradcheckReport,
    Method, OptimizerConfig, OptimizerKind, RunReport, SweepRow, ToyTask, TrainedRun,
};
