//! Frame timing, trajectories and end-to-end experiments.

pub mod experiment;
pub mod timing;
pub mod trajectory;

pub use experiment::{REPORT_HEADER, run_experiment, statistical_ccm, ExperimentConfig, ExperimentContext, ExperimentReport, Method};
pub use timing::FrameTiming;
pub use trajectory::{gen_trajectory, CoctRecord, Trajectory, TrajectoryConfig, TrajectoryMode};
