//! Synthetic scenes, ground-truth rendering, frozen features, planning
//! metrics and the unseen-rig benchmark.

pub mod benchmark;
pub mod config;
pub mod features;
pub mod metrics;
pub mod scene;
pub mod workloads;

pub use benchmark::{run_benchmark, run_benchmark_to, BenchmarkReport, BenchmarkRow, GroundTruthFrame, Harness, RIG_SETTINGS};
pub use config::HarnessConfig;
pub use features::SyntheticExtractor;
pub use metrics::{collision_rate, l2_displacement, HorizonMetric, Trajectory};
pub use scene::{build_scene, render_dataset, RigConfig, SceneConfig, SyntheticScene};
