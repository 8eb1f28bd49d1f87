//! Scoring, the benchmark protocol, synthetic datasets and resource
//! measurements.

mod alloc;
mod bench;
mod dataset;
mod miou;
mod scaling;
pub mod synthetic;

pub use alloc::{current_bytes, measure_peak, peak_bytes, reset_peak, tracking_active, TrackingAllocator};
pub use bench::{
    mean_std, render_table, run_benchmark, run_benchmark_on, BaselineSpec, BenchmarkReport, BenchmarkSpec,
    FeatureVariant, ImageScore, RunReport, SkippedImage,
};
pub use dataset::{Dataset, DatasetImage, DatasetManifest};
pub use miou::{confusion_matrix, miou, MiouResult, MiouVariant};
pub use scaling::{analytic_stack_bytes, measure_pipeline_scaling, random_upsampler, ScalingConfig, ScalingRow};
