//! Dataset builds, training, evaluation, ablation and inference.

pub mod ablate;
pub mod config;
pub mod dataset;
pub mod evaluate;
pub mod infer;
pub mod train;

pub use ablate::{ablate, AblationRow, AblationTable};
pub use dataset::{
    build_dataset, build_shift_benchmark, load_split, DatasetIndex, DatasetSpec, LoadedSample, RelOptions, RelSource,
    ShiftBenchmarkSpec,
};
pub use evaluate::{evaluate, evaluate_params, EvalOptions, EvalOutput, PredictionSource};
pub use infer::{analyze_regions, export_cloud, infer, CloudDepth, InferOptions, InferOutput, RegionAnalysis};
pub use train::{train, train_in_memory, RunManifest, TrainConfig, TrainOutcome};
