//! Synthetic teacher/student setup that exercises the whole objective.

mod config;
mod data;
mod entropy;
mod model;
mod train;

pub use config::{MaskMode, RckaMode, RunConfig, Variant};
pub use data::{Dataset, Sample, Task, ToyBatch};
pub use entropy::{entropy_error, entropy_error_experiment, entropy_error_run, write_bins, BinRow, EntropyError, Labeling};
pub use model::{cluster_similarity_gap, Forward, ParamKind, ToyModel};
pub use train::{
    evaluate, mean_teacher_entropy, run_report_write, teacher_cache, train, write_report, EpochRow, EvalMetrics,
    Experiment, RunReport, TeacherCache, REPORT_HEADER,
};
