//! Training, evaluation, the composite objective with the ACT penalty, the
//! Siamese logical-inference setup, flip-flop loss masking, and the
//! dynamic-halting runtime benchmark.

mod bench_halt;
mod config;
mod data;
mod evaluate;
mod metrics;
mod train;

pub use bench_halt::{bench_halt, BenchConfig, BenchRow, BenchTable, BENCH_VARIANTS};
pub use config::{preset, preset_names, RunConfig};
pub use data::{load_split, prepare, LoadedSplit, Prepared, PreparedTarget};
pub use evaluate::{
    build_loss, classification_accuracy, eval_sample, evaluate_model, forward_for, summarize,
    EvalSummary, LossParts, SampleEval,
};
pub use metrics::{CsvLog, MetricsRecord, CSV_HEADER};
pub use train::{
    batch_plan, clip_global_norm, head_spec_for, load_bundle, lr_schedule, train, train_step,
    train_typed, AdamW, DataBundle, TrainReport,
};
