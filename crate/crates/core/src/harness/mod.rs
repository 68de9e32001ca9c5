//! Two-phase training orchestration, evaluation and reporting.

mod config;
mod eval;
mod gradcheck;
mod pipeline;
mod report;
mod train;

pub use config::{AlignRunConfig, BcConfig, DataConfig, EvalConfig, ExperimentConfig, ModelConfig};
pub use eval::{evaluate, evaluate_policy, EpisodeRecord, EvalOutcome, ToyMetrics};
pub use gradcheck::{run_gradcheck, small_spec, GradCheck};
pub use pipeline::{
    evaluate_seeded, generate_dataset, label_dataset, prepare_data, run_pipeline, toy_demo, write_outputs, PipelineOutcome, RunSummary,
    VariantRun, VariantSummary,
};
pub use report::{line_plot, report, samples_csv, scatter_plot, trace_csv, Series};
pub use train::{
    init_model, reference_dmse, stream_rng, train_align, train_bc, AlignOutcome, BcOutcome, BcTrace, Stream, TraceRecord, TrainTrace,
};
