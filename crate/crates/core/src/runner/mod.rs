//! Experiment orchestration: the transfer grid, partial pre-training,
//! plot data, and a synthetic task for desk-scale runs.

pub mod grid;
pub mod hyperparams;
pub mod partial;
pub mod pipeline;
pub mod plot;
pub mod synthetic;
pub mod tuning;

pub use grid::{
    cell_id, run_grid, ExperimentConfig, ExperimentData, GridOutcome, HpSource, ResultRow, RowConfig, RowType,
    SAME_CAPTION_EXPONENTS, SIZE_EXPONENTS,
};
pub use hyperparams::{CapgenHyperparams, HyperparamSet, LmHyperparams};
pub use partial::{run_partial_training, PartialConfig, PartialOutcome, PartialRow};
pub use pipeline::{
    build_caption_generator, evaluate_caption_generator, lm_fair_perplexity, reference_embeddings,
    train_caption_generator, train_language_model, unigram_perplexity, CaptionScores, CaptionTask, LmSchedule,
};
pub use plot::{emit_plot_data, PlotFigure};
pub use synthetic::{SyntheticConfig, SyntheticTask};
pub use tuning::{run_tune_job, TuneJob, TuneTarget};
