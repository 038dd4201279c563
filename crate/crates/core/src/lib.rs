//! Longitudinal brain-multigraph integration toolkit.
//!
//! The crate estimates a connectional template for a population of
//! multi-view brain graphs observed at a baseline timepoint and forecasts
//! how that template evolves over follow-up timepoints. It is organised as:
//!
//! * [`grad`]: tape-based reverse-mode differentiation over dense matrices,
//! * [`dataset`]: tensor containers, on-disk format, synthetic cohorts, folds,
//! * [`model`]: view normalisation and the recurrent graph-convolutional network,
//! * [`losses`]: centeredness and temporal-regularisation objectives,
//! * [`training`]: per-subject stochastic Adam training loop,
//! * [`evaluation`]: templates, metrics, statistical tests and cross-validation.

pub mod dataset;
pub mod evaluation;
pub mod grad;
pub mod losses;
pub mod model;
pub mod training;

pub use dataset::{
    format_matrix, generate_synthetic, kfold_split, load_dataset, load_matrix, node_strengths,
    save_dataset, view_means, DatasetError, Dims, FoldSplit, LongitudinalDataset,
    MultigraphObservation, SubjectTrajectory,
};
pub use evaluation::{
    centeredness_score, compare_variants, crossval, discriminability_ranking,
    export_population_cbt, node_strength_mae, paired_t_test, population_cbt, topk_overlap,
    AggregateRow, DiscriminabilityRanking, EvaluationError, FoldMetrics, MetricsReport,
    PopulationCbtTrajectory, Strategy, VariantComparison,
};
pub use grad::{finite_diff_check, GradError, Tape, Value};
pub use losses::{
    centeredness_loss, frobenius_distance, subject_loss_breakdown, tape_centeredness_loss,
    tape_frobenius_distance, tape_subject_loss, tape_time_reg_loss, time_reg_loss, total_loss,
    view_weights, LossBreakdown, TapeSubjectLoss, ViewWeights,
};
pub use model::{
    block_forward, cbt_from_hidden, cbt_from_hidden_reference, cell_forward, check_cbt_invariants,
    forward_subject, forward_subject_with_cycles, normalize_views_learned, normalize_views_minmax,
    rnn_unit, tape_forward_subject, Cbt, CellParams, ModelParams, NormalizerParams, TapeCellParams,
    TapeModelParams, TapeNormalizer, TapeSubjectForward, Variant,
};
pub use training::{
    adam_step, adam_update, load_checkpoint, sample_subset, save_checkpoint, train, AdamState,
    CheckpointError, EpochRecord, TrainingConfig, TrainingError, TrainingHistory, TrainingOutput,
};
