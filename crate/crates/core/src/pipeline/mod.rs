//! Synthetic data, cross-validation, training loops and reporting.

pub mod cv;
pub mod preprocess;
pub mod report;
pub mod synth;
pub mod train;

pub use cv::{plan_cv, CvPlan, FoldSplit, DEFAULT_FOLDS, DEFAULT_VAL_FRACTION};
pub use preprocess::{preprocess_subject, IcaOutput, IcaSettings, PreprocessConfig, Preprocessed};
pub use report::{aggregate_report, merge_reports, Cell, CellKey, FoldRecord, RunReport, SubjectResult};
pub use synth::{generate_subject, generate_synthetic, plan_events, ArtifactKind, SubjectTruth, SynthSpec};
pub use train::{
    cosine_margin, encoder_digest, evaluate, train_ce, train_ce_with, train_fold, train_scl, train_scl_with, trials_tensor, unit_seed,
    EarlyStopping, EpochLog, FoldOutcome, LossMode, TrainConfig,
};
