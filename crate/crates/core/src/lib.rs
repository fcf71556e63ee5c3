//! Dual-network co-teaching across subjects for EEG-style trials, with a
//! small tape-based autodiff, a 1-D residual CNN, a synthetic cohort
//! generator and leave-one-subject-out evaluation.

pub mod autograd;
pub mod commands;
pub mod coteach;
pub mod data;
pub mod error;
pub mod eval;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod seed;
pub mod tensor;

pub use coteach::{
    cross_update_step, remember_rate, select_small_loss_subjects, selection_count, CoteachConfig,
    CoteachState, Method, SelectionRecord,
};
pub use data::{generate_cohort, GeneratorConfig, NoiseMode, SubjectDataset};
pub use error::{Error, Result};
pub use eval::{balanced_accuracy, run_loso, ConfusionMatrix, LosoConfig, RunSummary};
pub use nn::{Model, ModelConfig};
pub use tensor::Tensor;
