//! Desk-scale pipeline for long-horizon claims risk prediction: a windowed
//! L1-logistic baseline, a self-attention sequence model with a convolutional
//! prediction head, reverse-distillation pre-training from the linear
//! teacher, and the evaluation and introspection tooling around them.

pub mod corpus;
pub mod introspect;
pub mod lemma;
pub mod linear;
pub mod metrics;
pub mod model;
pub mod procedures;
pub mod svg;
pub mod synthgen;
pub mod tape;
pub mod training;

pub use corpus::{
    class_weight, load_cohort, save_cohort, split_cohort, Cohort, CodeVocab, PatientRecord, Visit,
};
pub use linear::{
    featurize, predict_linear, select_windows, train_l1_logreg, FeatureVector, LinearModel,
    WindowOffset, WindowSet,
};
pub use model::{
    embed_visit, encode, head_forward, model_forward, model_gradient, temporal_embed,
    EncoderVariant, HeadVariant, SardConfig, SardModel, VisitBatch,
};
pub use training::{
    adam_step, finetune, loss_ce, loss_rd, loss_tune, pretrain_rd, AdamConfig, AdamState,
    LossSpec, TrainConfig,
};
