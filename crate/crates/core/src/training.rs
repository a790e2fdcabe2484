//! Training: the distillation / cross-entropy / mixed losses, bias-corrected
//! Adam, gradient accumulation to an effective batch size, and the two-phase
//! loop (distillation pre-training, then fine-tuning with early stopping on
//! validation AUC).

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{class_weight, Cohort};
use crate::linear::{clamp_prob, featurize, predict_linear, LinearModel};
use crate::metrics::{auc_roc, ScoredSet};
use crate::model::{
    model_gradient, ModelError, ParamSet, SardModel, TrainExample, VisitBatch,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("corpus error: {0}")]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error("linear error: {0}")]
    Linear(#[from] crate::linear::LinearError),
    #[error("metric error: {0}")]
    Metric(#[from] crate::metrics::MetricError),
    #[error("non-finite gradients")]
    NonFiniteGrad,
    #[error("batch_size {batch} must be a positive multiple of micro_batch {micro}")]
    BadBatching { batch: usize, micro: usize },
}

/// Which loss drives a gradient step.
#[derive(Debug, Clone, Copy)]
pub enum LossSpec {
    /// Weighted cross-entropy against the teacher's probability.
    Rd { p_c: f64 },
    /// Weighted cross-entropy against the true label.
    Ce { p_c: f64 },
    /// `ce + alpha * rd`.
    Tune { p_c: f64, alpha: f64 },
}

/// Distillation loss: `-p_c * g * ln f - (1 - g) * ln(1 - f)`.
pub fn loss_rd(teacher_p: f64, student_p: f64, p_c: f64) -> f64 {
    let f = clamp_prob(student_p);
    -p_c * teacher_p * f.ln() - (1.0 - teacher_p) * (1.0 - f).ln()
}

/// Class-weighted cross-entropy against a binary label.
pub fn loss_ce(label: u8, student_p: f64, p_c: f64) -> f64 {
    loss_rd(label as f64, student_p, p_c)
}

/// Fine-tuning loss: `loss_ce + alpha * loss_rd`.
pub fn loss_tune(label: u8, teacher_p: f64, student_p: f64, p_c: f64, alpha: f64) -> f64 {
    loss_ce(label, student_p, p_c) + alpha * loss_rd(teacher_p, student_p, p_c)
}

/// Adam hyperparameters; defaults follow the training setup used throughout.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 2e-4, beta1: 0.9, beta2: 0.98, epsilon: 1e-9 }
    }
}

/// First/second moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    m: ParamSet,
    v: ParamSet,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        Self { config, m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update. Returns the parameter deltas; the state is
/// advanced in place.
pub fn adam_step(state: &mut AdamState, grads: &ParamSet) -> Result<ParamSet, TrainError> {
    if !grads.all_finite() {
        return Err(TrainError::NonFiniteGrad);
    }
    state.step += 1;
    let t = state.step as i32;
    let c = state.config;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let mut deltas = grads.zeros_like();
    for (((_, m), (_, v)), ((_, g), (_, d))) in state
        .m
        .iter_mut()
        .zip(state.v.iter_mut())
        .zip(grads.iter().zip(deltas.iter_mut()))
    {
        for ((mi, vi), (gi, di)) in m.iter_mut().zip(v.iter_mut()).zip(g.iter().zip(d.iter_mut())) {
            *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
            *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *di = -c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
        }
    }
    Ok(deltas)
}

/// Batch schedule, optimizer settings, early-stopping policy, and the alpha
/// grid searched during fine-tuning.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub micro_batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub adam: AdamConfig,
    pub alpha_grid: Vec<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 500,
            micro_batch: 50,
            max_epochs: 50,
            patience: 5,
            adam: AdamConfig::default(),
            alpha_grid: vec![0.0, 0.05, 0.1, 0.15, 0.20],
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.micro_batch == 0
            || self.batch_size == 0
            || self.micro_batch > self.batch_size
            || self.batch_size % self.micro_batch != 0
        {
            return Err(TrainError::BadBatching {
                batch: self.batch_size,
                micro: self.micro_batch,
            });
        }
        Ok(())
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auc: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub diverged: bool,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_auc,wall_time\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch, e.train_loss, e.val_loss, e.val_auc, e.wall_time
            ));
        }
        out
    }
}

/// Cohort packed for the model plus its supervision signals.
pub struct PackedCohort {
    pub batches: Vec<VisitBatch>,
    pub labels: Vec<u8>,
    pub teacher_p: Vec<f64>,
}

impl PackedCohort {
    pub fn build(
        cohort: &Cohort,
        model: &SardModel,
        teacher: Option<&LinearModel>,
    ) -> Result<Self, TrainError> {
        let mut batches = Vec::with_capacity(cohort.records.len());
        let mut teacher_p = Vec::with_capacity(cohort.records.len());
        for rec in &cohort.records {
            batches.push(VisitBatch::from_record(
                rec,
                &cohort.vocab,
                cohort.prediction_day,
                &model.config,
            )?);
            match teacher {
                Some(t) => {
                    let fv = featurize(rec, &t.window_set, &cohort.vocab, cohort.prediction_day)?;
                    teacher_p.push(predict_linear(t, &fv)?);
                }
                None => teacher_p.push(f64::NAN),
            }
        }
        Ok(Self { batches, labels: cohort.labels(), teacher_p })
    }
}

/// Mean loss and gradient over `indices`, accumulated over micro-batches of
/// size `micro`. Equals the single-pass full-batch value up to floating-point
/// reassociation.
pub fn accumulated_gradient(
    model: &SardModel,
    packed: &PackedCohort,
    indices: &[usize],
    loss: &LossSpec,
    micro: usize,
    dropout_seed_base: Option<u64>,
) -> Result<(f64, ParamSet), TrainError> {
    let n = indices.len() as f64;
    let mut total_grad = model.params.zeros_like();
    let mut total_loss = 0.0;
    for chunk in indices.chunks(micro) {
        let examples: Vec<TrainExample> = chunk
            .iter()
            .map(|&i| TrainExample {
                batch: &packed.batches[i],
                label: packed.labels[i],
                teacher_p: if packed.teacher_p[i].is_nan() {
                    None
                } else {
                    Some(packed.teacher_p[i])
                },
                dropout_seed: dropout_seed_base.map(|s| s ^ (i as u64).wrapping_mul(0x9e3779b97f4a7c15)),
            })
            .collect();
        let (mean_loss, mut grad) = model_gradient(model, &examples, loss)?;
        let w = chunk.len() as f64;
        grad.scale_assign(w);
        total_grad.add_assign(&grad);
        total_loss += mean_loss * w;
    }
    total_grad.scale_assign(1.0 / n);
    Ok((total_loss / n, total_grad))
}

/// Mean loss over a packed cohort with dropout off.
pub fn mean_loss(
    model: &SardModel,
    packed: &PackedCohort,
    loss: &LossSpec,
) -> Result<f64, TrainError> {
    let scores = predict_packed(model, packed)?;
    let value = scores
        .iter()
        .enumerate()
        .map(|(i, &p)| match *loss {
            LossSpec::Rd { p_c } => loss_rd(packed.teacher_p[i], p, p_c),
            LossSpec::Ce { p_c } => loss_ce(packed.labels[i], p, p_c),
            LossSpec::Tune { p_c, alpha } => {
                loss_tune(packed.labels[i], packed.teacher_p[i], p, p_c, alpha)
            }
        })
        .sum::<f64>()
        / scores.len() as f64;
    Ok(value)
}

/// Deterministic inference over a packed cohort, parallel across patients.
pub fn predict_packed(model: &SardModel, packed: &PackedCohort) -> Result<Vec<f64>, TrainError> {
    use rayon::prelude::*;
    packed
        .batches
        .par_iter()
        .map(|b| crate::model::forward_batch(model, b, false, 0, None).map_err(TrainError::from))
        .collect()
}

enum Criterion {
    MinValLoss,
    MaxValAuc,
}

struct LoopOutcome {
    model: SardModel,
    history: TrainHistory,
}

#[allow(clippy::too_many_arguments)]
fn training_loop(
    mut model: SardModel,
    train: &PackedCohort,
    val: &PackedCohort,
    config: &TrainConfig,
    loss: LossSpec,
    val_loss_spec: LossSpec,
    criterion: Criterion,
) -> Result<LoopOutcome, TrainError> {
    config.validate()?;
    let start = Instant::now();
    let mut adam = AdamState::new(&model.params, config.adam);
    let mut history = TrainHistory::default();
    let mut best_model = model.clone();
    let mut best_epoch = 0;
    let mut since_best = 0;
    let dropout_on = model.config.dropout_p > 0.0;

    // epoch 0 records the untouched initialization, so the best checkpoint
    // can be the starting point itself (which matters when fine-tuning from
    // a pre-trained model)
    let init_val_loss = mean_loss(&model, val, &val_loss_spec)?;
    let init_val_scores = predict_packed(&model, val)?;
    let init_val_auc = auc_roc(&ScoredSet::new(init_val_scores, val.labels.clone())?)?;
    history.epochs.push(EpochStats {
        epoch: 0,
        train_loss: mean_loss(&model, train, &loss)?,
        val_loss: init_val_loss,
        val_auc: init_val_auc,
        wall_time: start.elapsed().as_secs_f64(),
    });
    let mut best_metric = match criterion {
        Criterion::MinValLoss => init_val_loss,
        Criterion::MaxValAuc => init_val_auc,
    };

    for epoch in 1..=config.max_epochs {
        let mut order: Vec<usize> = (0..train.batches.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (epoch as u64).wrapping_mul(0x2545f4914f6cdd1d));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut epoch_n = 0usize;
        let mut failed = false;
        for batch_idx in order.chunks(config.batch_size) {
            let dropout_base = dropout_on
                .then(|| config.seed ^ 0xd0d0 ^ ((epoch as u64) << 32));
            let step = accumulated_gradient(
                &model,
                train,
                batch_idx,
                &loss,
                config.micro_batch,
                dropout_base,
            );
            let (batch_loss, grads) = match step {
                Ok(v) => v,
                Err(TrainError::Model(ModelError::NonFiniteLoss)) => {
                    failed = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            epoch_loss += batch_loss * batch_idx.len() as f64;
            epoch_n += batch_idx.len();
            let deltas = adam_step(&mut adam, &grads)?;
            model.params.add_assign(&deltas);
            if !model.params.all_finite() {
                failed = true;
                break;
            }
        }
        if failed {
            history.diverged = true;
            break;
        }

        let val_loss = mean_loss(&model, val, &val_loss_spec)?;
        let val_scores = predict_packed(&model, val)?;
        let val_auc = auc_roc(&ScoredSet::new(val_scores, val.labels.clone())?)?;
        history.epochs.push(EpochStats {
            epoch,
            train_loss: epoch_loss / epoch_n.max(1) as f64,
            val_loss,
            val_auc,
            wall_time: start.elapsed().as_secs_f64(),
        });

        let metric = match criterion {
            Criterion::MinValLoss => val_loss,
            Criterion::MaxValAuc => val_auc,
        };
        let improved = match criterion {
            Criterion::MinValLoss => metric < best_metric,
            Criterion::MaxValAuc => metric > best_metric,
        };
        if improved {
            best_metric = metric;
            best_model = model.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > config.patience {
                break;
            }
        }
    }

    history.best_epoch = best_epoch;
    Ok(LoopOutcome { model: best_model, history })
}

/// Distillation pre-training: minimize the mean distillation loss with
/// gradient accumulation; early stopping on the validation distillation loss.
pub fn pretrain_rd(
    model: SardModel,
    teacher: &LinearModel,
    train: &Cohort,
    val: &Cohort,
    config: &TrainConfig,
) -> Result<(SardModel, TrainHistory), TrainError> {
    let p_c = class_weight(&train.labels())?;
    let packed_train = PackedCohort::build(train, &model, Some(teacher))?;
    let packed_val = PackedCohort::build(val, &model, Some(teacher))?;
    let loss = LossSpec::Rd { p_c };
    let out = training_loop(
        model,
        &packed_train,
        &packed_val,
        config,
        loss,
        loss,
        Criterion::MinValLoss,
    )?;
    Ok((out.model, out.history))
}

/// Fine-tuning with the mixed loss; early stopping selects the checkpoint
/// with the highest validation AUC-ROC.
pub fn finetune(
    model: SardModel,
    teacher: &LinearModel,
    train: &Cohort,
    val: &Cohort,
    config: &TrainConfig,
    alpha: f64,
) -> Result<(SardModel, TrainHistory), TrainError> {
    let p_c = class_weight(&train.labels())?;
    let packed_train = PackedCohort::build(train, &model, Some(teacher))?;
    let packed_val = PackedCohort::build(val, &model, Some(teacher))?;
    let out = training_loop(
        model,
        &packed_train,
        &packed_val,
        config,
        LossSpec::Tune { p_c, alpha },
        LossSpec::Tune { p_c, alpha },
        Criterion::MaxValAuc,
    )?;
    Ok((out.model, out.history))
}

/// Fine-tuning on the plain cross-entropy loss (no teacher involvement), used
/// for the no-distillation arm.
pub fn finetune_ce(
    model: SardModel,
    train: &Cohort,
    val: &Cohort,
    config: &TrainConfig,
) -> Result<(SardModel, TrainHistory), TrainError> {
    let p_c = class_weight(&train.labels())?;
    let packed_train = PackedCohort::build(train, &model, None)?;
    let packed_val = PackedCohort::build(val, &model, None)?;
    let loss = LossSpec::Ce { p_c };
    let out = training_loop(
        model,
        &packed_train,
        &packed_val,
        config,
        loss,
        loss,
        Criterion::MaxValAuc,
    )?;
    Ok((out.model, out.history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn loss_closed_forms() {
        let ln2 = std::f64::consts::LN_2;
        assert!((loss_rd(0.5, 0.5, 1.0) - ln2).abs() < 1e-12);
        assert!(loss_rd(1.0, 1.0, 1.0).abs() < 1e-5);
        assert!((loss_rd(0.8, 0.5, 2.0) - 1.8 * ln2).abs() < 1e-12);

        assert!((loss_ce(0, 0.5, 1.0) - ln2).abs() < 1e-12);
        assert!(loss_ce(1, 1.0, 1.0).abs() < 1e-5);
        assert!((loss_ce(1, 0.5, 3.0) - 3.0 * ln2).abs() < 1e-12);

        // alpha = 0 collapses to plain cross-entropy
        assert_eq!(loss_tune(1, 0.9, 0.4, 2.0, 0.0), loss_ce(1, 0.4, 2.0));
        // both components at ln 2
        assert!((loss_tune(0, 0.5, 0.5, 1.0, 1.0) - 2.0 * ln2).abs() < 1e-12);
        // linearity in alpha
        let base = loss_tune(1, 0.7, 0.4, 1.5, 0.0);
        let a1 = loss_tune(1, 0.7, 0.4, 1.5, 0.3) - base;
        let a2 = loss_tune(1, 0.7, 0.4, 1.5, 0.6) - base;
        assert!((a2 - 2.0 * a1).abs() < 1e-12);
    }

    #[test]
    fn losses_nonnegative_and_match_direct_substitution() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let g: f64 = rng.gen();
            let f: f64 = rng.gen();
            let p_c: f64 = rng.gen_range(0.5..5.0);
            let got = loss_rd(g, f, p_c);
            let fc = f.clamp(1e-7, 1.0 - 1e-7);
            let want = -p_c * g * fc.ln() - (1.0 - g) * (1.0 - fc).ln();
            assert!((got - want).abs() < 1e-12);
            assert!(got >= 0.0);
        }
    }

    fn scalar_params(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("x", Array2::from_elem((1, 1), v));
        p
    }

    #[test]
    fn adam_zero_gradient_gives_zero_delta() {
        let params = scalar_params(1.0);
        let mut state = AdamState::new(&params, AdamConfig::default());
        let grads = scalar_params(0.0);
        let d1 = adam_step(&mut state, &grads).unwrap();
        assert_eq!(d1.get("x")[[0, 0]], 0.0);
        // decayed moments still give zero deltas
        let d2 = adam_step(&mut state, &grads).unwrap();
        assert_eq!(d2.get("x")[[0, 0]], 0.0);
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        let cfg = AdamConfig::default();
        for g in [0.3, -2.0, 17.5] {
            let params = scalar_params(0.0);
            let mut state = AdamState::new(&params, cfg);
            let d = adam_step(&mut state, &scalar_params(g)).unwrap();
            let want = -cfg.learning_rate * g / (g.abs() + cfg.epsilon);
            assert!((d.get("x")[[0, 0]] - want).abs() < 1e-15);
            assert!((d.get("x")[[0, 0]] + cfg.learning_rate * g.signum()).abs() < 1e-9);
        }
    }

    #[test]
    fn adam_matches_reference_recurrence() {
        let cfg = AdamConfig { learning_rate: 0.1, beta1: 0.9, beta2: 0.98, epsilon: 1e-9 };
        let params = scalar_params(0.0);
        let mut state = AdamState::new(&params, cfg);

        // reference trace computed directly from the update equations
        let grads = [0.5, 0.5, -1.0];
        let mut m = 0.0;
        let mut v = 0.0;
        for (t, &g) in grads.iter().enumerate() {
            let d = adam_step(&mut state, &scalar_params(g)).unwrap();
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let t1 = (t + 1) as i32;
            let m_hat = m / (1.0 - cfg.beta1.powi(t1));
            let v_hat = v / (1.0 - cfg.beta2.powi(t1));
            let want = -cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            assert!((d.get("x")[[0, 0]] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_rejects_non_finite() {
        let params = scalar_params(0.0);
        let mut state = AdamState::new(&params, AdamConfig::default());
        assert!(adam_step(&mut state, &scalar_params(f64::NAN)).is_err());
    }
}
