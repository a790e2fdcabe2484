//! Four training procedures compared on the synthetic cluster benchmark:
//! distillation from an L1-logistic teacher, a plain network, and two
//! hard feature-selection baselines (L1 support and the generative oracle).
//!
//! The shared network is a two-hidden-layer ReLU MLP whose outputs are summed
//! and squashed; the output bias is centered on the training data at
//! initialization so the sum starts near the decision boundary.

use std::sync::Arc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::metrics::{auc_roc, ScoredSet};
use crate::model::ParamSet;
use crate::synthgen::ClusterDataset;
use crate::tape::{NodeId, Tape};
use crate::training::{adam_step, AdamConfig, AdamState, TrainError};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpConfig {
    pub hidden: usize,
    pub adam: AdamConfig,
    pub max_epochs: usize,
    pub patience: usize,
    pub micro_batch: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            adam: AdamConfig { learning_rate: 1e-2, ..Default::default() },
            max_epochs: 60,
            patience: 6,
            micro_batch: 100,
        }
    }
}

/// Settings shared by all four procedures.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProcedureConfig {
    pub mlp: MlpConfig,
    pub lambda_grid: Vec<f64>,
    pub alpha_grid: Vec<f64>,
    pub lasso_tol: f64,
    pub lasso_max_iter: usize,
    /// Fraction of the dataset held out for validation; the rest trains.
    pub val_frac: f64,
    /// Size of the freshly generated out-of-sample test set.
    pub test_samples: usize,
    /// Select the teacher's lambda by validation log-loss instead of AUC
    /// (lower variance when positives are scarce).
    pub select_lambda_by_logloss: bool,
    /// Distillation pre-training gets its own, longer budget: its target is a
    /// smooth teacher, so validation KL keeps improving long after the noisy
    /// label losses would have plateaued.
    pub pretrain_max_epochs: usize,
    pub pretrain_patience: usize,
}

impl Default for ProcedureConfig {
    fn default() -> Self {
        Self {
            mlp: MlpConfig::default(),
            // a compact grid keeps the teacher honest: wide-open penalties let
            // validation noise pick overfit teachers when positives are scarce
            lambda_grid: vec![100.0, 30.0],
            alpha_grid: vec![0.0, 0.1],
            lasso_tol: 1e-9,
            lasso_max_iter: 2000,
            val_frac: 0.2,
            test_samples: 10_000,
            select_lambda_by_logloss: false,
            pretrain_max_epochs: 200,
            pretrain_patience: 20,
        }
    }
}

/// Test AUC of each procedure on one dataset, plus teacher diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct BenchResult {
    pub reverse_distill: f64,
    pub standard_nn: f64,
    pub feature_select_l1: f64,
    pub feature_select_oracle: f64,
    pub teacher_auc: f64,
    pub teacher_lambda: f64,
    pub n_selected: usize,
    pub chosen_alpha: f64,
    /// Test AUC of the distilled model before any fine-tuning.
    pub pretrained_test_auc: f64,
    pub teacher_test_auc: f64,
}

fn mlp_init(input_dim: usize, hidden: usize, seed: u64) -> ParamSet {
    use rand_distr::{Distribution, Normal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let n1 = Normal::new(0.0, 1.0 / (input_dim as f64).sqrt()).unwrap();
    let n2 = Normal::new(0.0, 1.0 / (hidden as f64).sqrt()).unwrap();
    params.insert("w1", Array2::from_shape_fn((input_dim, hidden), |_| n1.sample(&mut rng)));
    params.insert("b1", Array2::zeros((1, hidden)));
    params.insert("w2", Array2::from_shape_fn((hidden, hidden), |_| n2.sample(&mut rng)));
    params.insert("b2", Array2::zeros((1, hidden)));
    params.insert("b", Array2::zeros((1, 1)));
    params
}

fn mlp_forward(tape: &mut Tape, ids: &MlpIds, x: NodeId) -> NodeId {
    let h1_lin = tape.matmul(x, ids.w1);
    let h1_pre = tape.add_row(h1_lin, ids.b1);
    let h1 = tape.relu(h1_pre);
    let h2_lin = tape.matmul(h1, ids.w2);
    let h2_pre = tape.add_row(h2_lin, ids.b2);
    let h2 = tape.relu(h2_pre);
    let s = tape.matmul(h2, ids.ones);
    let z = tape.add_row(s, ids.b);
    tape.sigmoid(z)
}

struct MlpIds {
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
    b: NodeId,
    ones: NodeId,
}

fn register_mlp(tape: &mut Tape, params: &ParamSet, hidden: usize) -> MlpIds {
    MlpIds {
        w1: tape.leaf(params.get("w1").clone()),
        b1: tape.leaf(params.get("b1").clone()),
        w2: tape.leaf(params.get("w2").clone()),
        b2: tape.leaf(params.get("b2").clone()),
        b: tape.leaf(params.get("b").clone()),
        ones: tape.leaf(Array2::from_elem((hidden, 1), 1.0)),
    }
}

/// Trained MLP with dense inference.
#[derive(Debug, Clone)]
pub struct MlpModel {
    pub params: ParamSet,
    pub hidden: usize,
}

impl MlpModel {
    pub fn predict(&self, x: &Array2<f64>) -> Vec<f64> {
        let mut tape = Tape::new();
        let ids = register_mlp(&mut tape, &self.params, self.hidden);
        let xl = tape.leaf(x.clone());
        let p = mlp_forward(&mut tape, &ids, xl);
        tape.value(p).column(0).to_vec()
    }
}

#[derive(Clone)]
enum MlpLoss {
    /// Cross-entropy against binary labels.
    Xent,
    /// KL divergence from teacher probabilities.
    Kl { teacher: Arc<Vec<f64>> },
    /// `xent + alpha * KL`.
    Mixed { teacher: Arc<Vec<f64>>, alpha: f64 },
}

enum ValCriterion {
    MaxAuc,
    MinKl { teacher: Arc<Vec<f64>> },
}

fn batch_loss(
    tape: &mut Tape,
    p: NodeId,
    rows: &[usize],
    labels: &[u8],
    loss: &MlpLoss,
) -> NodeId {
    let y: Arc<Vec<f64>> = Arc::new(rows.iter().map(|&i| labels[i] as f64).collect());
    match loss {
        MlpLoss::Xent => tape.weighted_xent_rows(p, y, 1.0),
        MlpLoss::Kl { teacher } => {
            let t: Arc<Vec<f64>> = Arc::new(rows.iter().map(|&i| teacher[i]).collect());
            tape.kl_rows(p, t)
        }
        MlpLoss::Mixed { teacher, alpha } => {
            let t: Arc<Vec<f64>> = Arc::new(rows.iter().map(|&i| teacher[i]).collect());
            let ce = tape.weighted_xent_rows(p, y, 1.0);
            let kl = tape.kl_rows(p, t);
            let kl_scaled = tape.scale(kl, *alpha);
            tape.add(ce, kl_scaled)
        }
    }
}

fn slice_rows(x: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), x.ncols()));
    for (r, &i) in rows.iter().enumerate() {
        out.row_mut(r).assign(&x.row(i));
    }
    out
}

fn center_output_bias(params: &mut ParamSet, hidden: usize, x: &Array2<f64>) {
    let model = MlpModel { params: params.clone(), hidden };
    let mut tape = Tape::new();
    let ids = register_mlp(&mut tape, &model.params, hidden);
    let xl = tape.leaf(x.clone());
    let h1_lin = tape.matmul(xl, ids.w1);
    let h1_pre = tape.add_row(h1_lin, ids.b1);
    let h1 = tape.relu(h1_pre);
    let h2_lin = tape.matmul(h1, ids.w2);
    let h2_pre = tape.add_row(h2_lin, ids.b2);
    let h2 = tape.relu(h2_pre);
    let s = tape.matmul(h2, ids.ones);
    let mean = tape.value(s).column(0).iter().sum::<f64>() / x.nrows() as f64;
    params.get_mut("b")[[0, 0]] = -mean;
}

/// Train an MLP until its validation criterion stops improving.
fn train_mlp(
    mut params: ParamSet,
    hidden: usize,
    x_train: &Array2<f64>,
    labels_train: &[u8],
    x_val: &Array2<f64>,
    labels_val: &[u8],
    loss: MlpLoss,
    criterion: ValCriterion,
    cfg: &MlpConfig,
    seed: u64,
) -> Result<MlpModel, TrainError> {
    let mut adam = AdamState::new(&params, cfg.adam);
    let eval_metric = |params: &ParamSet| -> Result<f64, TrainError> {
        let model = MlpModel { params: params.clone(), hidden };
        let val_scores = model.predict(x_val);
        Ok(match &criterion {
            ValCriterion::MaxAuc => auc_roc(&ScoredSet::new(val_scores, labels_val.to_vec())?)?,
            ValCriterion::MinKl { teacher } => {
                let kl: f64 = val_scores
                    .iter()
                    .zip(teacher.iter())
                    .map(|(&p, &t)| {
                        let cp = p.clamp(1e-7, 1.0 - 1e-7);
                        let mut v = -t * cp.ln() - (1.0 - t) * (1.0 - cp).ln();
                        if t > 0.0 {
                            v += t * t.ln();
                        }
                        if t < 1.0 {
                            v += (1.0 - t) * (1.0 - t).ln();
                        }
                        v
                    })
                    .sum::<f64>()
                    / val_scores.len() as f64;
                -kl
            }
        })
    };
    // the untouched initialization is a candidate checkpoint, so fine-tuning
    // from a pre-trained model can never end worse than it started
    let mut best = params.clone();
    let mut best_metric = eval_metric(&params)?;
    let mut since_best = 0;
    let n = x_train.nrows();

    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15));
        order.shuffle(&mut rng);
        for rows in order.chunks(cfg.micro_batch) {
            let xb = slice_rows(x_train, rows);
            let mut tape = Tape::new();
            let ids = register_mlp(&mut tape, &params, hidden);
            let xl = tape.leaf(xb);
            let p = mlp_forward(&mut tape, &ids, xl);
            let loss_node = batch_loss(&mut tape, p, rows, labels_train, &loss);
            let grads = tape.backward(loss_node);
            let mut gset = ParamSet::new();
            gset.insert("w1", grads.get(ids.w1).clone());
            gset.insert("b1", grads.get(ids.b1).clone());
            gset.insert("w2", grads.get(ids.w2).clone());
            gset.insert("b2", grads.get(ids.b2).clone());
            gset.insert("b", grads.get(ids.b).clone());
            let deltas = adam_step(&mut adam, &gset)?;
            params.add_assign(&deltas);
        }

        let metric = eval_metric(&params)?;
        if metric > best_metric {
            best_metric = metric;
            best = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > cfg.patience {
                break;
            }
        }
        let _ = epoch;
    }
    Ok(MlpModel { params: best, hidden })
}

fn split_indices(n: usize, val_frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_val = (n as f64 * val_frac).round() as usize;
    let n_train = n - n_val;
    (order[..n_train].to_vec(), order[n_train..].to_vec())
}

fn slice_cols(x: &Array2<f64>, cols: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((x.nrows(), cols.len()));
    for (c, &j) in cols.iter().enumerate() {
        out.column_mut(c).assign(&x.column(j));
    }
    out
}

fn test_auc(model: &MlpModel, x: &Array2<f64>, y: &[u8]) -> Result<f64, TrainError> {
    Ok(auc_roc(&ScoredSet::new(model.predict(x), y.to_vec())?)?)
}

/// Run all four procedures on one cluster dataset and report test AUCs.
pub fn run_procedures(
    ds: &ClusterDataset,
    cfg: &ProcedureConfig,
    seed: u64,
) -> Result<BenchResult, TrainError> {
    let (train_idx, val_idx) = split_indices(ds.params.n_samples, cfg.val_frac, seed);
    let x_train = slice_rows(&ds.x, &train_idx);
    let x_val = slice_rows(&ds.x, &val_idx);
    let y_train: Vec<u8> = train_idx.iter().map(|&i| ds.y[i]).collect();
    let y_val: Vec<u8> = val_idx.iter().map(|&i| ds.y[i]).collect();
    // out-of-sample evaluation on a fresh draw from the same planted geometry
    let test_ds = crate::synthgen::resample_cluster(ds, cfg.test_samples, ds.seed ^ 0x7e57_da7a);
    let x_test = test_ds.x;
    let y_test = test_ds.y;

    // teacher: L1-logistic tuned on validation AUC over the lambda grid
    let mut teacher = None;
    for &lambda in &cfg.lambda_grid {
        let fit = crate::linear::train_l1_logreg(
            &x_train,
            &y_train,
            lambda,
            cfg.lasso_tol,
            cfg.lasso_max_iter,
        )?;
        let scores: Vec<f64> = x_val
            .rows()
            .into_iter()
            .map(|r| {
                crate::linear::sigmoid(
                    r.iter().zip(&fit.weights).map(|(&x, &w)| x * w).sum::<f64>() + fit.intercept,
                )
            })
            .collect();
        let auc = auc_roc(&ScoredSet::new(scores.clone(), y_val.clone())?)?;
        let metric = if cfg.select_lambda_by_logloss {
            -scores
                .iter()
                .zip(&y_val)
                .map(|(&p, &y)| {
                    let cp = p.clamp(1e-7, 1.0 - 1e-7);
                    if y == 1 {
                        -cp.ln()
                    } else {
                        -(1.0 - cp).ln()
                    }
                })
                .sum::<f64>()
                / y_val.len() as f64
        } else {
            auc
        };
        if teacher.as_ref().map_or(true, |&(_, _, _, best)| metric > best) {
            teacher = Some((fit, lambda, auc, metric));
        }
    }
    let (teacher_fit, teacher_lambda, teacher_auc, _) = teacher.expect("non-empty lambda grid");
    let teacher_test_scores: Vec<f64> = x_test
        .rows()
        .into_iter()
        .map(|r| {
            crate::linear::sigmoid(
                r.iter()
                    .zip(&teacher_fit.weights)
                    .map(|(&xi, &w)| xi * w)
                    .sum::<f64>()
                    + teacher_fit.intercept,
            )
        })
        .collect();
    let teacher_test_auc = auc_roc(&ScoredSet::new(teacher_test_scores, y_test.clone())?)?;

    let predict_teacher = |x: &Array2<f64>| -> Vec<f64> {
        x.rows()
            .into_iter()
            .map(|r| {
                crate::linear::sigmoid(
                    r.iter()
                        .zip(&teacher_fit.weights)
                        .map(|(&xi, &w)| xi * w)
                        .sum::<f64>()
                        + teacher_fit.intercept,
                )
            })
            .collect()
    };
    let teacher_train = Arc::new(predict_teacher(&x_train));
    let teacher_val = Arc::new(predict_teacher(&x_val));

    let k = ds.params.n_features;
    let hidden = cfg.mlp.hidden;

    // distillation: pre-train to the teacher, then fine-tune with the mixed loss
    let mut init = mlp_init(k, hidden, seed ^ 0x21);
    center_output_bias(&mut init, hidden, &x_train);
    let pretrained = train_mlp(
        init,
        hidden,
        &x_train,
        &y_train,
        &x_val,
        &y_val,
        MlpLoss::Kl { teacher: teacher_train.clone() },
        ValCriterion::MinKl { teacher: teacher_val.clone() },
        &MlpConfig {
            max_epochs: cfg.pretrain_max_epochs,
            patience: cfg.pretrain_patience,
            ..cfg.mlp.clone()
        },
        seed ^ 0x22,
    )?;
    let pretrained_test_auc = test_auc(&pretrained, &x_test, &y_test)?;
    let mut best_rd: Option<(MlpModel, f64, f64)> = None;
    for &alpha in &cfg.alpha_grid {
        let tuned = train_mlp(
            pretrained.params.clone(),
            hidden,
            &x_train,
            &y_train,
            &x_val,
            &y_val,
            MlpLoss::Mixed { teacher: teacher_train.clone(), alpha },
            ValCriterion::MaxAuc,
            &cfg.mlp,
            seed ^ 0x22,
        )?;
        let val_auc = auc_roc(&ScoredSet::new(tuned.predict(&x_val), y_val.clone())?)?;
        if best_rd.as_ref().map_or(true, |(_, best, _)| val_auc > *best) {
            best_rd = Some((tuned, val_auc, alpha));
        }
    }
    let (rd_model, _, chosen_alpha) = best_rd.expect("non-empty alpha grid");
    let reverse_distill = test_auc(&rd_model, &x_test, &y_test)?;

    // plain network on raw features
    let mut init = mlp_init(k, hidden, seed ^ 0x21);
    center_output_bias(&mut init, hidden, &x_train);
    let std_model = train_mlp(
        init,
        hidden,
        &x_train,
        &y_train,
        &x_val,
        &y_val,
        MlpLoss::Xent,
        ValCriterion::MaxAuc,
        &cfg.mlp,
        seed ^ 0x22,
    )?;
    let standard_nn = test_auc(&std_model, &x_test, &y_test)?;

    // hard feature selection from the L1 support
    let selected = teacher_fit.nonzero_indices();
    let feature_select_l1 = if selected.is_empty() {
        0.5
    } else {
        let xt = slice_cols(&x_train, &selected);
        let xv = slice_cols(&x_val, &selected);
        let xs = slice_cols(&x_test, &selected);
        let mut init = mlp_init(selected.len(), hidden, seed ^ 0x31);
        center_output_bias(&mut init, hidden, &xt);
        let model = train_mlp(
            init,
            hidden,
            &xt,
            &y_train,
            &xv,
            &y_val,
            MlpLoss::Xent,
            ValCriterion::MaxAuc,
            &cfg.mlp,
            seed ^ 0x32,
        )?;
        test_auc(&model, &xs, &y_test)?
    };

    // oracle selection: the truly informative coordinates
    let oracle_cols: Vec<usize> = (0..ds.params.n_informative()).collect();
    let xt = slice_cols(&x_train, &oracle_cols);
    let xv = slice_cols(&x_val, &oracle_cols);
    let xs = slice_cols(&x_test, &oracle_cols);
    let mut init = mlp_init(oracle_cols.len(), hidden, seed ^ 0x41);
    center_output_bias(&mut init, hidden, &xt);
    let oracle_model = train_mlp(
        init,
        hidden,
        &xt,
        &y_train,
        &xv,
        &y_val,
        MlpLoss::Xent,
        ValCriterion::MaxAuc,
        &cfg.mlp,
        seed ^ 0x42,
    )?;
    let feature_select_oracle = test_auc(&oracle_model, &xs, &y_test)?;

    Ok(BenchResult {
        reverse_distill,
        standard_nn,
        feature_select_l1,
        feature_select_oracle,
        teacher_auc,
        teacher_lambda,
        n_selected: selected.len(),
        chosen_alpha,
        pretrained_test_auc,
        teacher_test_auc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{gen_cluster_dataset, ClusterParams};

    #[test]
    fn high_separation_is_easy_for_all_procedures() {
        let params = ClusterParams {
            gamma: 5.0,
            n_samples: 800,
            n_features: 50,
            beta: 0.08,
            rho: 0.2,
            ..Default::default()
        };
        let ds = gen_cluster_dataset(&params, 1).unwrap();
        let cfg = ProcedureConfig {
            alpha_grid: vec![0.0],
            mlp: MlpConfig { max_epochs: 30, ..Default::default() },
            ..Default::default()
        };
        let res = run_procedures(&ds, &cfg, 2).unwrap();
        for (name, auc) in [
            ("rd", res.reverse_distill),
            ("std", res.standard_nn),
            ("fs", res.feature_select_l1),
            ("oracle", res.feature_select_oracle),
        ] {
            assert!(auc >= 0.99, "{name} reached only {auc}");
        }
    }

    #[test]
    fn beta_one_makes_oracle_input_the_full_space() {
        let params = ClusterParams {
            beta: 1.0,
            n_features: 20,
            n_samples: 600,
            gamma: 1.0,
            rho: 0.3,
        };
        let ds = gen_cluster_dataset(&params, 3).unwrap();
        assert_eq!(ds.params.n_informative(), 20);
        let cfg = ProcedureConfig {
            alpha_grid: vec![0.0],
            mlp: MlpConfig { max_epochs: 25, ..Default::default() },
            ..Default::default()
        };
        let res = run_procedures(&ds, &cfg, 4).unwrap();
        // identical feature spaces: the oracle and the plain network should be close
        assert!((res.feature_select_oracle - res.standard_nn).abs() < 0.05);
    }

    #[test]
    fn mlp_fits_a_linear_boundary() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 400;
        let x = Array2::from_shape_fn((n, 4), |_| rng.gen_range(-1.0..1.0));
        let y: Vec<u8> = (0..n).map(|i| (x[[i, 0]] + x[[i, 1]] > 0.0) as u8).collect();
        let mut init = mlp_init(4, 16, 6);
        center_output_bias(&mut init, 16, &x);
        let cfg = MlpConfig { hidden: 16, max_epochs: 60, micro_batch: 100, ..Default::default() };
        let model = train_mlp(
            init,
            16,
            &x,
            &y,
            &x,
            &y,
            MlpLoss::Xent,
            ValCriterion::MaxAuc,
            &cfg,
            7,
        )
        .unwrap();
        let auc = test_auc(&model, &x, &y).unwrap();
        assert!(auc > 0.95, "{auc}");
    }
}
