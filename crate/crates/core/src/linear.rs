//! Windowed multi-hot featurization and the L1-regularized logistic
//! regression used as the distillation teacher.
//!
//! Each window looks back a fixed number of days from the prediction day; a
//! feature is 1 iff the code appears in any visit inside that window. The
//! solver is proximal gradient descent with soft-thresholding and a
//! backtracking line search, so the penalized objective never increases.

use std::fmt;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Cohort, CodeVocab, PatientRecord};
use crate::metrics::{auc_roc, ScoredSet};

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum LinearError {
    #[error("feature dimension mismatch: model has {model}, input has {input}")]
    DimMismatch { model: usize, input: usize },
    #[error("code `{0}` outside vocabulary")]
    UnknownCode(String),
    #[error("non-finite values in training inputs")]
    NonFinite,
    #[error("lambda must be positive, got {0}")]
    BadLambda(f64),
    #[error("rows ({rows}) do not match labels ({labels})")]
    RowMismatch { rows: usize, labels: usize },
    #[error("cannot choose {want} windows from {have} candidates")]
    InfeasibleSubset { want: usize, have: usize },
    #[error("window offsets must be strictly increasing")]
    UnsortedWindows,
    #[error("empty lambda grid")]
    EmptyGrid,
    #[error("metric error: {0}")]
    Metric(#[from] crate::metrics::MetricError),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Lookback length of one window: a positive day count or the full history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum WindowOffset {
    Days(u32),
    Infinite,
}

impl WindowOffset {
    pub fn contains(&self, day: i64, prediction_day: i64) -> bool {
        match self {
            WindowOffset::Days(d) => day >= prediction_day - *d as i64 && day <= prediction_day,
            WindowOffset::Infinite => day <= prediction_day,
        }
    }
}

impl fmt::Display for WindowOffset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WindowOffset::Days(d) => write!(f, "{d}"),
            WindowOffset::Infinite => write!(f, "inf"),
        }
    }
}

impl Serialize for WindowOffset {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            WindowOffset::Days(d) => s.serialize_u32(*d),
            WindowOffset::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for WindowOffset {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u32),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(n) => Ok(WindowOffset::Days(n)),
            Raw::Text(t) if t == "inf" => Ok(WindowOffset::Infinite),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("bad window offset `{t}`"))),
        }
    }
}

/// Strictly increasing list of window offsets, all ending at the prediction day.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct WindowSet {
    offsets: Vec<WindowOffset>,
}

impl<'de> Deserialize<'de> for WindowSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let offsets = Vec::<WindowOffset>::deserialize(d)?;
        WindowSet::new(offsets).map_err(serde::de::Error::custom)
    }
}

impl WindowSet {
    pub fn new(offsets: Vec<WindowOffset>) -> Result<Self, LinearError> {
        if offsets.windows(2).any(|w| w[0] >= w[1]) || offsets.is_empty() {
            return Err(LinearError::UnsortedWindows);
        }
        Ok(Self { offsets })
    }

    pub fn single_infinite() -> Self {
        Self { offsets: vec![WindowOffset::Infinite] }
    }

    pub fn offsets(&self) -> &[WindowOffset] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Total feature dimension for a vocabulary of the given size.
    pub fn feature_dim(&self, vocab_size: usize) -> usize {
        self.offsets.len() * vocab_size
    }
}

/// Sparse binary feature vector, blocked by window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureVector {
    ones: Vec<usize>,
    dim: usize,
}

impl FeatureVector {
    pub fn ones(&self) -> &[usize] {
        &self.ones
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for &i in &self.ones {
            v[i] = 1.0;
        }
        v
    }

    pub fn contains(&self, index: usize) -> bool {
        self.ones.binary_search(&index).is_ok()
    }
}

/// Multi-hot featurization: block `w` has a 1 at code `c` iff `c` occurs in
/// any visit inside window `w`. Invariant to visit order and to repeated
/// codes.
pub fn featurize(
    patient: &PatientRecord,
    window_set: &WindowSet,
    vocab: &CodeVocab,
    prediction_day: i64,
) -> Result<FeatureVector, LinearError> {
    let c = vocab.len();
    let dim = window_set.feature_dim(c);
    let mut present = vec![false; dim];
    for visit in &patient.visits {
        for code in &visit.codes {
            let idx = vocab
                .index_of(code)
                .ok_or_else(|| LinearError::UnknownCode(code.clone()))?;
            for (w, offset) in window_set.offsets().iter().enumerate() {
                if offset.contains(visit.day, prediction_day) {
                    present[w * c + idx] = true;
                }
            }
        }
    }
    let ones = present
        .iter()
        .enumerate()
        .filter(|(_, &p)| p)
        .map(|(i, _)| i)
        .collect();
    Ok(FeatureVector { ones, dim })
}

/// Dense feature matrix for a whole cohort, one row per record.
pub fn featurize_cohort(
    cohort: &Cohort,
    window_set: &WindowSet,
) -> Result<Array2<f64>, LinearError> {
    let dim = window_set.feature_dim(cohort.vocab.len());
    let mut x = Array2::zeros((cohort.records.len(), dim));
    for (i, rec) in cohort.records.iter().enumerate() {
        let fv = featurize(rec, window_set, &cohort.vocab, cohort.prediction_day)?;
        for &j in fv.ones() {
            x[[i, j]] = 1.0;
        }
    }
    Ok(x)
}

/// The windowed logistic teacher: `p = sigmoid(w . xi(x) + intercept)`.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    /// Inverse regularization constant: the penalty is `(1/lambda) * |w|_1`,
    /// so larger lambda means a weaker penalty.
    pub lambda: f64,
    pub window_set: WindowSet,
    pub converged: bool,
}

impl LinearModel {
    pub fn nonzero(&self) -> Vec<(usize, f64)> {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w != 0.0)
            .map(|(i, &w)| (i, w))
            .collect()
    }

    pub fn logit(&self, x: &FeatureVector) -> Result<f64, LinearError> {
        if x.dim() != self.weights.len() {
            return Err(LinearError::DimMismatch {
                model: self.weights.len(),
                input: x.dim(),
            });
        }
        Ok(self.intercept + x.ones().iter().map(|&i| self.weights[i]).sum::<f64>())
    }

    pub fn to_json(&self) -> Result<String, LinearError> {
        let doc = LinearModelDoc {
            lambda: self.lambda,
            intercept: self.intercept,
            window_offsets: self.window_set.offsets().to_vec(),
            dim: self.weights.len(),
            nonzero: self.nonzero(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self, LinearError> {
        let doc: LinearModelDoc = serde_json::from_str(text)?;
        let mut weights = vec![0.0; doc.dim];
        for (i, w) in doc.nonzero {
            weights[i] = w;
        }
        Ok(LinearModel {
            weights,
            intercept: doc.intercept,
            lambda: doc.lambda,
            window_set: WindowSet::new(doc.window_offsets)?,
            converged: true,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct LinearModelDoc {
    lambda: f64,
    intercept: f64,
    window_offsets: Vec<WindowOffset>,
    dim: usize,
    nonzero: Vec<(usize, f64)>,
}

/// Probability from the linear model on a featurized patient.
pub fn predict_linear(model: &LinearModel, x: &FeatureVector) -> Result<f64, LinearError> {
    Ok(sigmoid(model.logit(x)?))
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Output of the L1 solver on a raw feature matrix.
#[derive(Debug, Clone)]
pub struct L1Fit {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub converged: bool,
    /// Penalized objective after each accepted step, non-increasing.
    pub objective_trace: Vec<f64>,
}

impl L1Fit {
    pub fn nonzero_indices(&self) -> Vec<usize> {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w != 0.0)
            .map(|(i, _)| i)
            .collect()
    }
}

fn mean_log_loss(x: &Array2<f64>, y: &[u8], w: &Array1<f64>, b: f64) -> f64 {
    let z = x.dot(w) + b;
    let n = y.len() as f64;
    z.iter()
        .zip(y)
        .map(|(&zi, &yi)| {
            let p = clamp_prob(sigmoid(zi));
            if yi == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / n
}

fn log_loss_grad(x: &Array2<f64>, y: &[u8], w: &Array1<f64>, b: f64) -> (Array1<f64>, f64) {
    let z = x.dot(w) + b;
    let n = y.len() as f64;
    let resid = Array1::from_iter(
        z.iter()
            .zip(y)
            .map(|(&zi, &yi)| (sigmoid(zi) - yi as f64) / n),
    );
    let gw = x.t().dot(&resid);
    let gb = resid.sum();
    (gw, gb)
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Minimize `mean logistic loss + (1/lambda) * |w|_1` (intercept
/// unpenalized) by proximal gradient descent with soft-thresholding and a
/// backtracking line search. Terminates when the objective decrease falls
/// below `tol` or after `max_iter` accepted steps; `converged` is false in
/// the latter case.
pub fn train_l1_logreg(
    x: &Array2<f64>,
    y: &[u8],
    lambda: f64,
    tol: f64,
    max_iter: usize,
) -> Result<L1Fit, LinearError> {
    if lambda <= 0.0 || !lambda.is_finite() {
        return Err(LinearError::BadLambda(lambda));
    }
    if x.nrows() != y.len() {
        return Err(LinearError::RowMismatch { rows: x.nrows(), labels: y.len() });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(LinearError::NonFinite);
    }
    let d = x.ncols();
    let penalty = 1.0 / lambda;
    let mut w = Array1::zeros(d);
    let mut b = 0.0;
    let mut smooth = mean_log_loss(x, y, &w, b);
    let mut objective = smooth + penalty * w.iter().map(|v: &f64| v.abs()).sum::<f64>();
    let mut trace = vec![objective];
    let mut step = 1.0;
    let mut converged = false;

    for _ in 0..max_iter {
        let (gw, gb) = log_loss_grad(x, y, &w, b);
        // backtracking: shrink the step until the quadratic majorization holds
        let (w_next, b_next, smooth_next) = loop {
            let w_cand = Array1::from_iter(
                w.iter()
                    .zip(gw.iter())
                    .map(|(&wi, &gi)| soft_threshold(wi - step * gi, step * penalty)),
            );
            let b_cand = b - step * gb;
            let smooth_cand = mean_log_loss(x, y, &w_cand, b_cand);
            let dw = &w_cand - &w;
            let db = b_cand - b;
            let lin = gw.dot(&dw) + gb * db;
            let quad = (dw.dot(&dw) + db * db) / (2.0 * step);
            if smooth_cand <= smooth + lin + quad + 1e-15 {
                break (w_cand, b_cand, smooth_cand);
            }
            step *= 0.5;
            if step < 1e-12 {
                break (w.clone(), b, smooth);
            }
        };
        let objective_next =
            smooth_next + penalty * w_next.iter().map(|v: &f64| v.abs()).sum::<f64>();
        let decrease = objective - objective_next;
        w = w_next;
        b = b_next;
        smooth = smooth_next;
        if objective_next <= objective {
            objective = objective_next;
            trace.push(objective);
        }
        if decrease >= 0.0 && decrease < tol {
            converged = true;
            break;
        }
        step = (step * 1.5).min(1e6);
    }

    Ok(L1Fit {
        weights: w.to_vec(),
        intercept: b,
        converged,
        objective_trace: trace,
    })
}

/// Penalized objective for externally supplied parameters (used by tests and
/// the window search).
pub fn l1_objective(x: &Array2<f64>, y: &[u8], weights: &[f64], intercept: f64, lambda: f64) -> f64 {
    let w = Array1::from_vec(weights.to_vec());
    mean_log_loss(x, y, &w, intercept) + (1.0 / lambda) * weights.iter().map(|v| v.abs()).sum::<f64>()
}

/// Fit the windowed teacher on a cohort for a fixed window set.
pub fn fit_windowed_teacher(
    train: &Cohort,
    window_set: &WindowSet,
    lambda: f64,
    tol: f64,
    max_iter: usize,
) -> Result<LinearModel, LinearError> {
    let x = featurize_cohort(train, window_set)?;
    let fit = train_l1_logreg(&x, &train.labels(), lambda, tol, max_iter)?;
    Ok(LinearModel {
        weights: fit.weights,
        intercept: fit.intercept,
        lambda,
        window_set: window_set.clone(),
        converged: fit.converged,
    })
}

/// Validation AUC of a fitted teacher.
pub fn teacher_val_auc(model: &LinearModel, val: &Cohort) -> Result<f64, LinearError> {
    let mut scores = Vec::with_capacity(val.records.len());
    for rec in &val.records {
        let fv = featurize(rec, &model.window_set, &val.vocab, val.prediction_day)?;
        scores.push(predict_linear(model, &fv)?);
    }
    Ok(auc_roc(&ScoredSet::new(scores, val.labels())?)?)
}

fn combinations(pool: &[WindowOffset], k: usize) -> Vec<Vec<WindowOffset>> {
    fn rec(
        pool: &[WindowOffset],
        k: usize,
        start: usize,
        current: &mut Vec<WindowOffset>,
        out: &mut Vec<Vec<WindowOffset>>,
    ) {
        if current.len() == k {
            out.push(current.clone());
            return;
        }
        for i in start..pool.len() {
            current.push(pool[i]);
            rec(pool, k, i + 1, current, out);
            current.pop();
        }
    }
    let mut out = Vec::new();
    rec(pool, k, 0, &mut Vec::new(), &mut out);
    out
}

/// Outcome of the exhaustive window search.
#[derive(Debug, Clone)]
pub struct WindowSearch {
    pub window_set: WindowSet,
    pub lambda: f64,
    pub val_auc: f64,
}

/// Exhaustively evaluate every size-`n_w` subset of the candidate offsets by
/// training a teacher per (subset, lambda) and scoring validation AUC-ROC.
/// Ties go to the lexicographically smallest offset tuple.
pub fn select_windows(
    candidates: &[WindowOffset],
    n_w: usize,
    train: &Cohort,
    val: &Cohort,
    lambda_grid: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<WindowSearch, LinearError> {
    if n_w > candidates.len() || n_w == 0 {
        return Err(LinearError::InfeasibleSubset { want: n_w, have: candidates.len() });
    }
    if lambda_grid.is_empty() {
        return Err(LinearError::EmptyGrid);
    }
    let mut sorted = candidates.to_vec();
    sorted.sort();
    sorted.dedup();

    let mut best: Option<WindowSearch> = None;
    for combo in combinations(&sorted, n_w) {
        let window_set = WindowSet::new(combo)?;
        for &lambda in lambda_grid {
            let model = fit_windowed_teacher(train, &window_set, lambda, tol, max_iter)?;
            let val_auc = teacher_val_auc(&model, val)?;
            // strict improvement keeps the lexicographically first subset on ties
            if best.as_ref().map_or(true, |b| val_auc > b.val_auc) {
                best = Some(WindowSearch { window_set: window_set.clone(), lambda, val_auc });
            }
        }
    }
    Ok(best.expect("at least one subset evaluated"))
}
