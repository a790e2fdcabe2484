//! The sequence model: summed code embeddings per visit, sinusoidal temporal
//! embeddings relative to the prediction day, a masked multi-head
//! self-attention encoder (with GRU and identity ablation variants), and a
//! max-pooled convolutional prediction head (with a summing ablation variant).
//!
//! Forward and gradient evaluation run on the [`crate::tape`] engine, so every
//! variant combination has exact reverse-mode gradients.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CodeVocab, PatientRecord, Visit};
use crate::tape::{NodeId, Tape};
use crate::training::LossSpec;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("embedding dimension must be even, got {0}")]
    OddEmbedding(usize),
    #[error("embedding dimension {d_e} not divisible by {heads} heads")]
    HeadMismatch { d_e: usize, heads: usize },
    #[error("omega must have length d_e/2 = {want}, got {got}")]
    OmegaLength { want: usize, got: usize },
    #[error("omega entries must be finite and non-negative")]
    BadOmega,
    #[error("patient {0} has no visits")]
    EmptyHistory(String),
    #[error("unknown code `{0}`")]
    UnknownCode(String),
    #[error("visit day {day} is after prediction day {prediction_day}")]
    FutureVisit { day: i64, prediction_day: i64 },
    #[error("operation requires the {0} variant")]
    WrongVariant(&'static str),
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("teacher probability missing for a distillation loss")]
    MissingTeacher,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    SelfAttention,
    Gru,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    Conv,
    Summing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingInit {
    /// Normal(0, 1/sqrt(d_e)) entries.
    #[default]
    Random,
    /// PMI of within-visit code co-occurrence, factored to d_e dimensions.
    Cooccurrence,
}

fn default_time_clip() -> f64 {
    365.0
}

/// Architecture hyperparameters. `omega` holds the temporal embedding
/// frequencies (length `d_e / 2`); the default is a geometric progression
/// from 1e-5 to 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SardConfig {
    pub d_e: usize,
    pub n_v: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kernels: usize,
    pub dropout_p: f64,
    pub encoder: EncoderVariant,
    pub head: HeadVariant,
    pub omega: Vec<f64>,
    /// Relative time differences are clipped at this many days before the
    /// sinusoidal embedding; 365 by default.
    #[serde(default = "default_time_clip")]
    pub time_clip_days: f64,
    #[serde(default)]
    pub emb_init: EmbeddingInit,
}

/// Geometric progression from 1e-5 to 1 with `half_dim` terms.
pub fn default_omega(half_dim: usize) -> Vec<f64> {
    if half_dim == 1 {
        return vec![1e-5];
    }
    (0..half_dim)
        .map(|i| 1e-5 * 1e5f64.powf(i as f64 / (half_dim - 1) as f64))
        .collect()
}

impl SardConfig {
    pub fn new(
        d_e: usize,
        n_v: usize,
        n_layers: usize,
        n_heads: usize,
        n_kernels: usize,
        dropout_p: f64,
        encoder: EncoderVariant,
        head: HeadVariant,
    ) -> Result<Self, ModelError> {
        let cfg = Self {
            d_e,
            n_v,
            n_layers,
            n_heads,
            n_kernels,
            dropout_p,
            encoder,
            head,
            omega: default_omega(d_e / 2),
            time_clip_days: default_time_clip(),
            emb_init: EmbeddingInit::Random,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_e % 2 != 0 || self.d_e == 0 {
            return Err(ModelError::OddEmbedding(self.d_e));
        }
        if self.encoder == EncoderVariant::SelfAttention && self.d_e % self.n_heads != 0 {
            return Err(ModelError::HeadMismatch { d_e: self.d_e, heads: self.n_heads });
        }
        if self.omega.len() != self.d_e / 2 {
            return Err(ModelError::OmegaLength { want: self.d_e / 2, got: self.omega.len() });
        }
        if self.omega.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(ModelError::BadOmega);
        }
        Ok(())
    }
}

/// Ordered collection of named parameter matrices.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, Array2<f64>)>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter `{name}`"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), value));
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        let i = self.index[name];
        &self.entries[i].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        let i = self.index[name];
        &mut self.entries[i].1
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array2<f64>)> {
        self.entries.iter_mut().map(|(n, v)| (n.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    pub fn zeros_like(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, v) in self.iter() {
            out.insert(name, Array2::zeros(v.dim()));
        }
        out
    }

    /// `self += other`, matching entries by position.
    pub fn add_assign(&mut self, other: &ParamSet) {
        assert_eq!(self.entries.len(), other.entries.len());
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for (_, a) in self.entries.iter_mut() {
            *a *= s;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, v)| v.iter().all(|x| x.is_finite()))
    }
}

/// All learnable state of one model.
#[derive(Debug, Clone)]
pub struct SardModel {
    pub config: SardConfig,
    pub params: ParamSet,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).unwrap();
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

impl SardModel {
    /// Fresh model with seeded random initialization for a vocabulary of
    /// `vocab_size` codes.
    pub fn init(config: SardConfig, vocab_size: usize, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_e;
        let std = 1.0 / (d as f64).sqrt();
        let mut params = ParamSet::new();
        params.insert("emb", normal_matrix(&mut rng, vocab_size, d, std));
        match config.encoder {
            EncoderVariant::SelfAttention => {
                let d_h = d / config.n_heads;
                for l in 0..config.n_layers {
                    for h in 0..config.n_heads {
                        for kind in ["wk", "wq", "wv"] {
                            params.insert(
                                &format!("l{l}.h{h}.{kind}"),
                                normal_matrix(&mut rng, d, d_h, std),
                            );
                        }
                        for kind in ["bk", "bq", "bv"] {
                            params.insert(&format!("l{l}.h{h}.{kind}"), Array2::zeros((1, d_h)));
                        }
                    }
                }
            }
            EncoderVariant::Gru => {
                for kind in ["wz", "wr", "wh"] {
                    params.insert(&format!("gru.{kind}"), normal_matrix(&mut rng, d, d, std));
                }
                for kind in ["uz", "ur", "uh"] {
                    params.insert(&format!("gru.{kind}"), normal_matrix(&mut rng, d, d, std));
                }
                for kind in ["bz", "br", "bh"] {
                    params.insert(&format!("gru.{kind}"), Array2::zeros((1, d)));
                }
            }
            EncoderVariant::Identity => {}
        }
        match config.head {
            HeadVariant::Conv => {
                params.insert("head.kernels", normal_matrix(&mut rng, config.n_kernels, d, std));
                params.insert(
                    "head.w",
                    normal_matrix(&mut rng, config.n_kernels, 1, 1.0 / (config.n_kernels as f64).sqrt()),
                );
                params.insert("head.b", Array2::zeros((1, 1)));
            }
            HeadVariant::Summing => {
                params.insert("head.w", normal_matrix(&mut rng, d, 1, std));
                params.insert("head.b", Array2::zeros((1, 1)));
            }
        }
        Ok(Self { config, params })
    }

    pub fn vocab_size(&self) -> usize {
        self.params.get("emb").nrows()
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let doc = CheckpointDoc {
            config: self.config.clone(),
            tensors: self
                .params
                .iter()
                .map(|(name, v)| TensorDoc {
                    name: name.to_string(),
                    rows: v.nrows(),
                    cols: v.ncols(),
                    data: v.iter().copied().collect(),
                })
                .collect(),
        };
        std::fs::write(path, serde_json::to_string(&doc)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let doc: CheckpointDoc = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        doc.config.validate()?;
        let mut params = ParamSet::new();
        for t in doc.tensors {
            if t.data.len() != t.rows * t.cols {
                return Err(ModelError::Checkpoint(format!(
                    "tensor `{}` has {} values for shape {}x{}",
                    t.name,
                    t.data.len(),
                    t.rows,
                    t.cols
                )));
            }
            let arr = Array2::from_shape_vec((t.rows, t.cols), t.data)
                .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
            params.insert(&t.name, arr);
        }
        Ok(Self { config: doc.config, params })
    }
}

#[derive(Serialize, Deserialize)]
struct TensorDoc {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    config: SardConfig,
    tensors: Vec<TensorDoc>,
}

/// Summed code embeddings for one visit: order-independent by construction.
pub fn embed_visit(
    visit: &Visit,
    embeddings: &Array2<f64>,
    vocab: &CodeVocab,
) -> Result<Array1<f64>, ModelError> {
    let mut psi = Array1::zeros(embeddings.ncols());
    for code in &visit.codes {
        let idx = vocab
            .index_of(code)
            .ok_or_else(|| ModelError::UnknownCode(code.clone()))?;
        psi += &embeddings.row(idx);
    }
    Ok(psi)
}

/// Sinusoidal temporal embedding with an explicit clip on the relative time.
pub fn temporal_embed_clipped(
    visit_day: i64,
    prediction_day: i64,
    omega: &[f64],
    clip: f64,
) -> Result<Vec<f64>, ModelError> {
    if visit_day > prediction_day {
        return Err(ModelError::FutureVisit { day: visit_day, prediction_day });
    }
    let t = ((prediction_day - visit_day) as f64).min(clip);
    let mut out = Vec::with_capacity(omega.len() * 2);
    out.extend(omega.iter().map(|&w| (t * w).sin()));
    out.extend(omega.iter().map(|&w| (t * w).cos()));
    Ok(out)
}

/// Sinusoidal temporal embedding with the standard 365-day clip.
pub fn temporal_embed(
    visit_day: i64,
    prediction_day: i64,
    omega: &[f64],
) -> Result<Vec<f64>, ModelError> {
    temporal_embed_clipped(visit_day, prediction_day, omega, 365.0)
}

/// One patient packed into `n_v` slots, most recent visit first. Pad slots
/// have empty code groups and zero temporal rows.
#[derive(Debug, Clone)]
pub struct VisitBatch {
    pub code_groups: Arc<Vec<Vec<usize>>>,
    pub tau: Array2<f64>,
    pub mask: Arc<Vec<bool>>,
}

impl VisitBatch {
    pub fn from_record(
        record: &PatientRecord,
        vocab: &CodeVocab,
        prediction_day: i64,
        config: &SardConfig,
    ) -> Result<Self, ModelError> {
        if record.visits.is_empty() {
            return Err(ModelError::EmptyHistory(record.patient_id.clone()));
        }
        let n_v = config.n_v;
        let kept = record.visits.len().min(n_v);
        let mut groups = vec![Vec::new(); n_v];
        let mut tau = Array2::zeros((n_v, config.d_e));
        let mut mask = vec![false; n_v];
        for slot in 0..kept {
            // most recent visit goes in slot 0; truncation drops the oldest
            let visit = &record.visits[record.visits.len() - 1 - slot];
            let mut idxs = Vec::with_capacity(visit.codes.len());
            for code in &visit.codes {
                idxs.push(
                    vocab
                        .index_of(code)
                        .ok_or_else(|| ModelError::UnknownCode(code.clone()))?,
                );
            }
            groups[slot] = idxs;
            let t = temporal_embed_clipped(
                visit.day,
                prediction_day,
                &config.omega,
                config.time_clip_days,
            )?;
            for (c, v) in t.into_iter().enumerate() {
                tau[[slot, c]] = v;
            }
            mask[slot] = true;
        }
        Ok(Self {
            code_groups: Arc::new(groups),
            tau,
            mask: Arc::new(mask),
        })
    }

    pub fn n_real(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Optional record of the quantities introspection needs from one forward
/// pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    /// Post-softmax attention, one matrix per (layer, head), layer-major.
    pub attention: Vec<Array2<f64>>,
    /// Max-pooled pre-sigmoid kernel responses (conv head only).
    pub kernel_scores: Vec<f64>,
    /// Post-sigmoid kernel activations (conv head only).
    pub kernel_activations: Vec<f64>,
    /// Visit slot that produced each kernel's max.
    pub kernel_argmax: Vec<usize>,
}

/// Per-layer inverted-dropout masks, entries 0 or 1/(1-p).
pub struct DropoutMasks {
    layers: Vec<Arc<Array2<f64>>>,
}

impl DropoutMasks {
    pub fn generate(config: &SardConfig, seed: u64) -> Option<Self> {
        if config.dropout_p <= 0.0 || config.encoder == EncoderVariant::Identity {
            return None;
        }
        let n_layers = match config.encoder {
            EncoderVariant::SelfAttention => config.n_layers,
            EncoderVariant::Gru => 1,
            EncoderVariant::Identity => 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 - config.dropout_p;
        let layers = (0..n_layers)
            .map(|_| {
                Arc::new(Array2::from_shape_fn((config.n_v, config.d_e), |_| {
                    if rng.gen::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                }))
            })
            .collect();
        Some(Self { layers })
    }
}

pub(crate) struct TapeParams {
    ids: HashMap<String, NodeId>,
    order: Vec<String>,
}

impl TapeParams {
    pub(crate) fn register(tape: &mut Tape, params: &ParamSet) -> Self {
        let mut ids = HashMap::new();
        let mut order = Vec::new();
        for (name, value) in params.iter() {
            ids.insert(name.to_string(), tape.leaf(value.clone()));
            order.push(name.to_string());
        }
        Self { ids, order }
    }

    pub(crate) fn id(&self, name: &str) -> NodeId {
        self.ids[name]
    }

    /// Extract the gradients of every registered parameter.
    pub(crate) fn extract(&self, grads: &crate::tape::Gradients) -> ParamSet {
        let mut out = ParamSet::new();
        for name in &self.order {
            out.insert(name, grads.get(self.ids[name]).clone());
        }
        out
    }
}

/// Build x0 = psi + tau on the tape.
fn build_inputs(tape: &mut Tape, params: &TapeParams, batch: &VisitBatch) -> NodeId {
    let psi = tape.gather_sum_rows(params.id("emb"), batch.code_groups.clone());
    let tau = tape.leaf(batch.tau.clone());
    tape.add(psi, tau)
}

fn build_encoder(
    tape: &mut Tape,
    config: &SardConfig,
    params: &TapeParams,
    x0: NodeId,
    mask: &Arc<Vec<bool>>,
    dropout: Option<&DropoutMasks>,
    trace: Option<&mut ForwardTrace>,
) -> NodeId {
    match config.encoder {
        EncoderVariant::Identity => x0,
        EncoderVariant::SelfAttention => {
            let mut trace = trace;
            let scale = 1.0 / (config.d_e as f64).sqrt();
            let mut x = x0;
            for l in 0..config.n_layers {
                let mut head_outputs = Vec::with_capacity(config.n_heads);
                for h in 0..config.n_heads {
                    let name = |k: &str| format!("l{l}.h{h}.{k}");
                    let k_lin = tape.matmul(x, params.id(&name("wk")));
                    let k = tape.add_row(k_lin, params.id(&name("bk")));
                    let q_lin = tape.matmul(x, params.id(&name("wq")));
                    let q = tape.add_row(q_lin, params.id(&name("bq")));
                    let v_lin = tape.matmul(x, params.id(&name("wv")));
                    let v = tape.add_row(v_lin, params.id(&name("bv")));
                    let raw = tape.matmul_t(q, k);
                    let scaled = tape.scale(raw, scale);
                    let att = tape.masked_softmax_rows(scaled, mask.clone());
                    if let Some(t) = trace.as_deref_mut() {
                        t.attention.push(tape.value(att).clone());
                    }
                    head_outputs.push(tape.matmul(att, v));
                }
                let mixed = tape.concat_cols(&head_outputs);
                x = tape.add(x, mixed);
                if let Some(masks) = dropout {
                    x = tape.mul_const(x, masks.layers[l].clone());
                }
            }
            x
        }
        EncoderVariant::Gru => {
            let d = config.d_e;
            let zero_row = tape.leaf(Array2::zeros((1, d)));
            let mut h = zero_row;
            let mut outputs = vec![zero_row; config.n_v];
            // chronological processing: the oldest kept visit (highest
            // non-pad slot index) first
            let real_slots: Vec<usize> = (0..config.n_v).rev().filter(|&s| mask[s]).collect();
            for &slot in &real_slots {
                let x_t = tape.row(x0, slot);
                let gate = |tape: &mut Tape, w: &str, u: &str, b: &str, h: NodeId| {
                    let a = tape.matmul(x_t, params.id(w));
                    let c = tape.matmul(h, params.id(u));
                    let s = tape.add(a, c);
                    tape.add_row(s, params.id(b))
                };
                let z_pre = gate(tape, "gru.wz", "gru.uz", "gru.bz", h);
                let z = tape.sigmoid(z_pre);
                let r_pre = gate(tape, "gru.wr", "gru.ur", "gru.br", h);
                let r = tape.sigmoid(r_pre);
                let rh = tape.mul(r, h);
                let hx = tape.matmul(x_t, params.id("gru.wh"));
                let hh = tape.matmul(rh, params.id("gru.uh"));
                let cand_lin = tape.add(hx, hh);
                let cand_pre = tape.add_row(cand_lin, params.id("gru.bh"));
                let cand = tape.tanh(cand_pre);
                // h' = (1 - z) * h + z * cand
                let zh = tape.mul(z, h);
                let keep = tape.scale(zh, -1.0);
                let old = tape.add(h, keep);
                let new = tape.mul(z, cand);
                h = tape.add(old, new);
                outputs[slot] = h;
            }
            let mut out = tape.concat_rows(&outputs);
            if let Some(masks) = dropout {
                out = tape.mul_const(out, masks.layers[0].clone());
            }
            out
        }
    }
}

fn build_head(
    tape: &mut Tape,
    config: &SardConfig,
    params: &TapeParams,
    psi_tilde: NodeId,
    mask: &Arc<Vec<bool>>,
    trace: Option<&mut ForwardTrace>,
) -> NodeId {
    match config.head {
        HeadVariant::Conv => {
            let scores = tape.matmul_t(psi_tilde, params.id("head.kernels"));
            let pooled = tape.masked_max_cols(scores, mask.clone());
            let activated = tape.sigmoid(pooled);
            if let Some(t) = trace {
                t.kernel_scores = tape.value(pooled).row(0).to_vec();
                t.kernel_activations = tape.value(activated).row(0).to_vec();
                // re-derive argmax exactly as the pooling op does
                let sc = tape.value(scores);
                t.kernel_argmax = (0..sc.ncols())
                    .map(|c| {
                        let mut best = f64::NEG_INFINITY;
                        let mut arg = 0;
                        for (r, &m) in mask.iter().enumerate() {
                            if m && sc[[r, c]] > best {
                                best = sc[[r, c]];
                                arg = r;
                            }
                        }
                        arg
                    })
                    .collect();
            }
            let z_lin = tape.matmul(activated, params.id("head.w"));
            let z = tape.add(z_lin, params.id("head.b"));
            tape.sigmoid(z)
        }
        HeadVariant::Summing => {
            let _ = config;
            let summed = tape.masked_sum_rows(psi_tilde, mask.clone());
            let z_lin = tape.matmul(summed, params.id("head.w"));
            let z = tape.add(z_lin, params.id("head.b"));
            tape.sigmoid(z)
        }
    }
}

/// Full tape forward for one packed patient; returns the probability node.
pub(crate) fn forward_on_tape(
    tape: &mut Tape,
    model_config: &SardConfig,
    params: &TapeParams,
    batch: &VisitBatch,
    dropout: Option<&DropoutMasks>,
    trace: Option<&mut ForwardTrace>,
) -> NodeId {
    let mut trace = trace;
    let x0 = build_inputs(tape, params, batch);
    let encoded = build_encoder(
        tape,
        model_config,
        params,
        x0,
        &batch.mask,
        dropout,
        trace.as_deref_mut(),
    );
    build_head(tape, model_config, params, encoded, &batch.mask, trace)
}

/// Contextualized visit embeddings for one packed patient.
///
/// In train mode with a positive dropout probability the seed fixes the
/// dropout masks; inference is deterministic.
pub fn encode(
    model: &SardModel,
    batch: &VisitBatch,
    train_mode: bool,
    seed: u64,
) -> Result<Array2<f64>, ModelError> {
    let mut tape = Tape::new();
    let params = TapeParams::register(&mut tape, &model.params);
    let x0 = build_inputs(&mut tape, &params, batch);
    let dropout = if train_mode {
        DropoutMasks::generate(&model.config, seed)
    } else {
        None
    };
    let out = build_encoder(
        &mut tape,
        &model.config,
        &params,
        x0,
        &batch.mask,
        dropout.as_ref(),
        None,
    );
    Ok(tape.value(out).clone())
}

/// Probability from already-contextualized embeddings.
pub fn head_forward(
    model: &SardModel,
    psi_tilde: &Array2<f64>,
    mask: &[bool],
) -> Result<f64, ModelError> {
    if !mask.iter().any(|&m| m) {
        return Err(ModelError::EmptyHistory("<all-pad>".into()));
    }
    let mut tape = Tape::new();
    let params = TapeParams::register(&mut tape, &model.params);
    let x = tape.leaf(psi_tilde.clone());
    let mask_rc = Arc::new(mask.to_vec());
    let p = build_head(&mut tape, &model.config, &params, x, &mask_rc, None);
    Ok(tape.scalar(p))
}

/// End-to-end probability for one patient record.
pub fn model_forward(
    model: &SardModel,
    record: &PatientRecord,
    vocab: &CodeVocab,
    prediction_day: i64,
    train_mode: bool,
    seed: u64,
) -> Result<f64, ModelError> {
    let batch = VisitBatch::from_record(record, vocab, prediction_day, &model.config)?;
    forward_batch(model, &batch, train_mode, seed, None)
}

/// Probability for a pre-packed patient, optionally filling a trace.
pub fn forward_batch(
    model: &SardModel,
    batch: &VisitBatch,
    train_mode: bool,
    seed: u64,
    trace: Option<&mut ForwardTrace>,
) -> Result<f64, ModelError> {
    let mut tape = Tape::new();
    let params = TapeParams::register(&mut tape, &model.params);
    let dropout = if train_mode {
        DropoutMasks::generate(&model.config, seed)
    } else {
        None
    };
    let p = forward_on_tape(&mut tape, &model.config, &params, batch, dropout.as_ref(), trace);
    Ok(tape.scalar(p))
}

/// One training example: a packed patient plus its supervision signals.
pub struct TrainExample<'a> {
    pub batch: &'a VisitBatch,
    pub label: u8,
    pub teacher_p: Option<f64>,
    /// `Some(seed)` turns dropout on with masks fixed by the seed.
    pub dropout_seed: Option<u64>,
}

fn patient_loss(
    tape: &mut Tape,
    config: &SardConfig,
    params: &TapeParams,
    example: &TrainExample,
    loss: &LossSpec,
) -> Result<NodeId, ModelError> {
    let dropout = example
        .dropout_seed
        .and_then(|s| DropoutMasks::generate(config, s));
    let p = forward_on_tape(tape, config, params, example.batch, dropout.as_ref(), None);
    let node = match *loss {
        LossSpec::Rd { p_c } => {
            let g = example.teacher_p.ok_or(ModelError::MissingTeacher)?;
            tape.weighted_xent(p, g, p_c)
        }
        LossSpec::Ce { p_c } => tape.weighted_xent(p, example.label as f64, p_c),
        LossSpec::Tune { p_c, alpha } => {
            let g = example.teacher_p.ok_or(ModelError::MissingTeacher)?;
            let ce = tape.weighted_xent(p, example.label as f64, p_c);
            let rd = tape.weighted_xent(p, g, p_c);
            let rd_scaled = tape.scale(rd, alpha);
            tape.add(ce, rd_scaled)
        }
    };
    Ok(node)
}

/// Exact gradients of the mean batch loss with respect to every parameter.
///
/// Work is chunked with a fixed chunk size and the partial gradients are
/// reduced in chunk order, so the result does not depend on thread count.
pub fn model_gradient(
    model: &SardModel,
    examples: &[TrainExample],
    loss: &LossSpec,
) -> Result<(f64, ParamSet), ModelError> {
    assert!(!examples.is_empty());
    const CHUNK: usize = 8;
    use rayon::prelude::*;

    let chunks: Vec<(f64, ParamSet)> = examples
        .par_chunks(CHUNK)
        .map(|chunk| -> Result<(f64, ParamSet), ModelError> {
            let mut tape = Tape::new();
            let params = TapeParams::register(&mut tape, &model.params);
            let mut total: Option<NodeId> = None;
            for ex in chunk {
                let l = patient_loss(&mut tape, &model.config, &params, ex, loss)?;
                total = Some(match total {
                    Some(t) => tape.add(t, l),
                    None => l,
                });
            }
            let total = total.unwrap();
            let loss_sum = tape.scalar(total);
            if !loss_sum.is_finite() {
                return Err(ModelError::NonFiniteLoss);
            }
            let grads = tape.backward(total);
            Ok((loss_sum, params.extract(&grads)))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let n = examples.len() as f64;
    let mut grad = model.params.zeros_like();
    let mut loss_sum = 0.0;
    for (l, g) in &chunks {
        loss_sum += l;
        grad.add_assign(g);
    }
    grad.scale_assign(1.0 / n);
    Ok((loss_sum / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Visit;

    fn tiny_vocab() -> CodeVocab {
        CodeVocab::new((0..6).map(|i| format!("c{i}")).collect()).unwrap()
    }

    fn tiny_config(encoder: EncoderVariant, head: HeadVariant) -> SardConfig {
        SardConfig::new(8, 6, 2, 2, 2, 0.0, encoder, head).unwrap()
    }

    fn tiny_record() -> PatientRecord {
        PatientRecord {
            patient_id: "p".into(),
            visits: vec![
                Visit { day: 10, codes: vec!["c0".into(), "c3".into()] },
                Visit { day: 60, codes: vec!["c1".into()] },
                Visit { day: 95, codes: vec!["c2".into(), "c4".into(), "c5".into()] },
            ],
            label: 1,
            subgroups: vec![],
        }
    }

    #[test]
    fn embed_visit_matches_summation_oracle() {
        let vocab = tiny_vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let emb = Array2::from_shape_fn((6, 8), |_| rng.gen_range(-1.0..1.0));
        let visit = Visit {
            day: 0,
            codes: vec!["c0".into(), "c2".into(), "c3".into(), "c4".into(), "c5".into()],
        };
        let psi = embed_visit(&visit, &emb, &vocab).unwrap();
        for c in 0..8 {
            let naive: f64 = [0, 2, 3, 4, 5].iter().map(|&i| emb[[i, c]]).sum();
            assert!((psi[c] - naive).abs() < 1e-12);
        }

        // one-hot embedding: visit {c1, c3} reads off the indicator
        let eye = Array2::from_shape_fn((6, 8), |(i, j)| ((i == j) as i32) as f64);
        let v13 = Visit { day: 0, codes: vec!["c1".into(), "c3".into()] };
        let psi13 = embed_visit(&v13, &eye, &vocab).unwrap();
        assert_eq!(psi13.to_vec(), vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);

        // order independence is exact
        let v_rev = Visit { day: 0, codes: vec!["c3".into(), "c1".into()] };
        assert_eq!(psi13, embed_visit(&v_rev, &eye, &vocab).unwrap());
    }

    #[test]
    fn temporal_embed_cases() {
        let omega = [1e-5, 1.0];
        // visit on the prediction day
        let tau = temporal_embed(100, 100, &omega).unwrap();
        assert_eq!(tau, vec![0.0, 0.0, 1.0, 1.0]);

        // clipping groups everything past 365 days
        let far = temporal_embed(0, 1000, &omega).unwrap();
        let clip = temporal_embed(635, 1000, &omega).unwrap();
        assert_eq!(far, clip);

        // direct trig oracle at t = 365
        let t = 365.0_f64;
        let want = vec![
            (t * 1e-5).sin(),
            (t * 1.0).sin(),
            (t * 1e-5).cos(),
            (t * 1.0).cos(),
        ];
        for (a, b) in temporal_embed(0, 365, &omega).unwrap().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_encoder_is_identity() {
        let vocab = tiny_vocab();
        let config = tiny_config(EncoderVariant::Identity, HeadVariant::Summing);
        let model = SardModel::init(config.clone(), vocab.len(), 1).unwrap();
        let batch = VisitBatch::from_record(&tiny_record(), &vocab, 100, &config).unwrap();
        let encoded = encode(&model, &batch, false, 0).unwrap();

        // expected: psi + tau computed directly
        for slot in 0..config.n_v {
            if !batch.mask[slot] {
                continue;
            }
            let visit = &tiny_record().visits[tiny_record().visits.len() - 1 - slot];
            let psi = embed_visit(visit, model.params.get("emb"), &vocab).unwrap();
            for c in 0..config.d_e {
                let want = psi[c] + batch.tau[[slot, c]];
                assert_eq!(encoded[[slot, c]], want);
            }
        }
    }

    #[test]
    fn attention_uniform_when_keys_equal() {
        let vocab = tiny_vocab();
        let mut config = tiny_config(EncoderVariant::SelfAttention, HeadVariant::Conv);
        config.n_layers = 1;
        let mut model = SardModel::init(config.clone(), vocab.len(), 2).unwrap();
        // zero the key and query maps: all raw weights equal
        for h in 0..config.n_heads {
            for kind in ["wk", "wq", "bk", "bq"] {
                model.params.get_mut(&format!("l0.h{h}.{kind}")).fill(0.0);
            }
        }
        let batch = VisitBatch::from_record(&tiny_record(), &vocab, 100, &config).unwrap();
        let mut trace = ForwardTrace::default();
        forward_batch(&model, &batch, false, 0, Some(&mut trace)).unwrap();
        let n_real = batch.n_real();
        for att in &trace.attention {
            for r in 0..config.n_v {
                for (c, &m) in batch.mask.iter().enumerate() {
                    if m {
                        assert!((att[[r, c]] - 1.0 / n_real as f64).abs() < 1e-12);
                    } else {
                        assert_eq!(att[[r, c]], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn single_visit_attends_to_itself() {
        let vocab = tiny_vocab();
        let config = tiny_config(EncoderVariant::SelfAttention, HeadVariant::Conv);
        let record = PatientRecord {
            patient_id: "solo".into(),
            visits: vec![Visit { day: 42, codes: vec!["c0".into()] }],
            label: 0,
            subgroups: vec![],
        };
        let model = SardModel::init(config.clone(), vocab.len(), 7).unwrap();
        let batch = VisitBatch::from_record(&record, &vocab, 100, &config).unwrap();
        let mut trace = ForwardTrace::default();
        forward_batch(&model, &batch, false, 0, Some(&mut trace)).unwrap();
        for att in &trace.attention {
            assert_eq!(att[[0, 0]], 1.0);
            for c in 1..config.n_v {
                assert_eq!(att[[0, c]], 0.0);
            }
        }
    }

    #[test]
    fn head_forward_scalar_oracle() {
        // K=1 kernel equal to e1, visits with first coordinates {0.3, 0.9}
        let vocab = tiny_vocab();
        let mut config = tiny_config(EncoderVariant::Identity, HeadVariant::Conv);
        config.n_kernels = 1;
        let mut model = SardModel::init(config, vocab.len(), 5).unwrap();
        let mut kernel = Array2::zeros((1, 8));
        kernel[[0, 0]] = 1.0;
        *model.params.get_mut("head.kernels") = kernel;
        *model.params.get_mut("head.w") = Array2::from_elem((1, 1), 1.0);
        *model.params.get_mut("head.b") = Array2::zeros((1, 1));

        let mut psi = Array2::zeros((6, 8));
        psi[[0, 0]] = 0.3;
        psi[[1, 0]] = 0.9;
        let mask = [true, true, false, false, false, false];
        let p = head_forward(&model, &psi, &mask).unwrap();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let want = sig(sig(0.9));
        assert!((p - want).abs() < 1e-12, "{p} vs {want}");
        assert!((want - 0.6706).abs() < 1e-3);

        // altering pad rows never changes the output
        let mut altered = psi.clone();
        altered[[3, 0]] = 100.0;
        assert_eq!(p, head_forward(&model, &altered, &mask).unwrap());
    }

    #[test]
    fn summing_head_zero_gives_half() {
        let vocab = tiny_vocab();
        let config = tiny_config(EncoderVariant::Identity, HeadVariant::Summing);
        let mut model = SardModel::init(config, vocab.len(), 6).unwrap();
        model.params.get_mut("head.b").fill(0.0);
        let psi = Array2::zeros((6, 8));
        let mask = [true, true, true, false, false, false];
        assert_eq!(head_forward(&model, &psi, &mask).unwrap(), 0.5);
    }

    #[test]
    fn zeroed_model_predicts_half_everywhere() {
        let vocab = tiny_vocab();
        let config = tiny_config(EncoderVariant::Identity, HeadVariant::Summing);
        let mut model = SardModel::init(config, vocab.len(), 8).unwrap();
        for (_, v) in model.params.iter_mut() {
            v.fill(0.0);
        }
        let p = model_forward(&model, &tiny_record(), &vocab, 100, false, 0).unwrap();
        assert_eq!(p, 0.5);
    }

    #[test]
    fn within_visit_code_permutation_is_exact() {
        let vocab = tiny_vocab();
        for encoder in [EncoderVariant::SelfAttention, EncoderVariant::Gru, EncoderVariant::Identity] {
            let config = tiny_config(encoder, HeadVariant::Conv);
            let model = SardModel::init(config, vocab.len(), 9).unwrap();
            let mut record = tiny_record();
            let p1 = model_forward(&model, &record, &vocab, 100, false, 0).unwrap();
            record.visits[2].codes.reverse();
            let p2 = model_forward(&model, &record, &vocab, 100, false, 0).unwrap();
            assert_eq!(p1.to_bits(), p2.to_bits());
        }
    }

    #[test]
    fn dropout_zero_train_equals_eval() {
        let vocab = tiny_vocab();
        for encoder in [EncoderVariant::SelfAttention, EncoderVariant::Gru] {
            let config = tiny_config(encoder, HeadVariant::Conv);
            assert_eq!(config.dropout_p, 0.0);
            let model = SardModel::init(config, vocab.len(), 10).unwrap();
            let p_eval = model_forward(&model, &tiny_record(), &vocab, 100, false, 3).unwrap();
            let p_train = model_forward(&model, &tiny_record(), &vocab, 100, true, 3).unwrap();
            assert_eq!(p_eval.to_bits(), p_train.to_bits());
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let vocab = tiny_vocab();
        let config = tiny_config(EncoderVariant::SelfAttention, HeadVariant::Conv);
        let model = SardModel::init(config, vocab.len(), 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        let back = SardModel::load(&path).unwrap();
        for ((n1, v1), (n2, v2)) in model.params.iter().zip(back.params.iter()) {
            assert_eq!(n1, n2);
            for (a, b) in v1.iter().zip(v2.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        let p1 = model_forward(&model, &tiny_record(), &vocab, 100, false, 0).unwrap();
        let p2 = model_forward(&back, &tiny_record(), &vocab, 100, false, 0).unwrap();
        assert_eq!(p1.to_bits(), p2.to_bits());
    }

    /// Central finite-difference gradient check over every parameter.
    pub(crate) fn gradient_check(
        encoder: EncoderVariant,
        head: HeadVariant,
        seed: u64,
    ) -> (f64, usize) {
        let vocab = tiny_vocab();
        let config = tiny_config(encoder, head);
        let mut model = SardModel::init(config.clone(), vocab.len(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);

        let records: Vec<PatientRecord> = (0..4)
            .map(|i| {
                let n_visits = rng.gen_range(1..=5);
                let mut days: Vec<i64> = (0..n_visits).map(|_| rng.gen_range(0..=100)).collect();
                days.sort_unstable();
                PatientRecord {
                    patient_id: format!("g{i}"),
                    visits: days
                        .into_iter()
                        .map(|day| {
                            let n_codes = rng.gen_range(1..=3);
                            let mut codes: Vec<String> = Vec::new();
                            while codes.len() < n_codes {
                                let c = format!("c{}", rng.gen_range(0..6));
                                if !codes.contains(&c) {
                                    codes.push(c);
                                }
                            }
                            Visit { day, codes }
                        })
                        .collect(),
                    label: rng.gen_range(0..2) as u8,
                    subgroups: vec![],
                }
            })
            .collect();
        let batches: Vec<VisitBatch> = records
            .iter()
            .map(|r| VisitBatch::from_record(r, &vocab, 100, &config).unwrap())
            .collect();
        let teacher: Vec<f64> = (0..4).map(|_| rng.gen_range(0.1..0.9)).collect();
        let loss = LossSpec::Tune { p_c: 1.7, alpha: 0.4 };
        let make_examples = |batches: &[VisitBatch]| -> Vec<(usize, u8, f64)> {
            batches
                .iter()
                .enumerate()
                .map(|(i, _)| (i, records[i].label, teacher[i]))
                .collect()
        };
        let meta = make_examples(&batches);

        let eval = |m: &SardModel| -> f64 {
            let examples: Vec<TrainExample> = meta
                .iter()
                .map(|&(i, label, tp)| TrainExample {
                    batch: &batches[i],
                    label,
                    teacher_p: Some(tp),
                    dropout_seed: None,
                })
                .collect();
            model_gradient(m, &examples, &loss).unwrap().0
        };

        let examples: Vec<TrainExample> = meta
            .iter()
            .map(|&(i, label, tp)| TrainExample {
                batch: &batches[i],
                label,
                teacher_p: Some(tp),
                dropout_seed: None,
            })
            .collect();
        let (_, grads) = model_gradient(&model, &examples, &loss).unwrap();

        let h = 1e-4;
        let mut worst = 0.0_f64;
        let mut checked = 0;
        let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
        for name in &names {
            let dim = model.params.get(name).dim();
            for r in 0..dim.0 {
                for c in 0..dim.1 {
                    let orig = model.params.get(name)[[r, c]];
                    model.params.get_mut(name)[[r, c]] = orig + h;
                    let plus = eval(&model);
                    model.params.get_mut(name)[[r, c]] = orig - h;
                    let minus = eval(&model);
                    model.params.get_mut(name)[[r, c]] = orig;
                    let fd = (plus - minus) / (2.0 * h);
                    let an = grads.get(name)[[r, c]];
                    let err = (fd - an).abs();
                    let rel = err / fd.abs().max(an.abs()).max(1e-3);
                    worst = worst.max(rel);
                    checked += 1;
                }
            }
        }
        (worst, checked)
    }

    #[test]
    fn gradcheck_all_variants() {
        for (i, encoder) in [EncoderVariant::SelfAttention, EncoderVariant::Gru, EncoderVariant::Identity]
            .into_iter()
            .enumerate()
        {
            for (j, head) in [HeadVariant::Conv, HeadVariant::Summing].into_iter().enumerate() {
                let (worst, checked) = gradient_check(encoder, head, 100 + (i * 2 + j) as u64);
                assert!(checked > 0);
                assert!(
                    worst <= 1e-4,
                    "variant {encoder:?}/{head:?}: worst relative error {worst}"
                );
            }
        }
    }

    #[test]
    fn descent_direction() {
        let vocab = tiny_vocab();
        let config = tiny_config(EncoderVariant::SelfAttention, HeadVariant::Conv);
        let mut model = SardModel::init(config.clone(), vocab.len(), 33).unwrap();
        let record = tiny_record();
        let batch = VisitBatch::from_record(&record, &vocab, 100, &config).unwrap();
        let loss = LossSpec::Ce { p_c: 2.0 };
        let examples = vec![TrainExample {
            batch: &batch,
            label: 1,
            teacher_p: None,
            dropout_seed: None,
        }];
        let (l0, grads) = model_gradient(&model, &examples, &loss).unwrap();
        let eta = 1e-3;
        for (name, v) in model.params.iter_mut() {
            *v -= &(grads.get(name) * eta);
        }
        let (l1, _) = model_gradient(&model, &examples, &loss).unwrap();
        assert!(l1 < l0, "{l1} !< {l0}");
    }

    #[test]
    fn zero_final_weight_stops_kernel_gradients() {
        let vocab = tiny_vocab();
        let config = tiny_config(EncoderVariant::Identity, HeadVariant::Conv);
        let mut model = SardModel::init(config.clone(), vocab.len(), 44).unwrap();
        model.params.get_mut("head.w").fill(0.0);
        let batch = VisitBatch::from_record(&tiny_record(), &vocab, 100, &config).unwrap();
        let examples = vec![TrainExample {
            batch: &batch,
            label: 1,
            teacher_p: None,
            dropout_seed: None,
        }];
        let (_, grads) = model_gradient(&model, &examples, &LossSpec::Ce { p_c: 1.0 }).unwrap();
        assert!(grads.get("head.kernels").iter().all(|&g| g == 0.0));
        // the final layer itself still learns
        assert!(grads.get("head.w").iter().any(|&g| g != 0.0));
    }
}
