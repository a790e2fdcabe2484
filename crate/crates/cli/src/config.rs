//! Experiment configuration. Every key is explicit, unknown keys are
//! rejected, and all randomness flows from the seeds listed here.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sard_core::linear::{WindowOffset, WindowSet};
use sard_core::model::{EmbeddingInit, EncoderVariant, HeadVariant, SardConfig};
use sard_core::procedures::{MlpConfig, ProcedureConfig};
use sard_core::synthgen::{ClaimsGenParams, ClusterParams};
use sard_core::training::{AdamConfig, TrainConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub split: u64,
    pub model: u64,
    pub train: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowsSection {
    /// Candidate lookback offsets in days; "inf" marks the full history.
    pub candidates: Vec<WindowOffset>,
    pub n_windows: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSection {
    pub lambda_grid: Vec<f64>,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

fn default_tol() -> f64 {
    1e-8
}

fn default_max_iter() -> usize {
    800
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SardSection {
    pub d_e: usize,
    pub n_v: usize,
    pub layers: usize,
    pub heads: usize,
    pub kernels: usize,
    pub dropout: f64,
    #[serde(default = "default_encoder")]
    pub encoder: EncoderVariant,
    #[serde(default = "default_head")]
    pub head: HeadVariant,
    #[serde(default)]
    pub emb_init: EmbeddingInit,
}

fn default_encoder() -> EncoderVariant {
    EncoderVariant::SelfAttention
}

fn default_head() -> HeadVariant {
    HeadVariant::Conv
}

impl SardSection {
    pub fn to_config(&self) -> Result<SardConfig> {
        let mut cfg = SardConfig::new(
            self.d_e,
            self.n_v,
            self.layers,
            self.heads,
            self.kernels,
            self.dropout,
            self.encoder,
            self.head,
        )?;
        cfg.emb_init = self.emb_init;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub micro_batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    pub alpha_grid: Vec<f64>,
    /// Pre-training epoch budget; falls back to `max_epochs`.
    #[serde(default)]
    pub pretrain_max_epochs: Option<usize>,
    #[serde(default)]
    pub pretrain_patience: Option<usize>,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.98
}

fn default_epsilon() -> f64 {
    1e-9
}

impl TrainSection {
    pub fn finetune_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            micro_batch: self.micro_batch,
            max_epochs: self.max_epochs,
            patience: self.patience,
            adam: AdamConfig {
                learning_rate: self.learning_rate,
                beta1: self.beta1,
                beta2: self.beta2,
                epsilon: self.epsilon,
            },
            alpha_grid: self.alpha_grid.clone(),
            seed,
        }
    }

    pub fn pretrain_config(&self, seed: u64) -> TrainConfig {
        let mut cfg = self.finetune_config(seed);
        if let Some(e) = self.pretrain_max_epochs {
            cfg.max_epochs = e;
        }
        if let Some(p) = self.pretrain_patience {
            cfg.patience = p;
        }
        cfg
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LemmaSection {
    pub vocab_size: usize,
    pub n_patients: usize,
    pub span_days: u32,
    pub period_days: f64,
    pub boundary_gap_days: f64,
    pub mean_visits: f64,
    pub n_freqs: Vec<usize>,
    pub sharpness: f64,
    /// Planted teacher weights as (window index, code index, weight).
    pub weights: Vec<(usize, usize, f64)>,
    pub intercept: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSection {
    pub n_features: usize,
    pub gamma: f64,
    pub rho: f64,
    pub beta: f64,
    pub n_samples: usize,
    #[serde(default = "default_bench_seeds")]
    pub n_seeds: usize,
    #[serde(default = "default_mlp_hidden")]
    pub mlp_hidden: usize,
    #[serde(default = "default_mlp_lr")]
    pub mlp_learning_rate: f64,
    #[serde(default = "default_mlp_epochs")]
    pub mlp_max_epochs: usize,
    #[serde(default)]
    pub bench_lambda_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub bench_alpha_grid: Option<Vec<f64>>,
}

fn default_bench_seeds() -> usize {
    20
}

fn default_mlp_hidden() -> usize {
    64
}

fn default_mlp_lr() -> f64 {
    1e-2
}

fn default_mlp_epochs() -> usize {
    60
}

impl ClusterSection {
    pub fn params(&self) -> ClusterParams {
        ClusterParams {
            n_features: self.n_features,
            gamma: self.gamma,
            rho: self.rho,
            beta: self.beta,
            n_samples: self.n_samples,
        }
    }

    pub fn procedure_config(&self) -> ProcedureConfig {
        let mut cfg = ProcedureConfig {
            mlp: MlpConfig {
                hidden: self.mlp_hidden,
                adam: AdamConfig { learning_rate: self.mlp_learning_rate, ..Default::default() },
                max_epochs: self.mlp_max_epochs,
                ..Default::default()
            },
            ..Default::default()
        };
        if let Some(grid) = &self.bench_lambda_grid {
            cfg.lambda_grid = grid.clone();
        }
        if let Some(grid) = &self.bench_alpha_grid {
            cfg.alpha_grid = grid.clone();
        }
        cfg
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClaimsSection {
    pub n_patients: usize,
    pub vocab_size: usize,
    pub mean_visits: f64,
    pub mean_codes_per_visit: f64,
    pub history_span_days: u32,
    pub planted_windows: Vec<WindowOffset>,
    pub planted_weights: Vec<(usize, usize, f64)>,
    pub intercept: f64,
    #[serde(default)]
    pub drift_day: Option<i64>,
    #[serde(default)]
    pub drift_magnitude: f64,
    #[serde(default)]
    pub ensure_recent_visit_within: Option<u32>,
    #[serde(default)]
    pub n_subgroups: usize,
}

impl ClaimsSection {
    pub fn params(&self) -> Result<ClaimsGenParams> {
        Ok(ClaimsGenParams {
            n_patients: self.n_patients,
            vocab_size: self.vocab_size,
            mean_visits: self.mean_visits,
            mean_codes_per_visit: self.mean_codes_per_visit,
            history_span_days: self.history_span_days,
            planted_windows: WindowSet::new(self.planted_windows.clone())?,
            planted_weights: self.planted_weights.clone(),
            intercept: self.intercept,
            drift_day: self.drift_day,
            drift_magnitude: self.drift_magnitude,
            ensure_recent_visit_within: self.ensure_recent_visit_within,
            n_subgroups: self.n_subgroups,
        })
    }
}

/// Top-level experiment configuration file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub seeds: Seeds,
    pub split_fractions: (f64, f64, f64),
    #[serde(default)]
    pub claims: Option<ClaimsSection>,
    #[serde(default)]
    pub cluster: Option<ClusterSection>,
    pub windows: WindowsSection,
    pub teacher: TeacherSection,
    pub sard: SardSection,
    pub train: TrainSection,
    #[serde(default)]
    pub lemma: Option<LemmaSection>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.windows.candidates.is_empty() {
            bail!("windows.candidates must not be empty");
        }
        if self.windows.n_windows == 0 || self.windows.n_windows > self.windows.candidates.len() {
            bail!(
                "windows.n_windows must be in 1..={}",
                self.windows.candidates.len()
            );
        }
        if self.teacher.lambda_grid.is_empty() {
            bail!("teacher.lambda_grid must not be empty");
        }
        self.sard.to_config()?;
        if let Some(claims) = &self.claims {
            claims.params()?.validate()?;
        }
        if let Some(cluster) = &self.cluster {
            cluster.params().validate()?;
        }
        Ok(())
    }

    /// Stable content hash recorded in every output manifest.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        hex_string(&hasher.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
