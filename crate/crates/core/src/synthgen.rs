//! Synthetic data: (a) a two-center Gaussian cluster benchmark where only a
//! fraction of features carry signal, and (b) longitudinal claims cohorts
//! whose labels come from a planted windowed logistic model, so downstream
//! pipelines have a known ground truth.
//!
//! Both generators draw per-patient substreams keyed by (seed, index), so
//! their output is bitwise reproducible and independent of evaluation order.

use ndarray::Array2;
use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Cohort, CodeVocab, PatientRecord, Visit};
use crate::linear::{featurize, sigmoid, WindowSet};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("beta must be in (0, 1] with beta * n_features a positive integer, got beta={beta}, n_features={n_features}")]
    BadBeta { beta: f64, n_features: usize },
    #[error("gamma must be non-negative and finite, got {0}")]
    BadGamma(f64),
    #[error("rho must be in (0, 1), got {0}")]
    BadRho(f64),
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("planted weight references window {window} of {windows} or code {code} of {codes}")]
    BadPlantedWeight { window: usize, windows: usize, code: usize, codes: usize },
    #[error("corpus error: {0}")]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error("linear error: {0}")]
    Linear(#[from] crate::linear::LinearError),
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic RNG substream for (seed, stream, index).
pub fn substream(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let h = splitmix(splitmix(seed ^ stream.wrapping_mul(0x517c_c1b7_2722_0a95)) ^ index);
    ChaCha8Rng::seed_from_u64(h)
}

/// Parameters of the two-center Gaussian cluster benchmark.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ClusterParams {
    /// Total feature count K.
    pub n_features: usize,
    /// Euclidean separation between the two class centers.
    pub gamma: f64,
    /// Positive-class probability.
    pub rho: f64,
    /// Fraction of informative features; `beta * n_features` must be a
    /// positive integer.
    pub beta: f64,
    /// Sample count N.
    pub n_samples: usize,
}

impl ClusterParams {
    pub fn validate(&self) -> Result<(), SynthError> {
        let k = self.beta * self.n_features as f64;
        if !(self.beta > 0.0 && self.beta <= 1.0) || (k - k.round()).abs() > 1e-9 || k.round() < 1.0
        {
            return Err(SynthError::BadBeta { beta: self.beta, n_features: self.n_features });
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(SynthError::BadGamma(self.gamma));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(SynthError::BadRho(self.rho));
        }
        if self.n_samples == 0 || self.n_features == 0 {
            return Err(SynthError::NonPositive("n_samples / n_features"));
        }
        Ok(())
    }

    pub fn n_informative(&self) -> usize {
        (self.beta * self.n_features as f64).round() as usize
    }
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self { n_features: 200, gamma: 0.5, rho: 0.05, beta: 0.02, n_samples: 2000 }
    }
}

/// A generated cluster dataset with its planted geometry.
#[derive(Debug, Clone)]
pub struct ClusterDataset {
    pub x: Array2<f64>,
    pub y: Vec<u8>,
    /// Unit direction of the center offset within the informative subspace.
    pub direction: Vec<f64>,
    pub params: ClusterParams,
    pub seed: u64,
}

impl ClusterDataset {
    /// Class center for a label over the informative coordinates.
    pub fn center(&self, label: u8) -> Vec<f64> {
        let sign = if label == 1 { 0.5 } else { -0.5 };
        self.direction.iter().map(|d| sign * self.params.gamma * d).collect()
    }

    /// CSV with a header row; the label occupies the last column.
    pub fn to_csv(&self) -> String {
        let k = self.params.n_features;
        let mut out = String::new();
        for j in 0..k {
            out.push_str(&format!("f{j},"));
        }
        out.push_str("label\n");
        for (i, &label) in self.y.iter().enumerate() {
            for j in 0..k {
                out.push_str(&format!("{},", self.x[[i, j]]));
            }
            out.push_str(&format!("{label}\n"));
        }
        out
    }
}

fn draw_cluster_samples(
    params: &ClusterParams,
    direction: &[f64],
    seed: u64,
    n: usize,
) -> (Array2<f64>, Vec<u8>) {
    let n_inf = params.n_informative();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut x = Array2::zeros((n, params.n_features));
    let mut y = vec![0u8; n];
    for i in 0..n {
        let mut rng = substream(seed, 11, i as u64);
        let label = rng.gen_bool(params.rho) as u8;
        y[i] = label;
        let sign = if label == 1 { 0.5 } else { -0.5 };
        for j in 0..params.n_features {
            let mean = if j < n_inf { sign * params.gamma * direction[j] } else { 0.0 };
            x[[i, j]] = mean + normal.sample(&mut rng);
        }
    }
    (x, y)
}

/// Generate the cluster benchmark. The two centers sit at `+/- gamma/2`
/// along a uniformly random unit direction of the informative subspace, so
/// their separation is exactly `gamma` with the midpoint at the origin.
pub fn gen_cluster_dataset(params: &ClusterParams, seed: u64) -> Result<ClusterDataset, SynthError> {
    params.validate()?;
    let n_inf = params.n_informative();
    let mut dir_rng = substream(seed, 10, 0);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut direction: Vec<f64> = (0..n_inf).map(|_| normal.sample(&mut dir_rng)).collect();
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    for d in &mut direction {
        *d /= norm.max(1e-300);
    }

    let (x, y) = draw_cluster_samples(params, &direction, seed, params.n_samples);
    Ok(ClusterDataset { x, y, direction, params: *params, seed })
}

/// Fresh samples from the same planted geometry (identical centers), for
/// out-of-sample evaluation.
pub fn resample_cluster(ds: &ClusterDataset, n: usize, seed: u64) -> ClusterDataset {
    let (x, y) = draw_cluster_samples(&ds.params, &ds.direction, seed, n);
    ClusterDataset {
        x,
        y,
        direction: ds.direction.clone(),
        params: ClusterParams { n_samples: n, ..ds.params },
        seed,
    }
}

/// One planted teacher weight: `(window index, code index, weight)`.
pub type PlantedWeight = (usize, usize, f64);

/// Parameters of the longitudinal claims generator. Labels are drawn from
/// `Bernoulli(sigmoid(intercept + planted_weights . xi(history)))` using the
/// same windowed multi-hot featurization the linear baseline consumes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClaimsGenParams {
    pub n_patients: usize,
    pub vocab_size: usize,
    pub mean_visits: f64,
    pub mean_codes_per_visit: f64,
    pub history_span_days: u32,
    pub planted_windows: WindowSet,
    pub planted_weights: Vec<PlantedWeight>,
    pub intercept: f64,
    /// After this absolute day the code distribution shifts (non-stationarity
    /// knob); `None` keeps it fixed.
    pub drift_day: Option<i64>,
    /// Mixing weight of the shifted distribution in (0, 1].
    #[serde(default)]
    pub drift_magnitude: f64,
    /// When set, every patient receives at least one visit within this many
    /// days of the prediction day.
    #[serde(default)]
    pub ensure_recent_visit_within: Option<u32>,
    /// Number of synthetic subgroup tags assigned at random.
    #[serde(default)]
    pub n_subgroups: usize,
}

impl ClaimsGenParams {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_patients == 0 || self.vocab_size == 0 {
            return Err(SynthError::NonPositive("n_patients / vocab_size"));
        }
        if self.mean_visits < 1.0 {
            return Err(SynthError::NonPositive("mean_visits"));
        }
        if self.mean_codes_per_visit < 1.0 {
            return Err(SynthError::NonPositive("mean_codes_per_visit"));
        }
        if self.history_span_days == 0 {
            return Err(SynthError::NonPositive("history_span_days"));
        }
        for &(w, c, _) in &self.planted_weights {
            if w >= self.planted_windows.len() || c >= self.vocab_size {
                return Err(SynthError::BadPlantedWeight {
                    window: w,
                    windows: self.planted_windows.len(),
                    code: c,
                    codes: self.vocab_size,
                });
            }
        }
        Ok(())
    }

    pub fn prediction_day(&self) -> i64 {
        self.history_span_days as i64
    }

    pub fn vocab(&self) -> CodeVocab {
        CodeVocab::new((0..self.vocab_size).map(|i| format!("c{i}")).collect())
            .expect("generated codes are unique")
    }
}

fn code_distribution(seed: u64, stream: u64, size: usize) -> Vec<f64> {
    let mut rng = substream(seed, stream, 0);
    (0..size).map(|_| rng.sample::<f64, _>(Exp1) + 1e-3).collect()
}

fn draw_days(rng: &mut ChaCha8Rng, n: usize, span: u32, recent: Option<u32>) -> Vec<i64> {
    let horizon = span as i64;
    let n = n.min(span as usize);
    let mut days: Vec<i64> = rand::seq::index::sample(rng, span as usize + 1, n)
        .into_iter()
        .map(|d| d as i64)
        .collect();
    if let Some(window) = recent {
        let cutoff = horizon - window as i64;
        if !days.iter().any(|&d| d >= cutoff) {
            let replacement = rng.gen_range(cutoff..=horizon);
            if !days.contains(&replacement) {
                days.push(replacement);
            } else {
                *days.iter_mut().max().unwrap() = replacement;
            }
        }
    }
    days.sort_unstable();
    days.dedup();
    days
}

/// Planted logit of one record under the generator parameters.
pub fn planted_logit(
    params: &ClaimsGenParams,
    record: &PatientRecord,
    vocab: &CodeVocab,
) -> Result<f64, SynthError> {
    let fv = featurize(record, &params.planted_windows, vocab, params.prediction_day())?;
    let c = vocab.len();
    let mut z = params.intercept;
    for &(w, code, weight) in &params.planted_weights {
        if fv.contains(w * c + code) {
            z += weight;
        }
    }
    Ok(z)
}

/// Generate a claims cohort with planted ground truth.
pub fn gen_claims_cohort(params: &ClaimsGenParams, seed: u64) -> Result<Cohort, SynthError> {
    params.validate()?;
    let vocab = params.vocab();
    let base_weights = code_distribution(seed, 1, params.vocab_size);
    let shift_weights = code_distribution(seed, 2, params.vocab_size);
    let drift_mix: Vec<f64> = base_weights
        .iter()
        .zip(&shift_weights)
        .map(|(&b, &s)| (1.0 - params.drift_magnitude) * b + params.drift_magnitude * s)
        .collect();
    let base_dist = WeightedIndex::new(&base_weights).expect("positive weights");
    let drift_dist = WeightedIndex::new(&drift_mix).expect("positive weights");

    let mut records = Vec::with_capacity(params.n_patients);
    for i in 0..params.n_patients {
        let mut rng = substream(seed, 0, i as u64);
        let n_visits = (rng
            .sample::<f64, _>(Poisson::new(params.mean_visits).expect("mean_visits >= 1"))
            as usize)
            .max(1);
        let days = draw_days(
            &mut rng,
            n_visits,
            params.history_span_days,
            params.ensure_recent_visit_within,
        );
        let visits: Vec<Visit> = days
            .into_iter()
            .map(|day| {
                let drifted = params.drift_day.map_or(false, |d| day > d);
                let dist = if drifted { &drift_dist } else { &base_dist };
                let n_codes = (rng
                    .sample::<f64, _>(
                        Poisson::new(params.mean_codes_per_visit).expect("mean_codes >= 1"),
                    ) as usize)
                    .max(1)
                    .min(params.vocab_size);
                let mut codes: Vec<usize> = Vec::with_capacity(n_codes);
                let mut guard = 0;
                while codes.len() < n_codes && guard < 50 * n_codes {
                    let c = dist.sample(&mut rng);
                    if !codes.contains(&c) {
                        codes.push(c);
                    }
                    guard += 1;
                }
                codes.sort_unstable();
                Visit { day, codes: codes.into_iter().map(|c| format!("c{c}")).collect() }
            })
            .collect();

        let mut sub_rng = substream(seed, 3, i as u64);
        let subgroups: Vec<String> = (0..params.n_subgroups)
            .filter(|_| sub_rng.gen_bool(0.25))
            .map(|g| format!("g{g}"))
            .collect();

        let mut record = PatientRecord {
            patient_id: format!("p{i:06}"),
            visits,
            label: 0,
            subgroups,
        };
        let logit = planted_logit(params, &record, &vocab)?;
        let mut label_rng = substream(seed, 4, i as u64);
        record.label = label_rng.gen_bool(sigmoid(logit)) as u8;
        records.push(record);
    }
    Ok(Cohort::new(params.prediction_day(), vocab, records)?)
}

/// Re-derive every label from the stored visits plus the planted model and
/// the original seed stream.
pub fn rederive_labels(
    cohort: &Cohort,
    params: &ClaimsGenParams,
    seed: u64,
) -> Result<Vec<u8>, SynthError> {
    let mut labels = Vec::with_capacity(cohort.records.len());
    for (i, rec) in cohort.records.iter().enumerate() {
        let logit = planted_logit(params, rec, &cohort.vocab)?;
        let mut label_rng = substream(seed, 4, i as u64);
        labels.push(label_rng.gen_bool(sigmoid(logit)) as u8);
    }
    Ok(labels)
}
