//! Constructive replication of a windowed linear model by the attention
//! architecture: window indicators become Fourier series over the relative
//! time axis, one attention head realizes one window, values pass the
//! multi-hot code vector through, and identity-like kernels read the result
//! back out. Replication is approximate for finite frequency counts and is
//! measured, never assumed.

use ndarray::Array2;
use rand::Rng;
use rand_distr::Poisson;
use serde::Serialize;
use thiserror::Error;

use crate::corpus::{Cohort, CodeVocab, PatientRecord, Visit};
use crate::linear::{clamp_prob, featurize, predict_linear, LinearModel, WindowOffset};
use crate::metrics::spearman;
use crate::model::{
    model_forward, EncoderVariant, HeadVariant, ModelError, ParamSet, SardConfig, SardModel,
};
use crate::synthgen::substream;

#[derive(Debug, Error)]
pub enum LemmaError {
    #[error("window length T={t} must satisfy 0 < T <= P={p}")]
    BadWindow { t: f64, p: f64 },
    #[error("need at least one harmonic")]
    NoHarmonics,
    #[error("teacher has no non-zero weights")]
    EmptyTeacher,
    #[error("teacher window of {t} days exceeds the period {p}")]
    WindowBeyondPeriod { t: f64, p: f64 },
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("linear error: {0}")]
    Linear(#[from] crate::linear::LinearError),
    #[error("metric error: {0}")]
    Metric(#[from] crate::metrics::MetricError),
    #[error("corpus error: {0}")]
    Corpus(#[from] crate::corpus::CorpusError),
}

/// Fourier series of the indicator `[[u <= T]]` on `[0, P]`, extended
/// periodically.
#[derive(Debug, Clone, Serialize)]
pub struct FourierWindow {
    pub window_days: f64,
    pub period: f64,
    pub a0: f64,
    /// Cosine coefficients for `cos(2 n pi u / P)`, n = 1..=n_max.
    pub a: Vec<f64>,
    /// Sine coefficients for `sin(2 n pi u / P)`, n = 1..=n_max.
    pub b: Vec<f64>,
}

/// Projection coefficients of the window indicator onto the first `n_max`
/// harmonics. Derived from the projection integrals
/// `a_n = (2/P) int_0^T cos(2 n pi u / P) du` and the sine analogue; both are
/// validated against numerical quadrature in the tests.
pub fn fourier_window_coeffs(
    window_days: f64,
    period: f64,
    n_max: usize,
) -> Result<FourierWindow, LemmaError> {
    if !(window_days > 0.0 && window_days <= period) || !period.is_finite() {
        return Err(LemmaError::BadWindow { t: window_days, p: period });
    }
    if n_max == 0 {
        return Err(LemmaError::NoHarmonics);
    }
    let ratio = window_days / period;
    let a0 = ratio;
    let mut a = Vec::with_capacity(n_max);
    let mut b = Vec::with_capacity(n_max);
    for n in 1..=n_max {
        let theta = 2.0 * std::f64::consts::PI * n as f64 * ratio;
        let npi = n as f64 * std::f64::consts::PI;
        a.push(theta.sin() / npi);
        b.push((1.0 - theta.cos()) / npi);
    }
    Ok(FourierWindow { window_days, period, a0, a, b })
}

/// Evaluate the truncated series at relative time `u`.
pub fn indicator_approx(u: f64, fw: &FourierWindow) -> f64 {
    let base = 2.0 * std::f64::consts::PI * u / fw.period;
    let mut value = fw.a0;
    for (n, (&an, &bn)) in fw.a.iter().zip(&fw.b).enumerate() {
        let angle = base * (n + 1) as f64;
        value += an * angle.cos() + bn * angle.sin();
    }
    value
}

/// Scale constants of the construction. The defaults keep the softmax sharply
/// concentrated on in-window visits and the kernel activations saturated.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LemmaParams {
    pub n_freq: usize,
    /// Multiplier on the key/query magnitudes.
    pub sharpness: f64,
    /// Value vectors carry `value_scale * n_v` on present codes.
    pub value_scale: f64,
    /// Presence threshold as a fraction of `1 / n_v`.
    pub threshold_frac: f64,
    /// Scale of the read-out kernels.
    pub kernel_scale: f64,
    /// The periodic indicator also jumps at the period wrap (u = 0 and u = P).
    /// Shifting the expansion by this many days moves that jump to negative
    /// relative times, which no visit can occupy. `None` picks `period / 32`.
    pub phase_shift_days: Option<f64>,
}

impl LemmaParams {
    pub fn with_n_freq(n_freq: usize) -> Self {
        Self {
            n_freq,
            sharpness: 20.0,
            value_scale: 1000.0,
            threshold_frac: 0.1,
            kernel_scale: 1.0,
            phase_shift_days: None,
        }
    }
}

/// Build attention weights that replicate `teacher` on histories spanning at
/// most `period` days before prediction, packed into `n_v` slots.
pub fn construct_replicating_sard(
    teacher: &LinearModel,
    vocab: &CodeVocab,
    period: f64,
    n_v: usize,
    params: &LemmaParams,
) -> Result<SardModel, LemmaError> {
    let n_codes = vocab.len();
    let windows = teacher.window_set.offsets();
    let n_heads = windows.len();
    let nonzero = teacher.nonzero();
    if nonzero.is_empty() {
        return Err(LemmaError::EmptyTeacher);
    }
    let shift = params.phase_shift_days.unwrap_or(period / 32.0);
    for w in windows {
        if let WindowOffset::Days(t) = w {
            if f64::from(*t) + shift > period {
                return Err(LemmaError::WindowBeyondPeriod { t: f64::from(*t), p: period });
            }
        }
    }

    // half-width M holds the code block, the harmonics, and padding until the
    // head width divides d_e and covers the code block
    let mut half = n_codes + params.n_freq;
    let (d_e, d_h) = loop {
        let d_e = 2 * half;
        if d_e % n_heads == 0 && d_e / n_heads >= n_codes {
            break (d_e, d_e / n_heads);
        }
        half += 1;
    };

    // frequencies: zero on code coordinates (so codes live undisturbed in the
    // sine half and the cosine half provides constant channels), then the
    // harmonics 2 n pi / P
    let mut omega = vec![0.0; half];
    for n in 1..=params.n_freq {
        omega[n_codes + n - 1] = 2.0 * std::f64::consts::PI * n as f64 / period;
    }

    let config = SardConfig {
        d_e,
        n_v,
        n_layers: 1,
        n_heads,
        n_kernels: nonzero.len(),
        dropout_p: 0.0,
        encoder: EncoderVariant::SelfAttention,
        head: HeadVariant::Conv,
        omega,
        time_clip_days: period,
        emb_init: Default::default(),
    };
    config.validate()?;

    let mut psets = ParamSet::new();
    // one-hot code embeddings occupying the first |C| (sine) coordinates
    let emb = Array2::from_shape_fn((n_codes, d_e), |(i, j)| ((i == j) as i32) as f64);
    psets.insert("emb", emb);

    let s = params.sharpness;
    let v_scale = params.value_scale * n_v as f64;
    let t0 = params.threshold_frac / n_v as f64;
    for (h, window) in windows.iter().enumerate() {
        // constant query of magnitude s on the first head coordinate
        let wq = Array2::zeros((d_e, d_h));
        let mut bq = Array2::zeros((1, d_h));
        bq[[0, 0]] = s;
        // key column 0 computes s * indicator(u) from the temporal channels;
        // the DC term rides the frequency-zero cosine channel at coordinate
        // `half`. The expansion is of [[u' <= T + shift]] evaluated at
        // u' = u + shift, realized by rotating each harmonic's coefficients
        // by the phase 2 n pi shift / P; this keeps the window boundary at
        // u = T while parking the period-wrap jump at u = -shift.
        let mut wk = Array2::zeros((d_e, d_h));
        match window {
            WindowOffset::Infinite => {
                wk[[half, 0]] = s;
            }
            WindowOffset::Days(t) => {
                let fw = fourier_window_coeffs(f64::from(*t) + shift, period, params.n_freq)?;
                wk[[half, 0]] = s * fw.a0;
                for n in 1..=params.n_freq {
                    let phase = 2.0 * std::f64::consts::PI * n as f64 * shift / period;
                    let (a_n, b_n) = (fw.a[n - 1], fw.b[n - 1]);
                    let cos_coeff = a_n * phase.cos() + b_n * phase.sin();
                    let sin_coeff = b_n * phase.cos() - a_n * phase.sin();
                    wk[[n_codes + n - 1, 0]] = s * sin_coeff;
                    wk[[half + n_codes + n - 1, 0]] = s * cos_coeff;
                }
            }
        }
        // values pass the multi-hot code block through, shifted so absent
        // codes sit far below zero after pooling
        let mut wv = Array2::zeros((d_e, d_h));
        let mut bv = Array2::zeros((1, d_h));
        for c in 0..n_codes {
            wv[[c, c]] = v_scale;
            bv[[0, c]] = -v_scale * t0;
        }
        psets.insert(&format!("l0.h{h}.wq"), wq);
        psets.insert(&format!("l0.h{h}.bq"), bq);
        psets.insert(&format!("l0.h{h}.wk"), wk);
        psets.insert(&format!("l0.h{h}.bk"), Array2::zeros((1, d_h)));
        psets.insert(&format!("l0.h{h}.wv"), wv);
        psets.insert(&format!("l0.h{h}.bv"), bv);
    }

    // one kernel per non-zero teacher feature, reading the matching head
    // block coordinate; the final layer carries the teacher's weights
    let mut kernels = Array2::zeros((nonzero.len(), d_e));
    let mut head_w = Array2::zeros((nonzero.len(), 1));
    for (k, &(feature, weight)) in nonzero.iter().enumerate() {
        let window = feature / n_codes;
        let code = feature % n_codes;
        kernels[[k, window * d_h + code]] = params.kernel_scale;
        head_w[[k, 0]] = weight;
    }
    psets.insert("head.kernels", kernels);
    psets.insert("head.w", head_w);
    psets.insert("head.b", Array2::from_elem((1, 1), teacher.intercept));

    Ok(SardModel { config, params: psets })
}

/// Replication discrepancy statistics between two probability vectors.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ReplicationStats {
    pub max_abs_dp: f64,
    pub mean_abs_dp: f64,
    pub spearman_logits: f64,
}

pub fn score_stats(p_model: &[f64], p_teacher: &[f64]) -> Result<ReplicationStats, LemmaError> {
    assert_eq!(p_model.len(), p_teacher.len());
    let mut max_abs = 0.0_f64;
    let mut sum_abs = 0.0;
    for (&a, &b) in p_model.iter().zip(p_teacher) {
        let d = (a - b).abs();
        max_abs = max_abs.max(d);
        sum_abs += d;
    }
    let logit = |p: f64| {
        let cp = clamp_prob(p);
        (cp / (1.0 - cp)).ln()
    };
    let la: Vec<f64> = p_model.iter().map(|&p| logit(p)).collect();
    let lb: Vec<f64> = p_teacher.iter().map(|&p| logit(p)).collect();
    let rho = if la == lb { 1.0 } else { spearman(&la, &lb)? };
    Ok(ReplicationStats {
        max_abs_dp: max_abs,
        mean_abs_dp: sum_abs / p_model.len() as f64,
        spearman_logits: rho,
    })
}

/// Evaluate the constructed model and the teacher on every patient.
pub fn replication_error(
    sard: &SardModel,
    teacher: &LinearModel,
    cohort: &Cohort,
) -> Result<ReplicationStats, LemmaError> {
    let mut p_model = Vec::with_capacity(cohort.records.len());
    let mut p_teacher = Vec::with_capacity(cohort.records.len());
    for rec in &cohort.records {
        p_model.push(model_forward(sard, rec, &cohort.vocab, cohort.prediction_day, false, 0)?);
        let fv = featurize(rec, &teacher.window_set, &cohort.vocab, cohort.prediction_day)?;
        p_teacher.push(predict_linear(teacher, &fv)?);
    }
    score_stats(&p_model, &p_teacher)
}

/// A linear teacher with directly planted sparse weights.
pub fn planted_teacher(
    vocab_size: usize,
    window_set: crate::linear::WindowSet,
    weights: &[(usize, usize, f64)],
    intercept: f64,
) -> LinearModel {
    let mut w = vec![0.0; window_set.len() * vocab_size];
    for &(window, code, weight) in weights {
        w[window * vocab_size + code] = weight;
    }
    LinearModel { weights: w, intercept, lambda: 1.0, window_set, converged: true }
}

/// Cohort for replication experiments: visit days avoid a guard band around
/// each finite window boundary (where the truncated Fourier indicator is
/// intentionally untrusted) and every patient has at least one visit inside
/// the smallest window.
#[allow(clippy::too_many_arguments)]
pub fn lemma_eval_cohort(
    n_patients: usize,
    vocab: &CodeVocab,
    teacher: &LinearModel,
    span_days: u32,
    boundary_gap_days: f64,
    mean_visits: f64,
    seed: u64,
) -> Result<Cohort, LemmaError> {
    let prediction_day = span_days as i64;
    let boundaries: Vec<f64> = teacher
        .window_set
        .offsets()
        .iter()
        .filter_map(|w| match w {
            WindowOffset::Days(t) => Some(f64::from(*t)),
            WindowOffset::Infinite => None,
        })
        .collect();
    let smallest = boundaries.iter().cloned().fold(f64::INFINITY, f64::min);
    let allowed = |u: f64| boundaries.iter().all(|&t| (u - t).abs() > boundary_gap_days);

    let mut records = Vec::with_capacity(n_patients);
    for i in 0..n_patients {
        let mut rng = substream(seed, 20, i as u64);
        let n_visits = (rng
            .sample::<f64, _>(Poisson::new(mean_visits).expect("mean_visits >= 1")) as usize)
            .max(1);
        let mut days_back: Vec<f64> = Vec::with_capacity(n_visits + 1);
        while days_back.len() < n_visits {
            let u = rng.gen_range(0.0..span_days as f64);
            if allowed(u) {
                days_back.push(u);
            }
        }
        // guarantee one visit inside the smallest finite window
        if smallest.is_finite() && !days_back.iter().any(|&u| u < smallest - boundary_gap_days) {
            let limit = (smallest - boundary_gap_days).max(1.0);
            days_back.push(rng.gen_range(0.0..limit));
        }
        let mut days: Vec<i64> = days_back
            .iter()
            .map(|&u| prediction_day - u.floor() as i64)
            .collect();
        days.sort_unstable();
        days.dedup();

        let visits: Vec<Visit> = days
            .into_iter()
            .map(|day| {
                let n_codes = rng.gen_range(1..=3usize.min(vocab.len()));
                let mut codes: Vec<usize> = Vec::new();
                while codes.len() < n_codes {
                    let c = rng.gen_range(0..vocab.len());
                    if !codes.contains(&c) {
                        codes.push(c);
                    }
                }
                codes.sort_unstable();
                Visit { day, codes: codes.iter().map(|c| vocab.code(*c).to_string()).collect() }
            })
            .collect();

        let mut record = PatientRecord {
            patient_id: format!("p{i:05}"),
            visits,
            label: 0,
            subgroups: vec![],
        };
        let fv = featurize(&record, &teacher.window_set, vocab, prediction_day)?;
        let p = predict_linear(teacher, &fv)?;
        record.label = rng.gen_bool(p) as u8;
        records.push(record);
    }
    Ok(Cohort::new(prediction_day, vocab.clone(), records)?)
}

/// One row of the frequency-count convergence sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub n_freq: usize,
    pub sharpness: f64,
    pub max_err: f64,
    pub mean_err: f64,
    pub spearman: f64,
}

/// Replication error as the harmonic count grows.
pub fn replication_sweep(
    teacher: &LinearModel,
    cohort: &Cohort,
    n_freqs: &[usize],
    sharpness: f64,
    n_v: usize,
    period: f64,
) -> Result<Vec<SweepRow>, LemmaError> {
    let mut rows = Vec::with_capacity(n_freqs.len());
    for &n_freq in n_freqs {
        let params = LemmaParams { sharpness, ..LemmaParams::with_n_freq(n_freq) };
        let sard = construct_replicating_sard(teacher, &cohort.vocab, period, n_v, &params)?;
        let stats = replication_error(&sard, teacher, cohort)?;
        rows.push(SweepRow {
            n_freq,
            sharpness,
            max_err: stats.max_abs_dp,
            mean_err: stats.mean_abs_dp,
            spearman: stats.spearman_logits,
        });
    }
    Ok(rows)
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("n_freq,sharpness,max_err,mean_err,spearman\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.n_freq, r.sharpness, r.max_err, r.mean_err, r.spearman
        ));
    }
    out
}
