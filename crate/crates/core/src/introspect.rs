//! Model introspection: per-patient visit importance from the convolutional
//! head, attention-map extraction, and network dissection (matching the
//! binarized penultimate activations to the linear teacher's features by
//! Matthews correlation).

use ndarray::Array2;
use serde::Serialize;

use crate::corpus::Cohort;
use crate::linear::{featurize, LinearModel};
use crate::metrics::mcc;
use crate::model::{
    forward_batch, EncoderVariant, ForwardTrace, HeadVariant, ModelError, SardModel, VisitBatch,
};

/// Contribution of one kernel: its winning visit slot, max-pooled score, and
/// final-layer weight.
#[derive(Debug, Clone, Serialize)]
pub struct KernelAttribution {
    pub kernel: usize,
    pub argmax_slot: usize,
    pub pooled_score: f64,
    pub activation: f64,
    pub weight: f64,
}

/// Per-visit importance scores: `s(V_j)` sums `w_k * sigma(chi_k)` over the
/// kernels whose max-pool winner is visit `j`. Pad slots score exactly zero
/// and the total equals the head's pre-sigmoid linear term minus its bias.
#[derive(Debug, Clone, Serialize)]
pub struct VisitImportance {
    pub scores: Vec<f64>,
    pub kernels: Vec<KernelAttribution>,
    pub probability: f64,
}

impl VisitImportance {
    pub fn total(&self) -> f64 {
        self.scores.iter().sum()
    }
}

pub fn visit_importance(
    model: &SardModel,
    batch: &VisitBatch,
) -> Result<VisitImportance, ModelError> {
    if model.config.head != HeadVariant::Conv {
        return Err(ModelError::WrongVariant("convolutional head"));
    }
    let mut trace = ForwardTrace::default();
    let probability = forward_batch(model, batch, false, 0, Some(&mut trace))?;
    let final_w = model.params.get("head.w");
    let mut scores = vec![0.0; model.config.n_v];
    let mut kernels = Vec::with_capacity(model.config.n_kernels);
    for k in 0..model.config.n_kernels {
        let weight = final_w[[k, 0]];
        let slot = trace.kernel_argmax[k];
        let activation = trace.kernel_activations[k];
        scores[slot] += weight * activation;
        kernels.push(KernelAttribution {
            kernel: k,
            argmax_slot: slot,
            pooled_score: trace.kernel_scores[k],
            activation,
            weight,
        });
    }
    Ok(VisitImportance { scores, kernels, probability })
}

/// Post-softmax attention matrices, one per (layer, head) in layer-major
/// order. Rows sum to one over non-pad columns; pad columns are exactly zero.
pub fn attention_maps(
    model: &SardModel,
    batch: &VisitBatch,
) -> Result<Vec<Array2<f64>>, ModelError> {
    if model.config.encoder != EncoderVariant::SelfAttention {
        return Err(ModelError::WrongVariant("self-attention encoder"));
    }
    let mut trace = ForwardTrace::default();
    forward_batch(model, batch, false, 0, Some(&mut trace))?;
    Ok(trace.attention)
}

/// How penultimate activations are binarized before matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BinarizeRule {
    /// Activations are post-sigmoid, so 0.5 is the sign of the logit.
    #[default]
    Half,
    /// Threshold each neuron at its cohort median instead.
    PerNeuronMedian,
}

/// One neuron's best-matching teacher feature.
#[derive(Debug, Clone, Serialize)]
pub struct NeuronMatch {
    pub neuron: usize,
    pub feature_index: usize,
    pub mcc: f64,
}

/// Dissection outcome: per-neuron matches plus the count of unique non-zero
/// teacher features recovered.
#[derive(Debug, Clone, Serialize)]
pub struct DissectionReport {
    pub matches: Vec<NeuronMatch>,
    /// Indices of the teacher's non-zero features, aligned with `mcc_table`
    /// columns.
    pub teacher_features: Vec<usize>,
    /// MCC of every (neuron, non-zero feature) pair.
    pub mcc_table: Vec<Vec<f64>>,
    pub unique_matched: usize,
    pub teacher_nonzero: usize,
}

impl DissectionReport {
    pub fn matched_fraction(&self) -> f64 {
        self.unique_matched as f64 / self.teacher_nonzero as f64
    }

    /// MCC of a specific teacher feature against its best-matching neuron.
    pub fn best_mcc_for_feature(&self, feature_index: usize) -> Option<f64> {
        let col = self.teacher_features.iter().position(|&f| f == feature_index)?;
        self.mcc_table
            .iter()
            .map(|row| row[col])
            .max_by(|a, b| a.partial_cmp(b).unwrap())
    }

    /// CSV rows: neuron, feature index, window offset, code, MCC.
    pub fn to_csv(&self, cohort: &Cohort, teacher: &LinearModel) -> String {
        let c = cohort.vocab.len();
        let mut out = String::from("neuron,feature_index,window_offset,code,mcc\n");
        for m in &self.matches {
            let window = teacher.window_set.offsets()[m.feature_index / c];
            let code = cohort.vocab.code(m.feature_index % c);
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                m.neuron, m.feature_index, window, code, m.mcc
            ));
        }
        out
    }
}

/// Match each penultimate neuron (the max-pooled post-sigmoid kernel
/// activations) to the non-zero teacher feature with which its binarized
/// activation has the highest MCC across the cohort.
pub fn dissect(
    model: &SardModel,
    teacher: &LinearModel,
    cohort: &Cohort,
    rule: BinarizeRule,
) -> Result<DissectionReport, ModelError> {
    if model.config.head != HeadVariant::Conv {
        return Err(ModelError::WrongVariant("convolutional head"));
    }
    let teacher_features: Vec<usize> = teacher.nonzero().into_iter().map(|(i, _)| i).collect();
    if teacher_features.is_empty() {
        return Err(ModelError::Checkpoint("teacher has no non-zero features".into()));
    }
    let k = model.config.n_kernels;
    let n = cohort.records.len();

    // activations and teacher features per patient
    let mut activations = Array2::zeros((n, k));
    let mut features = Array2::from_elem((n, teacher_features.len()), 0u8);
    for (i, rec) in cohort.records.iter().enumerate() {
        let batch = VisitBatch::from_record(rec, &cohort.vocab, cohort.prediction_day, &model.config)?;
        let mut trace = ForwardTrace::default();
        forward_batch(model, &batch, false, 0, Some(&mut trace))?;
        for (j, &a) in trace.kernel_activations.iter().enumerate() {
            activations[[i, j]] = a;
        }
        let fv = featurize(rec, &teacher.window_set, &cohort.vocab, cohort.prediction_day)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        for (j, &f) in teacher_features.iter().enumerate() {
            features[[i, j]] = fv.contains(f) as u8;
        }
    }

    // binarize neuron activations
    let mut binarized = Array2::from_elem((n, k), 0u8);
    for j in 0..k {
        let threshold = match rule {
            BinarizeRule::Half => 0.5,
            BinarizeRule::PerNeuronMedian => {
                let mut col: Vec<f64> = activations.column(j).to_vec();
                col.sort_by(|a, b| a.partial_cmp(b).unwrap());
                if n % 2 == 1 {
                    col[n / 2]
                } else {
                    0.5 * (col[n / 2 - 1] + col[n / 2])
                }
            }
        };
        for i in 0..n {
            binarized[[i, j]] = (activations[[i, j]] > threshold) as u8;
        }
    }

    let mut mcc_table = vec![vec![0.0; teacher_features.len()]; k];
    let mut matches = Vec::with_capacity(k);
    for neuron in 0..k {
        let a: Vec<u8> = binarized.column(neuron).to_vec();
        let mut best = (0usize, f64::NEG_INFINITY);
        for (col, _) in teacher_features.iter().enumerate() {
            let b: Vec<u8> = features.column(col).to_vec();
            let value = mcc(&a, &b).expect("equal lengths");
            mcc_table[neuron][col] = value;
            if value > best.1 {
                best = (col, value);
            }
        }
        matches.push(NeuronMatch {
            neuron,
            feature_index: teacher_features[best.0],
            mcc: best.1,
        });
    }

    let mut unique: Vec<usize> = matches.iter().map(|m| m.feature_index).collect();
    unique.sort_unstable();
    unique.dedup();

    Ok(DissectionReport {
        matches,
        teacher_features: teacher_features.clone(),
        mcc_table,
        unique_matched: unique.len(),
        teacher_nonzero: teacher_features.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CodeVocab, PatientRecord, Visit};
    use crate::linear::{WindowOffset, WindowSet};
    use crate::model::SardConfig;
    use ndarray::Array2;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab4() -> CodeVocab {
        CodeVocab::new((0..4).map(|i| format!("c{i}")).collect()).unwrap()
    }

    fn record(days_codes: &[(i64, &[usize])]) -> PatientRecord {
        PatientRecord {
            patient_id: "p".into(),
            visits: days_codes
                .iter()
                .map(|&(day, codes)| Visit {
                    day,
                    codes: codes.iter().map(|c| format!("c{c}")).collect(),
                })
                .collect(),
            label: 0,
            subgroups: vec![],
        }
    }

    #[test]
    fn single_kernel_importance_oracle() {
        // K=1, kernel maximized at a known visit with chi = 0, w = 2
        let vocab = vocab4();
        let mut config = SardConfig::new(
            8,
            6,
            1,
            1,
            1,
            0.0,
            EncoderVariant::Identity,
            HeadVariant::Conv,
        )
        .unwrap();
        config.omega = vec![0.0; 4];
        let mut model = SardModel::init(config.clone(), vocab.len(), 1).unwrap();
        // one-hot embeddings: code c -> e_c
        let emb = Array2::from_shape_fn((4, 8), |(i, j)| ((i == j) as i32) as f64);
        *model.params.get_mut("emb") = emb;
        // kernel reads coordinate 0 minus coordinate 1; visit {c0} scores 1,
        // visit {c1} scores -1; tau contributes only on cos coordinates 4..8
        let mut kernel = Array2::zeros((1, 8));
        kernel[[0, 0]] = 1.0;
        kernel[[0, 1]] = -1.0;
        *model.params.get_mut("head.kernels") = kernel;
        *model.params.get_mut("head.w") = Array2::from_elem((1, 1), 2.0);
        model.params.get_mut("head.b").fill(0.0);

        let rec = record(&[(10, &[1]), (50, &[1]), (90, &[0])]);
        let batch = VisitBatch::from_record(&rec, &vocab, 100, &config).unwrap();
        let vi = visit_importance(&model, &batch).unwrap();
        // slot 0 = most recent visit (day 90, code c0) wins with chi = 1
        assert_eq!(vi.kernels[0].argmax_slot, 0);
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        assert!((vi.scores[0] - 2.0 * sig(1.0)).abs() < 1e-12);
        for &s in &vi.scores[1..] {
            assert_eq!(s, 0.0);
        }

        // with chi = 0 (kernel on an absent coordinate pair) the score is
        // w * sigma(0) = 1.0
        let mut kernel0 = Array2::zeros((1, 8));
        kernel0[[0, 2]] = 1.0;
        kernel0[[0, 3]] = -1.0;
        *model.params.get_mut("head.kernels") = kernel0;
        let vi0 = visit_importance(&model, &batch).unwrap();
        assert!((vi0.total() - 2.0 * 0.5).abs() < 1e-12);
    }

    #[test]
    fn importance_sum_identity_random_models() {
        let vocab = vocab4();
        let config = SardConfig::new(
            8,
            6,
            2,
            2,
            5,
            0.0,
            EncoderVariant::SelfAttention,
            HeadVariant::Conv,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..20 {
            let model = SardModel::init(config.clone(), vocab.len(), trial).unwrap();
            let n_visits = rng.gen_range(1..=5);
            let mut days: Vec<i64> = (0..n_visits).map(|_| rng.gen_range(0..100)).collect();
            days.sort_unstable();
            days.dedup();
            let rec = record(
                &days
                    .iter()
                    .map(|&d| (d, [rng.gen_range(0..4usize)].to_vec()))
                    .collect::<Vec<_>>()
                    .iter()
                    .map(|(d, c)| (*d, c.as_slice()))
                    .collect::<Vec<_>>(),
            );
            let batch = VisitBatch::from_record(&rec, &vocab, 100, &config).unwrap();
            let vi = visit_importance(&model, &batch).unwrap();
            // sum of scores = pre-sigmoid linear combination minus bias
            let z: f64 = vi
                .kernels
                .iter()
                .map(|k| k.weight * k.activation)
                .sum();
            assert!((vi.total() - z).abs() < 1e-10);
            // pad slots carry no importance
            for (slot, &m) in batch.mask.iter().enumerate() {
                if !m {
                    assert_eq!(vi.scores[slot], 0.0);
                }
            }
        }
    }

    #[test]
    fn attention_maps_deterministic_and_masked() {
        let vocab = vocab4();
        let config = SardConfig::new(
            8,
            6,
            2,
            2,
            2,
            0.0,
            EncoderVariant::SelfAttention,
            HeadVariant::Conv,
        )
        .unwrap();
        let model = SardModel::init(config.clone(), vocab.len(), 4).unwrap();
        let rec = record(&[(5, &[0]), (80, &[1, 2])]);
        let batch = VisitBatch::from_record(&rec, &vocab, 100, &config).unwrap();
        let maps = attention_maps(&model, &batch).unwrap();
        assert_eq!(maps.len(), 4); // 2 layers x 2 heads
        for m in &maps {
            for r in 0..6 {
                let sum: f64 = m.row(r).sum();
                assert!((sum - 1.0).abs() < 1e-12);
                for c in 2..6 {
                    assert_eq!(m[[r, c]], 0.0, "pad column leaked weight");
                }
            }
        }
        // single-visit patient: the sole visit attends to itself
        let solo = record(&[(42, &[3])]);
        let solo_batch = VisitBatch::from_record(&solo, &vocab, 100, &config).unwrap();
        for m in attention_maps(&model, &solo_batch).unwrap() {
            assert_eq!(m[[0, 0]], 1.0);
        }
        // bit-identical across repeated inference
        let again = attention_maps(&model, &batch).unwrap();
        for (a, b) in maps.iter().zip(&again) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }

        let gru_config =
            SardConfig::new(8, 6, 1, 1, 2, 0.0, EncoderVariant::Gru, HeadVariant::Conv).unwrap();
        let gru_model = SardModel::init(gru_config, vocab.len(), 4).unwrap();
        assert!(attention_maps(&gru_model, &batch).is_err());
    }

    #[test]
    fn random_model_mccs_are_weak() {
        let vocab = vocab4();
        let config = SardConfig::new(
            8,
            8,
            1,
            1,
            4,
            0.0,
            EncoderVariant::SelfAttention,
            HeadVariant::Conv,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let records: Vec<PatientRecord> = (0..200)
            .map(|i| {
                let mut days: Vec<i64> = (0..rng.gen_range(1..5)).map(|_| rng.gen_range(0..100)).collect();
                days.sort_unstable();
                days.dedup();
                PatientRecord {
                    patient_id: format!("p{i}"),
                    visits: days
                        .iter()
                        .map(|&d| Visit { day: d, codes: vec![format!("c{}", rng.gen_range(0..4))] })
                        .collect(),
                    label: rng.gen_range(0..2) as u8,
                    subgroups: vec![],
                }
            })
            .collect();
        let cohort = Cohort::new(100, vocab.clone(), records).unwrap();
        let teacher = LinearModel {
            weights: vec![1.0, 0.0, -0.5, 0.0, 0.0, 0.3, 0.0, 0.0],
            intercept: 0.0,
            lambda: 1.0,
            window_set: WindowSet::new(vec![WindowOffset::Days(30), WindowOffset::Infinite])
                .unwrap(),
            converged: true,
        };

        let mut mean_abs = 0.0;
        let n_seeds = 20;
        for seed in 0..n_seeds {
            let model = SardModel::init(config.clone(), vocab.len(), 1000 + seed).unwrap();
            let report = dissect(&model, &teacher, &cohort, BinarizeRule::Half).unwrap();
            let total: f64 = report
                .mcc_table
                .iter()
                .flat_map(|row| row.iter())
                .map(|v| v.abs())
                .sum();
            let count = (report.mcc_table.len() * report.teacher_features.len()) as f64;
            mean_abs += total / count;
        }
        mean_abs /= n_seeds as f64;
        assert!(mean_abs < 0.2, "random models correlate too strongly: {mean_abs}");
    }

    #[test]
    fn dissect_invariant_to_patient_order() {
        let vocab = vocab4();
        let config = SardConfig::new(
            8,
            8,
            1,
            1,
            3,
            0.0,
            EncoderVariant::SelfAttention,
            HeadVariant::Conv,
        )
        .unwrap();
        let model = SardModel::init(config, vocab.len(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let records: Vec<PatientRecord> = (0..60)
            .map(|i| PatientRecord {
                patient_id: format!("p{i}"),
                visits: vec![Visit {
                    day: rng.gen_range(0..100),
                    codes: vec![format!("c{}", rng.gen_range(0..4))],
                }],
                label: 0,
                subgroups: vec![],
            })
            .collect();
        let teacher = LinearModel {
            weights: vec![0.7, -0.2, 0.0, 0.4],
            intercept: 0.0,
            lambda: 1.0,
            window_set: WindowSet::single_infinite(),
            converged: true,
        };
        let cohort = Cohort::new(100, vocab.clone(), records.clone()).unwrap();
        let mut reversed = records;
        reversed.reverse();
        let cohort_rev = Cohort::new(100, vocab, reversed).unwrap();
        let a = dissect(&model, &teacher, &cohort, BinarizeRule::Half).unwrap();
        let b = dissect(&model, &teacher, &cohort_rev, BinarizeRule::Half).unwrap();
        assert_eq!(a.unique_matched, b.unique_matched);
        for (x, y) in a.matches.iter().zip(&b.matches) {
            assert_eq!(x.feature_index, y.feature_index);
            assert!((x.mcc - y.mcc).abs() < 1e-12);
        }
    }
}
