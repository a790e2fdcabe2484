//! Longitudinal claims cohorts: patient records, code vocabulary, JSONL
//! serialization, and deterministic train/val/test splits.
//!
//! All timestamps are integer day indices relative to a shared epoch; the
//! cohort carries a single `prediction_day` and every visit must fall on or
//! before it. The vocabulary is closed: a code that is not in the cohort
//! vocabulary is a load error, never silently dropped.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: parse error: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: missing header object")]
    MissingHeader { line: usize },
    #[error("patient {patient}: unknown code `{code}`")]
    UnknownCode { patient: String, code: String },
    #[error("patient {patient}: duplicate code `{code}` within one visit")]
    DuplicateCode { patient: String, code: String },
    #[error("patient {patient}: visit has no codes")]
    EmptyVisit { patient: String },
    #[error("patient {patient}: visits not sorted ascending by day")]
    UnsortedVisits { patient: String },
    #[error("patient {patient}: visit day {day} is after prediction day {prediction_day}")]
    VisitAfterPrediction {
        patient: String,
        day: i64,
        prediction_day: i64,
    },
    #[error("patient {patient}: label must be 0 or 1, got {label}")]
    BadLabel { patient: String, label: i64 },
    #[error("duplicate code `{0}` in vocabulary")]
    DuplicateVocabCode(String),
    #[error("split fractions must be positive and sum to 1, got {0:?}")]
    BadFractions((f64, f64, f64)),
    #[error("class weight undefined: labels contain {positives} positives and {negatives} negatives")]
    DegenerateLabels { positives: usize, negatives: usize },
}

/// Closed, ordered code vocabulary. Indices are a bijection onto `0..len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeVocab {
    codes: Vec<String>,
    index: HashMap<String, usize>,
}

impl CodeVocab {
    pub fn new(codes: Vec<String>) -> Result<Self, CorpusError> {
        let mut index = HashMap::with_capacity(codes.len());
        for (i, c) in codes.iter().enumerate() {
            if index.insert(c.clone(), i).is_some() {
                return Err(CorpusError::DuplicateVocabCode(c.clone()));
            }
        }
        Ok(Self { codes, index })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn index_of(&self, code: &str) -> Option<usize> {
        self.index.get(code).copied()
    }

    pub fn code(&self, index: usize) -> &str {
        &self.codes[index]
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }
}

/// One continuous interaction with the healthcare system on a single day.
/// `codes` behaves as a set; construction rejects duplicates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Visit {
    pub day: i64,
    pub codes: Vec<String>,
}

/// A patient's full longitudinal record with outcome label and subgroup tags.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub visits: Vec<Visit>,
    pub label: u8,
    pub subgroups: Vec<String>,
}

impl PatientRecord {
    pub fn n_visits(&self) -> usize {
        self.visits.len()
    }
}

/// A set of patient records sharing a prediction day and a closed vocabulary.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub prediction_day: i64,
    pub records: Vec<PatientRecord>,
    pub vocab: CodeVocab,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    prediction_day: i64,
    vocab: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct VisitLine {
    day: i64,
    codes: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct PatientLine {
    patient_id: String,
    label: i64,
    subgroups: Vec<String>,
    visits: Vec<VisitLine>,
}

impl Cohort {
    /// Validate one record against this cohort's vocabulary and prediction day.
    fn validate_record(&self, rec: &PatientRecord) -> Result<(), CorpusError> {
        if rec.label > 1 {
            return Err(CorpusError::BadLabel {
                patient: rec.patient_id.clone(),
                label: rec.label as i64,
            });
        }
        let mut prev_day = i64::MIN;
        for visit in &rec.visits {
            if visit.day < prev_day {
                return Err(CorpusError::UnsortedVisits {
                    patient: rec.patient_id.clone(),
                });
            }
            prev_day = visit.day;
            if visit.day > self.prediction_day {
                return Err(CorpusError::VisitAfterPrediction {
                    patient: rec.patient_id.clone(),
                    day: visit.day,
                    prediction_day: self.prediction_day,
                });
            }
            if visit.codes.is_empty() {
                return Err(CorpusError::EmptyVisit {
                    patient: rec.patient_id.clone(),
                });
            }
            let mut seen = BTreeSet::new();
            for code in &visit.codes {
                if !seen.insert(code.as_str()) {
                    return Err(CorpusError::DuplicateCode {
                        patient: rec.patient_id.clone(),
                        code: code.clone(),
                    });
                }
                if self.vocab.index_of(code).is_none() {
                    return Err(CorpusError::UnknownCode {
                        patient: rec.patient_id.clone(),
                        code: code.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn new(
        prediction_day: i64,
        vocab: CodeVocab,
        records: Vec<PatientRecord>,
    ) -> Result<Self, CorpusError> {
        let cohort = Self {
            prediction_day,
            records: Vec::new(),
            vocab,
        };
        for rec in &records {
            cohort.validate_record(rec)?;
        }
        Ok(Self { records, ..cohort })
    }

    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Shallow clone carrying only the given record indices.
    fn subset(&self, indices: &[usize]) -> Cohort {
        Cohort {
            prediction_day: self.prediction_day,
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            vocab: self.vocab.clone(),
        }
    }
}

/// Load a cohort from the JSONL format: a header object on line 1 followed by
/// one patient object per line. All invariants are re-validated.
pub fn load_cohort(path: &Path) -> Result<Cohort, CorpusError> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();

    let header_text = match lines.next() {
        Some(l) => l?,
        None => return Err(CorpusError::MissingHeader { line: 1 }),
    };
    let header: HeaderLine = serde_json::from_str(&header_text)
        .map_err(|source| CorpusError::Parse { line: 1, source })?;
    let vocab = CodeVocab::new(header.vocab)?;

    let mut cohort = Cohort {
        prediction_day: header.prediction_day,
        records: Vec::new(),
        vocab,
    };

    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let parsed: PatientLine = serde_json::from_str(&text)
            .map_err(|source| CorpusError::Parse { line: line_no, source })?;
        if parsed.label != 0 && parsed.label != 1 {
            return Err(CorpusError::BadLabel {
                patient: parsed.patient_id,
                label: parsed.label,
            });
        }
        let rec = PatientRecord {
            patient_id: parsed.patient_id,
            label: parsed.label as u8,
            subgroups: parsed.subgroups,
            visits: parsed
                .visits
                .into_iter()
                .map(|v| Visit {
                    day: v.day,
                    codes: v.codes,
                })
                .collect(),
        };
        cohort.validate_record(&rec)?;
        cohort.records.push(rec);
    }
    Ok(cohort)
}

/// Write a cohort in the JSONL format accepted by [`load_cohort`].
pub fn save_cohort(cohort: &Cohort, path: &Path) -> Result<(), CorpusError> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    let header = HeaderLine {
        prediction_day: cohort.prediction_day,
        vocab: cohort.vocab.codes().to_vec(),
    };
    serde_json::to_writer(&mut w, &header).map_err(|source| CorpusError::Parse { line: 1, source })?;
    w.write_all(b"\n")?;
    for rec in &cohort.records {
        let line = PatientLine {
            patient_id: rec.patient_id.clone(),
            label: rec.label as i64,
            subgroups: rec.subgroups.clone(),
            visits: rec
                .visits
                .iter()
                .map(|v| VisitLine {
                    day: v.day,
                    codes: v.codes.clone(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &line).map_err(|source| CorpusError::Parse { line: 0, source })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Deterministic disjoint partition into (train, val, test).
///
/// Sizes are the rounded fractions of the record count; the remainder goes to
/// train. A fixed seed always yields the same partition.
pub fn split_cohort(
    cohort: &Cohort,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Cohort, Cohort, Cohort), CorpusError> {
    let (ft, fv, fs) = fractions;
    if !(ft > 0.0 && fv > 0.0 && fs > 0.0) || (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(CorpusError::BadFractions(fractions));
    }
    let n = cohort.records.len();
    let n_val = (n as f64 * fv).round() as usize;
    let n_test = (n as f64 * fs).round() as usize;
    if n_val + n_test > n {
        return Err(CorpusError::BadFractions(fractions));
    }
    let n_train = n - n_val - n_test;

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let train_idx = &order[..n_train];
    let val_idx = &order[n_train..n_train + n_val];
    let test_idx = &order[n_train + n_val..];
    Ok((
        cohort.subset(train_idx),
        cohort.subset(val_idx),
        cohort.subset(test_idx),
    ))
}

/// Class weight `p_c`: the ratio of negative to positive labels.
pub fn class_weight(labels: &[u8]) -> Result<f64, CorpusError> {
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(CorpusError::DegenerateLabels { positives, negatives });
    }
    Ok(negatives as f64 / positives as f64)
}
