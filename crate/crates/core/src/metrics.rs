//! Evaluation statistics: AUC-ROC, AUC-PRC, the DeLong paired z-test,
//! Spearman rank correlation, the Mann-Whitney U test, PPV at a fixed
//! sensitivity, and Matthews correlation.
//!
//! Ties are handled with average ranks throughout, which keeps every rank
//! metric deterministic and directly checkable against brute-force pair
//! counting.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("scores and labels have different lengths ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("need at least one positive and one negative label")]
    DegenerateLabels,
    #[error("need at least {need} observations, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("scores contain non-finite values")]
    NonFinite,
    #[error("sensitivity {0} is not reachable")]
    UnreachableSensitivity(f64),
    #[error("sample must be non-empty")]
    EmptySample,
}

/// Scores paired with binary labels.
#[derive(Debug, Clone)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<u8>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self, MetricError> {
        if scores.len() != labels.len() {
            return Err(MetricError::LengthMismatch {
                scores: scores.len(),
                labels: labels.len(),
            });
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(MetricError::NonFinite);
        }
        Ok(Self { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn n_positive(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn prevalence(&self) -> f64 {
        self.n_positive() as f64 / self.len() as f64
    }
}

/// Average (fractional) ranks, 1-based; ties share the mean of their ranks.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j (0-based) share the average of ranks i+1..=j+1
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Area under the ROC curve: P(score_pos > score_neg) + half the tie mass,
/// computed from rank statistics.
pub fn auc_roc(set: &ScoredSet) -> Result<f64, MetricError> {
    let m = set.n_positive();
    let n = set.len() - m;
    if m == 0 || n == 0 {
        return Err(MetricError::DegenerateLabels);
    }
    let ranks = average_ranks(&set.scores);
    let pos_rank_sum: f64 = ranks
        .iter()
        .zip(&set.labels)
        .filter(|(_, &l)| l == 1)
        .map(|(&r, _)| r)
        .sum();
    Ok((pos_rank_sum - m as f64 * (m as f64 + 1.0) / 2.0) / (m as f64 * n as f64))
}

/// Area under the precision-recall curve with step interpolation at each
/// distinct threshold.
pub fn auc_prc(set: &ScoredSet) -> Result<f64, MetricError> {
    let total_pos = set.n_positive();
    if total_pos == 0 {
        return Err(MetricError::DegenerateLabels);
    }
    // Sweep thresholds from the highest score downward.
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| set.scores[b].partial_cmp(&set.scores[a]).unwrap());

    let mut area = 0.0;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = set.scores[order[i]];
        // consume the whole tie group at this threshold
        while i < order.len() && set.scores[order[i]] == threshold {
            if set.labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / total_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(area)
}

/// Per-positive and per-negative structural components of the AUC estimator.
fn delong_components(scores: &[f64], labels: &[u8]) -> (Vec<f64>, Vec<f64>) {
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 0)
        .map(|(&s, _)| s)
        .collect();
    let v10 = pos
        .iter()
        .map(|&x| {
            neg.iter()
                .map(|&y| {
                    if x > y {
                        1.0
                    } else if x == y {
                        0.5
                    } else {
                        0.0
                    }
                })
                .sum::<f64>()
                / neg.len() as f64
        })
        .collect();
    let v01 = neg
        .iter()
        .map(|&y| {
            pos.iter()
                .map(|&x| {
                    if x > y {
                        1.0
                    } else if x == y {
                        0.5
                    } else {
                        0.0
                    }
                })
                .sum::<f64>()
                / pos.len() as f64
        })
        .collect();
    (v10, v01)
}

fn sample_cov(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    if n < 2 {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - ma) * (y - mb))
        .sum::<f64>()
        / (n - 1) as f64
}

fn normal_two_sided_p(z: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).unwrap();
    (2.0 * normal.cdf(-z.abs())).min(1.0)
}

/// Result of the DeLong paired comparison of two AUCs on shared labels.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DeLongResult {
    pub auc_a: f64,
    pub auc_b: f64,
    pub z: f64,
    pub p: f64,
}

/// DeLong paired z-test for the difference of two correlated AUCs.
pub fn delong_test(
    scores_a: &[f64],
    scores_b: &[f64],
    labels: &[u8],
) -> Result<DeLongResult, MetricError> {
    if scores_a.len() != labels.len() || scores_b.len() != labels.len() {
        return Err(MetricError::LengthMismatch {
            scores: scores_a.len().min(scores_b.len()),
            labels: labels.len(),
        });
    }
    let set_a = ScoredSet::new(scores_a.to_vec(), labels.to_vec())?;
    let set_b = ScoredSet::new(scores_b.to_vec(), labels.to_vec())?;
    let auc_a = auc_roc(&set_a)?;
    let auc_b = auc_roc(&set_b)?;

    let (v10_a, v01_a) = delong_components(scores_a, labels);
    let (v10_b, v01_b) = delong_components(scores_b, labels);
    let m = v10_a.len() as f64;
    let n = v01_a.len() as f64;

    let var = (sample_cov(&v10_a, &v10_a) + sample_cov(&v10_b, &v10_b)
        - 2.0 * sample_cov(&v10_a, &v10_b))
        / m
        + (sample_cov(&v01_a, &v01_a) + sample_cov(&v01_b, &v01_b)
            - 2.0 * sample_cov(&v01_a, &v01_b))
            / n;

    let diff = auc_a - auc_b;
    let (z, p) = if var <= 0.0 {
        if diff == 0.0 {
            (0.0, 1.0)
        } else {
            (f64::INFINITY.copysign(diff), 0.0)
        }
    } else {
        let z = diff / var.sqrt();
        (z, normal_two_sided_p(z))
    };
    Ok(DeLongResult { auc_a, auc_b, z, p })
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    if x.len() != y.len() {
        return Err(MetricError::LengthMismatch {
            scores: x.len(),
            labels: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(MetricError::TooFew { need: 3, got: x.len() });
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        num += (a - mx) * (b - my);
        dx += (a - mx).powi(2);
        dy += (b - my).powi(2);
    }
    if dx == 0.0 || dy == 0.0 {
        return Err(MetricError::DegenerateLabels);
    }
    Ok(num / (dx * dy).sqrt())
}

/// Result of the Mann-Whitney rank-sum test.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MannWhitneyResult {
    /// U statistic for the first sample: 0 when every element of `a` ranks
    /// below every element of `b`.
    pub u: f64,
    pub p: f64,
}

/// Mann-Whitney U test with tie-corrected normal approximation, two-sided.
pub fn mann_whitney(a: &[f64], b: &[f64]) -> Result<MannWhitneyResult, MetricError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricError::EmptySample);
    }
    let na = a.len() as f64;
    let nb = b.len() as f64;
    let combined: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
    let ranks = average_ranks(&combined);
    let ra: f64 = ranks[..a.len()].iter().sum();
    let u = ra - na * (na + 1.0) / 2.0;

    let n = na + nb;
    // tie correction: sum over tie groups of t^3 - t
    let mut sorted = combined.clone();
    sorted.sort_by(|p, q| p.partial_cmp(q).unwrap());
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t.powi(3) - t;
        i = j + 1;
    }
    let var = na * nb / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    let mean = na * nb / 2.0;
    let (_, p) = if var <= 0.0 {
        (0.0, 1.0)
    } else {
        let z = (u - mean) / var.sqrt();
        (z, normal_two_sided_p(z))
    };
    Ok(MannWhitneyResult { u, p })
}

/// Precision at the best threshold whose recall reaches `sensitivity`.
///
/// Among all score thresholds with recall at least `sensitivity`, this
/// returns the maximum precision (ties resolved toward the highest
/// threshold), together with the threshold chosen.
pub fn ppv_at_sensitivity(
    set: &ScoredSet,
    sensitivity: f64,
) -> Result<(f64, f64), MetricError> {
    let total_pos = set.n_positive();
    if total_pos == 0 {
        return Err(MetricError::DegenerateLabels);
    }
    if sensitivity > 1.0 {
        return Err(MetricError::UnreachableSensitivity(sensitivity));
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| set.scores[b].partial_cmp(&set.scores[a]).unwrap());

    let mut best: Option<(f64, f64)> = None;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let threshold = set.scores[order[i]];
        while i < order.len() && set.scores[order[i]] == threshold {
            if set.labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / total_pos as f64;
        if recall >= sensitivity {
            let precision = tp as f64 / (tp + fp) as f64;
            match best {
                Some((p, _)) if p >= precision => {}
                _ => best = Some((precision, threshold)),
            }
        }
    }
    best.ok_or(MetricError::UnreachableSensitivity(sensitivity))
}

/// Matthews correlation coefficient of two binary vectors; 0 by convention
/// when either vector is constant.
pub fn mcc(a: &[u8], b: &[u8]) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch {
            scores: a.len(),
            labels: b.len(),
        });
    }
    let mut tp = 0.0_f64;
    let mut tn = 0.0_f64;
    let mut fp = 0.0_f64;
    let mut fn_ = 0.0_f64;
    for (&x, &y) in a.iter().zip(b) {
        match (x != 0, y != 0) {
            (true, true) => tp += 1.0,
            (false, false) => tn += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
        }
    }
    let denom = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((tp * tn - fp * fn_) / denom.sqrt())
}

/// One named metric value plus the context needed to interpret it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricEntry {
    pub name: String,
    pub value: f64,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prevalence: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

/// Named metric values with metadata, serializable to CSV and JSON.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub entries: Vec<MetricEntry>,
}

impl MetricReport {
    pub fn push(&mut self, entry: MetricEntry) {
        self.entries.push(entry);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.value)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,value,n,prevalence,threshold\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.name,
                e.value,
                e.n,
                e.prevalence.map(|p| p.to_string()).unwrap_or_default(),
                e.threshold.map(|t| t.to_string()).unwrap_or_default(),
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(scores: Vec<f64>, labels: Vec<u8>) -> ScoredSet {
        ScoredSet::new(scores, labels).unwrap()
    }

    /// O(n^2) pair-counting AUC used as the test oracle.
    fn auc_pairwise(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            if labels[i] != 1 {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] != 0 {
                    continue;
                }
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_roc_trivial() {
        assert_eq!(auc_roc(&set(vec![0.9, 0.1], vec![1, 0])).unwrap(), 1.0);
        assert_eq!(auc_roc(&set(vec![0.5, 0.5, 0.5], vec![1, 0, 1])).unwrap(), 0.5);
    }

    #[test]
    fn auc_roc_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = 50;
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() * 8.0).round() / 8.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
            labels[0] = 1;
            labels[1] = 0;
            let got = auc_roc(&set(scores.clone(), labels.clone())).unwrap();
            let want = auc_pairwise(&scores, &labels);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    /// Exhaustive threshold enumeration oracle for AUC-PRC.
    fn prc_oracle(scores: &[f64], labels: &[u8]) -> f64 {
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let total_pos = labels.iter().filter(|&&l| l == 1).count() as f64;
        let mut area = 0.0;
        let mut prev_recall = 0.0;
        for &t in &thresholds {
            let tp = scores
                .iter()
                .zip(labels)
                .filter(|&(&s, &l)| s >= t && l == 1)
                .count() as f64;
            let predicted = scores.iter().filter(|&&s| s >= t).count() as f64;
            let recall = tp / total_pos;
            let precision = tp / predicted;
            area += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        area
    }

    #[test]
    fn auc_prc_trivial_and_oracle() {
        assert_eq!(auc_prc(&set(vec![0.9, 0.8, 0.2], vec![1, 1, 0])).unwrap(), 1.0);
        let prevalence_set = set(vec![0.3; 10], vec![1, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        assert!((auc_prc(&prevalence_set).unwrap() - 0.1).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = 50;
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() * 6.0).round() / 6.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
            labels[0] = 1;
            let got = auc_prc(&set(scores.clone(), labels.clone())).unwrap();
            let want = prc_oracle(&scores, &labels);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn delong_identical_scores() {
        let scores = vec![0.3, 0.7, 0.2, 0.9];
        let labels = vec![0, 1, 0, 1];
        let r = delong_test(&scores, &scores, &labels).unwrap();
        assert_eq!(r.z, 0.0);
        assert_eq!(r.p, 1.0);
        assert_eq!(r.auc_a, r.auc_b);
    }

    #[test]
    fn delong_auc_matches_auc_roc() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 60;
        let scores_a: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let scores_b: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i % 3 == 0) as u8).collect();
        let r = delong_test(&scores_a, &scores_b, &labels).unwrap();
        let a = auc_roc(&set(scores_a, labels.clone())).unwrap();
        let b = auc_roc(&set(scores_b, labels)).unwrap();
        assert!((r.auc_a - a).abs() < 1e-12);
        assert!((r.auc_b - b).abs() < 1e-12);
    }

    #[test]
    fn spearman_trivial_and_oracle() {
        let x = vec![1.0, 2.0, 5.0, 3.0];
        let y_same = x.clone();
        let y_neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((spearman(&x, &y_same).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &y_neg).unwrap() + 1.0).abs() < 1e-12);

        // brute-force rank-then-Pearson oracle
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Vec<f64> = (0..30).map(|_| (rng.gen::<f64>() * 4.0).round()).collect();
        let b: Vec<f64> = (0..30).map(|_| (rng.gen::<f64>() * 4.0).round()).collect();
        let ra = average_ranks(&a);
        let rb = average_ranks(&b);
        let n = 30.0;
        let ma = ra.iter().sum::<f64>() / n;
        let mb = rb.iter().sum::<f64>() / n;
        let num: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let da: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
        let db: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
        let want = num / (da * db).sqrt();
        assert!((spearman(&a, &b).unwrap() - want).abs() < 1e-12);
    }

    /// O(n^2) pair-counting U oracle.
    fn u_oracle(a: &[f64], b: &[f64]) -> f64 {
        let mut u = 0.0;
        for &x in a {
            for &y in b {
                if x > y {
                    u += 1.0;
                } else if x == y {
                    u += 0.5;
                }
            }
        }
        u
    }

    #[test]
    fn mann_whitney_trivial_and_oracle() {
        let a = vec![1.0, 2.0, 3.0];
        let b = vec![10.0, 11.0];
        let r = mann_whitney(&a, &b).unwrap();
        assert_eq!(r.u, 0.0);

        let same = vec![1.0, 2.0, 3.0];
        let r2 = mann_whitney(&same, &same).unwrap();
        assert!((r2.p - 1.0).abs() < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a: Vec<f64> = (0..20).map(|_| (rng.gen::<f64>() * 5.0).round()).collect();
        let b: Vec<f64> = (0..20).map(|_| (rng.gen::<f64>() * 5.0).round()).collect();
        let r3 = mann_whitney(&a, &b).unwrap();
        assert_eq!(r3.u, u_oracle(&a, &b));
    }

    /// Exhaustive threshold-sweep oracle for PPV at sensitivity.
    fn ppv_oracle(scores: &[f64], labels: &[u8], sens: f64) -> Option<f64> {
        let total_pos = labels.iter().filter(|&&l| l == 1).count() as f64;
        let mut thresholds = scores.to_vec();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let mut best: Option<f64> = None;
        for &t in &thresholds {
            let tp = scores
                .iter()
                .zip(labels)
                .filter(|&(&s, &l)| s >= t && l == 1)
                .count() as f64;
            let predicted = scores.iter().filter(|&&s| s >= t).count() as f64;
            if tp / total_pos >= sens {
                let prec = tp / predicted;
                if best.map_or(true, |b| prec > b) {
                    best = Some(prec);
                }
            }
        }
        best
    }

    #[test]
    fn ppv_trivial_and_oracle() {
        let perfect = set(vec![0.9, 0.8, 0.1, 0.2], vec![1, 1, 0, 0]);
        assert_eq!(ppv_at_sensitivity(&perfect, 0.5).unwrap().0, 1.0);
        assert_eq!(ppv_at_sensitivity(&perfect, 1.0).unwrap().0, 1.0);

        let constant = set(vec![0.3; 10], vec![1, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        assert!((ppv_at_sensitivity(&constant, 0.5).unwrap().0 - 0.1).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let n = 200;
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() * 20.0).round() / 20.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| (rng.gen::<f64>() < 0.3) as u8).collect();
            labels[0] = 1;
            let s = set(scores.clone(), labels.clone());
            for sens in [0.25, 0.5, 0.75] {
                let got = ppv_at_sensitivity(&s, sens).unwrap().0;
                let want = ppv_oracle(&scores, &labels, sens).unwrap();
                assert!((got - want).abs() < 1e-12, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn ppv_non_increasing_in_sensitivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        for _ in 0..50 {
            let n = 60;
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() * 10.0).round() / 10.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| (rng.gen::<f64>() < 0.4) as u8).collect();
            labels[0] = 1;
            let s = set(scores, labels);
            let mut prev = f64::INFINITY;
            for k in 1..=10 {
                let sens = k as f64 / 10.0;
                let ppv = ppv_at_sensitivity(&s, sens).unwrap().0;
                assert!(ppv <= prev + 1e-12, "ppv increased: {prev} -> {ppv} at {sens}");
                prev = ppv;
            }
        }
    }

    #[test]
    fn mcc_trivial() {
        assert_eq!(mcc(&[1, 0, 1, 0], &[1, 0, 1, 0]).unwrap(), 1.0);
        assert_eq!(mcc(&[1, 0, 1, 0], &[0, 1, 0, 1]).unwrap(), -1.0);
        assert_eq!(mcc(&[1, 1, 1, 1], &[1, 0, 1, 0]).unwrap(), 0.0);
    }

    #[test]
    fn mcc_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let a: Vec<u8> = (0..40).map(|_| rng.gen_range(0..2) as u8).collect();
            let b: Vec<u8> = (0..40).map(|_| rng.gen_range(0..2) as u8).collect();
            assert_eq!(mcc(&a, &b).unwrap(), mcc(&b, &a).unwrap());
        }
    }

    #[test]
    fn auc_label_flip_complement() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        // tie-free scores
        let mut scores: Vec<f64> = (0..40).map(|i| i as f64 + rng.gen::<f64>() * 0.5).collect();
        use rand::seq::SliceRandom;
        scores.shuffle(&mut rng);
        let labels: Vec<u8> = (0..40).map(|_| rng.gen_range(0..2) as u8).collect();
        let flipped: Vec<u8> = labels.iter().map(|&l| 1 - l).collect();
        let a = auc_roc(&set(scores.clone(), labels)).unwrap();
        let b = auc_roc(&set(scores, flipped)).unwrap();
        assert!((a + b - 1.0).abs() < 1e-12);
    }
}
