use sard_core::corpus::split_cohort;
use sard_core::linear::{fit_windowed_teacher, teacher_val_auc, WindowOffset, WindowSet};
use sard_core::metrics::{auc_roc, spearman, ScoredSet};
use sard_core::model::*;
use sard_core::synthgen::{gen_claims_cohort, ClaimsGenParams};
use sard_core::training::*;

fn planted_params() -> ClaimsGenParams {
    ClaimsGenParams {
        n_patients: 5000,
        vocab_size: 60,
        mean_visits: 10.0,
        mean_codes_per_visit: 3.0,
        history_span_days: 720,
        planted_windows: WindowSet::new(vec![WindowOffset::Days(30), WindowOffset::Infinite]).unwrap(),
        planted_weights: vec![
            (0, 3, 2.5), (0, 11, 1.8), (0, 27, -2.0), (0, 44, 1.5),
            (1, 5, 1.2), (1, 9, -1.0), (1, 18, 0.9), (1, 23, -1.4),
            (1, 31, 1.1), (1, 40, -0.8), (1, 52, 1.3), (1, 57, -1.2),
        ],
        intercept: -2.2,
        drift_day: None,
        drift_magnitude: 0.0,
        ensure_recent_visit_within: None,
        n_subgroups: 6,
    }
}

#[test]
#[ignore]
fn probe_pretrain_settings() {
    let cohort = gen_claims_cohort(&planted_params(), 7).unwrap();
    let (train, val, test) = split_cohort(&cohort, (0.7, 0.15, 0.15), 1).unwrap();
    let ws = WindowSet::new(vec![WindowOffset::Days(30), WindowOffset::Infinite]).unwrap();
    let teacher = fit_windowed_teacher(&train, &ws, 500.0, 1e-8, 800).unwrap();
    eprintln!("teacher val={:.4}", teacher_val_auc(&teacher, &val).unwrap());

    let logit = |p: f64| (p.clamp(1e-7, 1.0-1e-7) / (1.0 - p.clamp(1e-7, 1.0-1e-7))).ln();
    for (lr, batch, epochs) in [(1e-3, 250, 40), (2e-3, 250, 40), (2e-3, 100, 30), (1e-3, 100, 40)] {
        let t0 = std::time::Instant::now();
        let config = SardConfig::new(24, 24, 2, 2, 10, 0.05, EncoderVariant::SelfAttention, HeadVariant::Conv).unwrap();
        let tc = TrainConfig {
            batch_size: batch, micro_batch: 50, max_epochs: epochs, patience: 6,
            adam: AdamConfig { learning_rate: lr, ..Default::default() },
            alpha_grid: vec![0.0], seed: 11,
        };
        let model = SardModel::init(config, 60, 100).unwrap();
        let (pre, hist) = pretrain_rd(model, &teacher, &train, &val, &tc).unwrap();
        let packed_test = PackedCohort::build(&test, &pre, Some(&teacher)).unwrap();
        let student: Vec<f64> = predict_packed(&pre, &packed_test).unwrap();
        let sl: Vec<f64> = student.iter().map(|&p| logit(p)).collect();
        let tl: Vec<f64> = packed_test.teacher_p.iter().map(|&p| logit(p)).collect();
        let rho = spearman(&sl, &tl).unwrap();
        let auc = auc_roc(&ScoredSet::new(student, test.labels()).unwrap()).unwrap();
        eprintln!("lr={lr} batch={batch} epochs={} best={}: spearman={rho:.4} auc={auc:.4} [{:?}]",
            hist.epochs.len() - 1, hist.best_epoch, t0.elapsed());
    }
}

#[test]
#[ignore]
fn probe_paired_arms() {
    let cohort = gen_claims_cohort(&planted_params(), 7).unwrap();
    let (train, val, test) = split_cohort(&cohort, (0.7, 0.15, 0.15), 1).unwrap();
    let ws = WindowSet::new(vec![WindowOffset::Days(30), WindowOffset::Infinite]).unwrap();
    let teacher = fit_windowed_teacher(&train, &ws, 500.0, 1e-8, 800).unwrap();

    for seed in 0..4u64 {
        let t0 = std::time::Instant::now();
        let config = SardConfig::new(24, 24, 2, 2, 10, 0.05, EncoderVariant::SelfAttention, HeadVariant::Conv).unwrap();
        let pre_tc = TrainConfig {
            batch_size: 100, micro_batch: 50, max_epochs: 30, patience: 6,
            adam: AdamConfig { learning_rate: 2e-3, ..Default::default() },
            alpha_grid: vec![0.0], seed: 1000 + seed,
        };
        let ft_tc = TrainConfig { max_epochs: 20, patience: 4, ..pre_tc.clone() };
        let init = SardModel::init(config, 60, 300 + seed).unwrap();

        let (pre, _) = pretrain_rd(init.clone(), &teacher, &train, &val, &pre_tc).unwrap();
        let (rd_model, _) = finetune(pre, &teacher, &train, &val, &ft_tc, 0.0).unwrap();
        let rd_scores = predict_packed(&rd_model, &PackedCohort::build(&test, &rd_model, None).unwrap()).unwrap();
        let rd_auc = auc_roc(&ScoredSet::new(rd_scores, test.labels()).unwrap()).unwrap();

        let (no_model, _) = finetune_ce(init, &train, &val, &ft_tc).unwrap();
        let no_scores = predict_packed(&no_model, &PackedCohort::build(&test, &no_model, None).unwrap()).unwrap();
        let no_auc = auc_roc(&ScoredSet::new(no_scores, test.labels()).unwrap()).unwrap();

        // dissection on the test split
        use sard_core::introspect::{dissect, BinarizeRule};
        let rd_dis = dissect(&rd_model, &teacher, &test, BinarizeRule::Half).unwrap();
        let no_dis = dissect(&no_model, &teacher, &test, BinarizeRule::Half).unwrap();
        eprintln!(
            "seed {seed}: rd_auc={rd_auc:.4} no_auc={no_auc:.4} diff={:+.4} | unique rd={} no={} of {} [{:?}]",
            rd_auc - no_auc, rd_dis.unique_matched, no_dis.unique_matched, rd_dis.teacher_nonzero, t0.elapsed()
        );
    }
}

#[test]
#[ignore]
fn probe_dissect_design() {
    use sard_core::introspect::{dissect, BinarizeRule};
    let cohort = gen_claims_cohort(&planted_params(), 7).unwrap();
    let (train, val, test) = split_cohort(&cohort, (0.7, 0.15, 0.15), 1).unwrap();
    let ws = WindowSet::new(vec![WindowOffset::Days(30), WindowOffset::Infinite]).unwrap();
    for lambda in [500.0, 200.0] {
        let teacher = fit_windowed_teacher(&train, &ws, lambda, 1e-8, 800).unwrap();
        for k in [10usize, 16] {
            let mut wins_half = 0;
            let mut wins_med = 0;
            let mut lines = String::new();
            for seed in 0..6u64 {
                let config = SardConfig::new(24, 24, 2, 2, k, 0.05, EncoderVariant::SelfAttention, HeadVariant::Conv).unwrap();
                let pre_tc = TrainConfig {
                    batch_size: 100, micro_batch: 50, max_epochs: 30, patience: 6,
                    adam: AdamConfig { learning_rate: 2e-3, ..Default::default() },
                    alpha_grid: vec![0.0], seed: 1000 + seed,
                };
                let ft_tc = TrainConfig { max_epochs: 20, patience: 4, ..pre_tc.clone() };
                let init = SardModel::init(config, 60, 300 + seed).unwrap();
                let (pre, _) = pretrain_rd(init.clone(), &teacher, &train, &val, &pre_tc).unwrap();
                let (rd_model, _) = finetune(pre, &teacher, &train, &val, &ft_tc, 0.0).unwrap();
                let (no_model, _) = finetune_ce(init, &train, &val, &ft_tc).unwrap();
                let rd_h = dissect(&rd_model, &teacher, &test, BinarizeRule::Half).unwrap().unique_matched;
                let no_h = dissect(&no_model, &teacher, &test, BinarizeRule::Half).unwrap().unique_matched;
                let rd_m = dissect(&rd_model, &teacher, &test, BinarizeRule::PerNeuronMedian).unwrap().unique_matched;
                let no_m = dissect(&no_model, &teacher, &test, BinarizeRule::PerNeuronMedian).unwrap().unique_matched;
                if rd_h > no_h { wins_half += 1; }
                if rd_m > no_m { wins_med += 1; }
                lines.push_str(&format!("    seed {seed}: half rd={rd_h} no={no_h} | med rd={rd_m} no={no_m}\n"));
            }
            eprintln!("lambda={lambda} K={k}: half wins {wins_half}/6, median wins {wins_med}/6\n{lines}");
        }
    }
}

#[test]
#[ignore]
fn probe_dissect_pretrained() {
    use sard_core::introspect::{dissect, BinarizeRule};
    let cohort = gen_claims_cohort(&planted_params(), 7).unwrap();
    let (train, val, test) = split_cohort(&cohort, (0.7, 0.15, 0.15), 1).unwrap();
    let ws = WindowSet::new(vec![WindowOffset::Days(30), WindowOffset::Infinite]).unwrap();
    let teacher = fit_windowed_teacher(&train, &ws, 500.0, 1e-8, 800).unwrap();
    let mut wins = 0;
    for seed in 0..8u64 {
        let config = SardConfig::new(24, 24, 2, 2, 10, 0.05, EncoderVariant::SelfAttention, HeadVariant::Conv).unwrap();
        let pre_tc = TrainConfig {
            batch_size: 100, micro_batch: 50, max_epochs: 30, patience: 6,
            adam: AdamConfig { learning_rate: 2e-3, ..Default::default() },
            alpha_grid: vec![0.0], seed: 1000 + seed,
        };
        let ft_tc = TrainConfig { max_epochs: 20, patience: 4, ..pre_tc.clone() };
        let init = SardModel::init(config, 60, 300 + seed).unwrap();
        let (pre, _) = pretrain_rd(init.clone(), &teacher, &train, &val, &pre_tc).unwrap();
        let (no_model, _) = finetune_ce(init, &train, &val, &ft_tc).unwrap();
        let rd = dissect(&pre, &teacher, &test, BinarizeRule::Half).unwrap().unique_matched;
        let no = dissect(&no_model, &teacher, &test, BinarizeRule::Half).unwrap().unique_matched;
        if rd > no { wins += 1; }
        eprintln!("seed {seed}: pretrained rd={rd} no={no}");
    }
    eprintln!("wins {wins}/8");
}
