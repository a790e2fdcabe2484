//! Subcommand implementations. Every command validates its config up front,
//! writes its outputs under `out_dir`, and records a manifest carrying the
//! config digest so reruns are attributable.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use sard_core::corpus::{load_cohort, save_cohort, split_cohort, Cohort};
use sard_core::introspect::{dissect, BinarizeRule};
use sard_core::lemma::{
    construct_replicating_sard, lemma_eval_cohort, planted_teacher, replication_error,
    replication_sweep, sweep_to_csv, LemmaParams,
};
use sard_core::linear::{
    clamp_prob, featurize, fit_windowed_teacher, predict_linear, select_windows, teacher_val_auc,
    LinearModel,
};
use sard_core::metrics::{
    auc_prc, auc_roc, delong_test, ppv_at_sensitivity, MetricEntry, MetricReport, ScoredSet,
};
use sard_core::model::{EncoderVariant, HeadVariant, SardModel};
use sard_core::procedures::{run_procedures, BenchResult};
use sard_core::svg;
use sard_core::synthgen::{gen_claims_cohort, gen_cluster_dataset};
use sard_core::training::{finetune, finetune_ce, pretrain_rd, predict_packed, PackedCohort};

use crate::config::ExperimentConfig;

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_digest: String,
    out_dir: &'a Path,
}

fn write_manifest(cfg: &ExperimentConfig, command: &str) -> Result<()> {
    let manifest = Manifest {
        command,
        config_digest: cfg.digest(),
        out_dir: &cfg.out_dir,
    };
    let path = cfg.out_dir.join(format!("manifest_{command}.json"));
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn ensure_out_dir(cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))
}

pub fn cmd_gen(cfg: &ExperimentConfig) -> Result<()> {
    ensure_out_dir(cfg)?;
    let mut wrote = false;
    if let Some(claims) = &cfg.claims {
        let params = claims.params()?;
        let cohort = gen_claims_cohort(&params, cfg.seeds.data)?;
        let path = cfg.out_dir.join("cohort.jsonl");
        save_cohort(&cohort, &path)?;
        let meta = serde_json::json!({
            "kind": "claims",
            "seed": cfg.seeds.data,
            "params": params,
            "n_records": cohort.records.len(),
            "prevalence": cohort.labels().iter().filter(|&&l| l == 1).count() as f64
                / cohort.records.len() as f64,
        });
        fs::write(cfg.out_dir.join("cohort_metadata.json"), serde_json::to_string_pretty(&meta)?)?;
        println!("wrote {} ({} patients)", path.display(), cohort.records.len());
        wrote = true;
    }
    if let Some(cluster) = &cfg.cluster {
        let params = cluster.params();
        let ds = gen_cluster_dataset(&params, cfg.seeds.data)?;
        let path = cfg.out_dir.join("cluster.csv");
        fs::write(&path, ds.to_csv())?;
        let meta = serde_json::json!({
            "kind": "cluster",
            "seed": cfg.seeds.data,
            "params": params,
            "center_direction": ds.direction,
        });
        fs::write(cfg.out_dir.join("cluster_metadata.json"), serde_json::to_string_pretty(&meta)?)?;
        println!("wrote {} ({} samples)", path.display(), params.n_samples);
        wrote = true;
    }
    if !wrote {
        bail!("config has neither a [claims] nor a [cluster] section");
    }
    write_manifest(cfg, "gen")
}

fn load_splits(cfg: &ExperimentConfig) -> Result<(Cohort, Cohort, Cohort)> {
    let path = cfg.out_dir.join("cohort.jsonl");
    if !path.exists() {
        bail!("{} not found; run `sard gen` first", path.display());
    }
    let cohort = load_cohort(&path)?;
    Ok(split_cohort(&cohort, cfg.split_fractions, cfg.seeds.split)?)
}

#[derive(Serialize)]
struct TrainSummary {
    window_offsets: Vec<String>,
    lambda: f64,
    teacher_val_auc: f64,
    pretrain_skipped: bool,
    pretrain_best_val_loss: Option<f64>,
    alpha: Option<f64>,
    final_val_auc: f64,
    encoder: EncoderVariant,
    head: HeadVariant,
}

pub struct TrainFlags {
    pub no_rd: bool,
    pub variant: Option<EncoderVariant>,
    pub head: Option<HeadVariant>,
}

pub fn cmd_train(cfg: &ExperimentConfig, flags: &TrainFlags) -> Result<()> {
    ensure_out_dir(cfg)?;
    let (train, val, _test) = load_splits(cfg)?;

    // window selection over the candidate offsets, then the teacher fit
    let search = select_windows(
        &cfg.windows.candidates,
        cfg.windows.n_windows,
        &train,
        &val,
        &cfg.teacher.lambda_grid,
        cfg.teacher.tol,
        cfg.teacher.max_iter,
    )?;
    let teacher = fit_windowed_teacher(
        &train,
        &search.window_set,
        search.lambda,
        cfg.teacher.tol,
        cfg.teacher.max_iter,
    )?;
    let teacher_auc = teacher_val_auc(&teacher, &val)?;
    fs::write(cfg.out_dir.join("teacher.json"), teacher.to_json()?)?;
    println!(
        "teacher: windows [{}] lambda {} val AUC {:.4}",
        search
            .window_set
            .offsets()
            .iter()
            .map(|o| o.to_string())
            .collect::<Vec<_>>()
            .join(", "),
        search.lambda,
        teacher_auc
    );

    let mut sard_cfg = cfg.sard.to_config()?;
    if let Some(v) = flags.variant {
        sard_cfg.encoder = v;
    }
    if let Some(h) = flags.head {
        sard_cfg.head = h;
    }
    sard_cfg.validate()?;
    let init = SardModel::init(sard_cfg.clone(), train.vocab.len(), cfg.seeds.model)?;

    let (start_model, pretrain_loss, pretrain_skipped) = if flags.no_rd {
        fs::write(
            cfg.out_dir.join("history_pretrain.csv"),
            "epoch,train_loss,val_loss,val_auc,wall_time\n# pretrain skipped (--no-rd)\n",
        )?;
        (init, None, true)
    } else {
        let pre_cfg = cfg.train.pretrain_config(cfg.seeds.train);
        let (pre, history) = pretrain_rd(init, &teacher, &train, &val, &pre_cfg)?;
        fs::write(cfg.out_dir.join("history_pretrain.csv"), history.to_csv())?;
        let best_loss = history.epochs.get(history.best_epoch).map(|e| e.val_loss);
        pre.save(&cfg.out_dir.join("sard_pretrained.json"))?;
        println!(
            "pretrain: {} epochs, best val loss {:?}",
            history.epochs.len().saturating_sub(1),
            best_loss
        );
        (pre, best_loss, false)
    };

    // fine-tune, searching the alpha grid on validation AUC
    let ft_cfg = cfg.train.finetune_config(cfg.seeds.train ^ 0xf17e);
    let mut best: Option<(SardModel, f64, Option<f64>, String)> = None;
    if flags.no_rd {
        let (model, history) = finetune_ce(start_model, &train, &val, &ft_cfg)?;
        let val_auc = history.epochs[history.best_epoch].val_auc;
        best = Some((model, val_auc, None, history.to_csv()));
    } else {
        for &alpha in &cfg.train.alpha_grid {
            let (model, history) =
                finetune(start_model.clone(), &teacher, &train, &val, &ft_cfg, alpha)?;
            let val_auc = history.epochs[history.best_epoch].val_auc;
            if best.as_ref().map_or(true, |(_, b, _, _)| val_auc > *b) {
                best = Some((model, val_auc, Some(alpha), history.to_csv()));
            }
        }
    }
    let (model, final_val_auc, alpha, history_csv) = best.expect("at least one fine-tune run");
    let checkpoint = if flags.no_rd { "sard_nord.json" } else { "sard_rd.json" };
    let history_file = if flags.no_rd { "history_finetune_nord.csv" } else { "history_finetune.csv" };
    model.save(&cfg.out_dir.join(checkpoint))?;
    fs::write(cfg.out_dir.join(history_file), history_csv)?;
    println!(
        "finetune: val AUC {final_val_auc:.4}{}; checkpoint {checkpoint}",
        alpha.map(|a| format!(" (alpha {a})")).unwrap_or_default()
    );

    let summary = TrainSummary {
        window_offsets: search.window_set.offsets().iter().map(|o| o.to_string()).collect(),
        lambda: search.lambda,
        teacher_val_auc: teacher_auc,
        pretrain_skipped,
        pretrain_best_val_loss: pretrain_loss,
        alpha,
        final_val_auc,
        encoder: sard_cfg.encoder,
        head: sard_cfg.head,
    };
    let summary_file = if flags.no_rd { "train_summary_nord.json" } else { "train_summary.json" };
    fs::write(cfg.out_dir.join(summary_file), serde_json::to_string_pretty(&summary)?)?;
    write_manifest(cfg, "train")
}

fn teacher_scores(teacher: &LinearModel, cohort: &Cohort) -> Result<Vec<f64>> {
    cohort
        .records
        .iter()
        .map(|rec| {
            let fv = featurize(rec, &teacher.window_set, &cohort.vocab, cohort.prediction_day)?;
            Ok(predict_linear(teacher, &fv)?)
        })
        .collect()
}

fn logit(p: f64) -> f64 {
    let cp = clamp_prob(p);
    (cp / (1.0 - cp)).ln()
}

pub fn cmd_report(cfg: &ExperimentConfig) -> Result<()> {
    ensure_out_dir(cfg)?;
    let (_train, _val, test) = load_splits(cfg)?;
    let report_dir = cfg.out_dir.join("report");
    fs::create_dir_all(&report_dir)?;

    let teacher_path = cfg.out_dir.join("teacher.json");
    if !teacher_path.exists() {
        bail!("{} not found; run `sard train` first", teacher_path.display());
    }
    let teacher = LinearModel::from_json(&fs::read_to_string(&teacher_path)?)?;

    // every model that exists becomes a row
    let mut models: Vec<(String, Vec<f64>)> = Vec::new();
    models.push(("teacher".into(), teacher_scores(&teacher, &test)?));
    let mut deep_models: Vec<(String, SardModel)> = Vec::new();
    for (name, file) in [("sard_rd", "sard_rd.json"), ("sard_pretrained", "sard_pretrained.json"), ("sard_nord", "sard_nord.json")] {
        let path = cfg.out_dir.join(file);
        if path.exists() {
            let model = SardModel::load(&path)?;
            let packed = PackedCohort::build(&test, &model, None)?;
            models.push((name.into(), predict_packed(&model, &packed)?));
            deep_models.push((name.into(), model));
        }
    }

    let labels = test.labels();
    let prevalence = labels.iter().filter(|&&l| l == 1).count() as f64 / labels.len() as f64;

    // headline metric table
    let mut table = MetricReport::default();
    for (name, scores) in &models {
        let set = ScoredSet::new(scores.clone(), labels.clone())?;
        table.push(MetricEntry {
            name: format!("{name}.auc_roc"),
            value: auc_roc(&set)?,
            n: labels.len(),
            prevalence: Some(prevalence),
            threshold: None,
        });
        table.push(MetricEntry {
            name: format!("{name}.auc_prc"),
            value: auc_prc(&set)?,
            n: labels.len(),
            prevalence: Some(prevalence),
            threshold: None,
        });
    }
    fs::write(report_dir.join("metrics.csv"), table.to_csv())?;
    fs::write(report_dir.join("metrics.json"), serde_json::to_string_pretty(&table)?)?;

    // pairwise DeLong tests, self-pairs included
    let mut delong_csv = String::from("model_a,model_b,auc_a,auc_b,z,p\n");
    for (name_a, scores_a) in &models {
        for (name_b, scores_b) in &models {
            let r = delong_test(scores_a, scores_b, &labels)?;
            delong_csv.push_str(&format!(
                "{name_a},{name_b},{},{},{},{}\n",
                r.auc_a, r.auc_b, r.z, r.p
            ));
        }
    }
    fs::write(report_dir.join("delong.csv"), delong_csv)?;

    // PPV at sensitivity 0.5 per subgroup tag with at least 10 positives
    let mut tags: Vec<String> = test
        .records
        .iter()
        .flat_map(|r| r.subgroups.iter().cloned())
        .collect();
    tags.sort();
    tags.dedup();
    let mut ppv_csv = String::from("subgroup,n,positives,model,ppv,threshold\n");
    for tag in &tags {
        let idx: Vec<usize> = (0..test.records.len())
            .filter(|&i| test.records[i].subgroups.iter().any(|t| t == tag))
            .collect();
        let positives = idx.iter().filter(|&&i| labels[i] == 1).count();
        if positives < 10 {
            continue;
        }
        for (name, scores) in &models {
            let sub_scores: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let sub_labels: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
            let set = ScoredSet::new(sub_scores, sub_labels)?;
            let (ppv, threshold) = ppv_at_sensitivity(&set, 0.5)?;
            ppv_csv.push_str(&format!(
                "{tag},{},{positives},{name},{ppv},{threshold}\n",
                idx.len()
            ));
        }
    }
    fs::write(report_dir.join("subgroup_ppv.csv"), ppv_csv)?;

    // ROC / PR curves per model
    for (name, scores) in &models {
        let roc = svg::roc_points(scores, &labels);
        fs::write(
            report_dir.join(format!("roc_{name}.svg")),
            svg::line_chart(&format!("ROC: {name}"), "fpr", "tpr", &[(name.clone(), roc)]),
        )?;
        let pr = svg::pr_points(scores, &labels);
        fs::write(
            report_dir.join(format!("pr_{name}.svg")),
            svg::line_chart(&format!("PR: {name}"), "recall", "precision", &[(name.clone(), pr)]),
        )?;
    }

    // logit scatter of each deep model against the teacher
    let teacher_test = &models[0].1;
    for (name, scores) in models.iter().skip(1) {
        let points: Vec<(f64, f64)> = teacher_test
            .iter()
            .zip(scores)
            .map(|(&t, &s)| (logit(t), logit(s)))
            .collect();
        let mut csv = String::from("teacher_logit,model_logit\n");
        for (a, b) in &points {
            csv.push_str(&format!("{a},{b}\n"));
        }
        fs::write(report_dir.join(format!("logit_scatter_{name}.csv")), csv)?;
        fs::write(
            report_dir.join(format!("logit_scatter_{name}.svg")),
            svg::scatter(
                &format!("held-out logits: teacher vs {name}"),
                "teacher logit",
                &format!("{name} logit"),
                &points,
            ),
        )?;
    }

    // dissection for conv-head deep models
    for (name, model) in &deep_models {
        if model.config.head == HeadVariant::Conv {
            let report = dissect(model, &teacher, &test, BinarizeRule::Half)?;
            fs::write(
                report_dir.join(format!("dissect_{name}.csv")),
                report.to_csv(&test, &teacher),
            )?;
        }
    }

    println!("report written under {}", report_dir.display());
    write_manifest(cfg, "report")
}

pub fn cmd_dissect(cfg: &ExperimentConfig) -> Result<()> {
    ensure_out_dir(cfg)?;
    let (_train, _val, test) = load_splits(cfg)?;
    let teacher = LinearModel::from_json(&fs::read_to_string(cfg.out_dir.join("teacher.json"))?)?;
    let dissect_dir = cfg.out_dir.join("dissect");
    fs::create_dir_all(&dissect_dir)?;
    let mut any = false;
    for (name, file) in [("sard_rd", "sard_rd.json"), ("sard_pretrained", "sard_pretrained.json"), ("sard_nord", "sard_nord.json")] {
        let path = cfg.out_dir.join(file);
        if !path.exists() {
            continue;
        }
        let model = SardModel::load(&path)?;
        if model.config.head != HeadVariant::Conv {
            continue;
        }
        let report = dissect(&model, &teacher, &test, BinarizeRule::Half)?;
        fs::write(dissect_dir.join(format!("{name}.csv")), report.to_csv(&test, &teacher))?;
        println!(
            "{name}: {} of {} non-zero teacher features matched ({:.0}%)",
            report.unique_matched,
            report.teacher_nonzero,
            100.0 * report.matched_fraction()
        );
        any = true;
    }
    if !any {
        bail!("no convolutional-head checkpoints found; run `sard train` first");
    }
    write_manifest(cfg, "dissect")
}

pub fn cmd_lemma(cfg: &ExperimentConfig) -> Result<()> {
    ensure_out_dir(cfg)?;
    let Some(lemma) = &cfg.lemma else {
        bail!("config has no [lemma] section");
    };
    let lemma_dir = cfg.out_dir.join("lemma");
    fs::create_dir_all(&lemma_dir)?;

    let vocab = sard_core::corpus::CodeVocab::new(
        (0..lemma.vocab_size).map(|i| format!("c{i}")).collect(),
    )?;
    let window_set = cfg
        .claims
        .as_ref()
        .map(|c| sard_core::linear::WindowSet::new(c.planted_windows.clone()))
        .transpose()?
        .unwrap_or(sard_core::linear::WindowSet::new(cfg.windows.candidates.clone())?);
    let teacher = planted_teacher(lemma.vocab_size, window_set, &lemma.weights, lemma.intercept);
    let cohort = lemma_eval_cohort(
        lemma.n_patients,
        &vocab,
        &teacher,
        lemma.span_days,
        lemma.boundary_gap_days,
        lemma.mean_visits,
        cfg.seeds.data,
    )?;
    let n_v = cohort.records.iter().map(|r| r.visits.len()).max().unwrap_or(1);

    let rows = replication_sweep(
        &teacher,
        &cohort,
        &lemma.n_freqs,
        lemma.sharpness,
        n_v,
        lemma.period_days,
    )?;
    fs::write(lemma_dir.join("sweep.csv"), sweep_to_csv(&rows))?;
    let series = vec![
        (
            "max_err".to_string(),
            rows.iter().map(|r| (r.n_freq as f64, r.max_err)).collect(),
        ),
        (
            "mean_err".to_string(),
            rows.iter().map(|r| (r.n_freq as f64, r.mean_err)).collect(),
        ),
    ];
    fs::write(
        lemma_dir.join("sweep.svg"),
        svg::line_chart("replication error vs harmonic count", "n_freq", "error", &series),
    )?;

    let &n_freq = lemma.n_freqs.iter().max().expect("non-empty n_freqs");
    let params = LemmaParams { sharpness: lemma.sharpness, ..LemmaParams::with_n_freq(n_freq) };
    let sard = construct_replicating_sard(&teacher, &vocab, lemma.period_days, n_v, &params)?;
    let stats = replication_error(&sard, &teacher, &cohort)?;
    fs::write(lemma_dir.join("replication.json"), serde_json::to_string_pretty(&stats)?)?;
    sard.save(&lemma_dir.join("constructed_model.json"))?;
    println!(
        "replication at n_freq={n_freq}: max |dp| {:.3e}, spearman {:.6}",
        stats.max_abs_dp, stats.spearman_logits
    );
    write_manifest(cfg, "lemma")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Gamma,
    Beta,
    N,
}

impl std::str::FromStr for SweepParam {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gamma" => Ok(Self::Gamma),
            "beta" => Ok(Self::Beta),
            "n" => Ok(Self::N),
            other => bail!("unknown sweep parameter `{other}` (expected gamma|beta|n)"),
        }
    }
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn cmd_sweep(cfg: &ExperimentConfig, param: SweepParam, values: &[f64]) -> Result<()> {
    ensure_out_dir(cfg)?;
    let Some(cluster) = &cfg.cluster else {
        bail!("config has no [cluster] section");
    };
    if values.is_empty() {
        bail!("no sweep values given");
    }
    let sweep_dir = cfg.out_dir.join("sweep");
    fs::create_dir_all(&sweep_dir)?;
    let proc_cfg = cluster.procedure_config();

    let mut per_seed_csv = String::from(
        "param,value,seed,reverse_distill,standard_nn,feature_select_l1,feature_select_oracle,teacher_test_auc\n",
    );
    let mut medians: Vec<(f64, [f64; 4])> = Vec::new();
    let param_name = match param {
        SweepParam::Gamma => "gamma",
        SweepParam::Beta => "beta",
        SweepParam::N => "n",
    };
    for &value in values {
        let mut params = cluster.params();
        match param {
            SweepParam::Gamma => params.gamma = value,
            SweepParam::Beta => params.beta = value,
            SweepParam::N => params.n_samples = value as usize,
        }
        params.validate()?;
        let results: Vec<(u64, BenchResult)> = (0..cluster.n_seeds as u64)
            .collect::<Vec<_>>()
            .par_iter()
            .map(|&seed| -> Result<(u64, BenchResult)> {
                let ds = gen_cluster_dataset(&params, cfg.seeds.data.wrapping_add(seed))?;
                let r = run_procedures(&ds, &proc_cfg, cfg.seeds.train.wrapping_add(seed))?;
                Ok((seed, r))
            })
            .collect::<Result<Vec<_>>>()?;
        for (seed, r) in &results {
            per_seed_csv.push_str(&format!(
                "{param_name},{value},{seed},{},{},{},{}\n",
                r.reverse_distill, r.standard_nn, r.feature_select_l1, r.feature_select_oracle
            ));
        }
        medians.push((
            value,
            [
                median(results.iter().map(|(_, r)| r.reverse_distill).collect()),
                median(results.iter().map(|(_, r)| r.standard_nn).collect()),
                median(results.iter().map(|(_, r)| r.feature_select_l1).collect()),
                median(results.iter().map(|(_, r)| r.feature_select_oracle).collect()),
            ],
        ));
        let last = medians.last().unwrap();
        println!(
            "{param_name}={value}: median rd={:.4} std={:.4} fs={:.4} oracle={:.4}",
            last.1[0], last.1[1], last.1[2], last.1[3]
        );
    }
    fs::write(sweep_dir.join(format!("{param_name}_per_seed.csv")), per_seed_csv)?;

    let mut median_csv = format!(
        "{param_name},reverse_distill,standard_nn,feature_select_l1,feature_select_oracle\n"
    );
    for (v, m) in &medians {
        median_csv.push_str(&format!("{v},{},{},{},{}\n", m[0], m[1], m[2], m[3]));
    }
    fs::write(sweep_dir.join(format!("{param_name}_medians.csv")), median_csv)?;

    let names = ["reverse_distill", "standard_nn", "feature_select_l1", "feature_select_oracle"];
    let series: Vec<(String, Vec<(f64, f64)>)> = names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            (name.to_string(), medians.iter().map(|(v, m)| (*v, m[i])).collect())
        })
        .collect();
    fs::write(
        sweep_dir.join(format!("{param_name}_medians.svg")),
        svg::line_chart(
            &format!("median test AUC vs {param_name}"),
            param_name,
            "median test AUC",
            &series,
        ),
    )?;
    write_manifest(cfg, "sweep")
}
