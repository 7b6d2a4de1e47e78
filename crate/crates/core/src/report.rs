//! Run artifacts: a machine-readable JSON report, CSV tables per fold, an
//! aggregate table, and a plain-text summary.
//!
//! Everything except the command manifests is a pure function of the run's
//! results, with no timestamps or absolute paths, so the same seed and
//! configuration produce byte-identical files. Floats render with the
//! shortest round-trip form; absent metrics render as "na".

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cohort::Cohort;
use crate::config::{parse_config_text, ExperimentConfig};
use crate::error::{Error, Result};
use crate::infer;
use crate::metrics::{self, metric_cell};
use crate::model::{self, BottleneckModel};
use crate::train::{CrossValResult, EpochRecord};
use crate::volume::Volume;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub true_pos: usize,
    pub false_neg: usize,
    pub false_pos: usize,
    pub true_neg: usize,
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub auc: Option<f64>,
}

impl MetricsReport {
    pub fn from_probs(probs: &[f64], labels: &[u8]) -> Self {
        let m = metrics::compute_metrics(probs, labels);
        MetricsReport {
            true_pos: m.counts.true_pos,
            false_neg: m.counts.false_neg,
            false_pos: m.counts.false_pos,
            true_neg: m.counts.true_neg,
            accuracy: m.accuracy,
            sensitivity: m.sensitivity,
            specificity: m.specificity,
            auc: m.auc,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub best_epoch: usize,
    /// Train accuracy at the best epoch, for the generalization-gap audit.
    pub train_acc: f64,
    pub selected_concepts: Vec<String>,
    pub stump_concept: String,
    /// None when the best stump degenerated to a majority-class cut.
    pub stump_threshold: Option<f64>,
    pub stump_train_acc: f64,
    pub stump_val_acc: f64,
    pub val_subjects: Vec<String>,
    pub val_labels: Vec<u8>,
    pub val_probs: Vec<f64>,
    pub val_probs_tta: Option<Vec<f64>>,
    pub single: MetricsReport,
    pub tta: Option<MetricsReport>,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateReport {
    pub mean_val_acc: f64,
    pub std_val_acc: f64,
    pub best_fold_acc: f64,
    pub mean_val_loss: f64,
    pub mean_val_acc_tta: Option<f64>,
    pub std_val_acc_tta: Option<f64>,
    pub best_fold_acc_tta: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub config: BTreeMap<String, String>,
    pub n_patients: usize,
    pub n_controls: usize,
    pub folds: Vec<FoldReport>,
    pub aggregate: AggregateReport,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// "93.18% ± 2.3%"
pub fn percent_pair(mean_value: f64, std_value: f64) -> String {
    format!("{:.2}% ± {:.1}%", mean_value * 100.0, std_value * 100.0)
}

/// Assemble the full report for a finished cross-validation run. With
/// `tta_passes > 0` each fold's best checkpoint is reloaded and the held-out
/// subjects are rescored with augmentation averaging.
pub fn build_run_report(
    cohort: &Cohort,
    cfg: &ExperimentConfig,
    cv: &CrossValResult,
    volumes: &[Volume],
    tta_passes: usize,
) -> Result<RunReport> {
    let mut folds = Vec::with_capacity(cv.folds.len());
    for fr in &cv.folds {
        let best = &fr.trained.epochs[fr.trained.best_epoch];
        let single = MetricsReport::from_probs(&fr.trained.val_probs, &fr.val_labels);

        let (val_probs_tta, tta) = if tta_passes > 0 {
            let mut rng = crate::seed::stream(cfg.seed, &[crate::seed::tag("report-reload")]);
            let mut model: BottleneckModel<f32> = BottleneckModel::new(
                cfg.backbone,
                cfg.width_scale,
                fr.selection.len(),
                cfg.dropout,
                &mut rng,
            )?;
            model::load_checkpoint(&fr.trained.checkpoint_stem, &mut model, true)?;
            let refs: Vec<&Volume> = fr.val_indices.iter().map(|&i| &volumes[i]).collect();
            let fold_seed = crate::seed::derive(cfg.seed, &[crate::seed::tag("fold"), fr.fold as u64]);
            let probs = infer::predict_tta(&model, &refs, tta_passes, fold_seed, cfg.jobs)?;
            let m = MetricsReport::from_probs(&probs, &fr.val_labels);
            (Some(probs), Some(m))
        } else {
            (None, None)
        };

        let stump_concept = fr.selection.concepts[fr.stump.slot].name.clone();
        folds.push(FoldReport {
            fold: fr.fold,
            best_epoch: fr.trained.best_epoch,
            train_acc: best.train_acc,
            selected_concepts: fr
                .selection
                .concepts
                .iter()
                .map(|c| c.name.clone())
                .collect(),
            stump_concept,
            stump_threshold: fr.stump.threshold.is_finite().then_some(fr.stump.threshold),
            stump_train_acc: fr.stump.train_acc,
            stump_val_acc: fr.stump.val_acc,
            val_subjects: fr
                .val_indices
                .iter()
                .map(|&i| cohort.records[i].subject_id.clone())
                .collect(),
            val_labels: fr.val_labels.clone(),
            val_probs: fr.trained.val_probs.clone(),
            val_probs_tta,
            single,
            tta,
            epochs: fr.trained.epochs.clone(),
        });
    }

    let accs: Vec<f64> = folds
        .iter()
        .map(|f| f.single.accuracy.unwrap_or(0.0))
        .collect();
    let losses: Vec<f64> = folds
        .iter()
        .map(|f| f.epochs[f.best_epoch].val_total)
        .collect();
    let tta_accs: Vec<f64> = folds
        .iter()
        .filter_map(|f| f.tta.as_ref().and_then(|m| m.accuracy))
        .collect();
    let has_tta = tta_accs.len() == folds.len() && !folds.is_empty();
    let aggregate = AggregateReport {
        mean_val_acc: mean(&accs),
        std_val_acc: std_dev(&accs),
        best_fold_acc: accs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        mean_val_loss: mean(&losses),
        mean_val_acc_tta: has_tta.then(|| mean(&tta_accs)),
        std_val_acc_tta: has_tta.then(|| std_dev(&tta_accs)),
        best_fold_acc_tta: has_tta
            .then(|| tta_accs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)),
    };

    let config: BTreeMap<String, String> = parse_config_text(&cfg.to_kv_lines())
        .expect("own kv lines parse")
        .into_iter()
        .collect();

    Ok(RunReport {
        config,
        n_patients: cohort.n_patients(),
        n_controls: cohort.n_controls(),
        folds,
        aggregate,
    })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Per-epoch training curve as CSV.
pub fn epochs_csv(epochs: &[EpochRecord]) -> String {
    let mut s = String::from(
        "epoch,train_task,train_concept,train_total,val_task,val_concept,val_total,train_acc,val_acc,head_lr,encoder_lr,encoder_frozen\n",
    );
    for e in epochs {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            e.epoch,
            e.train_task,
            e.train_concept,
            e.train_total,
            e.val_task,
            e.val_concept,
            e.val_total,
            e.train_acc,
            e.val_acc,
            e.head_lr,
            metric_cell(e.encoder_lr),
            e.encoder_frozen,
        );
    }
    s
}

fn confusion_row(mode: &str, m: &MetricsReport) -> String {
    format!(
        "{mode},{},{},{},{},{},{},{},{}\n",
        m.true_pos,
        m.false_neg,
        m.false_pos,
        m.true_neg,
        metric_cell(m.accuracy),
        metric_cell(m.sensitivity),
        metric_cell(m.specificity),
        metric_cell(m.auc),
    )
}

/// Write run_report.json, aggregate.csv, summary.txt and the per-fold
/// epoch/roc/confusion tables under `out_dir`.
pub fn write_run_artifacts(out_dir: &Path, report: &RunReport) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::numeric(format!("report serialization: {e}")))?;
    write_file(&out_dir.join("run_report.json"), &(json + "\n"))?;

    // aggregate.csv
    let backbone = report
        .config
        .get("backbone")
        .cloned()
        .unwrap_or_else(|| "unknown".to_string());
    let mut agg = String::from("backbone,mean_val_acc,best_fold_acc,mean_val_loss,strategy\n");
    let a = &report.aggregate;
    let _ = writeln!(
        agg,
        "{backbone},{},{:.2}%,{:.4},single",
        percent_pair(a.mean_val_acc, a.std_val_acc),
        a.best_fold_acc * 100.0,
        a.mean_val_loss,
    );
    if let (Some(m), Some(s), Some(b)) =
        (a.mean_val_acc_tta, a.std_val_acc_tta, a.best_fold_acc_tta)
    {
        let _ = writeln!(
            agg,
            "{backbone},{},{:.2}%,{:.4},tta",
            percent_pair(m, s),
            b * 100.0,
            a.mean_val_loss,
        );
    }
    write_file(&out_dir.join("aggregate.csv"), &agg)?;

    for f in &report.folds {
        write_file(
            &out_dir.join(format!("fold{}_epochs.csv", f.fold)),
            &epochs_csv(&f.epochs),
        )?;

        let mut roc = String::from("threshold,fpr,tpr\n");
        for (t, fpr, tpr) in metrics::roc_points(&f.val_probs, &f.val_labels) {
            let _ = writeln!(roc, "{t},{fpr},{tpr}");
        }
        write_file(&out_dir.join(format!("fold{}_roc.csv", f.fold)), &roc)?;

        let mut confusion =
            String::from("mode,tp,fn,fp,tn,accuracy,sensitivity,specificity,auc\n");
        confusion.push_str(&confusion_row("single", &f.single));
        if let Some(t) = &f.tta {
            confusion.push_str(&confusion_row("tta", t));
        }
        write_file(
            &out_dir.join(format!("fold{}_confusion.csv", f.fold)),
            &confusion,
        )?;
    }

    write_file(&out_dir.join("summary.txt"), &render_summary(report))
}

/// Human-readable run summary. Deliberately timestamp-free: rerunning the
/// same configuration must reproduce this file byte for byte.
pub fn render_summary(report: &RunReport) -> String {
    let mut s = String::new();
    let cfg = &report.config;
    let get = |k: &str| cfg.get(k).map(String::as_str).unwrap_or("?");
    let _ = writeln!(s, "cross-validation summary");
    let _ = writeln!(s, "========================");
    let _ = writeln!(
        s,
        "backbone {} (width {}), {} concepts, leakage filter {}",
        get("backbone"),
        get("width_scale"),
        get("n_concepts"),
        get("leakage_filter"),
    );
    let _ = writeln!(
        s,
        "cohort {} patients / {} controls, seed {}, {} folds, {} epochs",
        report.n_patients,
        report.n_controls,
        get("seed"),
        get("folds"),
        get("epochs"),
    );
    let _ = writeln!(s);
    for f in &report.folds {
        let _ = writeln!(
            s,
            "fold {}: best epoch {}, val acc {}, auc {}, train-val gap {}",
            f.fold,
            f.best_epoch,
            metric_cell(f.single.accuracy),
            metric_cell(f.single.auc),
            metric_cell(
                f.single
                    .accuracy
                    .map(|a| ((f.train_acc - a) * 1e12).round() / 1e12)
            ),
        );
        if let Some(t) = &f.tta {
            let _ = writeln!(
                s,
                "        averaged: val acc {}, auc {}",
                metric_cell(t.accuracy),
                metric_cell(t.auc),
            );
        }
    }
    let a = &report.aggregate;
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "mean val acc {} (best fold {:.2}%), mean val loss {:.4}",
        percent_pair(a.mean_val_acc, a.std_val_acc),
        a.best_fold_acc * 100.0,
        a.mean_val_loss,
    );
    if let (Some(m), Some(sd), Some(b)) =
        (a.mean_val_acc_tta, a.std_val_acc_tta, a.best_fold_acc_tta)
    {
        let _ = writeln!(
            s,
            "with averaging  {} (best fold {:.2}%)",
            percent_pair(m, sd),
            b * 100.0,
        );
    }
    s
}

/// Record how a command was invoked. Unlike the result artifacts this is
/// provenance, so it carries a wall-clock timestamp.
pub fn write_manifest(out_dir: &Path, command: &str, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let unix = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut text = String::new();
    let _ = writeln!(text, "command = {command}");
    let _ = writeln!(text, "timestamp_unix = {unix}");
    text.push_str(&cfg.to_kv_lines());
    write_file(&out_dir.join(format!("manifest_{command}.txt")), &text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{generate_cohort, CohortParams};
    use crate::train::{cross_validate, load_normalized_volumes};

    fn run_fixture(tta_passes: usize) -> (tempfile::TempDir, RunReport) {
        let dir = tempfile::tempdir().unwrap();
        let params = CohortParams {
            n_patients: 6,
            n_controls: 4,
            grid: [24, 24, 24],
            tube_radius: (1.5, 1.65),
            bulge_factor: (1.7, 2.2),
            noise_sigma: 0.01,
            control_points: 4,
            seed: 55,
        };
        let cohort = generate_cohort(&params, &dir.path().join("data")).unwrap();
        let out = dir.path().join("run");
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 3;
        cfg.out_dir = out.clone();
        cfg.width_scale = 0.05;
        cfg.n_concepts = 5;
        cfg.epochs = 2;
        cfg.batch_size = 4;
        cfg.freeze_epochs = 1;
        cfg.oversample_target = 0;
        cfg.folds = 2;
        let cv = cross_validate(&cohort, &cfg, &out).unwrap();
        let volumes = load_normalized_volumes(&cohort).unwrap();
        let report = build_run_report(&cohort, &cfg, &cv, &volumes, tta_passes).unwrap();
        write_run_artifacts(&out, &report).unwrap();
        (dir, report)
    }

    #[test]
    fn artifacts_are_complete_and_json_round_trips() {
        let (dir, report) = run_fixture(2);
        let out = dir.path().join("run");
        for name in [
            "run_report.json",
            "aggregate.csv",
            "summary.txt",
            "fold0_epochs.csv",
            "fold0_roc.csv",
            "fold0_confusion.csv",
            "fold1_epochs.csv",
            "fold1_roc.csv",
            "fold1_confusion.csv",
        ] {
            assert!(out.join(name).is_file(), "{name} missing");
        }
        let text = fs::read_to_string(out.join("run_report.json")).unwrap();
        let back: RunReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back.folds.len(), report.folds.len());
        assert_eq!(back.aggregate.mean_val_acc, report.aggregate.mean_val_acc);
        assert!(back.folds[0].tta.is_some());
        assert_eq!(
            back.folds[0].val_probs_tta.as_ref().unwrap().len(),
            back.folds[0].val_labels.len()
        );
    }

    #[test]
    fn aggregate_csv_has_one_row_per_strategy() {
        let (dir, _) = run_fixture(2);
        let text = fs::read_to_string(dir.path().join("run/aggregate.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "backbone,mean_val_acc,best_fold_acc,mean_val_loss,strategy"
        );
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("resnet34_3d,"));
        assert!(lines[1].ends_with(",single"));
        assert!(lines[2].ends_with(",tta"));
        assert!(lines[1].contains("% ± "));
    }

    #[test]
    fn csv_tables_parse_back() {
        let (dir, report) = run_fixture(0);
        assert!(report.folds[0].tta.is_none());
        let out = dir.path().join("run");

        let roc = fs::read_to_string(out.join("fold0_roc.csv")).unwrap();
        let mut lines = roc.lines();
        assert_eq!(lines.next(), Some("threshold,fpr,tpr"));
        let first: Vec<f64> = lines
            .next()
            .unwrap()
            .split(',')
            .map(|v| v.parse().unwrap())
            .collect();
        assert_eq!(first, vec![f64::INFINITY, 0.0, 0.0]);

        let confusion = fs::read_to_string(out.join("fold0_confusion.csv")).unwrap();
        let lines: Vec<&str> = confusion.lines().collect();
        assert_eq!(lines.len(), 2, "single row only without averaging");
        assert!(lines[1].starts_with("single,"));

        let epochs = fs::read_to_string(out.join("fold0_epochs.csv")).unwrap();
        assert_eq!(epochs.lines().count(), 1 + report.folds[0].epochs.len());
        // Frozen first epoch renders an absent encoder lr.
        assert!(epochs.lines().nth(1).unwrap().contains(",na,true"));
    }

    #[test]
    fn summary_is_stable_across_renders() {
        let (_dir, report) = run_fixture(2);
        let a = render_summary(&report);
        let b = render_summary(&report);
        assert_eq!(a, b);
        assert!(a.contains("fold 0:"));
        assert!(a.contains("mean val acc"));
        assert!(!a.to_lowercase().contains("timestamp"));
    }

    #[test]
    fn manifest_records_command_and_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::default();
        write_manifest(dir.path(), "crossval", &cfg).unwrap();
        let text = fs::read_to_string(dir.path().join("manifest_crossval.txt")).unwrap();
        assert!(text.starts_with("command = crossval\ntimestamp_unix = "));
        assert!(text.contains("\nseed = 0\n"));
        assert!(text.contains("\nbackbone = resnet34_3d\n"));
    }
}
