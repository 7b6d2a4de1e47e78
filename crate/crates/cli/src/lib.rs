//! Command implementations behind the `softcbm` binary.
//!
//! Each command resolves its configuration the same way: built-in defaults,
//! then the SOFTCBM_SEED environment variable, then the `--config` file,
//! then explicit flags and `--opt key=value` overrides. Commands that read
//! a finished run take `--run` and recover the model architecture from the
//! checkpoint manifest, so only the data location and seed have to match
//! the original invocation.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use softcbm_core::cohort::{self, Cohort, CohortParams};
use softcbm_core::concept::{self, Selection};
use softcbm_core::config::{resolve_config, ExperimentConfig};
use softcbm_core::infer;
use softcbm_core::metrics::metric_cell;
use softcbm_core::model::{self, BottleneckModel};
use softcbm_core::report::{self, MetricsReport, RunReport};
use softcbm_core::seed::{self, tag};
use softcbm_core::split;
use softcbm_core::train::{self, EpochRecord};
use softcbm_core::volume::{self, Volume};
use softcbm_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "softcbm",
    version,
    about = "Concept bottleneck training on synthetic 3D vascular cohorts"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    /// Config file of key = value lines.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override any config key (repeatable), e.g. --opt alpha=0.1
    #[arg(long = "opt", value_name = "KEY=VALUE")]
    pub opts: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Cohort directory.
    #[arg(long, value_name = "DIR")]
    pub data_dir: Option<PathBuf>,
    /// Where run artifacts go.
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    /// resnet34_3d or densenet121_3d.
    #[arg(long)]
    pub backbone: Option<String>,
    #[arg(long)]
    pub width_scale: Option<f64>,
    #[arg(long)]
    pub n_concepts: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Parallel fold workers.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Drop concept names that give the label away (true/false).
    #[arg(long, value_name = "BOOL")]
    pub leakage_filter: Option<bool>,
    #[arg(long)]
    pub tta_passes: Option<usize>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut overrides: Vec<(String, String)> = Vec::new();
        for raw in &self.opts {
            let (k, v) = raw.split_once('=').ok_or_else(|| {
                Error::validation(format!("--opt wants KEY=VALUE, got '{raw}'"))
            })?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                overrides.push((k.to_string(), v));
            }
        };
        push("seed", self.seed.map(|v| v.to_string()));
        push(
            "data_dir",
            self.data_dir.as_ref().map(|p| p.display().to_string()),
        );
        push(
            "out_dir",
            self.out_dir.as_ref().map(|p| p.display().to_string()),
        );
        push("backbone", self.backbone.clone());
        push("width_scale", self.width_scale.map(|v| v.to_string()));
        push("n_concepts", self.n_concepts.map(|v| v.to_string()));
        push("folds", self.folds.map(|v| v.to_string()));
        push("epochs", self.epochs.map(|v| v.to_string()));
        push("batch_size", self.batch_size.map(|v| v.to_string()));
        push("jobs", self.jobs.map(|v| v.to_string()));
        push("leakage_filter", self.leakage_filter.map(|v| v.to_string()));
        push("tta_passes", self.tta_passes.map(|v| v.to_string()));
        let env_seed = std::env::var("SOFTCBM_SEED").ok();
        resolve_config(self.config.as_deref(), env_seed.as_deref(), &overrides)
    }
}

fn parse_range(s: &str) -> std::result::Result<(f64, f64), String> {
    let (lo, hi) = s
        .split_once(',')
        .ok_or_else(|| format!("expected LO,HI, got '{s}'"))?;
    let lo: f64 = lo.trim().parse().map_err(|_| format!("bad number '{lo}'"))?;
    let hi: f64 = hi.trim().parse().map_err(|_| format!("bad number '{hi}'"))?;
    Ok((lo, hi))
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Directory to create the cohort in.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 92)]
    pub patients: usize,
    #[arg(long, default_value_t = 44)]
    pub controls: usize,
    /// Cubic grid edge in voxels.
    #[arg(long, default_value_t = 96)]
    pub grid: usize,
    /// Tube radius range in voxels, as LO,HI.
    #[arg(long, value_parser = parse_range, default_value = "3.0,5.0")]
    pub tube_radius: (f64, f64),
    /// Bulge diameter factor range, as LO,HI.
    #[arg(long, value_parser = parse_range, default_value = "1.6,2.4")]
    pub bulge_factor: (f64, f64),
    #[arg(long, default_value_t = 0.01)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 5)]
    pub control_points: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic vascular cohort.
    Generate(GenerateArgs),
    /// Write the stratified fold plan for a cohort.
    Split {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a single fold.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        fold: usize,
    },
    /// Run the full cross-validation and write all artifacts.
    Crossval {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score one fold's held-out subjects from its checkpoint.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// A finished run directory.
        #[arg(long, value_name = "DIR")]
        run: PathBuf,
        #[arg(long)]
        fold: usize,
        /// Average predictions over augmented passes.
        #[arg(long)]
        tta: bool,
    },
    /// Augmentation-averaged scoring of one fold (evaluate --tta).
    Tta {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        run: PathBuf,
        #[arg(long)]
        fold: usize,
        /// Override the configured number of passes.
        #[arg(long)]
        passes: Option<usize>,
    },
    /// Replace concept activations for one subject and rescore it.
    Intervene {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        run: PathBuf,
        #[arg(long)]
        fold: usize,
        /// Subject id from the cohort manifest.
        #[arg(long)]
        subject: String,
        /// Concept edit as NAME=RAW_VALUE (repeatable).
        #[arg(long = "set", value_name = "NAME=VALUE", required = true)]
        sets: Vec<String>,
    },
    /// Re-render tables and summary from a run's run_report.json.
    Report {
        #[arg(long, value_name = "DIR")]
        run: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(args) => generate(args),
        Command::Split { cfg } => split_cmd(&cfg.resolve()?),
        Command::Train { cfg, fold } => train_cmd(&cfg.resolve()?, fold),
        Command::Crossval { cfg } => crossval(&cfg.resolve()?),
        Command::Evaluate {
            cfg,
            run,
            fold,
            tta,
        } => {
            let cfg = cfg.resolve()?;
            let passes = if tta { cfg.tta_passes } else { 0 };
            evaluate(&cfg, &run, fold, passes)
        }
        Command::Tta {
            cfg,
            run,
            fold,
            passes,
        } => {
            let cfg = cfg.resolve()?;
            let passes = passes.unwrap_or(cfg.tta_passes).max(1);
            evaluate(&cfg, &run, fold, passes)
        }
        Command::Intervene {
            cfg,
            run,
            fold,
            subject,
            sets,
        } => intervene(&cfg.resolve()?, &run, fold, &subject, &sets),
        Command::Report { run } => report_cmd(&run),
    }
}

fn generate(args: GenerateArgs) -> Result<()> {
    let params = CohortParams {
        n_patients: args.patients,
        n_controls: args.controls,
        grid: [args.grid; 3],
        tube_radius: args.tube_radius,
        bulge_factor: args.bulge_factor,
        noise_sigma: args.noise_sigma,
        control_points: args.control_points,
        seed: args.seed,
    };
    let cohort = cohort::generate_cohort(&params, &args.out)?;
    println!(
        "generated {} subjects ({} patients, {} controls) at {}",
        cohort.records.len(),
        cohort.n_patients(),
        cohort.n_controls(),
        args.out.display()
    );
    println!(
        "grid {}^3, {} concept columns",
        args.grid,
        cohort.concept_names.len()
    );
    Ok(())
}

fn split_cmd(cfg: &ExperimentConfig) -> Result<()> {
    let cohort = cohort::load_cohort(&cfg.data_dir)?;
    let labels: Vec<u8> = cohort.records.iter().map(|r| r.label).collect();
    let assignment = split::stratified_kfold(&labels, cfg.folds, cfg.seed)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let path = cfg.out_dir.join(split::FOLDPLAN_NAME);
    split::save_foldplan(&path, &cohort, &assignment, cfg.folds)?;
    report::write_manifest(&cfg.out_dir, "split", cfg)?;
    for (fold, (_, val)) in split::fold_membership(&assignment, cfg.folds)
        .iter()
        .enumerate()
    {
        let positives = val.iter().filter(|&&i| labels[i] != 0).count();
        println!(
            "fold {fold}: {} val subjects ({} patients, {} controls)",
            val.len(),
            positives,
            val.len() - positives
        );
    }
    println!("fold plan written to {}", path.display());
    Ok(())
}

fn print_epoch(fold: usize, e: &EpochRecord) {
    println!(
        "fold {fold} epoch {:>3}: train {:.4} val {:.4} acc {:.3}/{:.3} lr {} {}",
        e.epoch,
        e.train_total,
        e.val_total,
        e.train_acc,
        e.val_acc,
        e.head_lr,
        if e.encoder_frozen {
            "(encoder frozen)"
        } else {
            ""
        }
    );
}

fn train_cmd(cfg: &ExperimentConfig, fold: usize) -> Result<()> {
    if fold >= cfg.folds {
        return Err(Error::validation(format!(
            "fold {fold} out of range for {} folds",
            cfg.folds
        )));
    }
    let cohort = cohort::load_cohort(&cfg.data_dir)?;
    let labels: Vec<u8> = cohort.records.iter().map(|r| r.label).collect();
    let assignment = split::stratified_kfold(&labels, cfg.folds, cfg.seed)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    split::save_foldplan(
        &cfg.out_dir.join(split::FOLDPLAN_NAME),
        &cohort,
        &assignment,
        cfg.folds,
    )?;
    report::write_manifest(&cfg.out_dir, "train", cfg)?;

    let memberships = split::fold_membership(&assignment, cfg.folds);
    let (train_indices, val_indices) = &memberships[fold];
    let selection =
        concept::select_concepts(&cohort, train_indices, cfg.n_concepts, cfg.leakage_filter)?;
    concept::save_selection(
        &cfg.out_dir.join(format!("fold{fold}_selection.txt")),
        &selection,
    )?;
    let fold_seed = seed::derive(cfg.seed, &[tag("fold"), fold as u64]);
    let items =
        split::oversample_controls(train_indices, &labels, cfg.oversample_target, fold_seed);
    let volumes = train::load_normalized_volumes(&cohort)?;
    let trained = train::train_fold(
        &cohort,
        &volumes,
        &items,
        val_indices,
        &selection,
        cfg,
        fold_seed,
        &cfg.out_dir.join(format!("fold{fold}")),
    )?;
    for e in &trained.epochs {
        print_epoch(fold, e);
    }
    std::fs::write(
        cfg.out_dir.join(format!("fold{fold}_epochs.csv")),
        report::epochs_csv(&trained.epochs),
    )
    .map_err(|e| Error::io(&cfg.out_dir, e))?;

    let val_labels: Vec<u8> = val_indices.iter().map(|&i| labels[i]).collect();
    let m = MetricsReport::from_probs(&trained.val_probs, &val_labels);
    println!(
        "fold {fold}: best epoch {}, val acc {}, auc {}",
        trained.best_epoch,
        metric_cell(m.accuracy),
        metric_cell(m.auc)
    );
    println!(
        "checkpoint at {}",
        trained.checkpoint_stem.with_extension("ckptmf").display()
    );
    Ok(())
}

fn crossval(cfg: &ExperimentConfig) -> Result<()> {
    let cohort = cohort::load_cohort(&cfg.data_dir)?;
    report::write_manifest(&cfg.out_dir, "crossval", cfg)?;
    let cv = train::cross_validate(&cohort, cfg, &cfg.out_dir)?;
    let volumes = train::load_normalized_volumes(&cohort)?;
    let run_report = report::build_run_report(&cohort, cfg, &cv, &volumes, cfg.tta_passes)?;
    report::write_run_artifacts(&cfg.out_dir, &run_report)?;
    print!("{}", report::render_summary(&run_report));
    println!("artifacts written to {}", cfg.out_dir.display());
    Ok(())
}

struct FoldHandle {
    cohort: Cohort,
    selection: Selection,
    model: BottleneckModel<f32>,
    val_indices: Vec<usize>,
}

/// Load everything needed to rescore one fold of a finished run.
fn open_fold(cfg: &ExperimentConfig, run: &Path, fold: usize) -> Result<FoldHandle> {
    let cohort = cohort::load_cohort(&cfg.data_dir)?;
    let (assignment, k) = split::load_foldplan(&run.join(split::FOLDPLAN_NAME), &cohort)?;
    if fold >= k {
        return Err(Error::validation(format!(
            "fold {fold} out of range for {k} folds"
        )));
    }
    let selection = concept::load_selection(&run.join(format!("fold{fold}_selection.txt")), &cohort)?;
    let stem = run.join(format!("fold{fold}")).join("best");
    let (kind, width, nc) = model::checkpoint_arch(&stem)?;
    if nc != selection.len() {
        return Err(Error::validation(format!(
            "checkpoint has {nc} concepts but the selection file lists {}",
            selection.len()
        )));
    }
    let mut rng = seed::stream(0, &[tag("cli-model")]);
    let mut m: BottleneckModel<f32> = BottleneckModel::new(kind, width, nc, 0.0, &mut rng)?;
    model::load_checkpoint(&stem, &mut m, true)?;
    let val_indices: Vec<usize> = assignment
        .iter()
        .enumerate()
        .filter(|&(_, &f)| f == fold)
        .map(|(i, _)| i)
        .collect();
    Ok(FoldHandle {
        cohort,
        selection,
        model: m,
        val_indices,
    })
}

fn load_normalized(cohort: &Cohort, index: usize) -> Result<Volume> {
    let v = cohort.load_volume(&cohort.records[index])?;
    volume::normalize_intensity(&v)
}

fn evaluate(cfg: &ExperimentConfig, run: &Path, fold: usize, tta_passes: usize) -> Result<()> {
    let h = open_fold(cfg, run, fold)?;
    let volumes: Vec<Volume> = h
        .val_indices
        .iter()
        .map(|&i| load_normalized(&h.cohort, i))
        .collect::<Result<_>>()?;
    let refs: Vec<&Volume> = volumes.iter().collect();
    let labels: Vec<u8> = h
        .val_indices
        .iter()
        .map(|&i| h.cohort.records[i].label)
        .collect();

    let (mode, probs) = if tta_passes > 0 {
        let fold_seed = seed::derive(cfg.seed, &[tag("fold"), fold as u64]);
        (
            format!("averaged over {tta_passes} passes"),
            infer::predict_tta(&h.model, &refs, tta_passes, fold_seed, cfg.jobs)?,
        )
    } else {
        (
            "single pass".to_string(),
            infer::predict_probs(&h.model, &refs, cfg.batch_size)?,
        )
    };

    let m = MetricsReport::from_probs(&probs, &labels);
    println!("fold {fold}, {} val subjects, {mode}", labels.len());
    println!(
        "tp {} fn {} fp {} tn {}",
        m.true_pos, m.false_neg, m.false_pos, m.true_neg
    );
    println!("accuracy    {}", metric_cell(m.accuracy));
    println!("sensitivity {}", metric_cell(m.sensitivity));
    println!("specificity {}", metric_cell(m.specificity));
    println!("auc         {}", metric_cell(m.auc));
    Ok(())
}

fn intervene(
    cfg: &ExperimentConfig,
    run: &Path,
    fold: usize,
    subject: &str,
    sets: &[String],
) -> Result<()> {
    let h = open_fold(cfg, run, fold)?;
    let index = h
        .cohort
        .records
        .iter()
        .position(|r| r.subject_id == subject)
        .ok_or_else(|| Error::validation(format!("subject '{subject}' not in the cohort")))?;
    let mut edits = Vec::new();
    for raw in sets {
        let (name, value) = raw.split_once('=').ok_or_else(|| {
            Error::validation(format!("--set wants NAME=VALUE, got '{raw}'"))
        })?;
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| Error::validation(format!("bad value in '{raw}'")))?;
        edits.push((name.trim().to_string(), value));
    }
    let volume = load_normalized(&h.cohort, index)?;
    let out = infer::intervene(&h.model, &h.selection, &volume, &edits)?;

    let record = &h.cohort.records[index];
    println!("subject {subject} (label {})", record.label);
    println!("baseline prob {}", out.baseline_prob);
    println!("edited prob   {}", out.edited_prob);
    for (name, _) in &edits {
        let slot = h.selection.slot_of(name).expect("validated above");
        println!(
            "concept {name}: predicted {} -> set {}",
            out.predicted_concepts[slot], out.edited_concepts[slot]
        );
    }
    Ok(())
}

fn report_cmd(run: &Path) -> Result<()> {
    let path = run.join("run_report.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let parsed: RunReport = serde_json::from_str(&text)
        .map_err(|e| Error::format(&path, format!("not a run report: {e}")))?;
    report::write_run_artifacts(run, &parsed)?;
    print!("{}", report::render_summary(&parsed));
    println!("artifacts rewritten at {}", run.display());
    Ok(())
}
