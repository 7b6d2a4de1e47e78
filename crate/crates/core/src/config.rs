//! Experiment configuration: a flat key=value file format plus override
//! layering. Resolution order is CLI flag over config file over the
//! SOFTCBM_SEED environment variable over built-in defaults; the caller
//! hands the env value in so this stays a pure function.

use std::fs;
use std::path::{Path, PathBuf};

use crate::backbone::BackboneKind;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub backbone: BackboneKind,
    pub width_scale: f64,
    pub n_concepts: usize,
    pub leakage_filter: bool,
    pub folds: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub smoothing: f64,
    pub base_lr: f64,
    pub unfreeze_lr: f64,
    pub freeze_epochs: usize,
    pub unfreeze_stages: Vec<String>,
    pub dropout: f64,
    pub oversample_target: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub plateau_min_lr: f64,
    pub tta_passes: usize,
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            backbone: BackboneKind::ResNet34,
            width_scale: 1.0,
            n_concepts: 26,
            leakage_filter: true,
            folds: 5,
            epochs: 25,
            batch_size: 8,
            alpha: 0.01,
            beta: 1.0,
            gamma: 2.0,
            smoothing: 0.05,
            base_lr: 1e-3,
            unfreeze_lr: 2e-5,
            freeze_epochs: 8,
            unfreeze_stages: vec!["stage3".into(), "stage4".into()],
            dropout: 0.3,
            oversample_target: 99,
            plateau_factor: 0.5,
            plateau_patience: 3,
            plateau_min_lr: 1e-6,
            tta_passes: 8,
            jobs: 1,
        }
    }
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::validation(format!("bad value '{value}' for key '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::validation(format!(
            "key '{key}' wants true or false, got '{other}'"
        ))),
    }
}

fn parse_stages(value: &str) -> Result<Vec<String>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for name in value.split(',') {
        let name = name.trim();
        if !crate::backbone::STAGE_NAMES.contains(&name) {
            return Err(Error::validation(format!(
                "unknown stage '{name}' in unfreeze_stages (expected one of {})",
                crate::backbone::STAGE_NAMES.join(", ")
            )));
        }
        out.push(name.to_string());
    }
    Ok(out)
}

impl ExperimentConfig {
    /// Apply one key=value pair. Unknown keys are an error so a typo in a
    /// config file cannot silently fall back to a default.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_as(key, value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "backbone" => self.backbone = BackboneKind::parse(value)?,
            "width_scale" => self.width_scale = parse_as(key, value)?,
            "n_concepts" => self.n_concepts = parse_as(key, value)?,
            "leakage_filter" => self.leakage_filter = parse_bool(key, value)?,
            "folds" => self.folds = parse_as(key, value)?,
            "epochs" => self.epochs = parse_as(key, value)?,
            "batch_size" => self.batch_size = parse_as(key, value)?,
            "alpha" => self.alpha = parse_as(key, value)?,
            "beta" => self.beta = parse_as(key, value)?,
            "gamma" => self.gamma = parse_as(key, value)?,
            "smoothing" => self.smoothing = parse_as(key, value)?,
            "base_lr" => self.base_lr = parse_as(key, value)?,
            "unfreeze_lr" => self.unfreeze_lr = parse_as(key, value)?,
            "freeze_epochs" => self.freeze_epochs = parse_as(key, value)?,
            "unfreeze_stages" => self.unfreeze_stages = parse_stages(value)?,
            "dropout" => self.dropout = parse_as(key, value)?,
            "oversample_target" => self.oversample_target = parse_as(key, value)?,
            "plateau_factor" => self.plateau_factor = parse_as(key, value)?,
            "plateau_patience" => self.plateau_patience = parse_as(key, value)?,
            "plateau_min_lr" => self.plateau_min_lr = parse_as(key, value)?,
            "tta_passes" => self.tta_passes = parse_as(key, value)?,
            "jobs" => self.jobs = parse_as(key, value)?,
            other => {
                return Err(Error::validation(format!("unknown config key '{other}'")))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::validation(msg.to_string()))
            }
        };
        check(
            self.width_scale > 0.0 && self.width_scale <= 4.0,
            "width_scale must be in (0, 4]",
        )?;
        check(self.n_concepts >= 1, "n_concepts must be at least 1")?;
        check(self.folds >= 2, "folds must be at least 2")?;
        check(self.epochs >= 1, "epochs must be at least 1")?;
        check(self.batch_size >= 1, "batch_size must be at least 1")?;
        check(self.gamma >= 0.0, "gamma must be nonnegative")?;
        check(
            (0.0..1.0).contains(&self.smoothing),
            "smoothing must be in [0, 1)",
        )?;
        check(
            (0.0..1.0).contains(&self.dropout),
            "dropout must be in [0, 1)",
        )?;
        check(self.base_lr > 0.0, "base_lr must be positive")?;
        check(self.unfreeze_lr > 0.0, "unfreeze_lr must be positive")?;
        check(
            self.plateau_factor > 0.0 && self.plateau_factor < 1.0,
            "plateau_factor must be in (0, 1)",
        )?;
        check(self.plateau_min_lr > 0.0, "plateau_min_lr must be positive")?;
        check(self.tta_passes >= 1, "tta_passes must be at least 1")?;
        check(self.jobs >= 1, "jobs must be at least 1")?;
        check(self.alpha >= 0.0, "alpha must be nonnegative")?;
        check(self.beta >= 0.0, "beta must be nonnegative")?;
        Ok(())
    }

    /// The full configuration as key=value lines, parseable back by
    /// [`parse_config_text`].
    pub fn to_kv_lines(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("seed", self.seed.to_string());
        kv("data_dir", self.data_dir.display().to_string());
        kv("out_dir", self.out_dir.display().to_string());
        kv("backbone", self.backbone.name().to_string());
        kv("width_scale", self.width_scale.to_string());
        kv("n_concepts", self.n_concepts.to_string());
        kv("leakage_filter", self.leakage_filter.to_string());
        kv("folds", self.folds.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("alpha", self.alpha.to_string());
        kv("beta", self.beta.to_string());
        kv("gamma", self.gamma.to_string());
        kv("smoothing", self.smoothing.to_string());
        kv("base_lr", self.base_lr.to_string());
        kv("unfreeze_lr", self.unfreeze_lr.to_string());
        kv("freeze_epochs", self.freeze_epochs.to_string());
        kv("unfreeze_stages", self.unfreeze_stages.join(","));
        kv("dropout", self.dropout.to_string());
        kv("oversample_target", self.oversample_target.to_string());
        kv("plateau_factor", self.plateau_factor.to_string());
        kv("plateau_patience", self.plateau_patience.to_string());
        kv("plateau_min_lr", self.plateau_min_lr.to_string());
        kv("tta_passes", self.tta_passes.to_string());
        kv("jobs", self.jobs.to_string());
        s
    }
}

/// Parse key=value lines. `#` starts a comment, blank lines are skipped.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::validation(format!(
                "config line {} is not key=value: '{}'",
                lineno + 1,
                raw.trim()
            )));
        };
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

/// Build the effective configuration. Later layers win: defaults, then the
/// environment seed, then the file, then explicit overrides.
pub fn resolve_config(
    file: Option<&Path>,
    env_seed: Option<&str>,
    overrides: &[(String, String)],
) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(raw) = env_seed {
        cfg.seed = raw.parse().map_err(|_| {
            Error::validation(format!("SOFTCBM_SEED is not an unsigned integer: '{raw}'"))
        })?;
    }
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (k, v) in parse_config_text(&text)? {
            cfg.apply_kv(&k, &v)?;
        }
    }
    for (k, v) in overrides {
        cfg.apply_kv(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn file_text_parses_with_comments() {
        let text = "\n# a comment\nseed = 42\nbackbone=densenet121_3d # trailing\n\nwidth_scale = 0.25\n";
        let pairs = parse_config_text(text).unwrap();
        assert_eq!(
            pairs,
            vec![
                ("seed".to_string(), "42".to_string()),
                ("backbone".to_string(), "densenet121_3d".to_string()),
                ("width_scale".to_string(), "0.25".to_string()),
            ]
        );
        let mut cfg = ExperimentConfig::default();
        for (k, v) in &pairs {
            cfg.apply_kv(k, v).unwrap();
        }
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.backbone, BackboneKind::DenseNet121);
        assert_eq!(cfg.width_scale, 0.25);
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let mut cfg = ExperimentConfig::default();
        let err = cfg.apply_kv("learnig_rate", "0.1").unwrap_err();
        assert!(err.to_string().contains("learnig_rate"), "{err}");
        let err = parse_config_text("just words\n").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn bad_values_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        assert!(cfg.apply_kv("seed", "minus one").is_err());
        assert!(cfg.apply_kv("leakage_filter", "yes").is_err());
        assert!(cfg.apply_kv("unfreeze_stages", "stage9").is_err());
        assert!(cfg.apply_kv("backbone", "vgg").is_err());
        cfg.apply_kv("dropout", "1.5").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn stage_list_parses_and_allows_empty() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_kv("unfreeze_stages", "stem, stage1").unwrap();
        assert_eq!(cfg.unfreeze_stages, vec!["stem", "stage1"]);
        cfg.apply_kv("unfreeze_stages", "").unwrap();
        assert!(cfg.unfreeze_stages.is_empty());
    }

    #[test]
    fn later_layers_override_earlier_ones() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.cfg");
        std::fs::write(&path, "seed = 7\nepochs = 3\n").unwrap();

        // env only
        let cfg = resolve_config(None, Some("99"), &[]).unwrap();
        assert_eq!(cfg.seed, 99);
        // file beats env
        let cfg = resolve_config(Some(&path), Some("99"), &[]).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.epochs, 3);
        // override beats file
        let over = vec![("seed".to_string(), "123".to_string())];
        let cfg = resolve_config(Some(&path), Some("99"), &over).unwrap();
        assert_eq!(cfg.seed, 123);
        assert_eq!(cfg.epochs, 3);

        assert!(resolve_config(None, Some("x"), &[]).is_err());
    }

    #[test]
    fn kv_lines_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_kv("width_scale", "0.25").unwrap();
        cfg.apply_kv("unfreeze_stages", "stage4").unwrap();
        cfg.apply_kv("seed", "5").unwrap();
        let text = cfg.to_kv_lines();
        let mut back = ExperimentConfig::default();
        for (k, v) in parse_config_text(&text).unwrap() {
            back.apply_kv(&k, &v).unwrap();
        }
        assert_eq!(back, cfg);
    }
}
