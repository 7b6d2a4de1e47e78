//! Fold training loop and cross-validation driver.
//!
//! Everything downstream of the master seed is deterministic: fold
//! assignment, oversampling, per-epoch roster shuffles, augmentation
//! streams, dropout masks and model init all derive from it through fixed
//! tags, so a rerun with the same configuration reproduces every batch
//! bit for bit. Training runs in f32; loss bookkeeping stays in f64.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::augment::{self, Tier};
use crate::backbone::BackboneKind;
use crate::cohort::Cohort;
use crate::concept::{self, Selection, StumpResult};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::loss;
use crate::metrics::softmax2;
use crate::model::{self, BottleneckModel};
use crate::nn::Tensor;
use crate::optim::Adam;
use crate::schedule::{PlateauState, StagedSchedule};
use crate::seed::{self, tag};
use crate::split::{self, TrainItem};
use crate::volume::{self, Volume};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_task: f64,
    pub train_concept: f64,
    pub train_total: f64,
    pub val_task: f64,
    pub val_concept: f64,
    pub val_total: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub head_lr: f64,
    pub encoder_lr: Option<f64>,
    pub encoder_frozen: bool,
}

#[derive(Debug, Clone)]
pub struct TrainedFold {
    pub epochs: Vec<EpochRecord>,
    /// Epoch with the lowest total validation loss; its weights are the
    /// ones in the checkpoint and behind `val_probs`.
    pub best_epoch: usize,
    pub val_probs: Vec<f64>,
    pub checkpoint_stem: PathBuf,
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub val_indices: Vec<usize>,
    pub val_labels: Vec<u8>,
    pub selection: Selection,
    pub stump: StumpResult,
    pub trained: TrainedFold,
}

#[derive(Debug, Clone)]
pub struct CrossValResult {
    pub assignment: Vec<usize>,
    pub folds: Vec<FoldResult>,
}

/// Load every subject volume and normalize intensities once up front.
pub fn load_normalized_volumes(cohort: &Cohort) -> Result<Vec<Volume>> {
    let mut volumes = Vec::with_capacity(cohort.records.len());
    for record in &cohort.records {
        let v = cohort.load_volume(record)?;
        volumes.push(volume::normalize_intensity(&v)?);
    }
    if let Some(first) = volumes.first() {
        let shape = first.shape();
        if volumes.iter().any(|v| v.shape() != shape) {
            return Err(Error::validation(
                "cohort volumes disagree on grid shape".to_string(),
            ));
        }
    }
    Ok(volumes)
}

fn batch_tensor(samples: &[&Volume]) -> Tensor<f32> {
    let shape = samples[0].shape();
    let voxels = shape[0] * shape[1] * shape[2];
    let mut x = Tensor::zeros(vec![samples.len(), 1, shape[0], shape[1], shape[2]]);
    for (s, v) in samples.iter().enumerate() {
        x.data[s * voxels..(s + 1) * voxels].copy_from_slice(v.data());
    }
    x
}

fn concept_targets(
    cohort: &Cohort,
    selection: &Selection,
    indices: impl Iterator<Item = usize>,
) -> Vec<f64> {
    let mut out = Vec::new();
    for i in indices {
        let row = cohort.concept_row(&cohort.records[i]);
        out.extend(selection.apply(&row));
    }
    out
}

struct EvalPass {
    task: f64,
    concept: f64,
    total: f64,
    acc: f64,
    probs: Vec<f64>,
}

/// Forward the given subjects without augmentation or dropout.
fn evaluate_indices(
    model: &mut BottleneckModel<f32>,
    cohort: &Cohort,
    volumes: &[Volume],
    selection: &Selection,
    indices: &[usize],
    cfg: &ExperimentConfig,
) -> EvalPass {
    let mut rng = seed::stream(cfg.seed, &[tag("eval-unused")]);
    let mut task_sum = 0.0;
    let mut concept_sum = 0.0;
    let mut correct = 0usize;
    let mut probs = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(cfg.batch_size) {
        let vols: Vec<&Volume> = chunk.iter().map(|&i| &volumes[i]).collect();
        let x = batch_tensor(&vols);
        let labels: Vec<u8> = chunk.iter().map(|&i| cohort.records[i].label).collect();
        let targets = concept_targets(cohort, selection, chunk.iter().copied());
        let out = model.forward(&x, false, &mut rng).expect("validated input");
        let (task, _) = loss::focal_loss(&out.logits, &labels, cfg.gamma, cfg.smoothing);
        let (con, _) = loss::concept_mse(&out.concepts, &targets);
        task_sum += task * chunk.len() as f64;
        concept_sum += con * chunk.len() as f64;
        for (s, &y) in labels.iter().enumerate() {
            let p1 = softmax2(
                out.logits.data[2 * s] as f64,
                out.logits.data[2 * s + 1] as f64,
            )
            .1;
            probs.push(p1);
            if (p1 >= crate::metrics::DECISION_THRESHOLD) == (y != 0) {
                correct += 1;
            }
        }
    }
    let n = indices.len().max(1) as f64;
    let task = task_sum / n;
    let concept = concept_sum / n;
    EvalPass {
        task,
        concept,
        total: loss::total_loss(task, concept, cfg.alpha, cfg.beta),
        acc: correct as f64 / n,
        probs,
    }
}

fn snapshot_params(model: &mut BottleneckModel<f32>) -> Vec<Vec<f32>> {
    let mut out = Vec::new();
    model.for_each_param(&mut |_, p| out.push(p.data.clone()));
    out
}

fn restore_params(model: &mut BottleneckModel<f32>, snapshot: &[Vec<f32>]) {
    let mut i = 0;
    model.for_each_param(&mut |_, p| {
        p.data.copy_from_slice(&snapshot[i]);
        i += 1;
    });
    assert_eq!(i, snapshot.len(), "snapshot does not match the model");
}

/// Train one fold. `fold_seed` scopes every random stream; the best-epoch
/// weights land in `<fold_dir>/best.ckptmf` + `.ckptbin`.
#[allow(clippy::too_many_arguments)]
pub fn train_fold(
    cohort: &Cohort,
    volumes: &[Volume],
    train_items: &[TrainItem],
    val_indices: &[usize],
    selection: &Selection,
    cfg: &ExperimentConfig,
    fold_seed: u64,
    fold_dir: &Path,
) -> Result<TrainedFold> {
    train_fold_with(
        cohort,
        volumes,
        train_items,
        val_indices,
        selection,
        cfg,
        fold_seed,
        fold_dir,
        &mut |_, _| {},
    )
}

/// [`train_fold`] with a probe called after every epoch's updates, before
/// the best-epoch weights are restored. Lets auditors checksum or copy the
/// live parameters as training progresses.
#[allow(clippy::too_many_arguments)]
pub fn train_fold_with(
    cohort: &Cohort,
    volumes: &[Volume],
    train_items: &[TrainItem],
    val_indices: &[usize],
    selection: &Selection,
    cfg: &ExperimentConfig,
    fold_seed: u64,
    fold_dir: &Path,
    on_epoch: &mut dyn FnMut(usize, &mut BottleneckModel<f32>),
) -> Result<TrainedFold> {
    if selection.is_empty() {
        return Err(Error::validation("cannot train with an empty selection"));
    }
    if train_items.is_empty() || val_indices.is_empty() {
        return Err(Error::validation("fold needs train and val subjects"));
    }
    std::fs::create_dir_all(fold_dir).map_err(|e| Error::io(fold_dir, e))?;

    let mut init_rng = seed::stream(fold_seed, &[tag("model-init")]);
    let mut model: BottleneckModel<f32> = BottleneckModel::new(
        cfg.backbone,
        cfg.width_scale,
        selection.len(),
        cfg.dropout,
        &mut init_rng,
    )?;
    let mut optimizer = Adam::default();
    let plateau = PlateauState::new(
        cfg.plateau_factor,
        cfg.plateau_patience,
        cfg.plateau_min_lr,
        1e-4,
    )?;
    let mut schedule =
        StagedSchedule::new(cfg.base_lr, cfg.unfreeze_lr, cfg.freeze_epochs, plateau)?;

    let mut records: Vec<EpochRecord> = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Vec<f64>, Vec<Vec<f32>>)> = None;

    for epoch in 0..cfg.epochs {
        let lr = schedule.epoch_lr(epoch);
        if schedule.encoder_frozen(epoch) {
            model.freeze_encoder()?;
        } else {
            model.set_encoder_trainable_stages(&cfg.unfreeze_stages)?;
        }

        let mut roster: Vec<TrainItem> = train_items.to_vec();
        let mut shuffle_rng = seed::stream(fold_seed, &[tag("epoch-shuffle"), epoch as u64]);
        roster.shuffle(&mut shuffle_rng);

        let mut task_sum = 0.0;
        let mut concept_sum = 0.0;
        let mut correct = 0usize;
        for (batch_idx, batch) in roster.chunks(cfg.batch_size).enumerate() {
            let mut augmented = Vec::with_capacity(batch.len());
            for (within, item) in batch.iter().enumerate() {
                let slot = (batch_idx * cfg.batch_size + within) as u64;
                let tier = if item.synthetic {
                    Tier::Control
                } else {
                    Tier::Train
                };
                let policy = augment::default_policy(tier);
                augmented.push(augment::apply_augment(
                    &volumes[item.index],
                    &policy,
                    fold_seed,
                    epoch as u64,
                    slot,
                    tier,
                )?);
            }
            let vols: Vec<&Volume> = augmented.iter().collect();
            let x = batch_tensor(&vols);
            let labels: Vec<u8> = batch
                .iter()
                .map(|it| cohort.records[it.index].label)
                .collect();
            let targets =
                concept_targets(cohort, selection, batch.iter().map(|it| it.index));

            let mut dropout_rng =
                seed::stream(fold_seed, &[tag("dropout"), epoch as u64, batch_idx as u64]);
            let out = model.forward(&x, true, &mut dropout_rng)?;

            let (task, mut d_logits) =
                loss::focal_loss(&out.logits, &labels, cfg.gamma, cfg.smoothing);
            let (con, mut d_concepts) = loss::concept_mse(&out.concepts, &targets);
            task_sum += task * batch.len() as f64;
            concept_sum += con * batch.len() as f64;
            for (s, &y) in labels.iter().enumerate() {
                let p1 = softmax2(
                    out.logits.data[2 * s] as f64,
                    out.logits.data[2 * s + 1] as f64,
                )
                .1;
                if (p1 >= crate::metrics::DECISION_THRESHOLD) == (y != 0) {
                    correct += 1;
                }
            }

            for g in &mut d_logits.data {
                *g *= cfg.beta as f32;
            }
            for g in &mut d_concepts.data {
                *g *= cfg.alpha as f32;
            }
            model.zero_grad();
            model.backward(&d_logits, &d_concepts);
            let head_lr = lr.head_lr;
            let encoder_lr = lr.encoder_lr.unwrap_or(0.0);
            optimizer.step(
                |name: &str| {
                    if name.starts_with("backbone.") {
                        encoder_lr
                    } else {
                        head_lr
                    }
                },
                |f| model.for_each_param(f),
            );
        }

        let n_train = roster.len() as f64;
        let train_task = task_sum / n_train;
        let train_concept = concept_sum / n_train;
        let val = evaluate_indices(&mut model, cohort, volumes, selection, val_indices, cfg);

        let record = EpochRecord {
            epoch,
            train_task,
            train_concept,
            train_total: loss::total_loss(train_task, train_concept, cfg.alpha, cfg.beta),
            val_task: val.task,
            val_concept: val.concept,
            val_total: val.total,
            train_acc: correct as f64 / n_train,
            val_acc: val.acc,
            head_lr: lr.head_lr,
            encoder_lr: lr.encoder_lr,
            encoder_frozen: lr.encoder_lr.is_none(),
        };
        if best.as_ref().is_none_or(|(_, b, _, _)| val.total < *b) {
            best = Some((epoch, val.total, val.probs, snapshot_params(&mut model)));
        }
        schedule.observe(val.total);
        records.push(record);
        on_epoch(epoch, &mut model);
    }

    let (best_epoch, _, val_probs, weights) = best.expect("at least one epoch ran");
    restore_params(&mut model, &weights);
    let checkpoint_stem = fold_dir.join("best");
    model::save_checkpoint(&checkpoint_stem, &mut model)?;

    Ok(TrainedFold {
        epochs: records,
        best_epoch,
        val_probs,
        checkpoint_stem,
    })
}

/// Stratified k-fold cross-validation over a cohort. Writes the fold plan,
/// one selection file per fold, and one best checkpoint per fold under
/// `out_dir`; `cfg.jobs` bounds how many folds train in parallel.
pub fn cross_validate(
    cohort: &Cohort,
    cfg: &ExperimentConfig,
    out_dir: &Path,
) -> Result<CrossValResult> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let labels: Vec<u8> = cohort.records.iter().map(|r| r.label).collect();
    let assignment = split::stratified_kfold(&labels, cfg.folds, cfg.seed)?;
    split::save_foldplan(&out_dir.join(split::FOLDPLAN_NAME), cohort, &assignment, cfg.folds)?;

    let volumes = load_normalized_volumes(cohort)?;
    let min = match cfg.backbone {
        BackboneKind::ResNet34 => 4,
        BackboneKind::DenseNet121 => 32,
    };
    if let Some(v) = volumes.first() {
        if v.shape().iter().any(|&s| s < min) {
            return Err(Error::validation(format!(
                "cohort grid {:?} is below the {} minimum of {min}",
                v.shape(),
                cfg.backbone.name()
            )));
        }
    }

    let memberships = split::fold_membership(&assignment, cfg.folds);

    let run_fold = |fold: usize| -> Result<FoldResult> {
        let (train_indices, val_indices) = &memberships[fold];
        let selection =
            concept::select_concepts(cohort, train_indices, cfg.n_concepts, cfg.leakage_filter)?;
        let selection_path = out_dir.join(format!("fold{fold}_selection.txt"));
        concept::save_selection(&selection_path, &selection)?;

        let fold_seed = seed::derive(cfg.seed, &[tag("fold"), fold as u64]);
        let train_items = split::oversample_controls(
            train_indices,
            &labels,
            cfg.oversample_target,
            fold_seed,
        );

        let target_rows = |ix: &[usize]| -> Vec<Vec<f64>> {
            ix.iter()
                .map(|&i| {
                    let row = cohort.concept_row(&cohort.records[i]);
                    selection.apply(&row)
                })
                .collect()
        };
        let train_labels: Vec<u8> = train_indices.iter().map(|&i| labels[i]).collect();
        let val_labels: Vec<u8> = val_indices.iter().map(|&i| labels[i]).collect();
        let stump = concept::decision_stump(
            &target_rows(train_indices),
            &train_labels,
            &target_rows(val_indices),
            &val_labels,
        )?;

        let trained = train_fold(
            cohort,
            &volumes,
            &train_items,
            val_indices,
            &selection,
            cfg,
            fold_seed,
            &out_dir.join(format!("fold{fold}")),
        )?;
        Ok(FoldResult {
            fold,
            val_indices: val_indices.clone(),
            val_labels,
            selection,
            stump,
            trained,
        })
    };

    let folds: Vec<FoldResult> = if cfg.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| Error::validation(format!("thread pool: {e}")))?;
        use rayon::prelude::*;
        pool.install(|| {
            (0..cfg.folds)
                .into_par_iter()
                .map(run_fold)
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        (0..cfg.folds).map(run_fold).collect::<Result<Vec<_>>>()?
    };

    Ok(CrossValResult { assignment, folds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{generate_cohort, CohortParams};
    use crate::model::load_checkpoint;

    fn tiny_cohort(dir: &Path, patients: usize, controls: usize) -> Cohort {
        let params = CohortParams {
            n_patients: patients,
            n_controls: controls,
            grid: [24, 24, 24],
            tube_radius: (1.5, 1.65),
            bulge_factor: (1.7, 2.2),
            noise_sigma: 0.01,
            control_points: 4,
            seed: 33,
        };
        generate_cohort(&params, dir).unwrap()
    }

    fn tiny_config(out: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 9;
        cfg.out_dir = out.to_path_buf();
        cfg.width_scale = 0.05;
        cfg.n_concepts = 6;
        cfg.epochs = 2;
        cfg.batch_size = 4;
        cfg.freeze_epochs = 1;
        cfg.oversample_target = 0;
        cfg.folds = 2;
        cfg
    }

    #[test]
    fn fold_training_is_deterministic_and_checkpoints_best_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let cohort = tiny_cohort(&dir.path().join("data"), 6, 4);
        let cfg = tiny_config(dir.path());
        let volumes = load_normalized_volumes(&cohort).unwrap();
        let labels: Vec<u8> = cohort.records.iter().map(|r| r.label).collect();

        let train_indices: Vec<usize> = (0..8).collect();
        let val_indices: Vec<usize> = (8..10).collect();
        let selection =
            concept::select_concepts(&cohort, &train_indices, cfg.n_concepts, true).unwrap();
        let items = split::oversample_controls(&train_indices, &labels, 0, 77);

        let run = |sub: &str| {
            train_fold(
                &cohort,
                &volumes,
                &items,
                &val_indices,
                &selection,
                &cfg,
                77,
                &dir.path().join(sub),
            )
            .unwrap()
        };
        let a = run("a");
        let b = run("b");

        assert_eq!(a.epochs.len(), 2);
        assert!(a.epochs[0].encoder_frozen);
        assert!(!a.epochs[1].encoder_frozen);
        assert_eq!(a.val_probs.len(), val_indices.len());
        for r in &a.epochs {
            for v in [r.train_total, r.val_total, r.train_acc, r.val_acc] {
                assert!(v.is_finite());
            }
        }
        // Bitwise reproducibility of the whole loop.
        assert_eq!(a.epochs, b.epochs);
        assert_eq!(a.val_probs, b.val_probs);
        assert_eq!(a.best_epoch, b.best_epoch);

        // The checkpoint holds the best-epoch weights: reloading them must
        // reproduce the stored validation probabilities exactly.
        let mut rng = seed::stream(1, &[tag("reload")]);
        let mut model: BottleneckModel<f32> = BottleneckModel::new(
            cfg.backbone,
            cfg.width_scale,
            selection.len(),
            cfg.dropout,
            &mut rng,
        )
        .unwrap();
        load_checkpoint(&a.checkpoint_stem, &mut model, true).unwrap();
        let eval = evaluate_indices(&mut model, &cohort, &volumes, &selection, &val_indices, &cfg);
        assert_eq!(eval.probs, a.val_probs);
    }

    #[test]
    fn frozen_encoder_stays_bitwise_identical_while_heads_move() {
        let dir = tempfile::tempdir().unwrap();
        let cohort = tiny_cohort(&dir.path().join("data"), 4, 3);
        let mut cfg = tiny_config(dir.path());
        cfg.epochs = 1;
        cfg.freeze_epochs = 5; // never unfreezes in this run
        let volumes = load_normalized_volumes(&cohort).unwrap();

        let train_indices: Vec<usize> = (0..5).collect();
        let val_indices: Vec<usize> = (5..7).collect();
        let selection =
            concept::select_concepts(&cohort, &train_indices, cfg.n_concepts, true).unwrap();
        let items: Vec<TrainItem> = train_indices
            .iter()
            .map(|&index| TrainItem {
                index,
                synthetic: false,
            })
            .collect();

        // Same init as train_fold uses, to snapshot the starting weights.
        let mut init_rng = seed::stream(5, &[tag("model-init")]);
        let mut reference: BottleneckModel<f32> = BottleneckModel::new(
            cfg.backbone,
            cfg.width_scale,
            selection.len(),
            cfg.dropout,
            &mut init_rng,
        )
        .unwrap();
        let mut initial: Vec<(String, Vec<f32>)> = Vec::new();
        reference.for_each_param(&mut |name, p| initial.push((name, p.data.clone())));

        let trained = train_fold(
            &cohort,
            &volumes,
            &items,
            &val_indices,
            &selection,
            &cfg,
            5,
            &dir.path().join("frozen"),
        )
        .unwrap();

        let mut model: BottleneckModel<f32> = BottleneckModel::new(
            cfg.backbone,
            cfg.width_scale,
            selection.len(),
            cfg.dropout,
            &mut seed::stream(2, &[tag("reload2")]),
        )
        .unwrap();
        load_checkpoint(&trained.checkpoint_stem, &mut model, true).unwrap();

        let mut backbone_moved = false;
        let mut heads_moved = false;
        let mut i = 0;
        model.for_each_param(&mut |name, p| {
            let (ref name0, ref data0) = initial[i];
            assert_eq!(*name0, name);
            let moved = p.data != *data0;
            if name.starts_with("backbone.") {
                backbone_moved |= moved;
            } else {
                heads_moved |= moved;
            }
            i += 1;
        });
        assert!(!backbone_moved, "frozen encoder weights changed");
        assert!(heads_moved, "head weights never updated");
    }

    #[test]
    fn cross_validation_produces_ordered_folds_and_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cohort = tiny_cohort(&dir.path().join("data"), 6, 4);
        let out = dir.path().join("run");
        let mut cfg = tiny_config(&out);
        cfg.epochs = 1;
        let result = cross_validate(&cohort, &cfg, &out).unwrap();

        assert_eq!(result.folds.len(), 2);
        assert_eq!(result.assignment.len(), 10);
        assert!(out.join(split::FOLDPLAN_NAME).is_file());
        for (k, fold) in result.folds.iter().enumerate() {
            assert_eq!(fold.fold, k);
            assert!(out.join(format!("fold{k}_selection.txt")).is_file());
            assert!(fold.trained.checkpoint_stem.with_extension("ckptmf").is_file());
            assert_eq!(fold.trained.val_probs.len(), fold.val_indices.len());
            // Every fold validates on held-out subjects only.
            for &i in &fold.val_indices {
                assert_eq!(result.assignment[i], k);
            }
            assert!(fold.stump.train_acc >= 0.5);
        }
    }
}
