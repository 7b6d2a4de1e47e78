//! Inference paths: plain evaluation, augmentation-averaged evaluation, and
//! test-time concept intervention.
//!
//! Averaged evaluation draws its transforms from a stream keyed only by
//! (seed, pass), so every subject sees the same fixed set of passes and the
//! parallel driver is bitwise equal to the serial one. Probabilities are
//! carried in f64 end to end.

use rayon::prelude::*;

use crate::augment::{self, Tier};
use crate::concept::Selection;
use crate::error::{Error, Result};
use crate::metrics::softmax2;
use crate::model::{BottleneckModel, CONCEPT_CLAMP};
use crate::nn::Tensor;
use crate::seed::{self, tag};
use crate::volume::Volume;

fn stack(volumes: &[&Volume]) -> Tensor<f32> {
    let shape = volumes[0].shape();
    let voxels = shape[0] * shape[1] * shape[2];
    let mut x = Tensor::zeros(vec![volumes.len(), 1, shape[0], shape[1], shape[2]]);
    for (s, v) in volumes.iter().enumerate() {
        assert_eq!(v.shape(), shape, "mixed grid shapes in one batch");
        x.data[s * voxels..(s + 1) * voxels].copy_from_slice(v.data());
    }
    x
}

fn eval_rng() -> rand_chacha::ChaCha8Rng {
    // Dropout is inert outside training; the stream is never consumed.
    seed::stream(0, &[tag("eval-unused")])
}

/// Class-1 probability per volume from a single unaugmented pass.
pub fn predict_probs(
    model: &BottleneckModel<f32>,
    volumes: &[&Volume],
    batch_size: usize,
) -> Result<Vec<f64>> {
    if batch_size == 0 {
        return Err(Error::validation("batch_size must be at least 1"));
    }
    let mut m = model.clone();
    let mut rng = eval_rng();
    let mut probs = Vec::with_capacity(volumes.len());
    for chunk in volumes.chunks(batch_size) {
        let x = stack(chunk);
        let out = m.forward(&x, false, &mut rng)?;
        for s in 0..chunk.len() {
            probs.push(
                softmax2(
                    out.logits.data[2 * s] as f64,
                    out.logits.data[2 * s + 1] as f64,
                )
                .1,
            );
        }
    }
    Ok(probs)
}

/// Per-pass class-1 probabilities for one subject under `policy`. All
/// passes go through a single batched forward; per-sample normalization
/// keeps that equal to running them one by one.
pub fn pass_probs(
    model: &BottleneckModel<f32>,
    volume: &Volume,
    policy: &augment::AugmentPolicy,
    passes: usize,
    seed_value: u64,
) -> Result<Vec<f64>> {
    let mut augmented = Vec::with_capacity(passes);
    for pass in 0..passes {
        augmented.push(augment::apply_augment(
            volume,
            policy,
            seed_value,
            pass as u64,
            0,
            Tier::Tta,
        )?);
    }
    let refs: Vec<&Volume> = augmented.iter().collect();
    let x = stack(&refs);
    let mut m = model.clone();
    let out = m.forward(&x, false, &mut eval_rng())?;
    Ok((0..passes)
        .map(|s| {
            softmax2(
                out.logits.data[2 * s] as f64,
                out.logits.data[2 * s + 1] as f64,
            )
            .1
        })
        .collect())
}

fn averaged_one(
    model: &BottleneckModel<f32>,
    volume: &Volume,
    policy: &augment::AugmentPolicy,
    passes: usize,
    seed_value: u64,
) -> Result<f64> {
    let probs = pass_probs(model, volume, policy, passes, seed_value)?;
    Ok(probs.iter().sum::<f64>() / passes as f64)
}

/// Augmentation-averaged class-1 probabilities, one subject at a time.
pub fn predict_averaged_serial(
    model: &BottleneckModel<f32>,
    volumes: &[&Volume],
    policy: &augment::AugmentPolicy,
    passes: usize,
    seed_value: u64,
) -> Result<Vec<f64>> {
    if passes == 0 {
        return Err(Error::validation("averaging needs at least one pass"));
    }
    volumes
        .iter()
        .map(|v| averaged_one(model, v, policy, passes, seed_value))
        .collect()
}

/// Parallel variant of [`predict_averaged_serial`]; identical output,
/// subjects fan out across `jobs` threads.
pub fn predict_averaged(
    model: &BottleneckModel<f32>,
    volumes: &[&Volume],
    policy: &augment::AugmentPolicy,
    passes: usize,
    seed_value: u64,
    jobs: usize,
) -> Result<Vec<f64>> {
    if passes == 0 {
        return Err(Error::validation("averaging needs at least one pass"));
    }
    if jobs <= 1 {
        return predict_averaged_serial(model, volumes, policy, passes, seed_value);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::validation(format!("thread pool: {e}")))?;
    pool.install(|| {
        volumes
            .par_iter()
            .map(|v| averaged_one(model, v, policy, passes, seed_value))
            .collect()
    })
}

/// [`predict_averaged_serial`] under the stock test-time policy.
pub fn predict_tta_serial(
    model: &BottleneckModel<f32>,
    volumes: &[&Volume],
    passes: usize,
    seed_value: u64,
) -> Result<Vec<f64>> {
    let policy = augment::default_policy(Tier::Tta);
    predict_averaged_serial(model, volumes, &policy, passes, seed_value)
}

/// [`predict_averaged`] under the stock test-time policy.
pub fn predict_tta(
    model: &BottleneckModel<f32>,
    volumes: &[&Volume],
    passes: usize,
    seed_value: u64,
    jobs: usize,
) -> Result<Vec<f64>> {
    let policy = augment::default_policy(Tier::Tta);
    predict_averaged(model, volumes, &policy, passes, seed_value, jobs)
}

#[derive(Debug, Clone)]
pub struct InterventionOutcome {
    pub baseline_prob: f64,
    pub edited_prob: f64,
    /// Model-predicted concept activations, selection order.
    pub predicted_concepts: Vec<f64>,
    /// Activations actually fed to the task head after the edits.
    pub edited_concepts: Vec<f64>,
}

/// Replace named concept activations with values derived from raw
/// measurements and rerun only the task head. The raw values go through the
/// same train-fold normalization as the targets did. No edits means no
/// change: the edited probability equals the baseline.
pub fn intervene(
    model: &BottleneckModel<f32>,
    selection: &Selection,
    volume: &Volume,
    edits: &[(String, f64)],
) -> Result<InterventionOutcome> {
    let mut m = model.clone();
    let x = stack(&[volume]);
    let z = m.encode(&x)?;
    let c = m.concept_forward(&z);
    let predicted_concepts: Vec<f64> = c.data.iter().map(|&v| v as f64).collect();

    let mut edited = c.clone();
    for (name, raw) in edits {
        let Some(slot) = selection.slot_of(name) else {
            let known: Vec<&str> = selection
                .concepts
                .iter()
                .map(|c| c.name.as_str())
                .collect();
            return Err(Error::validation(format!(
                "concept '{name}' is not in this fold's selection (available: {})",
                known.join(", ")
            )));
        };
        let normalized = selection
            .normalize_value(slot, *raw)
            .clamp(CONCEPT_CLAMP, 1.0 - CONCEPT_CLAMP);
        edited.data[slot] = normalized as f32;
    }

    let baseline_logits = m.task_forward(&z, &c, false, &mut eval_rng());
    let edited_logits = m.task_forward(&z, &edited, false, &mut eval_rng());
    Ok(InterventionOutcome {
        baseline_prob: softmax2(baseline_logits.data[0] as f64, baseline_logits.data[1] as f64).1,
        edited_prob: softmax2(edited_logits.data[0] as f64, edited_logits.data[1] as f64).1,
        predicted_concepts,
        edited_concepts: edited.data.iter().map(|&v| v as f64).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneKind;
    use crate::cohort::{generate_cohort, CohortParams};
    use crate::concept::select_concepts;
    use crate::train::load_normalized_volumes;

    fn fixture() -> (
        tempfile::TempDir,
        BottleneckModel<f32>,
        Vec<Volume>,
        Selection,
    ) {
        let dir = tempfile::tempdir().unwrap();
        let params = CohortParams {
            n_patients: 3,
            n_controls: 2,
            grid: [24, 24, 24],
            tube_radius: (1.5, 1.65),
            bulge_factor: (1.7, 2.2),
            noise_sigma: 0.01,
            control_points: 4,
            seed: 101,
        };
        let cohort = generate_cohort(&params, &dir.path().join("data")).unwrap();
        let volumes = load_normalized_volumes(&cohort).unwrap();
        let rows: Vec<usize> = (0..cohort.records.len()).collect();
        let selection = select_concepts(&cohort, &rows, 5, true).unwrap();
        let mut rng = seed::stream(7, &[tag("infer-test")]);
        let model =
            BottleneckModel::new(BackboneKind::ResNet34, 0.05, selection.len(), 0.0, &mut rng)
                .unwrap();
        (dir, model, volumes, selection)
    }

    #[test]
    fn parallel_averaging_matches_serial_bitwise() {
        let (_dir, model, volumes, _) = fixture();
        let refs: Vec<&Volume> = volumes.iter().collect();
        let serial = predict_tta_serial(&model, &refs, 4, 42).unwrap();
        let parallel = predict_tta(&model, &refs, 4, 42, 3).unwrap();
        assert_eq!(serial, parallel);
        for &p in &serial {
            assert!((0.0..=1.0).contains(&p));
        }
    }

    #[test]
    fn averaging_is_seed_deterministic_and_seed_sensitive() {
        let (_dir, model, volumes, _) = fixture();
        let refs: Vec<&Volume> = volumes.iter().take(2).collect();
        let a = predict_tta_serial(&model, &refs, 3, 9).unwrap();
        let b = predict_tta_serial(&model, &refs, 3, 9).unwrap();
        assert_eq!(a, b);
        let c = predict_tta_serial(&model, &refs, 3, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn batched_prediction_matches_single_subject_calls() {
        let (_dir, model, volumes, _) = fixture();
        let refs: Vec<&Volume> = volumes.iter().collect();
        let batched = predict_probs(&model, &refs, 4).unwrap();
        for (i, v) in refs.iter().enumerate() {
            let single = predict_probs(&model, &[v], 1).unwrap();
            assert_eq!(single[0], batched[i], "subject {i}");
        }
    }

    #[test]
    fn intervention_moves_only_the_task_head() {
        let (_dir, model, volumes, selection) = fixture();
        let name = selection.concepts[0].name.clone();
        let hi = selection.concepts[0].hi;
        let out = intervene(&model, &selection, &volumes[0], &[(name, hi * 2.0)]).unwrap();
        assert_eq!(out.predicted_concepts.len(), selection.len());
        // Raw value above the train range pins the slot to the top clamp.
        assert!((out.edited_concepts[0] - (1.0 - CONCEPT_CLAMP)).abs() < 1e-6);
        for s in 1..selection.len() {
            assert_eq!(out.edited_concepts[s], out.predicted_concepts[s]);
        }
        // Baseline agrees with the plain path on the same volume.
        let single = predict_probs(&model, &[&volumes[0]], 1).unwrap();
        assert_eq!(out.baseline_prob, single[0]);
    }

    #[test]
    fn intervention_rejects_unknown_names_and_passes_through_empty_edits() {
        let (_dir, model, volumes, selection) = fixture();
        let err =
            intervene(&model, &selection, &volumes[0], &[("bogus".into(), 1.0)]).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let out = intervene(&model, &selection, &volumes[0], &[]).unwrap();
        assert_eq!(out.baseline_prob, out.edited_prob);
        assert_eq!(out.predicted_concepts, out.edited_concepts);
    }
}
