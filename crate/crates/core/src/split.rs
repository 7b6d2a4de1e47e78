//! Stratified cross-validation splits and training-set oversampling.
//!
//! Fold assignment shuffles each class independently with a seeded stream and
//! deals indices round-robin, so per-fold class counts differ by at most one
//! and the assignment is reproducible from (labels, k, seed) alone. Controls
//! can be oversampled to a target count by cycling duplicates of the shuffled
//! train controls; duplicates are flagged synthetic so reports can keep real
//! and duplicated subjects apart.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::cohort::Cohort;
use crate::error::{Error, Result};
use crate::seed::{self, tag};

/// One training-roster entry: a subject index plus whether it is an
/// oversampling duplicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainItem {
    pub index: usize,
    pub synthetic: bool,
}

/// Assign a fold id in `0..k` to every subject, stratified by label.
pub fn stratified_kfold(labels: &[u8], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::validation(format!("fold count must be >= 2, got {k}")));
    }
    let mut assignment = vec![usize::MAX; labels.len()];
    for class in [0u8, 1u8] {
        let mut members: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        if members.len() < k {
            return Err(Error::validation(format!(
                "class {class} has {} subjects, fewer than {k} folds",
                members.len()
            )));
        }
        let mut rng = seed::stream(seed, &[tag("split"), class as u64]);
        members.shuffle(&mut rng);
        for (j, idx) in members.into_iter().enumerate() {
            assignment[idx] = j % k;
        }
    }
    if assignment.iter().any(|&f| f == usize::MAX) {
        return Err(Error::validation("labels must be 0 or 1"));
    }
    Ok(assignment)
}

/// Expand a fold assignment into per-fold (train, val) index lists.
pub fn fold_membership(assignment: &[usize], k: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    (0..k)
        .map(|fold| {
            let mut train = Vec::new();
            let mut val = Vec::new();
            for (i, &f) in assignment.iter().enumerate() {
                if f == fold {
                    val.push(i);
                } else {
                    train.push(i);
                }
            }
            (train, val)
        })
        .collect()
}

/// Pad the control class of a training set to `target` items by cycling
/// seeded-shuffled duplicates. Real items keep their order and come first;
/// duplicates are appended with `synthetic = true`. A training set already
/// at or above the target is returned unchanged.
pub fn oversample_controls(
    train: &[usize],
    labels: &[u8],
    target: usize,
    seed: u64,
) -> Vec<TrainItem> {
    let mut items: Vec<TrainItem> = train
        .iter()
        .map(|&index| TrainItem {
            index,
            synthetic: false,
        })
        .collect();
    let mut controls: Vec<usize> = train.iter().copied().filter(|&i| labels[i] == 0).collect();
    if controls.is_empty() || controls.len() >= target {
        return items;
    }
    let mut rng = seed::stream(seed, &[tag("oversample")]);
    controls.shuffle(&mut rng);
    let missing = target - controls.len();
    for j in 0..missing {
        items.push(TrainItem {
            index: controls[j % controls.len()],
            synthetic: true,
        });
    }
    items
}

pub const FOLDPLAN_NAME: &str = "foldplan.txt";

/// Persist which subjects validate in which fold.
pub fn save_foldplan(
    path: &Path,
    cohort: &Cohort,
    assignment: &[usize],
    k: usize,
) -> Result<()> {
    let mut text = String::new();
    let _ = writeln!(text, "foldplan = 1");
    let _ = writeln!(text, "folds = {k}");
    for fold in 0..k {
        let ids: Vec<&str> = assignment
            .iter()
            .enumerate()
            .filter(|&(_, &f)| f == fold)
            .map(|(i, _)| cohort.records[i].subject_id.as_str())
            .collect();
        let _ = writeln!(text, "fold {fold} {}", ids.join(" "));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Read a fold plan back as an assignment vector aligned with the cohort
/// roster. The plan must be an exact partition of the roster.
pub fn load_foldplan(path: &Path, cohort: &Cohort) -> Result<(Vec<usize>, usize)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::format(path, reason);
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim) != Some("foldplan = 1") {
        return Err(bad("expected 'foldplan = 1' header".into()));
    }
    let k: usize = lines
        .next()
        .and_then(|l| l.trim().strip_prefix("folds ="))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| bad("expected 'folds = <k>' line".into()))?;
    let mut assignment = vec![usize::MAX; cohort.records.len()];
    let index_of: std::collections::HashMap<&str, usize> = cohort
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.subject_id.as_str(), i))
        .collect();
    for line in lines {
        let mut parts = line.split_whitespace();
        if parts.next() != Some("fold") {
            return Err(bad(format!("unparseable line '{line}'")));
        }
        let fold: usize = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(format!("bad fold id in '{line}'")))?;
        if fold >= k {
            return Err(bad(format!("fold id {fold} out of range for {k} folds")));
        }
        for id in parts {
            let idx = *index_of
                .get(id)
                .ok_or_else(|| bad(format!("unknown subject '{id}' in fold plan")))?;
            if assignment[idx] != usize::MAX {
                return Err(bad(format!("subject '{id}' listed twice")));
            }
            assignment[idx] = fold;
        }
    }
    if let Some(i) = assignment.iter().position(|&f| f == usize::MAX) {
        return Err(bad(format!(
            "subject '{}' missing from fold plan",
            cohort.records[i].subject_id
        )));
    }
    Ok((assignment, k))
}
