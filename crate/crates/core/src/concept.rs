//! Concept screening, ranking, and normalization.
//!
//! Concept names containing a leak keyword (case-insensitive substring) are
//! dropped before ranking so annotations that literally restate the label
//! never reach the bottleneck. Survivors are ranked by absolute Pearson
//! correlation with the label on the training rows of one fold, ties broken
//! by ascending name, and the top `n_select` keep their train-fold min/max
//! for normalization. Validation rows reuse the train statistics unchanged.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::cohort::Cohort;
use crate::error::{Error, Result};

pub const LEAK_KEYWORDS: [&str; 4] = ["aneurysm", "sac", "dome", "neck"];

/// Indices of names that survive the leak-keyword filter.
pub fn leakage_filter(names: &[String]) -> Vec<usize> {
    names
        .iter()
        .enumerate()
        .filter(|(_, name)| {
            let lower = name.to_lowercase();
            !LEAK_KEYWORDS.iter().any(|kw| lower.contains(kw))
        })
        .map(|(i, _)| i)
        .collect()
}

/// Pearson correlation; 0 when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "correlation needs paired samples");
    let n = x.len() as f64;
    if x.is_empty() {
        return 0.0;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectedConcept {
    pub name: String,
    /// Column in the cohort concept order.
    pub index: usize,
    /// Train-fold range used for normalization.
    pub lo: f64,
    pub hi: f64,
    /// |Pearson| with the label on the train fold.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub concepts: Vec<SelectedConcept>,
}

impl Selection {
    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    /// Normalize one slot's raw value with the stored train statistics.
    /// Degenerate ranges map to 0.5; everything clamps into [0, 1].
    pub fn normalize_value(&self, slot: usize, raw: f64) -> f64 {
        let c = &self.concepts[slot];
        if c.hi <= c.lo {
            return 0.5;
        }
        ((raw - c.lo) / (c.hi - c.lo)).clamp(0.0, 1.0)
    }

    /// Normalize a full cohort-order concept row down to the selected slots.
    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        self.concepts
            .iter()
            .enumerate()
            .map(|(slot, c)| self.normalize_value(slot, row[c.index]))
            .collect()
    }

    pub fn slot_of(&self, name: &str) -> Option<usize> {
        self.concepts.iter().position(|c| c.name == name)
    }
}

/// Rank a concept table by point-biserial correlation with the labels and
/// keep the strongest `n_select` columns. `rows` are training subjects only;
/// the per-concept min/max recorded here anchor later normalization.
pub fn select_from(
    names: &[String],
    rows: &[Vec<f64>],
    labels: &[f64],
    n_select: usize,
    filter_leaks: bool,
) -> Result<Selection> {
    if rows.is_empty() {
        return Err(Error::validation("concept selection needs training rows"));
    }
    if rows.len() != labels.len() {
        return Err(Error::validation("concept rows and labels disagree"));
    }
    if n_select == 0 {
        return Err(Error::validation("concept selection needs n_select >= 1"));
    }
    let candidates: Vec<usize> = if filter_leaks {
        leakage_filter(names)
    } else {
        (0..names.len()).collect()
    };
    if candidates.is_empty() {
        return Err(Error::validation(
            "no concept survives the leakage filter",
        ));
    }

    let mut ranked: Vec<(usize, f64)> = candidates
        .iter()
        .map(|&col| {
            let column: Vec<f64> = rows.iter().map(|r| r[col]).collect();
            (col, pearson(&column, labels).abs())
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| names[a.0].cmp(&names[b.0]))
    });
    ranked.truncate(n_select.min(ranked.len()));

    let concepts = ranked
        .into_iter()
        .map(|(col, score)| {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for r in rows {
                lo = lo.min(r[col]);
                hi = hi.max(r[col]);
            }
            SelectedConcept {
                name: names[col].clone(),
                index: col,
                lo,
                hi,
                score,
            }
        })
        .collect();
    Ok(Selection { concepts })
}

/// Rank and select concepts on the training rows of one fold.
pub fn select_concepts(
    cohort: &Cohort,
    train_rows: &[usize],
    n_select: usize,
    filter_leaks: bool,
) -> Result<Selection> {
    let rows: Vec<Vec<f64>> = train_rows
        .iter()
        .map(|&i| cohort.concept_row(&cohort.records[i]))
        .collect();
    let labels: Vec<f64> = train_rows
        .iter()
        .map(|&i| cohort.records[i].label as f64)
        .collect();
    select_from(&cohort.concept_names, &rows, &labels, n_select, filter_leaks)
}

/// Persist a fold's selection (name, range, score per concept).
pub fn save_selection(path: &Path, selection: &Selection) -> Result<()> {
    let mut text = String::new();
    let _ = writeln!(text, "selection = 1");
    let _ = writeln!(text, "concepts = {}", selection.len());
    for c in &selection.concepts {
        let _ = writeln!(
            text,
            "concept {} min={} max={} score={}",
            c.name, c.lo, c.hi, c.score
        );
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Load a selection and re-anchor it to a cohort's concept columns.
pub fn load_selection(path: &Path, cohort: &Cohort) -> Result<Selection> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::format(path, reason);
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim) != Some("selection = 1") {
        return Err(bad("expected 'selection = 1' header".into()));
    }
    let declared: usize = lines
        .next()
        .and_then(|l| l.trim().strip_prefix("concepts ="))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| bad("expected 'concepts = <n>' line".into()))?;
    let mut concepts = Vec::with_capacity(declared);
    for line in lines {
        let rest = line
            .trim()
            .strip_prefix("concept ")
            .ok_or_else(|| bad(format!("unparseable line '{line}'")))?;
        let mut parts = rest.split_whitespace();
        let name = parts
            .next()
            .ok_or_else(|| bad("concept line misses name".into()))?
            .to_string();
        let mut lo = None;
        let mut hi = None;
        let mut score = None;
        for kv in parts {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| bad(format!("bad field '{kv}'")))?;
            let parsed: f64 = v
                .parse()
                .map_err(|_| bad(format!("bad number '{v}' for {name}")))?;
            match k {
                "min" => lo = Some(parsed),
                "max" => hi = Some(parsed),
                "score" => score = Some(parsed),
                other => return Err(bad(format!("unknown field '{other}'"))),
            }
        }
        let index = cohort
            .concept_names
            .iter()
            .position(|n| *n == name)
            .ok_or_else(|| bad(format!("concept '{name}' not in cohort table")))?;
        concepts.push(SelectedConcept {
            name,
            index,
            lo: lo.ok_or_else(|| bad("concept misses min".into()))?,
            hi: hi.ok_or_else(|| bad("concept misses max".into()))?,
            score: score.ok_or_else(|| bad("concept misses score".into()))?,
        });
    }
    if concepts.len() != declared {
        return Err(bad(format!(
            "declared {declared} concepts but listed {}",
            concepts.len()
        )));
    }
    Ok(Selection { concepts })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StumpResult {
    pub slot: usize,
    pub threshold: f64,
    /// true: predict class 1 when the feature is >= threshold.
    pub above_is_positive: bool,
    pub train_acc: f64,
    pub val_acc: f64,
}

/// One-feature threshold classifier over concept target rows. Used to audit
/// how separable the classes are from the concept table alone: if a single
/// concept already decides the label, that concept is doing the task head's
/// job for it.
pub fn decision_stump(
    train_rows: &[Vec<f64>],
    train_labels: &[u8],
    val_rows: &[Vec<f64>],
    val_labels: &[u8],
) -> Result<StumpResult> {
    if train_rows.is_empty() || train_rows.len() != train_labels.len() {
        return Err(Error::validation("stump needs labeled training rows"));
    }
    if val_rows.len() != val_labels.len() {
        return Err(Error::validation("stump needs labeled validation rows"));
    }
    let n_features = train_rows[0].len();
    if n_features == 0 {
        return Err(Error::validation("stump needs at least one feature"));
    }

    let acc = |rows: &[Vec<f64>], labels: &[u8], slot: usize, thr: f64, above: bool| -> f64 {
        let correct = rows
            .iter()
            .zip(labels)
            .filter(|(r, &y)| {
                let pred = (r[slot] >= thr) == above;
                pred == (y != 0)
            })
            .count();
        correct as f64 / labels.len() as f64
    };

    let mut best: Option<StumpResult> = None;
    for slot in 0..n_features {
        let mut values: Vec<f64> = train_rows.iter().map(|r| r[slot]).collect();
        values.sort_by(|a, b| a.partial_cmp(b).expect("finite concept value"));
        values.dedup();
        // Midpoints between distinct values, plus a trivial all-one cut.
        let mut thresholds = vec![f64::NEG_INFINITY];
        thresholds.extend(values.windows(2).map(|w| (w[0] + w[1]) / 2.0));
        for thr in thresholds {
            for above in [true, false] {
                let t = acc(train_rows, train_labels, slot, thr, above);
                if best.as_ref().is_none_or(|b| t > b.train_acc) {
                    best = Some(StumpResult {
                        slot,
                        threshold: thr,
                        above_is_positive: above,
                        train_acc: t,
                        val_acc: 0.0,
                    });
                }
            }
        }
    }
    let mut best = best.expect("at least one candidate");
    best.val_acc = if val_labels.is_empty() {
        f64::NAN
    } else {
        acc(
            val_rows,
            val_labels,
            best.slot,
            best.threshold,
            best.above_is_positive,
        )
    };
    Ok(best)
}
