//! Binary classification metrics over class-1 probabilities.
//!
//! Ratios over an empty class come back as `None` and render as "na" so a
//! degenerate validation fold never turns into a silent 0/0. The AUC uses
//! exact tie handling: the doubled trapezoid area is accumulated in integer
//! arithmetic and divided once, which makes it identical (bitwise, not just
//! approximately) to the pairwise win/tie count it is meant to summarize.

/// Predicted class 1 when the class-1 probability is at least this.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub true_pos: usize,
    pub false_neg: usize,
    pub false_pos: usize,
    pub true_neg: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub counts: ConfusionCounts,
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub auc: Option<f64>,
}

/// Stable two-class softmax, computed in f64.
pub fn softmax2(logit0: f64, logit1: f64) -> (f64, f64) {
    let m = logit0.max(logit1);
    let e0 = (logit0 - m).exp();
    let e1 = (logit1 - m).exp();
    let z = e0 + e1;
    (e0 / z, e1 / z)
}

pub fn confusion(probs: &[f64], labels: &[u8]) -> ConfusionCounts {
    assert_eq!(probs.len(), labels.len());
    let mut c = ConfusionCounts::default();
    for (&p, &y) in probs.iter().zip(labels) {
        let pred = p >= DECISION_THRESHOLD;
        match (y != 0, pred) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_neg += 1,
            (false, true) => c.false_pos += 1,
            (false, false) => c.true_neg += 1,
        }
    }
    c
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn compute_metrics(probs: &[f64], labels: &[u8]) -> Metrics {
    let c = confusion(probs, labels);
    let pos = c.true_pos + c.false_neg;
    let neg = c.true_neg + c.false_pos;
    Metrics {
        counts: c,
        accuracy: ratio(c.true_pos + c.true_neg, pos + neg),
        sensitivity: ratio(c.true_pos, pos),
        specificity: ratio(c.true_neg, neg),
        auc: roc_auc(probs, labels),
    }
}

/// Render a metric for reports; absent values come out as "na".
pub fn metric_cell(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{v}"),
        None => "na".to_string(),
    }
}

/// Area under the ROC curve with exact tie handling. `None` when either
/// class is empty.
pub fn roc_auc(probs: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(probs.len(), labels.len());
    let pos = labels.iter().filter(|&&y| y != 0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).expect("finite probability"));

    // Walk thresholds from high to low; each tie group moves the ROC point
    // diagonally, so the doubled trapezoid area stays integral.
    let mut area2 = 0u64;
    let mut tp = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut dtp = 0u64;
        let mut dfp = 0u64;
        while j < order.len() && probs[order[j]] == probs[order[i]] {
            if labels[order[j]] != 0 {
                dtp += 1;
            } else {
                dfp += 1;
            }
            j += 1;
        }
        area2 += dfp * (2 * tp + dtp);
        tp += dtp;
        i = j;
    }
    Some(area2 as f64 / (2 * pos as u64 * neg as u64) as f64)
}

/// ROC curve as (threshold, fpr, tpr), from the all-negative corner at an
/// infinite threshold down to (1, 1).
pub fn roc_points(probs: &[f64], labels: &[u8]) -> Vec<(f64, f64, f64)> {
    assert_eq!(probs.len(), labels.len());
    let pos = labels.iter().filter(|&&y| y != 0).count();
    let neg = labels.len() - pos;
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).expect("finite probability"));

    let rate = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    let mut points = vec![(f64::INFINITY, 0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = probs[order[i]];
        while i < order.len() && probs[order[i]] == t {
            if labels[order[i]] != 0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((t, rate(fp, neg), rate(tp, pos)));
    }
    points
}

/// Per-fold |train - val| accuracy gaps.
pub fn accuracy_gaps(train: &[f64], val: &[f64]) -> Vec<f64> {
    assert_eq!(train.len(), val.len());
    train.iter().zip(val).map(|(&t, &v)| (t - v).abs()).collect()
}

/// How many folds keep their gap within the limit.
pub fn folds_within_gap(gaps: &[f64], max_gap: f64) -> usize {
    gaps.iter().filter(|&&g| g <= max_gap).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Reference AUC: explicit Mann-Whitney pairwise comparison, assembled
    /// from the same integer quantities as the production path.
    fn pairwise_auc(probs: &[f64], labels: &[u8]) -> Option<f64> {
        let pos: Vec<f64> = probs
            .iter()
            .zip(labels)
            .filter(|(_, &y)| y != 0)
            .map(|(&p, _)| p)
            .collect();
        let neg: Vec<f64> = probs
            .iter()
            .zip(labels)
            .filter(|(_, &y)| y == 0)
            .map(|(&p, _)| p)
            .collect();
        if pos.is_empty() || neg.is_empty() {
            return None;
        }
        let mut wins = 0u64;
        let mut ties = 0u64;
        for &p in &pos {
            for &n in &neg {
                if p > n {
                    wins += 1;
                } else if p == n {
                    ties += 1;
                }
            }
        }
        Some((2 * wins + ties) as f64 / (2 * pos.len() as u64 * neg.len() as u64) as f64)
    }

    #[test]
    fn confusion_counts_at_half_threshold() {
        let probs = [0.9, 0.5, 0.49, 0.1, 0.7, 0.2];
        let labels = [1, 0, 1, 0, 1, 1];
        let c = confusion(&probs, &labels);
        // 0.5 itself predicts class 1.
        assert_eq!(
            c,
            ConfusionCounts {
                true_pos: 2,
                false_neg: 2,
                false_pos: 1,
                true_neg: 1
            }
        );
    }

    #[test]
    fn metrics_match_hand_computation() {
        let probs = [0.9, 0.8, 0.8, 0.3, 0.2];
        let labels = [1, 1, 0, 0, 1];
        let m = compute_metrics(&probs, &labels);
        // Predictions [1, 1, 1, 0, 0] against [1, 1, 0, 0, 1].
        assert_eq!(m.accuracy, Some(3.0 / 5.0));
        assert_eq!(m.sensitivity, Some(2.0 / 3.0));
        assert_eq!(m.specificity, Some(1.0 / 2.0));
        // pos {0.9, 0.8, 0.2} vs neg {0.8, 0.3}: 3 wins, 1 tie of 6 pairs.
        assert_eq!(m.auc, Some(7.0 / 12.0));
    }

    #[test]
    fn single_class_rates_are_absent_and_render_na() {
        let m = compute_metrics(&[0.9, 0.2], &[1, 1]);
        assert_eq!(m.sensitivity, Some(0.5));
        assert_eq!(m.specificity, None);
        assert_eq!(m.auc, None);
        assert_eq!(metric_cell(m.specificity), "na");
        assert_eq!(metric_cell(Some(0.25)), "0.25");
        assert_eq!(compute_metrics(&[], &[]).accuracy, None);
    }

    #[test]
    fn auc_extremes() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]), Some(1.0));
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[1, 1, 0, 0]), Some(0.0));
        // Constant score: every pair ties.
        assert_eq!(roc_auc(&[0.4, 0.4, 0.4], &[1, 0, 1]), Some(0.5));
    }

    #[test]
    fn roc_points_trace_the_curve() {
        let probs = [0.9, 0.8, 0.8, 0.3, 0.2];
        let labels = [1, 1, 0, 0, 1];
        let pts = roc_points(&probs, &labels);
        assert_eq!(pts[0], (f64::INFINITY, 0.0, 0.0));
        assert_eq!(pts[1], (0.9, 0.0, 1.0 / 3.0));
        assert_eq!(pts[2], (0.8, 0.5, 2.0 / 3.0));
        assert_eq!(pts[3], (0.3, 1.0, 2.0 / 3.0));
        assert_eq!(pts[4], (0.2, 1.0, 1.0));
        for w in pts.windows(2) {
            assert!(w[1].1 >= w[0].1 && w[1].2 >= w[0].2);
            assert!(w[1].0 < w[0].0);
        }
    }

    #[test]
    fn softmax2_is_stable_and_normalized() {
        let (p0, p1) = softmax2(0.0, 0.0);
        assert_eq!(p0, 0.5);
        assert_eq!(p1, 0.5);
        let (p0, p1) = softmax2(1000.0, 900.0);
        assert!(p0 > 0.999 && p1 < 1e-40);
        assert!((p0 + p1 - 1.0).abs() < 1e-15);
        let (lo, hi) = softmax2(-3.0, 1.5);
        assert!((lo + hi - 1.0).abs() < 1e-15);
        assert!(hi > lo);
    }

    #[test]
    fn gap_audit_counts_folds() {
        let gaps = accuracy_gaps(&[0.95, 0.9, 0.99, 0.8], &[0.9, 0.88, 0.8, 0.85]);
        let expect = [0.05, 0.02, 0.19, 0.05];
        assert_eq!(gaps.len(), expect.len());
        for (g, e) in gaps.iter().zip(expect) {
            assert!((g - e).abs() < 1e-12);
        }
        assert_eq!(folds_within_gap(&gaps, 0.1), 3);
        assert_eq!(folds_within_gap(&gaps, 0.01), 0);
    }

    proptest! {
        #[test]
        fn trapezoid_auc_equals_pairwise(
            entries in proptest::collection::vec((0u8..=1, 0u32..8), 2..40)
        ) {
            // Coarse score grid forces plenty of ties.
            let labels: Vec<u8> = entries.iter().map(|&(y, _)| y).collect();
            let probs: Vec<f64> = entries.iter().map(|&(_, q)| q as f64 / 7.0).collect();
            let fast = roc_auc(&probs, &labels);
            let slow = pairwise_auc(&probs, &labels);
            prop_assert_eq!(fast, slow);
        }
    }
}
