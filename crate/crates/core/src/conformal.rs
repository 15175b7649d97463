//! Split conformal prediction with the negative log-probability score.
//!
//! With `n` calibration scores and miscoverage `alpha`, the threshold is the
//! `k`-th smallest score for `k = ⌈(1 − alpha)(n + 1)⌉`, or `+∞` when
//! `k > n`. A test item's set holds every label whose score is at most the
//! threshold; the set may be empty.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gcn::argmax;
use crate::graph::SplitSpec;
use crate::numerics::Matrix;

/// Probabilities are clamped to this before taking the log.
pub const SCORE_EPSILON: f64 = 1e-12;

/// Class probabilities for every item (node or graph) plus the true labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveTable {
    pub probs: Matrix,
    pub labels: Vec<usize>,
}

impl PredictiveTable {
    pub fn new(probs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if probs.rows() != labels.len() {
            return Err(Error::shape(
                "PredictiveTable",
                format!("{} rows for {} labels", probs.rows(), labels.len()),
            ));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= probs.cols()) {
            return Err(Error::InvalidArgument(format!(
                "label {y} out of range for {} classes",
                probs.cols()
            )));
        }
        Ok(Self { probs, labels })
    }

    pub fn num_items(&self) -> usize {
        self.probs.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.probs.cols()
    }

    /// Score of the true label of `item`.
    pub fn score(&self, item: usize) -> Result<f64> {
        let label = *self
            .labels
            .get(item)
            .ok_or_else(|| Error::InvalidArgument(format!("item {item} not in table")))?;
        nll_score(self.probs.row(item), label)
    }
}

/// `−log(max(p[label], ε))`.
pub fn nll_score(probs: &[f64], label: usize) -> Result<f64> {
    let p = probs.get(label).ok_or_else(|| {
        Error::InvalidArgument(format!("label {label} out of range for {} classes", probs.len()))
    })?;
    Ok(-p.max(SCORE_EPSILON).ln())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("alpha {alpha} outside (0, 1)")))
    }
}

/// Rank `⌈(1 − alpha)(n + 1)⌉` of the threshold among `n` scores.
///
/// A product within a relative `1e-9` of an integer is taken as that
/// integer, so decimal levels such as `0.1` behave as their decimal value
/// rather than their binary approximation.
pub fn quantile_rank(n: usize, alpha: f64) -> Result<usize> {
    check_alpha(alpha)?;
    let x = (1.0 - alpha) * (n as f64 + 1.0);
    let nearest = x.round();
    let k = if (x - nearest).abs() <= 1e-9 * x.max(1.0) { nearest } else { x.ceil() };
    Ok(k as usize)
}

/// Conformal threshold; `f64::INFINITY` when the rank exceeds `n`.
pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Result<f64> {
    let k = quantile_rank(scores.len(), alpha)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN calibration score".into()));
    }
    if k > scores.len() {
        return Ok(f64::INFINITY);
    }
    let mut work = scores.to_vec();
    let (_, kth, _) = work.select_nth_unstable_by(k - 1, f64::total_cmp);
    Ok(*kth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub item: usize,
    /// Included labels in increasing order.
    pub labels: Vec<usize>,
    pub threshold: f64,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn contains(&self, label: usize) -> bool {
        self.labels.binary_search(&label).is_ok()
    }
}

/// Labels whose score is `<= threshold`.
pub fn build_prediction_set(item: usize, probs: &[f64], threshold: f64) -> PredictionSet {
    let labels = (0..probs.len())
        .filter(|&y| -probs[y].max(SCORE_EPSILON).ln() <= threshold)
        .collect();
    PredictionSet {
        item,
        labels,
        threshold,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConformalConfig {
    pub alpha: f64,
    /// Put the argmax label into otherwise empty sets.
    pub force_nonempty: bool,
}

impl Default for ConformalConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            force_nonempty: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConformalResult {
    pub threshold: f64,
    pub calibration_scores: Vec<f64>,
    /// One set per test item, in `split.test` order.
    pub sets: Vec<PredictionSet>,
    pub covered: Vec<bool>,
    /// How many sets were empty and had the argmax label forced in.
    pub forced: usize,
}

/// Calibrates on `split.calibration` and builds sets for `split.test`.
pub fn run_scp(table: &PredictiveTable, split: &SplitSpec, config: &ConformalConfig) -> Result<ConformalResult> {
    check_alpha(config.alpha)?;
    let n = table.num_items();
    if let Some(&i) = split.calibration.iter().chain(&split.test).find(|&&i| i >= n) {
        return Err(Error::shape(
            "run_scp",
            format!("split item {i} outside a table of {n} items"),
        ));
    }
    let calibration_scores = split
        .calibration
        .iter()
        .map(|&i| table.score(i))
        .collect::<Result<Vec<_>>>()?;
    let threshold = conformal_quantile(&calibration_scores, config.alpha)?;
    let mut forced = 0;
    let mut sets = Vec::with_capacity(split.test.len());
    let mut covered = Vec::with_capacity(split.test.len());
    for &i in &split.test {
        let probs = table.probs.row(i);
        let mut set = build_prediction_set(i, probs, threshold);
        if set.is_empty() && config.force_nonempty {
            set.labels.push(argmax(probs));
            forced += 1;
        }
        covered.push(set.contains(table.labels[i]));
        sets.push(set);
    }
    Ok(ConformalResult {
        threshold,
        calibration_scores,
        sets,
        covered,
        forced,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn nll_score_examples() {
        assert_eq!(nll_score(&[0.0, 1.0], 1).unwrap(), 0.0);
        let e = std::f64::consts::E;
        assert!((nll_score(&[1.0 / e, 1.0 - 1.0 / e], 0).unwrap() - 1.0).abs() < 1e-15);
        let clamp = nll_score(&[0.0, 1.0], 0).unwrap();
        assert_eq!(clamp, -(1e-12f64).ln());
        assert!((clamp - 27.631).abs() < 1e-3);
        assert!(nll_score(&[0.5, 0.5], 2).is_err());
    }

    #[test]
    fn quantile_examples() {
        let nine: Vec<f64> = (0..9).map(|i| (i * 7 % 9) as f64).collect();
        assert_eq!(conformal_quantile(&nine, 0.1).unwrap(), 8.0);
        assert_eq!(conformal_quantile(&[4.0, 1.0, 3.0, 2.0], 0.5).unwrap(), 3.0);
        assert_eq!(conformal_quantile(&[1.0, 2.0, 3.0], 0.1).unwrap(), f64::INFINITY);
        assert_eq!(conformal_quantile(&[], 0.5).unwrap(), f64::INFINITY);
        assert!(conformal_quantile(&[1.0], 0.0).is_err());
        assert!(conformal_quantile(&[1.0], 1.0).is_err());
    }

    #[test]
    fn duplicates_count_with_multiplicity() {
        // n = 4, alpha = 0.5 -> k = 3
        assert_eq!(conformal_quantile(&[1.0, 1.0, 1.0, 5.0], 0.5).unwrap(), 1.0);
        assert_eq!(conformal_quantile(&[1.0, 5.0, 5.0, 5.0], 0.5).unwrap(), 5.0);
    }

    #[test]
    fn prediction_set_examples() {
        let full = build_prediction_set(0, &[0.1; 7], f64::INFINITY);
        assert_eq!(full.labels, (0..7).collect::<Vec<_>>());

        let c = 4.0f64;
        let uniform = build_prediction_set(0, &[0.25; 4], c.ln());
        assert_eq!(uniform.len(), 4);

        // scores 0.357, 1.609, 2.303: only label 0 is within 1.0
        let s = build_prediction_set(3, &[0.7, 0.2, 0.1], 1.0);
        assert_eq!(s.labels, vec![0]);
        let s = build_prediction_set(3, &[0.7, 0.2, 0.1], 1.7);
        assert_eq!(s.labels, vec![0, 1]);
        assert_eq!(s.item, 3);
    }

    fn split(cal: Vec<usize>, test: Vec<usize>) -> SplitSpec {
        SplitSpec {
            train: vec![],
            calibration: cal,
            test,
            seed: 0,
        }
    }

    #[test]
    fn perfect_calibration_gives_zero_threshold() {
        let probs = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            vec![0.4, 0.6],
        ])
        .unwrap();
        let table = PredictiveTable::new(probs, vec![0, 1, 0, 1]).unwrap();
        let r = run_scp(&table, &split(vec![0, 1], vec![2, 3]), &ConformalConfig { alpha: 0.5, force_nonempty: false }).unwrap();
        assert_eq!(r.threshold, 0.0);
        assert_eq!(r.sets[0].labels, vec![0]);
        assert!(r.sets[1].is_empty());
        assert_eq!(r.covered, vec![true, false]);

        let forced = run_scp(&table, &split(vec![0, 1], vec![2, 3]), &ConformalConfig { alpha: 0.5, force_nonempty: true }).unwrap();
        assert_eq!(forced.sets[1].labels, vec![1]);
        assert_eq!(forced.forced, 1);
        assert_eq!(forced.covered, vec![true, true]);
    }

    #[test]
    fn empty_calibration_gives_full_sets() {
        let probs = Matrix::from_rows(&[vec![0.9, 0.05, 0.05], vec![0.2, 0.3, 0.5]]).unwrap();
        let table = PredictiveTable::new(probs, vec![0, 1]).unwrap();
        let r = run_scp(&table, &split(vec![], vec![0, 1]), &ConformalConfig::default()).unwrap();
        assert_eq!(r.threshold, f64::INFINITY);
        assert!(r.sets.iter().all(|s| s.len() == 3));
        assert!(r.covered.iter().all(|&c| c));
    }

    #[test]
    fn split_outside_table_is_rejected() {
        let table = PredictiveTable::new(Matrix::filled(2, 2, 0.5), vec![0, 1]).unwrap();
        assert!(matches!(
            run_scp(&table, &split(vec![0], vec![5]), &ConformalConfig::default()),
            Err(Error::Shape { .. })
        ));
    }

    proptest! {
        #[test]
        fn threshold_nonincreasing_in_alpha(
            scores in prop::collection::vec(0.0f64..10.0, 0..60),
            a in 0.01f64..0.98,
            b in 0.01f64..0.98,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(conformal_quantile(&scores, hi).unwrap() <= conformal_quantile(&scores, lo).unwrap());
        }

        #[test]
        fn duplicate_of_max_never_lowers_threshold(
            scores in prop::collection::vec(0.0f64..10.0, 1..60),
            alpha in 0.01f64..0.99,
        ) {
            let before = conformal_quantile(&scores, alpha).unwrap();
            let max = scores.iter().copied().fold(f64::MIN, f64::max);
            let mut more = scores.clone();
            more.push(max);
            let after = conformal_quantile(&more, alpha).unwrap();
            if before.is_finite() {
                prop_assert!(after >= before);
            } else {
                // the extra score can replace the infinite augmentation, but
                // only by the maximum itself
                prop_assert!(after >= max);
            }
        }

        #[test]
        fn label_permutation_permutes_sets(
            raw in prop::collection::vec(0.01f64..1.0, 4),
            threshold in 0.0f64..5.0,
            shift in 0usize..4,
        ) {
            let total: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|x| x / total).collect();
            let perm: Vec<usize> = (0..4).map(|k| (k + shift) % 4).collect();
            let mut q = vec![0.0; 4];
            for k in 0..4 {
                q[perm[k]] = p[k];
            }
            let a = build_prediction_set(0, &p, threshold);
            let b = build_prediction_set(0, &q, threshold);
            let mut mapped: Vec<usize> = a.labels.iter().map(|&k| perm[k]).collect();
            mapped.sort_unstable();
            prop_assert_eq!(mapped, b.labels);
        }
    }
}
