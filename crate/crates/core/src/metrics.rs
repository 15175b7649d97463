//! Conformal evaluation (coverage, inefficiency) and calibration measures.
//!
//! Reliability bins: with `M` bins, bin `m` (1-based) covers confidences in
//! `((m − 1)/M, m/M]`. The point prediction is the argmax (lowest index on
//! ties) and the confidence is its probability.

use serde::{Deserialize, Serialize};

use crate::conformal::{ConformalResult, PredictionSet};
use crate::error::{Error, Result};
use crate::gcn::argmax;
use crate::numerics::Matrix;

pub const DEFAULT_BINS: usize = 20;

/// Fraction of covered test items.
pub fn empirical_coverage(covered: &[bool]) -> Result<f64> {
    if covered.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    Ok(covered.iter().filter(|&&c| c).count() as f64 / covered.len() as f64)
}

/// Mean prediction-set size.
pub fn empirical_inefficiency(sets: &[PredictionSet]) -> Result<f64> {
    if sets.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    Ok(sets.iter().map(PredictionSet::len).sum::<usize>() as f64 / sets.len() as f64)
}

pub fn empty_set_rate(sets: &[PredictionSet]) -> Result<f64> {
    if sets.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    Ok(sets.iter().filter(|s| s.is_empty()).count() as f64 / sets.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub count: usize,
    /// Mean accuracy; 0 for an empty bin.
    pub accuracy: f64,
    /// Mean confidence; 0 for an empty bin.
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityDiagram {
    counts: Vec<usize>,
    hits: Vec<f64>,
    confidence_sums: Vec<f64>,
}

impl ReliabilityDiagram {
    pub fn empty(num_bins: usize) -> Result<Self> {
        if num_bins == 0 {
            return Err(Error::InvalidArgument("a reliability diagram needs at least one bin".into()));
        }
        Ok(Self {
            counts: vec![0; num_bins],
            hits: vec![0.0; num_bins],
            confidence_sums: vec![0.0; num_bins],
        })
    }

    /// Diagram from per-bin counts and means.
    pub fn from_bins(bins: &[Bin]) -> Result<Self> {
        let mut d = Self::empty(bins.len())?;
        for (m, b) in bins.iter().enumerate() {
            d.counts[m] = b.count;
            d.hits[m] = b.accuracy * b.count as f64;
            d.confidence_sums[m] = b.confidence * b.count as f64;
        }
        Ok(d)
    }

    pub fn num_bins(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// 0-based bin index of a confidence in `(0, 1]`.
    pub fn bin_of(&self, confidence: f64) -> usize {
        let m = self.num_bins();
        ((confidence * m as f64).ceil() as usize).clamp(1, m) - 1
    }

    pub fn add(&mut self, confidence: f64, correct: bool) {
        let b = self.bin_of(confidence);
        self.counts[b] += 1;
        self.hits[b] += if correct { 1.0 } else { 0.0 };
        self.confidence_sums[b] += confidence;
    }

    /// Pools another diagram with the same bin count into this one.
    pub fn merge(&mut self, other: &ReliabilityDiagram) -> Result<()> {
        if other.num_bins() != self.num_bins() {
            return Err(Error::shape(
                "ReliabilityDiagram::merge",
                format!("{} bins vs {}", self.num_bins(), other.num_bins()),
            ));
        }
        for m in 0..self.num_bins() {
            self.counts[m] += other.counts[m];
            self.hits[m] += other.hits[m];
            self.confidence_sums[m] += other.confidence_sums[m];
        }
        Ok(())
    }

    pub fn bins(&self) -> Vec<Bin> {
        (0..self.num_bins())
            .map(|m| {
                let n = self.counts[m];
                if n == 0 {
                    Bin {
                        count: 0,
                        accuracy: 0.0,
                        confidence: 0.0,
                    }
                } else {
                    Bin {
                        count: n,
                        accuracy: self.hits[m] / n as f64,
                        confidence: self.confidence_sums[m] / n as f64,
                    }
                }
            })
            .collect()
    }
}

pub fn reliability(probs: &Matrix, labels: &[usize], items: &[usize], num_bins: usize) -> Result<ReliabilityDiagram> {
    let mut d = ReliabilityDiagram::empty(num_bins)?;
    for &i in items {
        if i >= probs.rows() || i >= labels.len() {
            return Err(Error::shape("reliability", format!("item {i} out of range")));
        }
        let row = probs.row(i);
        let yhat = argmax(row);
        d.add(row[yhat], yhat == labels[i]);
    }
    Ok(d)
}

fn nonempty(diagram: &ReliabilityDiagram) -> Result<Vec<Bin>> {
    let bins: Vec<Bin> = diagram.bins().into_iter().filter(|b| b.count > 0).collect();
    if bins.is_empty() {
        return Err(Error::EmptyDiagram);
    }
    Ok(bins)
}

/// `Σ_m (|B_m| / n) · |acc(B_m) − conf(B_m)|`.
pub fn ece(diagram: &ReliabilityDiagram) -> Result<f64> {
    let bins = nonempty(diagram)?;
    let n = diagram.total() as f64;
    Ok(bins
        .iter()
        .map(|b| b.count as f64 / n * (b.accuracy - b.confidence).abs())
        .sum())
}

/// Largest `|acc − conf|` over nonempty bins.
pub fn mce(diagram: &ReliabilityDiagram) -> Result<f64> {
    let bins = nonempty(diagram)?;
    Ok(bins
        .iter()
        .map(|b| (b.accuracy - b.confidence).abs())
        .fold(0.0, f64::max))
}

/// `mce / accuracy`, or `None` when accuracy is 0.
pub fn combined_measure(mce: f64, accuracy: f64) -> Option<f64> {
    (accuracy > 0.0).then(|| mce / accuracy)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub coverage: f64,
    pub inefficiency: f64,
    pub empty_set_rate: f64,
    pub accuracy: f64,
    pub ece: f64,
    pub mce: f64,
    pub combined: Option<f64>,
    pub threshold: f64,
    pub forced: usize,
}

/// Metrics over the test items of one conformal run. Returns the test-set
/// reliability diagram alongside the report.
pub fn evaluate(
    probs: &Matrix,
    labels: &[usize],
    test: &[usize],
    result: &ConformalResult,
    num_bins: usize,
) -> Result<(MetricsReport, ReliabilityDiagram)> {
    let coverage = empirical_coverage(&result.covered)?;
    let inefficiency = empirical_inefficiency(&result.sets)?;
    let empty = empty_set_rate(&result.sets)?;
    let diagram = reliability(probs, labels, test, num_bins)?;
    let accuracy = crate::gcn::accuracy(probs, labels, test);
    let mce_value = mce(&diagram)?;
    let report = MetricsReport {
        coverage,
        inefficiency,
        empty_set_rate: empty,
        accuracy,
        ece: ece(&diagram)?,
        mce: mce_value,
        combined: combined_measure(mce_value, accuracy),
        threshold: result.threshold,
        forced: result.forced,
    };
    Ok((report, diagram))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(labels: Vec<usize>) -> PredictionSet {
        PredictionSet {
            item: 0,
            labels,
            threshold: 1.0,
        }
    }

    #[test]
    fn coverage_examples() {
        assert_eq!(empirical_coverage(&[true; 5]).unwrap(), 1.0);
        assert_eq!(empirical_coverage(&[false; 5]).unwrap(), 0.0);
        let mut nine = vec![true; 9];
        nine.push(false);
        assert_eq!(empirical_coverage(&nine).unwrap(), 0.9);
        assert!(matches!(empirical_coverage(&[]), Err(Error::EmptyTestSet)));
    }

    #[test]
    fn inefficiency_examples() {
        assert_eq!(empirical_inefficiency(&[set(vec![0]), set(vec![2])]).unwrap(), 1.0);
        let full = set((0..7).collect());
        assert_eq!(empirical_inefficiency(&[full.clone(), full]).unwrap(), 7.0);
        let sizes = [set(vec![0]), set(vec![0, 1]), set(vec![0, 1, 2])];
        assert_eq!(empirical_inefficiency(&sizes).unwrap(), 2.0);
        assert!(empirical_inefficiency(&[]).is_err());
        assert_eq!(empty_set_rate(&[set(vec![]), set(vec![1])]).unwrap(), 0.5);
    }

    #[test]
    fn confident_and_correct_fills_last_bin() {
        let probs = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let d = reliability(&probs, &[0, 1], &[0, 1], 20).unwrap();
        let bins = d.bins();
        assert_eq!(bins[19], Bin { count: 2, accuracy: 1.0, confidence: 1.0 });
        assert_eq!(d.total(), 2);
        assert_eq!(ece(&d).unwrap(), 0.0);
    }

    #[test]
    fn bin_edges_are_right_closed() {
        let d = ReliabilityDiagram::empty(20).unwrap();
        assert_eq!(d.bin_of(0.05), 0);
        assert_eq!(d.bin_of(0.5), 9);
        assert_eq!(d.bin_of(0.5000001), 10);
        assert_eq!(d.bin_of(1.0), 19);
        assert_eq!(d.bin_of(1e-9), 0);
    }

    #[test]
    fn hand_built_six_samples() {
        // bin 11, (0.5, 0.55]: confidences 0.55, 0.52, hits 1, 1
        // bin 12, (0.55, 0.6]: 0.6, miss
        // bin 17, (0.8, 0.85]: 0.82, 0.84, 0.83, hits 1, 1, 0
        let rows = [
            vec![0.55, 0.45],
            vec![0.4, 0.6],
            vec![0.52, 0.48],
            vec![0.18, 0.82],
            vec![0.84, 0.16],
            vec![0.83, 0.17],
        ];
        let probs = Matrix::from_rows(&rows).unwrap();
        let labels = [0, 0, 0, 1, 0, 1];
        let d = reliability(&probs, &labels, &[0, 1, 2, 3, 4, 5], 20).unwrap();
        let bins = d.bins();
        assert_eq!(d.total(), 6);
        assert_eq!((bins[10].count, bins[11].count, bins[16].count), (2, 1, 3));
        assert_eq!(bins[10].accuracy, 1.0);
        assert!((bins[10].confidence - 0.535).abs() < 1e-15);
        assert_eq!((bins[11].accuracy, bins[11].confidence), (0.0, 0.6));
        assert!((bins[16].accuracy - 2.0 / 3.0).abs() < 1e-15);
        assert!((bins[16].confidence - 0.83).abs() < 1e-15);
    }

    #[test]
    fn ece_mce_examples() {
        let perfect = ReliabilityDiagram::from_bins(&[
            Bin { count: 4, accuracy: 0.25, confidence: 0.25 },
            Bin { count: 2, accuracy: 0.5, confidence: 0.5 },
        ])
        .unwrap();
        assert_eq!(ece(&perfect).unwrap(), 0.0);
        assert_eq!(mce(&perfect).unwrap(), 0.0);

        let single = ReliabilityDiagram::from_bins(&[Bin { count: 10, accuracy: 0.6, confidence: 0.9 }]).unwrap();
        assert!((ece(&single).unwrap() - 0.3).abs() < 1e-12);
        assert!((mce(&single).unwrap() - 0.3).abs() < 1e-12);

        assert!(matches!(ece(&ReliabilityDiagram::empty(20).unwrap()), Err(Error::EmptyDiagram)));
    }

    #[test]
    fn combined_measure_examples() {
        assert!((combined_measure(0.2, 0.8).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(combined_measure(0.0, 0.5), Some(0.0));
        assert_eq!(combined_measure(0.3, 0.0), None);
    }

    #[test]
    fn merge_pools_counts() {
        let mut a = ReliabilityDiagram::empty(4).unwrap();
        a.add(0.9, true);
        let mut b = ReliabilityDiagram::empty(4).unwrap();
        b.add(0.8, false);
        b.add(0.3, true);
        a.merge(&b).unwrap();
        assert_eq!(a.total(), 3);
        assert_eq!(a.bins()[3].count, 2);
        assert_eq!(a.bins()[3].accuracy, 0.5);
        assert!(a.merge(&ReliabilityDiagram::empty(5).unwrap()).is_err());
    }

    proptest! {
        #[test]
        fn ece_never_exceeds_mce(
            bins in prop::collection::vec((0usize..50, 0.0f64..=1.0, 0.0f64..=1.0), 1..20),
        ) {
            let bins: Vec<Bin> = bins.into_iter().map(|(count, accuracy, confidence)| Bin { count, accuracy, confidence }).collect();
            let d = ReliabilityDiagram::from_bins(&bins).unwrap();
            prop_assume!(d.total() > 0);
            prop_assert!(ece(&d).unwrap() <= mce(&d).unwrap() + 1e-15);
        }

        #[test]
        fn every_positive_confidence_lands_in_one_bin(conf in 1e-12f64..=1.0, m in 1usize..50) {
            let d = ReliabilityDiagram::empty(m).unwrap();
            let b = d.bin_of(conf);
            prop_assert!(b < m);
            prop_assert!(conf > b as f64 / m as f64 - 1e-12);
            prop_assert!(conf <= (b + 1) as f64 / m as f64 + 1e-12);
        }

        #[test]
        fn scaling_logits_keeps_predictions(
            logits in prop::collection::vec(-5.0f64..5.0, 3..6),
            c in 0.1f64..10.0,
        ) {
            let base = Matrix::new(1, logits.len(), logits.clone()).unwrap();
            let scaled = Matrix::new(1, logits.len(), logits.iter().map(|x| x * c).collect()).unwrap();
            let a = crate::numerics::softmax_rows(&base);
            let b = crate::numerics::softmax_rows(&scaled);
            prop_assert_eq!(argmax(a.row(0)), argmax(b.row(0)));
        }
    }
}
