//! Coverage, mean set size, and size-stratified coverage violation.

use serde::Serialize;
use thiserror::Error;

use crate::conformal::PredictionSet;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("sets and labels have different lengths ({sets} vs {labels})")]
    LengthMismatch { sets: usize, labels: usize },

    #[error("no examples")]
    Empty,

    #[error("invalid strata: {0}")]
    InvalidStrata(String),
}

/// Fraction of examples whose true label is inside the prediction set.
pub fn coverage(sets: &[PredictionSet], labels: &[usize]) -> Result<f64, MetricsError> {
    if sets.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            sets: sets.len(),
            labels: labels.len(),
        });
    }
    if sets.is_empty() {
        return Err(MetricsError::Empty);
    }
    let covered = sets
        .iter()
        .zip(labels)
        .filter(|(s, &y)| s.contains(y))
        .count();
    Ok(covered as f64 / sets.len() as f64)
}

/// Average number of labels per prediction set.
pub fn mean_size(sets: &[PredictionSet]) -> Result<f64, MetricsError> {
    if sets.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(sets.iter().map(|s| s.size()).sum::<usize>() as f64 / sets.len() as f64)
}

/// The finest partition of possible set sizes: {0}, {1}, ..., {C}.
pub fn singleton_strata(num_classes: usize) -> Vec<(usize, usize)> {
    (0..=num_classes).map(|s| (s, s)).collect()
}

fn validate_strata(strata: &[(usize, usize)], num_classes: usize) -> Result<(), MetricsError> {
    if strata.is_empty() {
        return Err(MetricsError::InvalidStrata("no strata given".into()));
    }
    let mut sorted = strata.to_vec();
    sorted.sort_unstable();
    let mut expected = 0usize;
    for &(lo, hi) in &sorted {
        if lo > hi {
            return Err(MetricsError::InvalidStrata(format!("range ({lo},{hi}) is inverted")));
        }
        if lo != expected {
            return Err(MetricsError::InvalidStrata(format!(
                "sizes {expected}..{lo} are uncovered or overlap at {lo}"
            )));
        }
        expected = hi + 1;
    }
    if expected != num_classes + 1 {
        return Err(MetricsError::InvalidStrata(format!(
            "strata stop at size {} but sizes go up to {num_classes}",
            expected - 1
        )));
    }
    Ok(())
}

/// Size-stratified coverage violation: the largest deviation of stratum
/// coverage from the nominal level, over nonempty strata. `None` when every
/// stratum is empty (no examples).
pub fn sscv(
    sets: &[PredictionSet],
    labels: &[usize],
    alpha: f64,
    strata: &[(usize, usize)],
    num_classes: usize,
) -> Result<Option<f64>, MetricsError> {
    if sets.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            sets: sets.len(),
            labels: labels.len(),
        });
    }
    validate_strata(strata, num_classes)?;
    let mut worst: Option<f64> = None;
    for &(lo, hi) in strata {
        let mut members = 0usize;
        let mut covered = 0usize;
        for (set, &y) in sets.iter().zip(labels) {
            let size = set.size();
            if size >= lo && size <= hi {
                members += 1;
                if set.contains(y) {
                    covered += 1;
                }
            }
        }
        if members == 0 {
            continue;
        }
        let dev = (covered as f64 / members as f64 - (1.0 - alpha)).abs();
        worst = Some(worst.map_or(dev, |w: f64| w.max(dev)));
    }
    Ok(worst)
}

/// One row of the per-stratum breakdown.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StratumReport {
    pub size_min: usize,
    pub size_max: usize,
    pub count: usize,
    pub coverage: f64,
}

/// Summary of a batch of prediction sets against their true labels.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub coverage: f64,
    pub mean_size: f64,
    pub sscv: Option<f64>,
    pub strata: Vec<StratumReport>,
}

impl MetricsReport {
    pub fn compute(
        sets: &[PredictionSet],
        labels: &[usize],
        alpha: f64,
        strata: &[(usize, usize)],
        num_classes: usize,
    ) -> Result<Self, MetricsError> {
        let coverage = coverage(sets, labels)?;
        let mean_size = mean_size(sets)?;
        let sscv = sscv(sets, labels, alpha, strata, num_classes)?;
        let mut breakdown = Vec::new();
        for &(lo, hi) in strata {
            let mut members = 0usize;
            let mut covered = 0usize;
            for (set, &y) in sets.iter().zip(labels) {
                let size = set.size();
                if size >= lo && size <= hi {
                    members += 1;
                    if set.contains(y) {
                        covered += 1;
                    }
                }
            }
            if members > 0 {
                breakdown.push(StratumReport {
                    size_min: lo,
                    size_max: hi,
                    count: members,
                    coverage: covered as f64 / members as f64,
                });
            }
        }
        Ok(Self {
            coverage,
            mean_size,
            sscv,
            strata: breakdown,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialization cannot fail")
    }

    /// One CSV row: coverage, mean size, sscv (empty when undefined).
    pub fn csv_row(&self) -> String {
        let sscv = self
            .sscv
            .map(|v| format!("{v:.6}"))
            .unwrap_or_default();
        format!("{:.6},{:.6},{sscv}", self.coverage, self.mean_size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(labels: &[usize]) -> PredictionSet {
        PredictionSet::from_labels(labels.to_vec())
    }

    #[test]
    fn coverage_edges() {
        let full = vec![set(&[0, 1, 2]); 4];
        assert_eq!(coverage(&full, &[0, 1, 2, 0]).unwrap(), 1.0);
        let empty = vec![set(&[]); 4];
        assert_eq!(coverage(&empty, &[0, 1, 2, 0]).unwrap(), 0.0);
        let sets = vec![set(&[0]), set(&[1]), set(&[0, 1])];
        let c = coverage(&sets, &[0, 0, 1]).unwrap();
        assert!((c - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn mean_size_edges() {
        assert_eq!(mean_size(&vec![set(&[]); 3]).unwrap(), 0.0);
        let full: Vec<PredictionSet> = (0..5).map(|_| set(&(0..9).collect::<Vec<_>>())).collect();
        assert_eq!(mean_size(&full).unwrap(), 9.0);
        let sets = vec![set(&[0]), set(&[0, 1]), set(&[0, 1, 2])];
        assert_eq!(mean_size(&sets).unwrap(), 2.0);
    }

    #[test]
    fn metrics_are_permutation_invariant() {
        let sets = vec![set(&[0]), set(&[1, 2]), set(&[0, 2]), set(&[])];
        let labels = vec![0, 2, 1, 0];
        let perm = [2usize, 0, 3, 1];
        let psets: Vec<PredictionSet> = perm.iter().map(|&i| sets[i].clone()).collect();
        let plabels: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        assert_eq!(coverage(&sets, &labels).unwrap(), coverage(&psets, &plabels).unwrap());
        assert_eq!(mean_size(&sets).unwrap(), mean_size(&psets).unwrap());
        let strata = singleton_strata(3);
        assert_eq!(
            sscv(&sets, &labels, 0.1, &strata, 3).unwrap(),
            sscv(&psets, &plabels, 0.1, &strata, 3).unwrap()
        );
    }

    #[test]
    fn sscv_exact_match_is_zero() {
        // Single stratum covering all sizes, coverage exactly 0.9.
        let mut sets = vec![set(&[0]); 9];
        sets.push(set(&[1]));
        let labels = vec![0; 10];
        let v = sscv(&sets, &labels, 0.1, &[(0, 2)], 2).unwrap().unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn sscv_full_covered_sets() {
        let sets = vec![set(&[0, 1, 2]); 8];
        let labels = vec![1; 8];
        let v = sscv(&sets, &labels, 0.1, &singleton_strata(3), 3)
            .unwrap()
            .unwrap();
        assert!((v - 0.1).abs() < 1e-12);
    }

    #[test]
    fn sscv_empty_input_is_undefined() {
        let v = sscv(&[], &[], 0.1, &singleton_strata(2), 2).unwrap();
        assert!(v.is_none());
    }

    #[test]
    fn sscv_rejects_bad_strata() {
        let sets = vec![set(&[0])];
        let labels = vec![0];
        // Gap: size 1 uncovered.
        assert!(sscv(&sets, &labels, 0.1, &[(0, 0), (2, 2)], 2).is_err());
        // Overlap.
        assert!(sscv(&sets, &labels, 0.1, &[(0, 1), (1, 2)], 2).is_err());
        // Truncated.
        assert!(sscv(&sets, &labels, 0.1, &[(0, 1)], 2).is_err());
    }

    #[test]
    fn report_matches_parts() {
        let sets = vec![set(&[0]), set(&[0, 1]), set(&[1]), set(&[0, 1, 2])];
        let labels = vec![0, 1, 0, 2];
        let strata = singleton_strata(3);
        let r = MetricsReport::compute(&sets, &labels, 0.1, &strata, 3).unwrap();
        assert_eq!(r.coverage, coverage(&sets, &labels).unwrap());
        assert_eq!(r.mean_size, mean_size(&sets).unwrap());
        assert_eq!(r.sscv, sscv(&sets, &labels, 0.1, &strata, 3).unwrap());
        let total: usize = r.strata.iter().map(|s| s.count).sum();
        assert_eq!(total, 4);
    }

    #[test]
    fn report_serializes_both_ways() {
        let sets = vec![set(&[0, 1]), set(&[1])];
        let labels = vec![0, 1];
        let r = MetricsReport::compute(&sets, &labels, 0.1, &singleton_strata(2), 2).unwrap();
        let json = r.to_json();
        assert!(json.contains("\"coverage\": 1.0"));
        assert_eq!(r.csv_row(), "1.000000,1.500000,0.100000");
    }
}
