//! ROC analysis and score histograms.
//!
//! Labels are `true` for anomalous samples. A sample is flagged when its
//! score is at or above the threshold, so tied scores enter the curve
//! together and receive half credit in the area.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// ROC points from `(0, 0)` to `(1, 1)` and the area beneath them.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// `(false_positive_rate, true_positive_rate)`, both non-decreasing.
    pub points: Vec<(f64, f64)>,
    /// Decision threshold reached at each point after the first.
    pub thresholds: Vec<f64>,
    pub auroc: f64,
}

impl RocCurve {
    /// `fpr,tpr` lines behind a `#` header, readable by gnuplot.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("# fpr,tpr\n");
        for (fpr, tpr) in &self.points {
            writeln!(out, "{fpr},{tpr}").expect("writing to a String");
        }
        out
    }
}

fn check(scores: &[f64], labels: &[bool]) -> Result<(u64, u64)> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::InvalidArgument(format!("score {i} is NaN")));
    }
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument(
            "ROC analysis needs both normal and anomalous samples".into(),
        ));
    }
    Ok((pos, neg))
}

/// Sweeps every distinct score from high to low.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    let (pos, neg) = check(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    // Twice the area in units of one (positive, negative) pair; exact in integers.
    let mut twice_area: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        twice_area += u128::from(fp - fp0) * u128::from(tp + tp0);
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        thresholds.push(threshold);
    }
    let auroc = twice_area as f64 / (2.0 * pos as f64 * neg as f64);
    Ok(RocCurve {
        points,
        thresholds,
        auroc,
    })
}

/// Probability that an anomaly outscores a normal sample, ties counting half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    Ok(roc_curve(scores, labels)?.auroc)
}

/// Uniform bins on `[lo, hi]`; everything above `hi` falls into the last bin.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `lo,hi,count` per bin; the last bin's upper edge is open.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("# lo,hi,count\n");
        let n = self.counts.len();
        let width = (self.hi - self.lo) / n as f64;
        for (k, c) in self.counts.iter().enumerate() {
            let lo = self.lo + k as f64 * width;
            let hi = if k + 1 == n { f64::INFINITY } else { lo + width };
            writeln!(out, "{lo},{hi},{c}").expect("writing to a String");
        }
        out
    }
}

/// Bins span from the smallest score up to `clip_max`.
pub fn histogram(scores: &[f64], bins: usize, clip_max: f64) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
    }
    if !clip_max.is_finite() || scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument(
            "histogram inputs must not be NaN or infinite".into(),
        ));
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min).min(clip_max);
    let lo = if lo.is_finite() { lo } else { clip_max };
    let width = (clip_max - lo) / bins as f64;
    let mut counts = vec![0; bins];
    for &s in scores {
        let k = if width > 0.0 {
            (((s - lo) / width).floor().max(0.0) as usize).min(bins - 1)
        } else {
            bins - 1
        };
        counts[k] += 1;
    }
    Ok(Histogram {
        lo,
        hi: clip_max,
        counts,
    })
}

/// One-line summary, `auroc=<value>`.
pub fn format_auroc(value: f64) -> String {
    format!("auroc={value}\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(bits: &[u8]) -> Vec<bool> {
        bits.iter().map(|&b| b == 1).collect()
    }

    #[test]
    fn worked_examples() {
        let l = labels(&[0, 0, 1, 1]);
        assert_eq!(auroc(&[1.0, 2.0, 3.0, 4.0], &l).unwrap(), 1.0);
        // Pairs (pos, neg): (2,3) (2,1) (4,3) (4,1) -> 3 of 4 ordered correctly.
        assert_eq!(auroc(&[3.0, 1.0, 2.0, 4.0], &l).unwrap(), 0.75);
        assert_eq!(auroc(&[5.0; 4], &l).unwrap(), 0.5);
    }

    #[test]
    fn perfect_separation_visits_top_left() {
        let c = roc_curve(&[0.1, 0.2, 0.8, 0.9], &labels(&[0, 0, 1, 1])).unwrap();
        assert!(c.points.contains(&(0.0, 1.0)));
        assert_eq!(c.points.first(), Some(&(0.0, 0.0)));
        assert_eq!(c.points.last(), Some(&(1.0, 1.0)));
        assert_eq!(c.thresholds, vec![0.9, 0.8, 0.2, 0.1]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(auroc(&[1.0, 2.0], &labels(&[1, 1])).is_err());
        assert!(auroc(&[1.0, 2.0], &labels(&[0, 1, 1])).is_err());
        assert!(auroc(&[f64::NAN, 2.0], &labels(&[0, 1])).is_err());
    }

    #[test]
    fn histogram_examples() {
        assert_eq!(histogram(&[4.0], 1, 10.0).unwrap().counts, vec![1]);
        let h = histogram(&[1.0, 2.0, 5.0], 3, 3.0).unwrap();
        assert_eq!((h.lo, h.hi), (1.0, 3.0));
        assert_eq!(h.counts, vec![1, 1, 1]);
        assert!(histogram(&[1.0], 0, 3.0).is_err());
        assert_eq!(histogram(&[], 2, 3.0).unwrap().counts, vec![0, 0]);
    }

    #[test]
    fn csv_shapes() {
        let c = roc_curve(&[1.0, 2.0], &labels(&[0, 1])).unwrap();
        assert_eq!(c.to_csv(), "# fpr,tpr\n0,0\n0,1\n1,1\n");
        let h = histogram(&[0.0, 1.0], 2, 2.0).unwrap();
        assert_eq!(h.to_csv(), "# lo,hi,count\n0,1,1\n1,inf,1\n");
        assert_eq!(format_auroc(1.0), "auroc=1\n");
    }
}
