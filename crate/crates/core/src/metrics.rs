//! Pixel confusion counts and the derived overlap metrics.

use serde::Serialize;

use crate::error::Result;
use crate::mask::SegMask;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `TP / (TP + FN + FP)`.
    pub overlap: f64,
    /// Set when any ratio had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

pub fn confusion(pred: &SegMask, truth: &SegMask) -> Result<ConfusionCounts> {
    pred.same_size(truth)?;
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        match (p != 0, t != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn metrics(c: &ConfusionCounts) -> MetricsReport {
    let mut degenerate = false;
    let mut ratio = |num: u64, den: u64| {
        if den == 0 {
            degenerate = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    // 2PR/(P+R) written in counts so it is exact and never above 1
    let f1 = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_);
    let overlap = ratio(c.tp, c.tp + c.fn_ + c.fp);
    MetricsReport { precision, recall, f1, overlap, degenerate }
}

/// Component-wise mean of per-image reports.
pub fn mean_report(reports: &[MetricsReport]) -> MetricsReport {
    if reports.is_empty() {
        return MetricsReport { degenerate: true, ..MetricsReport::default() };
    }
    let n = reports.len() as f64;
    MetricsReport {
        precision: reports.iter().map(|r| r.precision).sum::<f64>() / n,
        recall: reports.iter().map(|r| r.recall).sum::<f64>() / n,
        f1: reports.iter().map(|r| r.f1).sum::<f64>() / n,
        overlap: reports.iter().map(|r| r.overlap).sum::<f64>() / n,
        degenerate: reports.iter().any(|r| r.degenerate),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formula_example() {
        let c = ConfusionCounts { tp: 3, fp: 1, fn_: 1, tn: 0 };
        let m = metrics(&c);
        assert_eq!((m.precision, m.recall, m.f1, m.overlap), (0.75, 0.75, 0.75, 0.6));
        assert!(!m.degenerate);
    }

    #[test]
    fn perfect_prediction() {
        let t = SegMask::from_fn(8, 8, |x, y| x > 2 && y < 5);
        let m = metrics(&confusion(&t, &t).unwrap());
        assert_eq!((m.precision, m.recall, m.f1, m.overlap), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn zero_over_zero_is_flagged() {
        let m = metrics(&ConfusionCounts { tp: 0, fp: 0, fn_: 0, tn: 10 });
        assert_eq!(m.f1, 0.0);
        assert!(m.degenerate);
    }

    #[test]
    fn size_mismatch_rejected() {
        assert!(confusion(&SegMask::empty(3, 3), &SegMask::empty(3, 4)).is_err());
    }
}
