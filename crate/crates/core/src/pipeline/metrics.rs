//! Pixel-wise binary segmentation metrics.
//!
//! Every ratio treats 0/0 as 1: when both masks agree that a class is
//! absent, the metric for that class is not penalized. Aggregates are
//! micro-averaged (pool the counts, then divide); the per-sample mean is
//! reported beside them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(self, o: Confusion) -> Confusion {
        Confusion { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_, tn: self.tn + o.tn }
    }
}

/// Count agreement between two binary masks of equal extents.
pub fn confusion(pred: &Tensor, gt: &Tensor) -> Result<Confusion> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch(format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape())));
    }
    let mut c = Confusion::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p > 0.5, g > 0.5) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub dsc: f64,
    pub se: f64,
    pub sp: f64,
    pub acc: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

impl Metrics {
    pub fn from_counts(c: &Confusion) -> Metrics {
        Metrics {
            dsc: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
            se: ratio(c.tp, c.tp + c.fn_),
            sp: ratio(c.tn, c.tn + c.fp),
            acc: ratio(c.tp + c.tn, c.total()),
        }
    }

    fn mean(all: &[Metrics]) -> Metrics {
        let n = all.len().max(1) as f64;
        let sum = |f: fn(&Metrics) -> f64| all.iter().map(f).sum::<f64>() / n;
        Metrics { dsc: sum(|m| m.dsc), se: sum(|m| m.se), sp: sum(|m| m.sp), acc: sum(|m| m.acc) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub counts: Confusion,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub threshold: f64,
    pub counts: Confusion,
    /// Ratios of the pooled counts.
    pub micro: Metrics,
    /// Unweighted mean of the per-sample ratios.
    pub per_sample_mean: Metrics,
    pub samples: Vec<SampleMetrics>,
}

impl MetricsReport {
    pub fn from_samples(threshold: f64, rows: Vec<(String, Confusion)>) -> MetricsReport {
        let samples: Vec<SampleMetrics> = rows
            .into_iter()
            .map(|(id, counts)| SampleMetrics { metrics: Metrics::from_counts(&counts), id, counts })
            .collect();
        let counts = samples.iter().fold(Confusion::default(), |acc, s| acc.merge(s.counts));
        let per_sample: Vec<Metrics> = samples.iter().map(|s| s.metrics).collect();
        MetricsReport {
            threshold,
            counts,
            micro: Metrics::from_counts(&counts),
            per_sample_mean: Metrics::mean(&per_sample),
            samples,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new([v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn hand_counted_case() {
        let c = confusion(&t(&[1.0, 1.0, 0.0, 0.0]), &t(&[1.0, 0.0, 1.0, 0.0])).unwrap();
        assert_eq!(c, Confusion { tp: 1, fp: 1, fn_: 1, tn: 1 });
        let m = Metrics::from_counts(&c);
        assert_eq!((m.dsc, m.se, m.sp, m.acc), (0.5, 0.5, 0.5, 0.5));
    }

    #[test]
    fn empty_masks_score_one() {
        let z = t(&[0.0; 4]);
        let m = Metrics::from_counts(&confusion(&z, &z).unwrap());
        assert_eq!((m.dsc, m.se, m.sp, m.acc), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn shape_mismatch() {
        assert!(confusion(&t(&[0.0; 4]), &t(&[0.0; 3])).is_err());
    }
}
