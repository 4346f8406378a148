//! Pixel confusion counts and the metrics derived from them.
//!
//! White is the positive class. Ratios whose denominator is zero are
//! reported as 0, except when a prediction and its ground truth are both
//! entirely black: F1 and IoU are then 1 and the report is flagged
//! `degenerate`.

use std::ops::{Add, AddAssign};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingestion::PairRecord;
use crate::mask::{Mask, Provenance, WHITE};

/// Version of the JSON evaluation report layout.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_, tn: self.tn + o.tn }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// Count agreement between a prediction and a ground truth mask.
pub fn confusion(pred: &Mask, gt: &Mask) -> Result<ConfusionCounts> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape("confusion", format!("pred {:?} vs gt {:?}", pred.dims(), gt.dims())));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        for v in [p, g] {
            if v != WHITE && v != 0 {
                return Err(Error::NonBinaryMask(v));
            }
        }
        match (p == WHITE, g == WHITE) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub counts: ConfusionCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub accuracy: f64,
    /// No positives predicted or present; F1 and IoU were set to 1.
    pub degenerate: bool,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics(c: ConfusionCounts) -> Result<MetricsReport> {
    let total = c.total();
    if total == 0 {
        return Err(Error::InvalidArgument("no pixels to score".into()));
    }
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let accuracy = ratio(c.tp + c.tn, total);
    let degenerate = c.tp == 0 && c.fp == 0 && c.fn_ == 0;
    let (f1, iou) = if degenerate {
        (1.0, 1.0)
    } else {
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * (precision * recall / (precision + recall)) };
        (f1, ratio(c.tp, c.tp + c.fn_ + c.fp))
    };
    Ok(MetricsReport { counts: c, precision, recall, f1, iou, accuracy, degenerate })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub pair_id: String,
    #[serde(flatten)]
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub schema_version: u32,
    pub images: usize,
    /// Metrics over all pixels of all images pooled together.
    pub micro: MetricsReport,
    pub per_image: Vec<ImageMetrics>,
}

/// Pool `(pair_id, counts)` into a report.
pub fn report_from_counts(items: Vec<(String, ConfusionCounts)>) -> Result<DatasetReport> {
    let mut pooled = ConfusionCounts::default();
    let mut per_image = Vec::with_capacity(items.len());
    for (pair_id, c) in items {
        pooled += c;
        per_image.push(ImageMetrics { pair_id, metrics: metrics(c)? });
    }
    Ok(DatasetReport {
        schema_version: REPORT_SCHEMA_VERSION,
        images: per_image.len(),
        micro: metrics(pooled)?,
        per_image,
    })
}

/// Score `<pred_dir>/<pair_id><suffix>.png` against each record's mask.
pub fn evaluate_dataset(records: &[&PairRecord], pred_dir: &Path, suffix: &str) -> Result<DatasetReport> {
    let missing: Vec<String> = records
        .iter()
        .filter(|r| !pred_dir.join(format!("{}{suffix}.png", r.pair_id)).is_file())
        .map(|r| r.pair_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingPredictions(missing));
    }
    let mut items = Vec::with_capacity(records.len());
    for r in records {
        let gt = crate::ingestion::load_mask(r)?;
        let pred = Mask::load(&pred_dir.join(format!("{}{suffix}.png", r.pair_id)), Provenance::Model)?;
        items.push((r.pair_id.clone(), confusion(&pred, &gt)?));
    }
    if items.is_empty() {
        return Err(Error::InvalidArgument("no records to evaluate".into()));
    }
    report_from_counts(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cc(tp: u64, fp: u64, fn_: u64, tn: u64) -> ConfusionCounts {
        ConfusionCounts { tp, fp, fn_, tn }
    }

    #[test]
    fn hand_evaluated_example() {
        let m = metrics(cc(2, 1, 1, 12)).unwrap();
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.iou, 0.5);
        assert_eq!(m.accuracy, 14.0 / 16.0);
        assert!(!m.degenerate);
    }

    #[test]
    fn all_negative_is_flagged() {
        let m = metrics(cc(0, 0, 0, 100)).unwrap();
        assert_eq!((m.f1, m.iou, m.accuracy), (1.0, 1.0, 1.0));
        assert!(m.degenerate);
    }

    #[test]
    fn zero_denominator_conventions() {
        let m = metrics(cc(0, 5, 0, 10)).unwrap();
        assert_eq!((m.precision, m.recall, m.f1, m.iou), (0.0, 0.0, 0.0, 0.0));
        assert!(metrics(cc(0, 0, 0, 0)).is_err());
    }

    #[test]
    fn checkerboard_and_complement() {
        let gt = Mask::from_fn(6, 6, Provenance::GroundTruth, |x, y| (x + y) % 2 == 0);
        let same = confusion(&gt, &gt).unwrap();
        assert_eq!((same.fp, same.fn_), (0, 0));
        let inv = confusion(&gt.complement(), &gt).unwrap();
        assert_eq!((inv.tp, inv.tn), (0, 0));
        assert_eq!(metrics(inv).unwrap().f1, 0.0);
        let other = Mask::filled(5, 6, false, Provenance::Model);
        assert!(confusion(&other, &gt).is_err());
    }

    #[test]
    fn report_json_shape() {
        let r = report_from_counts(vec![("a".into(), cc(2, 1, 1, 12)), ("b".into(), cc(0, 0, 0, 16))]).unwrap();
        assert_eq!(r.micro.counts, cc(2, 1, 1, 28));
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert_eq!(v["schema_version"], 1);
        assert_eq!(v["micro"]["fn"], 1);
        assert_eq!(v["per_image"][1]["degenerate"], true);
    }

    proptest! {
        #[test]
        fn f1_iou_identity(tp in 0u64..1000, fp in 0u64..1000, fn_ in 0u64..1000, tn in 0u64..1000) {
            prop_assume!(tp + fp + fn_ + tn > 0);
            let m = metrics(cc(tp, fp, fn_, tn)).unwrap();
            prop_assert!((m.f1 - 2.0 * m.iou / (1.0 + m.iou)).abs() <= 1e-12);
            prop_assert!(m.iou <= m.f1 + 1e-15 && m.f1 <= 1.0);
            prop_assert!(m.accuracy >= tn as f64 / (tp + fp + fn_ + tn) as f64);
        }

        #[test]
        fn swapping_pred_and_gt(tp in 0u64..500, fp in 0u64..500, fn_ in 0u64..500, tn in 0u64..500) {
            prop_assume!(tp + fp + fn_ + tn > 0);
            let a = metrics(cc(tp, fp, fn_, tn)).unwrap();
            let b = metrics(cc(tp, fn_, fp, tn)).unwrap();
            prop_assert_eq!(a.f1, b.f1);
            prop_assert_eq!(a.iou, b.iou);
            prop_assert_eq!(a.accuracy, b.accuracy);
            prop_assert_eq!(a.precision, b.recall);
            prop_assert_eq!(a.recall, b.precision);
        }
    }
}
