//! Segmentation metrics: pixel accuracy, IoU, max F-measure, MAE and the
//! balanced error rate, plus dataset-level aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{BinaryMask, PredictionMap};
use crate::par;

/// Weight of precision against recall in the F-measure (`beta^2`).
pub const BETA_SQ: f64 = 0.3;
/// Number of evenly spaced thresholds `k / 255` swept for the max F-measure.
pub const F_THRESHOLDS: usize = 256;
/// Binarization threshold for acc, IoU and BER.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    /// Glass pixels in the ground truth.
    pub fn np(&self) -> u64 {
        self.tp + self.fn_
    }

    /// Non-glass pixels in the ground truth.
    pub fn nn(&self) -> u64 {
        self.tn + self.fp
    }

    pub fn total(&self) -> u64 {
        self.np() + self.nn()
    }
}

fn check_shapes(pred: &PredictionMap, gt: &BinaryMask) -> Result<()> {
    pred.map().same_shape((gt.height(), gt.width()), "metrics")
}

/// Pixel counts with a pixel predicted as glass iff `p >= threshold`.
pub fn confusion_counts(
    pred: &PredictionMap,
    gt: &BinaryMask,
    threshold: f64,
) -> Result<ConfusionCounts> {
    check_shapes(pred, gt)?;
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::invalid(format!("threshold {threshold} outside [0,1]")));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.values().iter().zip(gt.data()) {
        match (p as f64 >= threshold, g == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn pixel_accuracy(c: &ConfusionCounts) -> f64 {
    (c.tp + c.tn) as f64 / c.total() as f64
}

/// `tp / (tp + fp + fn)`, or 1 when there is no glass and none is predicted.
pub fn iou(c: &ConfusionCounts) -> f64 {
    let union = c.tp + c.fp + c.fn_;
    if union == 0 {
        1.0
    } else {
        c.tp as f64 / union as f64
    }
}

/// Balanced error rate in percent. A class absent from the ground truth
/// contributes a perfect score for its half.
pub fn ber(c: &ConfusionCounts) -> f64 {
    let pos = if c.np() == 0 {
        1.0
    } else {
        c.tp as f64 / c.np() as f64
    };
    let neg = if c.nn() == 0 {
        1.0
    } else {
        c.tn as f64 / c.nn() as f64
    };
    100.0 * (1.0 - 0.5 * (pos + neg))
}

pub fn mae(pred: &PredictionMap, gt: &BinaryMask) -> Result<f64> {
    check_shapes(pred, gt)?;
    let sum: f64 = pred
        .values()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| (p as f64 - g as f64).abs())
        .sum();
    Ok(sum / gt.len() as f64)
}

pub fn f_beta(precision: f64, recall: f64) -> f64 {
    let den = BETA_SQ * precision + recall;
    if den <= 0.0 {
        0.0
    } else {
        (1.0 + BETA_SQ) * precision * recall / den
    }
}

/// Largest `k` with `k / 255 <= p`.
fn threshold_bucket(p: f32) -> usize {
    let p = p as f64;
    let mut k = (p * 255.0).floor().clamp(0.0, 255.0) as usize;
    while k < 255 && (k + 1) as f64 / 255.0 <= p {
        k += 1;
    }
    while k > 0 && k as f64 / 255.0 > p {
        k -= 1;
    }
    k
}

/// Precision and recall at each of the 256 thresholds. Undefined ratios are
/// reported as 0.
pub fn pr_curve(pred: &PredictionMap, gt: &BinaryMask) -> Result<Vec<(f64, f64)>> {
    check_shapes(pred, gt)?;
    let mut fg_hist = [0u64; F_THRESHOLDS];
    let mut bg_hist = [0u64; F_THRESHOLDS];
    for (&p, &g) in pred.values().iter().zip(gt.data()) {
        let k = threshold_bucket(p);
        if g == 1 {
            fg_hist[k] += 1;
        } else {
            bg_hist[k] += 1;
        }
    }
    let np: u64 = fg_hist.iter().sum();
    let mut curve = vec![(0.0, 0.0); F_THRESHOLDS];
    let (mut tp, mut fp) = (0u64, 0u64);
    // A pixel in bucket b counts as positive for every threshold k <= b.
    for k in (0..F_THRESHOLDS).rev() {
        tp += fg_hist[k];
        fp += bg_hist[k];
        let precision = if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = if np == 0 { 0.0 } else { tp as f64 / np as f64 };
        curve[k] = (precision, recall);
    }
    Ok(curve)
}

/// Maximum F-measure over the 256-threshold sweep.
pub fn f_measure_max(pred: &PredictionMap, gt: &BinaryMask) -> Result<f64> {
    Ok(pr_curve(pred, gt)?
        .into_iter()
        .map(|(p, r)| f_beta(p, r))
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub acc: f64,
    pub iou: f64,
    pub fbeta: f64,
    pub mae: f64,
    pub ber: f64,
    pub counts: ConfusionCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub iou: f64,
    pub f_beta: f64,
    pub mae: f64,
    pub ber: f64,
    pub image_count: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_image: Option<Vec<ImageMetrics>>,
}

/// Evaluates every pair and averages per-image scores. Acc, IoU and BER use
/// threshold 0.5; the F-measure is maximized over the mean PR curve.
pub fn evaluate_dataset(pairs: &[(PredictionMap, BinaryMask)]) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("evaluate_dataset needs at least one pair"));
    }
    let rows = par::map_range(pairs.len(), |i| -> Result<(ImageMetrics, Vec<(f64, f64)>)> {
        let (pred, gt) = &pairs[i];
        let counts = confusion_counts(pred, gt, DEFAULT_THRESHOLD)?;
        let curve = pr_curve(pred, gt)?;
        let fbeta = curve.iter().map(|&(p, r)| f_beta(p, r)).fold(0.0, f64::max);
        Ok((
            ImageMetrics {
                acc: pixel_accuracy(&counts),
                iou: iou(&counts),
                fbeta,
                mae: mae(pred, gt)?,
                ber: ber(&counts),
                counts,
            },
            curve,
        ))
    });

    let n = pairs.len() as f64;
    let mut mean_curve = vec![(0.0, 0.0); F_THRESHOLDS];
    let mut per_image = Vec::with_capacity(pairs.len());
    let (mut acc, mut iou_sum, mut mae_sum, mut ber_sum) = (0.0, 0.0, 0.0, 0.0);
    for row in rows {
        let (m, curve) = row?;
        for (acc_pr, (p, r)) in mean_curve.iter_mut().zip(curve) {
            acc_pr.0 += p;
            acc_pr.1 += r;
        }
        acc += m.acc;
        iou_sum += m.iou;
        mae_sum += m.mae;
        ber_sum += m.ber;
        per_image.push(m);
    }
    let f_beta_max = mean_curve
        .iter()
        .map(|&(p, r)| f_beta(p / n, r / n))
        .fold(0.0, f64::max);

    Ok(MetricsReport {
        acc: acc / n,
        iou: iou_sum / n,
        f_beta: f_beta_max,
        mae: mae_sum / n,
        ber: ber_sum / n,
        image_count: pairs.len(),
        per_image: Some(per_image),
    })
}

impl MetricsReport {
    /// Flat `key: value` lines (keys `acc iou fbeta mae ber n_images`).
    pub fn to_key_value(&self) -> String {
        format!(
            "acc: {:.6}\niou: {:.6}\nfbeta: {:.6}\nmae: {:.6}\nber: {:.6}\nn_images: {}\n",
            self.acc, self.iou, self.f_beta, self.mae, self.ber, self.image_count
        )
    }

    pub fn parse_key_value(text: &str) -> Result<Self> {
        let mut vals = std::collections::HashMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once(':')
                .ok_or_else(|| Error::invalid(format!("report line without ':' : {line}")))?;
            vals.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| -> Result<f64> {
            vals.get(k)
                .ok_or_else(|| Error::invalid(format!("report missing key {k}")))?
                .parse::<f64>()
                .map_err(|e| Error::invalid(format!("report key {k}: {e}")))
        };
        Ok(Self {
            acc: get("acc")?,
            iou: get("iou")?,
            f_beta: get("fbeta")?,
            mae: get("mae")?,
            ber: get("ber")?,
            image_count: get("n_images")? as usize,
            per_image: None,
        })
    }

    pub fn format_table(&self) -> String {
        format!(
            "{:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n{:>8} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>8.2}\n",
            "images", "acc", "IoU", "F_beta", "MAE", "BER",
            self.image_count, self.acc, self.iou, self.f_beta, self.mae, self.ber
        )
    }
}
