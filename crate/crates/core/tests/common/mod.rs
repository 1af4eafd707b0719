//! Independent oracles shared by the integration and acceptance tests. They
//! are deliberately naive: pixel loops and all-pairs searches.
#![allow(dead_code)]

use glasskit::maps::{BinaryMask, PredictionMap};
use rand::Rng;

/// Squared distance to the nearest background pixel by scanning every
/// background pixel, including a one-pixel frame around the image.
pub fn brute_squared_dt(mask: &BinaryMask) -> Vec<u64> {
    let (h, w) = (mask.height() as i64, mask.width() as i64);
    let mut bg = Vec::new();
    for y in -1..=h {
        for x in -1..=w {
            let inside = (0..h).contains(&y) && (0..w).contains(&x);
            if !inside || !mask.get(y as usize, x as usize) {
                bg.push((y, x));
            }
        }
    }
    let mut out = Vec::with_capacity((h * w) as usize);
    for y in 0..h {
        for x in 0..w {
            let d = bg
                .iter()
                .map(|&(by, bx)| ((by - y).pow(2) + (bx - x).pow(2)) as u64)
                .min()
                .unwrap();
            out.push(d);
        }
    }
    out
}

pub fn random_mask(rng: &mut impl Rng, h: usize, w: usize, density: f64) -> BinaryMask {
    let data = (0..h * w).map(|_| u8::from(rng.gen_bool(density))).collect();
    BinaryMask::new(h, w, data).unwrap()
}

pub fn random_pred(rng: &mut impl Rng, h: usize, w: usize) -> PredictionMap {
    let values = (0..h * w).map(|_| rng.gen::<f32>()).collect();
    PredictionMap::from_values(h, w, values).unwrap()
}

/// acc, IoU, MAE and BER (percent) at threshold 0.5 from a plain pixel loop.
pub struct OracleScores {
    pub acc: f64,
    pub iou: f64,
    pub mae: f64,
    pub ber: f64,
}

pub fn oracle_scores(pred: &PredictionMap, gt: &BinaryMask) -> OracleScores {
    let (mut tp, mut tn, mut fp, mut fn_) = (0.0, 0.0, 0.0, 0.0);
    let mut abs = 0.0;
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            let p = f64::from(pred.map().get(y, x));
            let g = gt.get(y, x);
            abs += (p - if g { 1.0 } else { 0.0 }).abs();
            match (p >= 0.5, g) {
                (true, true) => tp += 1.0,
                (false, false) => tn += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
            }
        }
    }
    let n = tp + tn + fp + fn_;
    let iou = if tp + fp + fn_ == 0.0 { 1.0 } else { tp / (tp + fp + fn_) };
    let tpr = if tp + fn_ == 0.0 { 1.0 } else { tp / (tp + fn_) };
    let tnr = if tn + fp == 0.0 { 1.0 } else { tn / (tn + fp) };
    OracleScores {
        acc: (tp + tn) / n,
        iou,
        mae: abs / n,
        ber: 100.0 * (1.0 - (tpr + tnr) / 2.0),
    }
}

/// Best F-measure (beta² = 0.3) over the thresholds k/255 by direct
/// recounting at each threshold.
pub fn brute_f_max(pred: &[f32], gt: &[u8]) -> f64 {
    let mut best = 0.0f64;
    for k in 0..=255u32 {
        let t = f64::from(k) / 255.0;
        let (mut tp, mut fp, mut np) = (0.0, 0.0, 0.0);
        for (&p, &g) in pred.iter().zip(gt) {
            let pos = f64::from(p) >= t;
            if g == 1 {
                np += 1.0;
                if pos {
                    tp += 1.0;
                }
            } else if pos {
                fp += 1.0;
            }
        }
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if np > 0.0 { tp / np } else { 0.0 };
        if precision + recall > 0.0 {
            best = best.max(1.3 * precision * recall / (0.3 * precision + recall));
        }
    }
    best
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values[values.len() / 2]
}
