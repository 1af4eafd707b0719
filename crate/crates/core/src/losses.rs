//! BCE and soft-IoU losses and the four-term stream supervision.
//!
//! The total loss is the unweighted sum
//! `L_inner + L_boundary + L_glass + L_final`, where the glass, interior and
//! final terms use BCE + IoU and the boundary term uses BCE only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::PredictionBundle;
use crate::neural::{add, sigmoid, sigmoid_scalar, Real, Tensor};

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            expected: b.shape().to_vec(),
            actual: a.shape().to_vec(),
        });
    }
    Ok(())
}

/// Mean binary cross-entropy of `sigmoid(logits)` against soft targets,
/// computed as `max(x, 0) − x·g + ln(1 + e^{−|x|})`.
pub fn bce_loss<T: Real>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("bce_loss", logits, target)?;
    let n = T::from_f64(logits.numel() as f64);
    let total: T = {
        let (x, g) = (logits.data(), target.data());
        x.iter()
            .zip(g.iter())
            .map(|(&x, &g)| x.max(T::zero()) - x * g + (-x.abs()).exp().ln_1p())
            .sum()
    };
    Ok(Tensor::from_op(
        "bce_loss",
        vec![1],
        vec![total / n],
        vec![logits.clone(), target.clone()],
        Box::new(move |go, p| {
            let scale = go[0] / n;
            if p[0].requires_grad() {
                let gx: Vec<T> = {
                    let (x, g) = (p[0].data(), p[1].data());
                    x.iter()
                        .zip(g.iter())
                        .map(|(&x, &g)| (sigmoid_scalar(x) - g) * scale)
                        .collect()
                };
                p[0].accumulate_grad(&gx);
            }
            if p[1].requires_grad() {
                let gg: Vec<T> = p[0].data().iter().map(|&x| -x * scale).collect();
                p[1].accumulate_grad(&gg);
            }
        }),
    ))
}

/// Soft IoU loss `1 − Σ p·g / Σ (p + g − p·g)`, evaluated per batch item and
/// averaged. An item where both maps are empty contributes 0.
pub fn iou_loss<T: Real>(probs: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("iou_loss", probs, target)?;
    let items = probs.shape().first().copied().unwrap_or(1).max(1);
    let per = probs.numel() / items;
    let sums: Vec<(T, T)> = {
        let (p, g) = (probs.data(), target.data());
        p.chunks(per)
            .zip(g.chunks(per))
            .map(|(p, g)| {
                let inter: T = p.iter().zip(g).map(|(&a, &b)| a * b).sum();
                let union: T = p.iter().zip(g).map(|(&a, &b)| a + b - a * b).sum();
                (inter, union)
            })
            .collect()
    };
    let b = T::from_f64(items as f64);
    let loss = sums
        .iter()
        .map(|&(i, u)| if u > T::zero() { T::one() - i / u } else { T::zero() })
        .sum::<T>()
        / b;
    Ok(Tensor::from_op(
        "iou_loss",
        vec![1],
        vec![loss],
        vec![probs.clone(), target.clone()],
        Box::new(move |go, p| {
            let scale = go[0] / b;
            let (pv, gv) = (p[0].data().clone(), p[1].data().clone());
            let mut gp = vec![T::zero(); pv.len()];
            let mut gg = vec![T::zero(); pv.len()];
            for (item, &(i, u)) in sums.iter().enumerate() {
                if u <= T::zero() {
                    continue;
                }
                let u2 = u * u;
                for j in item * per..(item + 1) * per {
                    // d(1 − I/U)/dp = −(g·U − I·(1 − g)) / U², symmetric in g.
                    gp[j] = -(gv[j] * u - i * (T::one() - gv[j])) / u2 * scale;
                    gg[j] = -(pv[j] * u - i * (T::one() - pv[j])) / u2 * scale;
                }
            }
            if p[0].requires_grad() {
                p[0].accumulate_grad(&gp);
            }
            if p[1].requires_grad() {
                p[1].accumulate_grad(&gg);
            }
        }),
    ))
}

/// BCE on the logits plus IoU on their sigmoid.
pub fn bce_iou<T: Real>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    add(&bce_loss(logits, target)?, &iou_loss(&sigmoid(logits), target)?)
}

/// Ground truth resized to the prediction resolution, each `[B,1,H,W]`.
#[derive(Debug, Clone)]
pub struct SupervisionSet<T: Real> {
    pub glass: Tensor<T>,
    pub inner: Tensor<T>,
    pub boundary: Tensor<T>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_inner: f64,
    pub l_boundary: f64,
    pub l_glass: f64,
    pub l_final: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_inner, self.l_boundary, self.l_glass, self.l_final, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// `iter k lr v l_inner a l_boundary b l_glass c l_final d total t`
    pub fn log_line(&self, iter: usize, lr: f64) -> String {
        format!(
            "iter {iter} lr {lr:.6e} l_inner {:.6} l_boundary {:.6} l_glass {:.6} l_final {:.6} total {:.6}",
            self.l_inner, self.l_boundary, self.l_glass, self.l_final, self.total
        )
    }
}

/// Differentiable total plus its per-term values.
#[derive(Debug, Clone)]
pub struct Loss<T: Real> {
    pub total: Tensor<T>,
    pub breakdown: LossBreakdown,
    /// How many loss terms were active (interior, boundary, glass, final).
    pub active_terms: usize,
}

fn sum_terms<T: Real>(terms: Vec<Tensor<T>>) -> Result<Option<Tensor<T>>> {
    let mut it = terms.into_iter();
    let Some(mut acc) = it.next() else {
        return Ok(None);
    };
    for t in it {
        acc = add(&acc, &t)?;
    }
    Ok(Some(acc))
}

/// Sums the supervision of every side output. `n_glass` and `n_boundary`
/// must match the bundle's branch counts.
pub fn total_loss<T: Real>(
    bundle: &PredictionBundle<T>,
    sup: &SupervisionSet<T>,
    n_glass: usize,
    n_boundary: usize,
) -> Result<Loss<T>> {
    if bundle.glass_maps.len() != n_glass || bundle.boundary_maps.len() != n_boundary {
        return Err(Error::invalid(format!(
            "branch count mismatch: bundle has {} glass / {} boundary maps, expected {n_glass} / {n_boundary}",
            bundle.glass_maps.len(),
            bundle.boundary_maps.len()
        )));
    }

    let inner = match &bundle.interior_map {
        Some(m) => Some(bce_iou(m, &sup.inner)?),
        None => None,
    };
    let boundary = sum_terms(
        bundle
            .boundary_maps
            .iter()
            .map(|m| bce_loss(m, &sup.boundary))
            .collect::<Result<_>>()?,
    )?;
    let glass = sum_terms(
        bundle
            .glass_maps
            .iter()
            .map(|m| bce_iou(m, &sup.glass))
            .collect::<Result<_>>()?,
    )?;
    let fin = bce_iou(&bundle.final_map, &sup.glass)?;

    let value = |t: &Option<Tensor<T>>| t.as_ref().map_or(0.0, |t| t.item().as_f64());
    let l_inner = value(&inner);
    let l_boundary = value(&boundary);
    let l_glass = value(&glass);
    let l_final = fin.item().as_f64();

    let parts: Vec<Tensor<T>> = [inner, boundary, glass, Some(fin)].into_iter().flatten().collect();
    let active_terms = parts.len();
    let total = sum_terms(parts)?.expect("final term always present");
    Ok(Loss {
        total,
        breakdown: LossBreakdown {
            l_inner,
            l_boundary,
            l_glass,
            l_final,
            total: l_inner + l_boundary + l_glass + l_final,
        },
        active_terms,
    })
}
