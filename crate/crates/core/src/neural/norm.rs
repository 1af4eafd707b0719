use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; running estimates are updated.
    Train,
    /// Running estimates only.
    Eval,
}

/// Running mean and variance of a batch-norm layer.
#[derive(Debug, Clone)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub momentum: f64,
}

impl<T: Real> BnStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            momentum: 0.1,
        }
    }
}

/// Per-channel standardization of `x [B,C,H,W]` followed by the affine map
/// `gamma · x̂ + beta`.
pub fn batch_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &mut BnStats<T>,
    mode: NormMode,
    eps: f64,
) -> Result<Tensor<T>> {
    let &[b, c, h, w] = x.shape() else {
        return Err(Error::ShapeMismatch {
            op: "batch_norm",
            expected: vec![0, 0, 0, 0],
            actual: x.shape().to_vec(),
        });
    };
    for t in [gamma, beta] {
        if t.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                expected: vec![c],
                actual: t.shape().to_vec(),
            });
        }
    }
    if stats.mean.len() != c || stats.var.len() != c {
        return Err(Error::ShapeMismatch {
            op: "batch_norm stats",
            expected: vec![c],
            actual: vec![stats.mean.len()],
        });
    }
    let plane = h * w;
    let count = b * plane;
    let eps = T::from_f64(eps);

    let (mean, inv_std) = {
        let xd = x.data();
        match mode {
            NormMode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let n = T::from_f64(count as f64);
                for (ci, (m, v)) in mean.iter_mut().zip(var.iter_mut()).enumerate() {
                    let channel = || (0..b).flat_map(move |bi| {
                        let start = (bi * c + ci) * plane;
                        start..start + plane
                    });
                    *m = channel().map(|i| xd[i]).sum::<T>() / n;
                    *v = channel().map(|i| (xd[i] - *m) * (xd[i] - *m)).sum::<T>() / n;
                }
                let mom = T::from_f64(stats.momentum);
                let unbias = if count > 1 {
                    T::from_f64(count as f64 / (count - 1) as f64)
                } else {
                    T::one()
                };
                for ci in 0..c {
                    stats.mean[ci] = (T::one() - mom) * stats.mean[ci] + mom * mean[ci];
                    stats.var[ci] = (T::one() - mom) * stats.var[ci] + mom * var[ci] * unbias;
                }
                let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (mean, inv)
            }
            NormMode::Eval => (
                stats.mean.clone(),
                stats.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect(),
            ),
        }
    };

    let mut xhat = x.to_vec();
    for (i, v) in xhat.iter_mut().enumerate() {
        let ci = (i / plane) % c;
        *v = (*v - mean[ci]) * inv_std[ci];
    }
    let out: Vec<T> = {
        let (g, bt) = (gamma.data(), beta.data());
        xhat.iter()
            .enumerate()
            .map(|(i, &v)| {
                let ci = (i / plane) % c;
                g[ci] * v + bt[ci]
            })
            .collect()
    };

    Ok(Tensor::from_op(
        "batch_norm",
        vec![b, c, h, w],
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, p| {
            let mut sum_dy = vec![T::zero(); c];
            let mut sum_dy_xhat = vec![T::zero(); c];
            for (i, (&dy, &xh)) in g.iter().zip(&xhat).enumerate() {
                let ci = (i / plane) % c;
                sum_dy[ci] += dy;
                sum_dy_xhat[ci] += dy * xh;
            }
            if p[0].requires_grad() {
                let gamma = p[1].data();
                let n = T::from_f64(count as f64);
                let gx: Vec<T> = g
                    .iter()
                    .zip(&xhat)
                    .enumerate()
                    .map(|(i, (&dy, &xh))| {
                        let ci = (i / plane) % c;
                        let k = gamma[ci] * inv_std[ci];
                        match mode {
                            NormMode::Train => {
                                k / n * (n * dy - sum_dy[ci] - xh * sum_dy_xhat[ci])
                            }
                            NormMode::Eval => k * dy,
                        }
                    })
                    .collect();
                drop(gamma);
                p[0].accumulate_grad(&gx);
            }
            if p[1].requires_grad() {
                p[1].accumulate_grad(&sum_dy_xhat);
            }
            if p[2].requires_grad() {
                p[2].accumulate_grad(&sum_dy);
            }
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_channel_maps_to_beta() {
        let x = Tensor::<f64>::new(&[2, 1, 2, 2], vec![3.0; 8]).unwrap();
        let gamma = Tensor::new(&[1], vec![2.0]).unwrap();
        let beta = Tensor::new(&[1], vec![0.25]).unwrap();
        let mut stats = BnStats::new(1);
        let y = batch_norm(&x, &gamma, &beta, &mut stats, NormMode::Train, 1e-5).unwrap();
        assert!(y.to_vec().iter().all(|&v| v == 0.25));
        assert!((stats.mean[0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn standard_input_passes_through() {
        let vals = vec![-1.0, 1.0, -1.0, 1.0];
        let x = Tensor::<f64>::new(&[1, 1, 2, 2], vals.clone()).unwrap();
        let one = Tensor::new(&[1], vec![1.0]).unwrap();
        let zero = Tensor::new(&[1], vec![0.0]).unwrap();
        let mut stats = BnStats::new(1);
        let y = batch_norm(&x, &one, &zero, &mut stats, NormMode::Train, 1e-5).unwrap();
        for (a, b) in y.to_vec().iter().zip(&vals) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn eval_uses_running_estimates() {
        let x = Tensor::<f64>::new(&[1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let one = Tensor::new(&[1], vec![1.0]).unwrap();
        let zero = Tensor::new(&[1], vec![0.0]).unwrap();
        let mut stats = BnStats { mean: vec![1.0], var: vec![4.0], momentum: 0.1 };
        let y = batch_norm(&x, &one, &zero, &mut stats, NormMode::Eval, 0.0).unwrap();
        assert_eq!(y.to_vec(), vec![0.0, 1.0]);
        assert_eq!(stats.mean, vec![1.0]);
    }

    #[test]
    fn channel_mismatch() {
        let x = Tensor::<f64>::zeros(&[1, 2, 2, 2]);
        let one = Tensor::new(&[1], vec![1.0]).unwrap();
        let mut stats = BnStats::new(2);
        assert!(batch_norm(&x, &one, &one, &mut stats, NormMode::Train, 1e-5).is_err());
    }
}
