use super::{gemm, Real, Tensor};
use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

impl Conv2dSpec {
    /// Stride-1 convolution that keeps the spatial size for an odd kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }
}

/// `(input + 2·pad − dilation·(k − 1) − 1) / stride + 1`, or `None` when the
/// dilated kernel does not fit.
pub fn conv_output_extent(input: usize, kernel: usize, spec: Conv2dSpec) -> Option<usize> {
    let span = spec.dilation * (kernel - 1) + 1;
    let padded = input + 2 * spec.padding;
    (padded >= span).then(|| (padded - span) / spec.stride + 1)
}

#[derive(Clone, Copy)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: Conv2dSpec,
}

impl Geometry {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec == Conv2dSpec::default()
    }

    /// Source pixel for output `(o)` and kernel tap `(t)` along one axis.
    #[cfg(test)]
    fn src(o: usize, t: usize, spec: Conv2dSpec, limit: usize) -> Option<usize> {
        let pos = (o * spec.stride + t * spec.dilation) as isize - spec.padding as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }

    /// Outputs `lo..hi` along one axis whose tap `t` lands inside the input,
    /// and the source index of output `lo`.
    fn valid_range(out: usize, t: usize, spec: Conv2dSpec, limit: usize) -> (usize, usize, usize) {
        let offset = (t * spec.dilation) as isize - spec.padding as isize;
        let s = spec.stride as isize;
        // Smallest o with o·s + offset ≥ 0 and largest with o·s + offset < limit.
        let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
        let hi = if (limit as isize) <= offset {
            0
        } else {
            ((limit as isize - offset + s - 1) / s).min(out as isize)
        };
        let lo = lo.min(hi) as usize;
        (lo, hi as usize, (lo as isize * s + offset).max(0) as usize)
    }

    /// Calls `f(dst_offset, src_offset, len, src_step)` for every run of
    /// valid positions of tap `(ky, kx)`, one run per output row.
    fn for_each_run(&self, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (x_lo, x_hi, sx0) = Self::valid_range(self.ow, kx, self.spec, self.w);
        if x_lo >= x_hi {
            return;
        }
        let (y_lo, y_hi, sy0) = Self::valid_range(self.oh, ky, self.spec, self.h);
        for (i, oy) in (y_lo..y_hi).enumerate() {
            let sy = sy0 + i * self.spec.stride;
            f(oy * self.ow + x_lo, sy * self.w + sx0, x_hi - x_lo);
        }
    }

    fn im2col<T: Real>(&self, x: &[T]) -> Vec<T> {
        let plane = self.oh * self.ow;
        let stride = self.spec.stride;
        let mut cols = vec![T::zero(); self.k() * plane];
        for ci in 0..self.cin {
            let xc = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    self.for_each_run(ky, kx, |d, s, n| {
                        if stride == 1 {
                            dst[d..d + n].copy_from_slice(&xc[s..s + n]);
                        } else {
                            for (o, v) in dst[d..d + n].iter_mut().zip(xc[s..].iter().step_by(stride)) {
                                *o = *v;
                            }
                        }
                    });
                }
            }
        }
        cols
    }

    fn col2im<T: Real>(&self, cols: &[T]) -> Vec<T> {
        let plane = self.oh * self.ow;
        let stride = self.spec.stride;
        let mut x = vec![T::zero(); self.cin * self.h * self.w];
        for ci in 0..self.cin {
            let xc = &mut x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * plane..(row + 1) * plane];
                    self.for_each_run(ky, kx, |d, s, n| {
                        for (o, v) in xc[s..].iter_mut().step_by(stride).zip(&src[d..d + n]) {
                            *o += *v;
                        }
                    });
                }
            }
        }
        x
    }
}

/// 2-D cross-correlation of `x [B,Cin,H,W]` with `weight [Cout,Cin,kh,kw]`
/// plus an optional per-channel `bias [Cout]`. Dilation inserts
/// `dilation − 1` holes between kernel taps.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: Conv2dSpec,
) -> Result<Tensor<T>> {
    if spec.stride == 0 || spec.dilation == 0 {
        return Err(Error::invalid("conv2d stride and dilation must be positive"));
    }
    let &[b, cin, h, w] = x.shape() else {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            expected: vec![0, 0, 0, 0],
            actual: x.shape().to_vec(),
        });
    };
    let &[cout, wcin, kh, kw] = weight.shape() else {
        return Err(Error::ShapeMismatch {
            op: "conv2d weight",
            expected: vec![0, cin, 0, 0],
            actual: weight.shape().to_vec(),
        });
    };
    if wcin != cin {
        return Err(Error::ShapeMismatch {
            op: "conv2d weight",
            expected: vec![cout, cin, kh, kw],
            actual: weight.shape().to_vec(),
        });
    }
    if let Some(bias) = bias {
        if bias.shape() != [cout] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                expected: vec![cout],
                actual: bias.shape().to_vec(),
            });
        }
    }
    let (Some(oh), Some(ow)) = (conv_output_extent(h, kh, spec), conv_output_extent(w, kw, spec))
    else {
        return Err(Error::invalid(format!(
            "conv2d kernel {kh}x{kw} (dilation {}) does not fit {h}x{w} with padding {}",
            spec.dilation, spec.padding
        )));
    };
    let geo = Geometry {
        cin,
        h,
        w,
        kh,
        kw,
        oh,
        ow,
        spec,
    };
    let (in_plane, out_plane, k) = (cin * h * w, oh * ow, geo.k());

    let xd = x.data();
    let wd = weight.data();
    let (xs, ws): (&[T], &[T]) = (&xd, &wd);
    let bd = bias.map(|t| t.data().clone());
    let keep_cols = grad_needed(weight) && !geo.is_pointwise();
    let per_item: Vec<(Vec<T>, Option<Vec<T>>)> = par::map_range(b, |bi| {
        let xb = &xs[bi * in_plane..(bi + 1) * in_plane];
        let cols = (!geo.is_pointwise()).then(|| geo.im2col(xb));
        let mut out = vec![T::zero(); cout * out_plane];
        if let Some(bv) = &bd {
            for (row, &v) in out.chunks_mut(out_plane).zip(bv) {
                row.fill(v);
            }
        }
        let src = cols.as_deref().unwrap_or(xb);
        gemm(cout, k, out_plane, ws, false, src, false, T::one(), &mut out);
        (out, if keep_cols { cols } else { None })
    });
    drop((xd, wd));

    let mut data = Vec::with_capacity(b * cout * out_plane);
    let mut saved = Vec::with_capacity(b);
    for (out, cols) in per_item {
        data.extend_from_slice(&out);
        saved.push(cols);
    }

    let mut parents = vec![x.clone(), weight.clone()];
    if let Some(bias) = bias {
        parents.push(bias.clone());
    }
    Ok(Tensor::from_op(
        "conv2d",
        vec![b, cout, oh, ow],
        data,
        parents,
        Box::new(move |g, p| {
            let (x, weight) = (&p[0], &p[1]);
            if weight.requires_grad() {
                let xd = x.data();
                let xs: &[T] = &xd;
                let parts: Vec<Vec<T>> = par::map_range(b, |bi| {
                    let go = &g[bi * cout * out_plane..(bi + 1) * cout * out_plane];
                    let xb = &xs[bi * in_plane..(bi + 1) * in_plane];
                    let rebuilt;
                    let cols: &[T] = match &saved[bi] {
                        Some(c) => c,
                        None if geo.is_pointwise() => xb,
                        None => {
                            rebuilt = geo.im2col(xb);
                            &rebuilt
                        }
                    };
                    let mut gw = vec![T::zero(); cout * k];
                    gemm(cout, out_plane, k, go, false, cols, true, T::zero(), &mut gw);
                    gw
                });
                let mut gw = vec![T::zero(); cout * k];
                for part in parts {
                    gw.iter_mut().zip(part).for_each(|(a, v)| *a += v);
                }
                drop(xd);
                weight.accumulate_grad(&gw);
            }
            if let Some(bias) = p.get(2).filter(|t| t.requires_grad()) {
                let mut gb = vec![T::zero(); cout];
                for item in g.chunks(cout * out_plane) {
                    for (a, row) in gb.iter_mut().zip(item.chunks(out_plane)) {
                        *a += row.iter().copied().sum::<T>();
                    }
                }
                bias.accumulate_grad(&gb);
            }
            if x.requires_grad() {
                let wd = weight.data();
                let ws: &[T] = &wd;
                let parts: Vec<Vec<T>> = par::map_range(b, |bi| {
                    let go = &g[bi * cout * out_plane..(bi + 1) * cout * out_plane];
                    let mut gcols = vec![T::zero(); k * out_plane];
                    gemm(k, cout, out_plane, ws, true, go, false, T::zero(), &mut gcols);
                    if geo.is_pointwise() {
                        gcols
                    } else {
                        geo.col2im(&gcols)
                    }
                });
                drop(wd);
                x.accumulate_grad(&parts.concat());
            }
        }),
    ))
}

fn grad_needed<T: Real>(t: &Tensor<T>) -> bool {
    t.requires_grad() && super::grad_enabled()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_matches_naive_indexing() {
        for (h, w, k, stride, padding, dilation) in
            [(5, 7, 3, 1, 1, 1), (6, 6, 3, 2, 1, 1), (9, 4, 3, 1, 4, 4), (3, 3, 3, 1, 2, 2), (8, 5, 1, 2, 0, 1), (4, 4, 3, 3, 0, 1)]
        {
            let spec = Conv2dSpec { stride, padding, dilation };
            let (oh, ow) = (conv_output_extent(h, k, spec).unwrap(), conv_output_extent(w, k, spec).unwrap());
            let geo = Geometry { cin: 2, h, w, kh: k, kw: k, oh, ow, spec };
            let x: Vec<f64> = (0..2 * h * w).map(|v| v as f64 + 1.0).collect();
            let cols = geo.im2col(&x);
            let plane = oh * ow;
            let mut back = vec![0.0; x.len()];
            for ci in 0..2 {
                for ky in 0..k {
                    for kx in 0..k {
                        let row = (ci * k + ky) * k + kx;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let v = cols[row * plane + oy * ow + ox];
                                match (Geometry::src(oy, ky, spec, h), Geometry::src(ox, kx, spec, w)) {
                                    (Some(sy), Some(sx)) => {
                                        assert_eq!(v, x[ci * h * w + sy * w + sx]);
                                        back[ci * h * w + sy * w + sx] += 1.0;
                                    }
                                    _ => assert_eq!(v, 0.0),
                                }
                            }
                        }
                    }
                }
            }
            let ones = vec![1.0; cols.len()];
            assert_eq!(geo.col2im(&ones), back);
        }
    }

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, v).unwrap()
    }

    #[test]
    fn delta_kernel_is_identity() {
        let x = t(&[1, 1, 3, 4], (0..12).map(|v| v as f64).collect());
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let wgt = t(&[1, 1, 3, 3], k);
        let y = conv2d(&x, &wgt, None, Conv2dSpec::same(3, 1)).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn ones_kernel_window_sums() {
        let x = t(&[1, 1, 3, 3], vec![1.0; 9]);
        let wgt = t(&[1, 1, 3, 3], vec![1.0; 9]);
        let y = conv2d(&x, &wgt, None, Conv2dSpec::same(3, 1)).unwrap().to_vec();
        assert_eq!(y[4], 9.0);
        assert_eq!([y[0], y[2], y[6], y[8]], [4.0; 4]);
        assert_eq!(y[1], 6.0);
    }

    #[test]
    fn dilated_shape() {
        let spec = Conv2dSpec {
            stride: 1,
            padding: 2,
            dilation: 2,
        };
        assert_eq!(conv_output_extent(8, 3, spec), Some(8));
        let x = t(&[2, 1, 8, 8], vec![0.5; 128]);
        let wgt = t(&[3, 1, 3, 3], vec![0.1; 27]);
        let y = conv2d(&x, &wgt, None, spec).unwrap();
        assert_eq!(y.shape(), &[2, 3, 8, 8]);
    }

    #[test]
    fn shape_formula_grid() {
        for h in [5usize, 8, 13] {
            for k in [1usize, 3, 5] {
                for stride in [1usize, 2, 3] {
                    for padding in [0usize, 1, 2] {
                        for dilation in [1usize, 2, 4] {
                            let spec = Conv2dSpec { stride, padding, dilation };
                            let expected = conv_output_extent(h, k, spec);
                            let x = t(&[1, 1, h, h], vec![1.0; h * h]);
                            let wgt = t(&[1, 1, k, k], vec![1.0; k * k]);
                            match (conv2d(&x, &wgt, None, spec), expected) {
                                (Ok(y), Some(e)) => {
                                    assert_eq!(e, (h + 2 * padding - dilation * (k - 1) - 1) / stride + 1);
                                    assert_eq!(y.shape(), &[1, 1, e, e]);
                                }
                                (Err(_), None) => {}
                                (r, e) => panic!("h{h} k{k} {spec:?}: {:?} vs {e:?}", r.map(|y| y.shape().to_vec())),
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let x = t(&[1, 2, 4, 4], vec![0.0; 32]);
        let wgt = t(&[1, 3, 3, 3], vec![0.0; 27]);
        assert!(conv2d(&x, &wgt, None, Conv2dSpec::same(3, 1)).is_err());
        let wgt = t(&[1, 2, 3, 3], vec![0.0; 18]);
        let zero_stride = Conv2dSpec { stride: 0, padding: 1, dilation: 1 };
        assert!(conv2d(&x, &wgt, None, zero_stride).is_err());
        let zero_dil = Conv2dSpec { stride: 1, padding: 1, dilation: 0 };
        assert!(conv2d(&x, &wgt, None, zero_dil).is_err());
    }
}
