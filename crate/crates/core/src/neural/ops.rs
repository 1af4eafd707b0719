use super::{gemm, numel, Real, Tensor};
use crate::error::{Error, Result};

fn shape_err(op: &'static str, expected: &[usize], actual: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        expected: expected.to_vec(),
        actual: actual.to_vec(),
    }
}

fn rank4(op: &'static str, t: &Tensor<impl Real>) -> Result<[usize; 4]> {
    match *t.shape() {
        [b, c, h, w] => Ok([b, c, h, w]),
        _ => Err(shape_err(op, &[0, 0, 0, 0], t.shape())),
    }
}

/// Output shape and per-operand strides (0 on broadcast axes).
fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    if a.len() != b.len() {
        return Err(shape_err(op, a, b));
    }
    let mut out = Vec::with_capacity(a.len());
    for (&x, &y) in a.iter().zip(b) {
        match (x, y) {
            _ if x == y => out.push(x),
            (1, _) => out.push(y),
            (_, 1) => out.push(x),
            _ => return Err(shape_err(op, a, b)),
        }
    }
    let strides = |s: &[usize]| {
        let mut st = vec![0; s.len()];
        let mut acc = 1;
        for i in (0..s.len()).rev() {
            st[i] = if s[i] == 1 { 0 } else { acc };
            acc *= s[i];
        }
        st
    };
    Ok((out, strides(a), strides(b)))
}

/// Flat operand offsets for every output element, in output order.
fn broadcast_index(out: &[usize], sa: &[usize], sb: &[usize]) -> Vec<(usize, usize)> {
    let n = numel(out);
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut res = Vec::with_capacity(n);
    for _ in 0..n {
        res.push((ia, ib));
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
    res
}

fn binary<T: Real>(
    name: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: fn(T, T) -> T,
    // (d out/d a, d out/d b) given (a, b)
    df: fn(T, T) -> (T, T),
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data: Vec<T> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| f(x, y)).collect();
        let shape = a.shape().to_vec();
        return Ok(Tensor::from_op(
            name,
            shape,
            data,
            vec![a.clone(), b.clone()],
            Box::new(move |g, p| {
                let (av, bv) = (p[0].data(), p[1].data());
                let (mut ga, mut gb) = (Vec::with_capacity(g.len()), Vec::with_capacity(g.len()));
                for i in 0..g.len() {
                    let (da, db) = df(av[i], bv[i]);
                    ga.push(g[i] * da);
                    gb.push(g[i] * db);
                }
                drop((av, bv));
                if p[0].requires_grad() {
                    p[0].accumulate_grad(&ga);
                }
                if p[1].requires_grad() {
                    p[1].accumulate_grad(&gb);
                }
            }),
        ));
    }

    let (out, sa, sb) = broadcast(name, a.shape(), b.shape())?;
    let index = broadcast_index(&out, &sa, &sb);
    let data: Vec<T> = {
        let (av, bv) = (a.data(), b.data());
        index.iter().map(|&(i, j)| f(av[i], bv[j])).collect()
    };
    Ok(Tensor::from_op(
        name,
        out,
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |g, p| {
            let mut ga = vec![T::zero(); p[0].numel()];
            let mut gb = vec![T::zero(); p[1].numel()];
            {
                let (av, bv) = (p[0].data(), p[1].data());
                for (&(i, j), &go) in index.iter().zip(g) {
                    let (da, db) = df(av[i], bv[j]);
                    ga[i] += go * da;
                    gb[j] += go * db;
                }
            }
            if p[0].requires_grad() {
                p[0].accumulate_grad(&ga);
            }
            if p[1].requires_grad() {
                p[1].accumulate_grad(&gb);
            }
        }),
    ))
}

/// Elementwise sum; an operand may have extent 1 on any axis (broadcast).
pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary("add", a, b, |x, y| x + y, |_, _| (T::one(), T::one()))
}

/// Elementwise product with the same broadcasting rule as [`add`].
pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary("mul", a, b, |x, y| x * y, |x, y| (y, x))
}

pub fn scale<T: Real>(x: &Tensor<T>, factor: T) -> Tensor<T> {
    let data = x.data().iter().map(|&v| v * factor).collect();
    Tensor::from_op(
        "scale",
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |g, p| {
            let gx: Vec<T> = g.iter().map(|&v| v * factor).collect();
            p[0].accumulate_grad(&gx);
        }),
    )
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let data: Vec<T> = x.data().iter().map(|&v| v.max(T::zero())).collect();
    let active: Vec<bool> = data.iter().map(|&v| v > T::zero()).collect();
    Tensor::from_op(
        "relu",
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |g, p| {
            let gx: Vec<T> = g
                .iter()
                .zip(&active)
                .map(|(&v, &on)| if on { v } else { T::zero() })
                .collect();
            p[0].accumulate_grad(&gx);
        }),
    )
}

pub(crate) fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let data: Vec<T> = x.data().iter().map(|&v| sigmoid_scalar(v)).collect();
    let saved = data.clone();
    Tensor::from_op(
        "sigmoid",
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |g, p| {
            let gx: Vec<T> = g
                .iter()
                .zip(&saved)
                .map(|(&v, &s)| v * s * (T::one() - s))
                .collect();
            p[0].accumulate_grad(&gx);
        }),
    )
}

pub fn sum<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let total: T = x.data().iter().copied().sum();
    let n = x.numel();
    Tensor::from_op(
        "sum",
        vec![1],
        vec![total],
        vec![x.clone()],
        Box::new(move |g, p| p[0].accumulate_grad(&vec![g[0]; n])),
    )
}

pub fn mean<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.numel();
    scale(&sum(x), T::one() / T::from_f64(n as f64))
}

pub fn reshape<T: Real>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if numel(shape) != x.numel() {
        return Err(shape_err("reshape", shape, x.shape()));
    }
    Ok(Tensor::from_op(
        "reshape",
        shape.to_vec(),
        x.to_vec(),
        vec![x.clone()],
        Box::new(|g, p| p[0].accumulate_grad(g)),
    ))
}

/// Stacks rank-4 tensors along the channel axis.
pub fn concat_channels<T: Real>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::invalid("concat_channels needs at least one operand"))?;
    let [b, _, h, w] = rank4("concat_channels", first)?;
    let mut chans = Vec::with_capacity(xs.len());
    for x in xs {
        let [xb, xc, xh, xw] = rank4("concat_channels", x)?;
        if (xb, xh, xw) != (b, h, w) {
            return Err(shape_err("concat_channels", &[b, xc, h, w], x.shape()));
        }
        chans.push(xc);
    }
    let total: usize = chans.iter().sum();
    let plane = h * w;
    let mut data = Vec::with_capacity(b * total * plane);
    for bi in 0..b {
        for (x, &c) in xs.iter().zip(&chans) {
            let d = x.data();
            data.extend_from_slice(&d[bi * c * plane..(bi + 1) * c * plane]);
        }
    }
    Ok(Tensor::from_op(
        "concat_channels",
        vec![b, total, h, w],
        data,
        xs.iter().map(|&x| x.clone()).collect(),
        Box::new(move |g, p| {
            let mut offset = 0;
            for (x, &c) in p.iter().zip(&chans) {
                if x.requires_grad() {
                    let mut gx = Vec::with_capacity(b * c * plane);
                    for bi in 0..b {
                        let start = (bi * total + offset) * plane;
                        gx.extend_from_slice(&g[start..start + c * plane]);
                    }
                    x.accumulate_grad(&gx);
                }
                offset += c;
            }
        }),
    ))
}

/// Per-channel spatial mean: `[B,C,H,W] -> [B,C,1,1]`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = rank4("global_avg_pool", x)?;
    let plane = h * w;
    let inv = T::one() / T::from_f64(plane as f64);
    let data: Vec<T> = x
        .data()
        .chunks(plane)
        .map(|ch| ch.iter().copied().sum::<T>() * inv)
        .collect();
    Ok(Tensor::from_op(
        "global_avg_pool",
        vec![b, c, 1, 1],
        data,
        vec![x.clone()],
        Box::new(move |g, p| {
            let gx: Vec<T> = g
                .iter()
                .flat_map(|&v| std::iter::repeat_n(v * inv, plane))
                .collect();
            p[0].accumulate_grad(&gx);
        }),
    ))
}

/// `x [B,C] · weight [C,C'] + bias [C']`.
pub fn linear<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c) = match *x.shape() {
        [b, c] => (b, c),
        _ => return Err(shape_err("linear", &[0, 0], x.shape())),
    };
    let co = match *weight.shape() {
        [wc, co] if wc == c => co,
        _ => return Err(shape_err("linear", &[c, 0], weight.shape())),
    };
    if bias.shape() != [co] {
        return Err(shape_err("linear", &[co], bias.shape()));
    }
    let mut out = Vec::with_capacity(b * co);
    for _ in 0..b {
        out.extend_from_slice(&bias.data());
    }
    gemm(b, c, co, &x.data(), false, &weight.data(), false, T::one(), &mut out);
    Ok(Tensor::from_op(
        "linear",
        vec![b, co],
        out,
        vec![x.clone(), weight.clone(), bias.clone()],
        Box::new(move |g, p| {
            if p[0].requires_grad() {
                let mut gx = vec![T::zero(); b * c];
                gemm(b, co, c, g, false, &p[1].data(), true, T::zero(), &mut gx);
                p[0].accumulate_grad(&gx);
            }
            if p[1].requires_grad() {
                let mut gw = vec![T::zero(); c * co];
                gemm(c, b, co, &p[0].data(), true, g, false, T::zero(), &mut gw);
                p[1].accumulate_grad(&gw);
            }
            if p[2].requires_grad() {
                let mut gb = vec![T::zero(); co];
                for row in g.chunks(co) {
                    gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                }
                p[2].accumulate_grad(&gb);
            }
        }),
    ))
}

/// Source taps for one axis of a half-pixel-centred bilinear resize.
#[derive(Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    w_hi: f64,
}

fn bilinear_taps(input: usize, output: usize) -> Vec<Tap> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                w_hi: src - lo as f64,
            }
        })
        .collect()
}

/// Bilinear resize of the two spatial axes (`align_corners = false`).
pub fn resize_bilinear<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let [b, c, h, w] = rank4("resize_bilinear", x)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize target must be at least 1x1"));
    }
    if (out_h, out_w) == (h, w) {
        return reshape(x, &[b, c, h, w]);
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let (plane_in, plane_out) = (h * w, out_h * out_w);
    let mut data = vec![T::zero(); b * c * plane_out];
    {
        let src = x.data();
        for (dst, s) in data.chunks_mut(plane_out).zip(src.chunks(plane_in)) {
            for (oy, t) in ty.iter().enumerate() {
                let (wy1, wy0) = (T::from_f64(t.w_hi), T::from_f64(1.0 - t.w_hi));
                let (r0, r1) = (&s[t.lo * w..(t.lo + 1) * w], &s[t.hi * w..(t.hi + 1) * w]);
                for (ox, u) in tx.iter().enumerate() {
                    let (wx1, wx0) = (T::from_f64(u.w_hi), T::from_f64(1.0 - u.w_hi));
                    let top = r0[u.lo] * wx0 + r0[u.hi] * wx1;
                    let bot = r1[u.lo] * wx0 + r1[u.hi] * wx1;
                    dst[oy * out_w + ox] = top * wy0 + bot * wy1;
                }
            }
        }
    }
    Ok(Tensor::from_op(
        "resize_bilinear",
        vec![b, c, out_h, out_w],
        data,
        vec![x.clone()],
        Box::new(move |g, p| {
            let mut gx = vec![T::zero(); b * c * plane_in];
            for (dst, go) in gx.chunks_mut(plane_in).zip(g.chunks(plane_out)) {
                for (oy, t) in ty.iter().enumerate() {
                    let (wy1, wy0) = (T::from_f64(t.w_hi), T::from_f64(1.0 - t.w_hi));
                    for (ox, u) in tx.iter().enumerate() {
                        let (wx1, wx0) = (T::from_f64(u.w_hi), T::from_f64(1.0 - u.w_hi));
                        let v = go[oy * out_w + ox];
                        dst[t.lo * w + u.lo] += v * wy0 * wx0;
                        dst[t.lo * w + u.hi] += v * wy0 * wx1;
                        dst[t.hi * w + u.lo] += v * wy1 * wx0;
                        dst[t.hi * w + u.hi] += v * wy1 * wx1;
                    }
                }
            }
            p[0].accumulate_grad(&gx);
        }),
    ))
}
