//! Label decoupling: split a glass mask into an interior-diffusion map (large
//! at the glass centre) and a boundary-diffusion map (large at the glass
//! edge) using an exact Euclidean distance transform.
//!
//! Pixels outside the image frame count as background, so a mask that is
//! entirely foreground still has finite distances (every border pixel is at
//! distance 1).

use crate::maps::{BinaryMask, DistanceMap, FloatMap};
use crate::par;

/// Interior (`BL`) and boundary (`DL`) supervision maps for one mask.
///
/// `interior + boundary` reproduces the source mask and both maps vanish on
/// background pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoupledLabels {
    pub interior: FloatMap,
    pub boundary: FloatMap,
}

impl DecoupledLabels {
    pub fn flip_horizontal(&self) -> Self {
        Self {
            interior: self.interior.flip_horizontal(),
            boundary: self.boundary.flip_horizontal(),
        }
    }
}

/// Squared distance from every pixel to the nearest background pixel, in
/// row-major order. Background pixels get 0.
///
/// Two separable passes over a frame-padded copy: a linear scan along rows,
/// then the lower envelope of parabolas along columns. All arithmetic is
/// integral, so the result is exact.
pub fn squared_distance_transform(mask: &BinaryMask) -> Vec<u64> {
    let (h, w) = (mask.height(), mask.width());
    let (ph, pw) = (h + 2, w + 2);

    // Row pass on the padded grid; the frame rows and columns are background.
    let rows: Vec<Vec<u64>> = par::map_range(ph, |py| {
        let mut dist = vec![0u64; pw];
        if py == 0 || py == ph - 1 {
            return dist;
        }
        let y = py - 1;
        let fg = |px: usize| px > 0 && px < pw - 1 && mask.get(y, px - 1);
        let mut last_bg = 0usize;
        for (px, d) in dist.iter_mut().enumerate() {
            if !fg(px) {
                last_bg = px;
            }
            *d = (px - last_bg) as u64;
        }
        let mut next_bg = pw - 1;
        for px in (0..pw).rev() {
            if !fg(px) {
                next_bg = px;
            }
            let r = (next_bg - px) as u64;
            dist[px] = dist[px].min(r);
        }
        dist.iter_mut().for_each(|d| *d *= *d);
        dist
    });

    let cols: Vec<Vec<u64>> = par::map_range(w, |x| {
        let f: Vec<u64> = (0..ph).map(|py| rows[py][x + 1]).collect();
        lower_envelope(&f)
    });

    let mut out = vec![0u64; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = cols[x][y + 1];
        }
    }
    out
}

/// 1-D squared distance: `d[q] = min_p f[p] + (q - p)^2`.
///
/// Breakpoints between parabolas are kept as exact fractions.
fn lower_envelope(f: &[u64]) -> Vec<u64> {
    let n = f.len();
    let key = |p: usize| f[p] as i64 + (p * p) as i64;
    // Intersection abscissa of parabolas rooted at q and p (p < q), as num/den.
    let meet = |q: usize, p: usize| -> (i64, i64) { (key(q) - key(p), 2 * (q as i64 - p as i64)) };
    // a/b <= c/d for positive denominators.
    let le = |(a, b): (i64, i64), (c, d): (i64, i64)| a * d <= c * b;

    let mut roots = vec![0usize; n];
    // Left boundary of each parabola's interval; None means -infinity.
    let mut bounds: Vec<Option<(i64, i64)>> = vec![None; n];
    let mut k = 0usize;
    for q in 1..n {
        loop {
            let s = meet(q, roots[k]);
            match bounds[k] {
                Some(b) if le(s, b) => k -= 1,
                _ => {
                    k += 1;
                    roots[k] = q;
                    bounds[k] = Some(s);
                    break;
                }
            }
        }
    }

    let live = k + 1;
    let mut out = vec![0u64; n];
    let mut k = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < live && bounds[k + 1].is_some_and(|b| le(b, (q as i64, 1))) {
            k += 1;
        }
        let p = roots[k];
        let d = q.abs_diff(p) as u64;
        *o = f[p] + d * d;
    }
    out
}

/// Exact Euclidean distance to the nearest background pixel.
pub fn euclidean_distance_transform(mask: &BinaryMask) -> DistanceMap {
    let sq = squared_distance_transform(mask);
    let values = sq.iter().map(|&d| (d as f64).sqrt() as f32).collect();
    FloatMap::new(mask.height(), mask.width(), values).expect("shape carried from mask")
}

/// Linear rescale to `[0, 1]` using the global min and max. A constant map
/// becomes all zeros.
pub fn normalize_distance_map(d: &DistanceMap) -> DistanceMap {
    let (lo, hi) = (d.min() as f64, d.max() as f64);
    let span = hi - lo;
    let values = if span > 0.0 {
        d.values()
            .iter()
            .map(|&v| ((v as f64 - lo) / span) as f32)
            .collect()
    } else {
        vec![0.0; d.values().len()]
    };
    FloatMap::new(d.height(), d.width(), values).expect("shape carried from input")
}

/// `interior = mask * n`, `boundary = mask * (1 - n)` with `n` the
/// normalized distance map.
pub fn decouple(mask: &BinaryMask) -> DecoupledLabels {
    let n = normalize_distance_map(&euclidean_distance_transform(mask));
    let (h, w) = (mask.height(), mask.width());
    let mut interior = Vec::with_capacity(h * w);
    let mut boundary = Vec::with_capacity(h * w);
    for (&m, &v) in mask.data().iter().zip(n.values()) {
        let m = m as f32;
        interior.push(m * v);
        boundary.push(m * (1.0 - v));
    }
    DecoupledLabels {
        interior: FloatMap::new(h, w, interior).expect("mask shape"),
        boundary: FloatMap::new(h, w, boundary).expect("mask shape"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn centered_square() -> BinaryMask {
        BinaryMask::from_fn(5, 5, |y, x| (1..4).contains(&y) && (1..4).contains(&x)).unwrap()
    }

    #[test]
    fn empty_mask_has_zero_distances() {
        let m = BinaryMask::zeros(4, 4).unwrap();
        assert!(euclidean_distance_transform(&m).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn square_ring_and_center() {
        let d = euclidean_distance_transform(&centered_square());
        for y in 0..5 {
            for x in 0..5 {
                let expected = match (y, x) {
                    (2, 2) => 2.0,
                    (1..=3, 1..=3) => 1.0,
                    _ => 0.0,
                };
                assert_eq!(d.get(y, x), expected, "({y},{x})");
            }
        }
    }

    #[test]
    fn full_mask_uses_frame_as_background() {
        let m = BinaryMask::new(3, 3, vec![1; 9]).unwrap();
        let d = euclidean_distance_transform(&m);
        assert_eq!(d.get(1, 1), 2.0);
        assert_eq!(d.get(0, 0), 1.0);
        assert_eq!(d.get(0, 1), 1.0);
    }

    #[test]
    fn normalization_cases() {
        let two = FloatMap::new(1, 2, vec![0.0, 2.0]).unwrap();
        assert_eq!(normalize_distance_map(&two).values(), &[0.0, 1.0]);
        let zero = FloatMap::zeros(2, 2).unwrap();
        assert_eq!(normalize_distance_map(&zero).values(), &[0.0; 4]);
        let n = normalize_distance_map(&euclidean_distance_transform(&centered_square()));
        assert_eq!(n.get(2, 2), 1.0);
        assert_eq!(n.get(1, 1), 0.5);
        assert_eq!(n.get(0, 0), 0.0);
    }

    #[test]
    fn decoupled_square() {
        let l = decouple(&centered_square());
        assert_eq!(l.interior.get(2, 2), 1.0);
        assert_eq!(l.boundary.get(2, 2), 0.0);
        assert_eq!(l.interior.get(1, 3), 0.5);
        assert_eq!(l.boundary.get(1, 3), 0.5);
        assert_eq!(l.interior.get(4, 4), 0.0);
        assert_eq!(l.boundary.get(4, 4), 0.0);
    }

    #[test]
    fn empty_mask_decouples_to_zero() {
        let l = decouple(&BinaryMask::zeros(3, 5).unwrap());
        assert!(l.interior.values().iter().all(|&v| v == 0.0));
        assert!(l.boundary.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn envelope_on_line() {
        // f = 0 only at the ends, large elsewhere.
        let f = [0, 100, 100, 100, 100, 0];
        assert_eq!(lower_envelope(&f), vec![0, 1, 4, 4, 1, 0]);
    }
}
