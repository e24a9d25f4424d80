//! Fixed-size RoI features: the box is assigned to one pyramid level by its
//! scale and average-pooled over a 2x2 bin grid with exact cell-overlap weights.

use crate::boxes::BBox;
use crate::numcore::Grid;
use crate::scalar::Scalar;

pub const BINS: usize = 2;

/// `floor(log2(sqrt(w h) / base))` clamped to `[0, num_levels)`.
pub fn roi_level<T: Scalar>(b: &BBox<T>, num_levels: usize, base_size: f64) -> usize {
    let side = (b.width() * b.height()).max(T::zero()).sqrt().as_f64();
    if side <= 0.0 {
        return 0;
    }
    let k = (side / base_size).log2().floor();
    k.clamp(0.0, (num_levels - 1) as f64) as usize
}

/// Overlap weights of every cell touched by the given bin, in level units.
fn bin_weights(y0: f64, y1: f64, x0: f64, x1: f64, h: usize, w: usize) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    let r_start = y0.floor().max(0.0) as usize;
    let r_end = (y1.ceil().max(0.0) as usize).min(h);
    let c_start = x0.floor().max(0.0) as usize;
    let c_end = (x1.ceil().max(0.0) as usize).min(w);
    for r in r_start..r_end {
        let oy = (y1.min(r as f64 + 1.0) - y0.max(r as f64)).max(0.0);
        if oy <= 0.0 {
            continue;
        }
        for c in c_start..c_end {
            let ox = (x1.min(c as f64 + 1.0) - x0.max(c as f64)).max(0.0);
            if ox > 0.0 {
                out.push((r, c, oy * ox));
            }
        }
    }
    let total: f64 = out.iter().map(|t| t.2).sum();
    if total > 0.0 {
        for t in &mut out {
            t.2 /= total;
        }
    }
    out
}

/// Normalized `(bin, row, col, weight)` taps of a box on a level of the given stride.
pub fn roi_taps<T: Scalar>(b: &BBox<T>, stride: f64, h: usize, w: usize) -> Vec<(usize, usize, usize, f64)> {
    let [x1, y1, x2, y2] = b.to_array().map(|v| v.as_f64() / stride);
    let bh = (y2 - y1) / BINS as f64;
    let bw = (x2 - x1) / BINS as f64;
    let mut taps = Vec::new();
    for i in 0..BINS {
        for j in 0..BINS {
            let (ya, yb) = (y1 + i as f64 * bh, y1 + (i + 1) as f64 * bh);
            let (xa, xb) = (x1 + j as f64 * bw, x1 + (j + 1) as f64 * bw);
            for (r, c, wt) in bin_weights(ya, yb, xa, xb, h, w) {
                taps.push((i * BINS + j, r, c, wt));
            }
        }
    }
    taps
}

/// Pooled feature vector of length `BINS^2 * channels`, bins row-major.
pub fn roi_pool<T: Scalar>(level: &Grid<T>, b: &BBox<T>, stride: f64) -> Vec<T> {
    let c = level.channels();
    let mut out = vec![T::zero(); BINS * BINS * c];
    for (bin, r, col, wt) in roi_taps(b, stride, level.height(), level.width()) {
        let wt = T::lit(wt);
        let src = level.cell(r, col);
        let dst = &mut out[bin * c..(bin + 1) * c];
        for (d, s) in dst.iter_mut().zip(src) {
            *d = *d + wt * *s;
        }
    }
    out
}

/// Adds the adjoint of [`roi_pool`] for upstream `d_out` into `d_level`.
pub fn roi_pool_backward<T: Scalar>(d_level: &mut Grid<T>, b: &BBox<T>, stride: f64, d_out: &[T]) {
    let c = d_level.channels();
    for (bin, r, col, wt) in roi_taps(b, stride, d_level.height(), d_level.width()) {
        let wt = T::lit(wt);
        let src = &d_out[bin * c..(bin + 1) * c];
        for (d, s) in d_level.cell_mut(r, col).iter_mut().zip(src) {
            *d = *d + wt * *s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_level(seed: u64, h: usize, w: usize, c: usize) -> Grid<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Grid::from_vec(h, w, c, (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn level_assignment() {
        let b = |s: f64| BBox::<f64>::from_center(20.0, 20.0, s, s);
        assert_eq!(roi_level(&b(6.0), 3, 8.0), 0);
        assert_eq!(roi_level(&b(8.0), 3, 8.0), 0);
        assert_eq!(roi_level(&b(16.0), 3, 8.0), 1);
        assert_eq!(roi_level(&b(31.9), 3, 8.0), 1);
        assert_eq!(roi_level(&b(32.0), 3, 8.0), 2);
        assert_eq!(roi_level(&b(500.0), 3, 8.0), 2);
    }

    #[test]
    fn one_cell_box_replicates_cell() {
        let g = random_level(1, 4, 4, 3);
        let v = roi_pool(&g, &BBox::from([8.0, 16.0, 16.0, 24.0]), 8.0);
        for bin in 0..4 {
            assert_eq!(&v[bin * 3..bin * 3 + 3], g.cell(2, 1));
        }
    }

    #[test]
    fn constant_level_gives_constant_output() {
        let g = Grid::<f64>::filled(4, 4, 2, 0.7);
        for b in [[1.0, 2.0, 30.0, 9.0], [0.0, 0.0, 32.0, 32.0], [13.3, 5.1, 14.0, 6.0]] {
            for v in roi_pool(&g, &BBox::from(b), 8.0) {
                assert!((v - 0.7).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_scalar_loop_oracle() {
        // Supersample each bin on a fine lattice; the exact pooling must agree.
        let g = random_level(7, 4, 4, 2);
        let b = BBox::from([3.0, 5.0, 27.0, 21.0]);
        let v = roi_pool(&g, &b, 8.0);
        let n = 400;
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = [0.0; 2];
                for sy in 0..n {
                    for sx in 0..n {
                        let y = (5.0 + (i as f64 + (sy as f64 + 0.5) / n as f64) * 8.0) / 8.0;
                        let x = (3.0 + (j as f64 + (sx as f64 + 0.5) / n as f64) * 12.0) / 8.0;
                        for ch in 0..2 {
                            acc[ch] += g.get(y as usize, x as usize, ch);
                        }
                    }
                }
                for ch in 0..2 {
                    let want = acc[ch] / (n * n) as f64;
                    assert!((v[(i * 2 + j) * 2 + ch] - want).abs() < 5e-3, "{} vs {want}", v[(i * 2 + j) * 2 + ch]);
                }
            }
        }
    }

    #[test]
    fn backward_is_adjoint() {
        let g = random_level(9, 4, 4, 3);
        let b = BBox::from([2.5, 1.0, 19.0, 30.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let u: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v = roi_pool(&g, &b, 8.0);
        let lhs: f64 = v.iter().zip(&u).map(|(a, b)| a * b).sum();
        let mut d = Grid::zeros(4, 4, 3);
        roi_pool_backward(&mut d, &b, 8.0, &u);
        let rhs: f64 = d.values().iter().zip(g.values()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
