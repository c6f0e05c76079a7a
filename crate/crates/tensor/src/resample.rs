//! Dense 1-d resampling matrices for use with [`crate::kernels::separable`].

use crate::{Scalar, Tensor};

/// Bilinear resampling from `n_in` to `n_out` samples with half-pixel
/// centres (`align_corners = false`), edges clamped.
pub fn bilinear<T: Scalar>(n_out: usize, n_in: usize) -> Tensor<T> {
    let mut m = vec![0.0f64; n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for o in 0..n_out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        let frac = src - i0 as f64;
        m[o * n_in + i0] += 1.0 - frac;
        m[o * n_in + i1] += frac;
    }
    Tensor::from_vec(&[n_out, n_in], m.into_iter().map(T::lit).collect()).expect("bilinear shape")
}

/// Box-filter resampling of the window `[lo, lo + len)` of an axis of
/// length `n_in` onto `n_out` samples. Each output averages the input
/// cells it overlaps, weighted by overlap.
pub fn area<T: Scalar>(n_out: usize, n_in: usize, lo: f64, len: f64) -> Tensor<T> {
    assert!(lo >= 0.0 && len > 0.0 && lo + len <= n_in as f64 + 1e-9, "area window out of range");
    let mut m = vec![0.0f64; n_out * n_in];
    let step = len / n_out as f64;
    for o in 0..n_out {
        let (a, b) = (lo + o as f64 * step, lo + (o + 1) as f64 * step);
        let first = a.floor() as usize;
        let last = (b.ceil() as usize).min(n_in);
        for i in first..last {
            let overlap = (b.min(i as f64 + 1.0) - a.max(i as f64)).max(0.0);
            m[o * n_in + i] += overlap / step;
        }
    }
    Tensor::from_vec(&[n_out, n_in], m.into_iter().map(T::lit).collect()).expect("area shape")
}

/// Mirror index without repeating the edge sample (`-1 -> 1`, `n -> n - 2`).
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut r = i.rem_euclid(period);
    if r >= n as isize {
        r = period - r;
    }
    r as usize
}

/// Normalised gaussian taps of odd length `kernel`.
pub fn gaussian_taps(kernel: usize, sigma: f64) -> Vec<f64> {
    let r = (kernel / 2) as isize;
    let taps: Vec<f64> = (-r..=r).map(|j| (-(j * j) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// 1-d convolution with `taps` under reflect padding, as an `n x n` matrix.
pub fn convolution_reflect<T: Scalar>(n: usize, taps: &[f64]) -> Tensor<T> {
    let r = (taps.len() / 2) as isize;
    let mut m = vec![0.0f64; n * n];
    for i in 0..n {
        for (j, &t) in taps.iter().enumerate() {
            let src = reflect(i as isize + j as isize - r, n);
            m[i * n + src] += t;
        }
    }
    Tensor::from_vec(&[n, n], m.into_iter().map(T::lit).collect()).expect("convolution shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_sum_to_one() {
        for (o, i) in [(8, 16), (16, 8), (11, 16), (16, 16)] {
            let m: Tensor<f64> = bilinear(o, i);
            for row in m.data().chunks(i) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let c: Tensor<f64> = convolution_reflect(5, &gaussian_taps(7, 7.0 / 6.0));
        for row in c.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn area_averages_blocks() {
        let m: Tensor<f64> = area(2, 4, 0.0, 4.0);
        assert_eq!(m.data(), [0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.5, 0.5]);
        let w: Tensor<f64> = area(3, 8, 2.0, 4.5);
        for row in w.data().chunks(8) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(row[0] + row[1] + row[7], 0.0);
        }
    }

    #[test]
    fn identity_resample() {
        let m: Tensor<f64> = bilinear(6, 6);
        for r in 0..6 {
            for c in 0..6 {
                assert_eq!(m.data()[r * 6 + c], if r == c { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(-7, 3), 1);
    }
}
