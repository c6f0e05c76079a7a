//! Tensor-level kernels shared by the tape and by code that runs without one.

use crate::{Scalar, Tensor};

/// Row-major matrix view: `rows x cols` with an optional transpose of storage.
#[derive(Clone, Copy)]
pub struct Mat<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a, T> Mat<'a, T> {
    /// A dense row-major `rows x cols` block.
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Mat {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Mat {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `out = alpha * a @ b + beta * out`, with `out` dense row-major.
pub fn gemm<T: Scalar>(alpha: T, a: Mat<'_, T>, b: Mat<'_, T>, beta: T, out: &mut [T]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert!(out.len() >= a.rows * b.cols, "gemm output too small");
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    // SAFETY: views were built from slices whose extents cover the strides;
    // `out` holds at least rows * cols elements.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            out.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

/// Geometry of a 2-d convolution with zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, h: usize, w: usize, col: &mut [T]) {
    let (oh, ow) = g.out_hw(h, w);
    let k = g.kernel;
    let (s, p) = (g.stride as isize, g.padding as isize);
    for c in 0..g.in_ch {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize * s + ki as isize - p;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if s == 1 {
                        // valid ox satisfy 0 <= ox + kj - p < w
                        let shift = kj as isize - p;
                        let lo = (-shift).clamp(0, ow as isize) as usize;
                        let hi = (w as isize - shift).clamp(lo as isize, ow as isize) as usize;
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        let start = (lo as isize + shift) as usize;
                        line[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        continue;
                    }
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s + kj as isize - p;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, h: usize, w: usize, x: &mut [T]) {
    let (oh, ow) = g.out_hw(h, w);
    let k = g.kernel;
    let (s, p) = (g.stride as isize, g.padding as isize);
    for c in 0..g.in_ch {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize * s + ki as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    if s == 1 {
                        let shift = kj as isize - p;
                        let lo = (-shift).clamp(0, ow as isize) as usize;
                        let hi = (w as isize - shift).clamp(lo as isize, ow as isize) as usize;
                        let start = (lo as isize + shift) as usize;
                        for (d, &v) in dst[start..start + (hi - lo)].iter_mut().zip(&src[oy * ow + lo..oy * ow + hi]) {
                            *d = *d + v;
                        }
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = ox as isize * s + kj as isize - p;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. `w` is `[out, in, k, k]`, `b` is `[out]`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, g: &ConvGeom) -> Tensor<T> {
    let (n, c, h, wd) = x.dims4();
    assert_eq!(c, g.in_ch, "conv2d input channels");
    assert_eq!(w.shape(), [g.out_ch, g.in_ch, g.kernel, g.kernel], "conv2d weight shape");
    let (oh, ow) = g.out_hw(h, wd);
    let plen = g.patch_len();
    let mut col = vec![T::zero(); plen * oh * ow];
    let mut out = Tensor::zeros(&[n, g.out_ch, oh, ow]);
    let per_out = g.out_ch * oh * ow;
    for i in 0..n {
        im2col(&x.data()[i * c * h * wd..(i + 1) * c * h * wd], g, h, wd, &mut col);
        let y = &mut out.data_mut()[i * per_out..(i + 1) * per_out];
        if let Some(b) = b {
            for (o, chunk) in y.chunks_mut(oh * ow).enumerate() {
                chunk.fill(b.data()[o]);
            }
        }
        gemm(
            T::one(),
            Mat::new(w.data(), g.out_ch, plen),
            Mat::new(&col, plen, oh * ow),
            if b.is_some() { T::one() } else { T::zero() },
            y,
        );
    }
    out
}

/// Gradients of [`conv2d`]. Each output is computed only when requested.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let (n, c, h, wd) = x.dims4();
    let (oh, ow) = g.out_hw(h, wd);
    let plen = g.patch_len();
    let per_out = g.out_ch * oh * ow;
    let mut col = vec![T::zero(); plen * oh * ow];
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    let mut db = need_dw.then(|| Tensor::zeros(&[g.out_ch]));
    for i in 0..n {
        let dyi = &dy.data()[i * per_out..(i + 1) * per_out];
        if let (Some(dw), Some(db)) = (dw.as_mut(), db.as_mut()) {
            im2col(&x.data()[i * c * h * wd..(i + 1) * c * h * wd], g, h, wd, &mut col);
            gemm(
                T::one(),
                Mat::new(dyi, g.out_ch, oh * ow),
                Mat::new(&col, plen, oh * ow).t(),
                T::one(),
                dw.data_mut(),
            );
            for (o, chunk) in dyi.chunks(oh * ow).enumerate() {
                let s: T = chunk.iter().copied().sum();
                db.data_mut()[o] = db.data()[o] + s;
            }
        }
        if let Some(dx) = dx.as_mut() {
            gemm(
                T::one(),
                Mat::new(w.data(), g.out_ch, plen).t(),
                Mat::new(dyi, g.out_ch, oh * ow),
                T::zero(),
                &mut col,
            );
            col2im(&col, g, h, wd, &mut dx.data_mut()[i * c * h * wd..(i + 1) * c * h * wd]);
        }
    }
    (dx, dw, db)
}

/// Applies `a` (`[ho, h]`) along rows and `b` (`[wo, w]`) along columns of
/// every plane: `y = a @ x @ b^T`.
pub fn separable<T: Scalar>(x: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let (ho, wo) = (a.shape()[0], b.shape()[0]);
    assert_eq!(a.shape(), [ho, h], "separable row map");
    assert_eq!(b.shape(), [wo, w], "separable column map");
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut tmp = vec![T::zero(); h * wo];
    for (src, dst) in x.data().chunks(h * w).zip(out.data_mut().chunks_mut(ho * wo)) {
        gemm(T::one(), Mat::new(src, h, w), Mat::new(b.data(), wo, w).t(), T::zero(), &mut tmp);
        gemm(T::one(), Mat::new(a.data(), ho, h), Mat::new(&tmp, h, wo), T::zero(), dst);
    }
    out
}

/// Adjoint of [`separable`]: `dx = a^T @ dy @ b`.
pub fn separable_adjoint<T: Scalar>(dy: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, c, ho, wo) = dy.dims4();
    let (h, w) = (a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let mut tmp = vec![T::zero(); ho * w];
    for (src, dst) in dy.data().chunks(ho * wo).zip(out.data_mut().chunks_mut(h * w)) {
        gemm(T::one(), Mat::new(src, ho, wo), Mat::new(b.data(), wo, w), T::zero(), &mut tmp);
        gemm(T::one(), Mat::new(a.data(), ho, h).t(), Mat::new(&tmp, ho, w), T::zero(), dst);
    }
    out
}

/// Per-(sample, channel) standardisation over the spatial axes.
/// Returns the normalised tensor and the per-plane inverse deviations.
pub fn instance_norm<T: Scalar>(x: &Tensor<T>, eps: T) -> (Tensor<T>, Vec<T>) {
    let (_, _, h, w) = x.dims4();
    let hw = T::lit((h * w) as f64);
    let mut out = x.clone();
    let mut inv = Vec::new();
    for plane in out.data_mut().chunks_mut(h * w) {
        let mean = plane.iter().copied().sum::<T>() / hw;
        let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / hw;
        let is = T::one() / (var + eps).sqrt();
        for v in plane.iter_mut() {
            *v = (*v - mean) * is;
        }
        inv.push(is);
    }
    (out, inv)
}

pub fn instance_norm_backward<T: Scalar>(y: &Tensor<T>, inv: &[T], dy: &Tensor<T>) -> Tensor<T> {
    let (_, _, h, w) = y.dims4();
    let hw = T::lit((h * w) as f64);
    let mut dx = Tensor::zeros(y.shape());
    for (((yp, dyp), dxp), &is) in y
        .data()
        .chunks(h * w)
        .zip(dy.data().chunks(h * w))
        .zip(dx.data_mut().chunks_mut(h * w))
        .zip(inv)
    {
        let mean_dy = dyp.iter().copied().sum::<T>() / hw;
        let mean_dyy = yp.iter().zip(dyp).map(|(&a, &b)| a * b).sum::<T>() / hw;
        for ((d, &yv), &g) in dxp.iter_mut().zip(yp).zip(dyp) {
            *d = is * (g - mean_dy - yv * mean_dyy);
        }
    }
    dx
}

/// `out[k, q, i] = mean_p maps[k, i, p] * conds[q, i, p]`: every map pooled
/// against every condition, channel by channel.
pub fn cross_pool<T: Scalar>(maps: &Tensor<T>, conds: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = maps.dims4();
    let (m, c2, h2, w2) = conds.dims4();
    assert_eq!((c, h, w), (c2, h2, w2), "cross_pool shapes");
    let hw = h * w;
    let scale = T::one() / T::lit(hw as f64);
    let mut out = Tensor::zeros(&[n, m, c]);
    let mut tmp = vec![T::zero(); n * m];
    for i in 0..c {
        let a = Mat {
            data: &maps.data()[i * hw..],
            rows: n,
            cols: hw,
            rs: (c * hw) as isize,
            cs: 1,
        };
        let b = Mat {
            data: &conds.data()[i * hw..],
            rows: hw,
            cols: m,
            rs: 1,
            cs: (c * hw) as isize,
        };
        gemm(scale, a, b, T::zero(), &mut tmp);
        for (j, &v) in tmp.iter().enumerate() {
            out.data_mut()[j * c + i] = v;
        }
    }
    out
}

pub fn cross_pool_backward<T: Scalar>(
    maps: &Tensor<T>,
    conds: &Tensor<T>,
    dout: &Tensor<T>,
    need_maps: bool,
    need_conds: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (n, c, h, w) = maps.dims4();
    let m = conds.shape()[0];
    let hw = h * w;
    let scale = T::one() / T::lit(hw as f64);
    let mut dmaps = need_maps.then(|| Tensor::zeros(maps.shape()));
    let mut dconds = need_conds.then(|| Tensor::zeros(conds.shape()));
    let mut g = vec![T::zero(); n * m];
    let mut buf = vec![T::zero(); n.max(m) * hw];
    for i in 0..c {
        for (j, v) in g.iter_mut().enumerate() {
            *v = dout.data()[j * c + i];
        }
        if let Some(dm) = dmaps.as_mut() {
            let b = Mat {
                data: &conds.data()[i * hw..],
                rows: m,
                cols: hw,
                rs: (c * hw) as isize,
                cs: 1,
            };
            gemm(scale, Mat::new(&g, n, m), b, T::zero(), &mut buf[..n * hw]);
            for k in 0..n {
                dm.data_mut()[(k * c + i) * hw..(k * c + i + 1) * hw].copy_from_slice(&buf[k * hw..(k + 1) * hw]);
            }
        }
        if let Some(dc) = dconds.as_mut() {
            let a = Mat {
                data: &maps.data()[i * hw..],
                rows: n,
                cols: hw,
                rs: (c * hw) as isize,
                cs: 1,
            };
            gemm(scale, Mat::new(&g, n, m).t(), a, T::zero(), &mut buf[..m * hw]);
            for q in 0..m {
                dc.data_mut()[(q * c + i) * hw..(q * c + i + 1) * hw].copy_from_slice(&buf[q * hw..(q + 1) * hw]);
            }
        }
    }
    (dmaps, dconds)
}

/// Mean over the trailing two axes: `[n, c, h, w] -> [n, c]`.
pub fn spatial_mean<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let hw = T::lit((h * w) as f64);
    let data = x.data().chunks(h * w).map(|p| p.iter().copied().sum::<T>() / hw).collect();
    Tensor::from_vec(&[n, c], data).expect("spatial_mean shape")
}

/// Channel concatenation of NCHW tensors with equal batch and spatial dims.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Tensor<T> {
    let (n, _, h, w) = parts[0].dims4();
    let total: usize = parts.iter().map(|p| p.dims4().1).sum();
    let mut out = Tensor::zeros(&[n, total, h, w]);
    let hw = h * w;
    for i in 0..n {
        let mut off = 0;
        for p in parts {
            let (pn, pc, ph, pw) = p.dims4();
            assert_eq!((pn, ph, pw), (n, h, w), "concat_channels shapes");
            let src = &p.data()[i * pc * hw..(i + 1) * pc * hw];
            let dst_start = (i * total + off) * hw;
            out.data_mut()[dst_start..dst_start + pc * hw].copy_from_slice(src);
            off += pc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, g: &ConvGeom) -> Tensor<f64> {
        let (n, c, h, wd) = x.dims4();
        let (oh, ow) = g.out_hw(h, wd);
        let k = g.kernel;
        Tensor::from_fn(&[n, g.out_ch, oh, ow], |idx| {
            let ox = idx % ow;
            let oy = (idx / ow) % oh;
            let o = (idx / (ow * oh)) % g.out_ch;
            let i = idx / (ow * oh * g.out_ch);
            let mut acc = b.data()[o];
            for ci in 0..c {
                for ki in 0..k {
                    for kj in 0..k {
                        let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += w.data()[((o * c + ci) * k + ki) * k + kj]
                                * x.data()[((i * c + ci) * h + iy as usize) * wd + ix as usize];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_direct_loops() {
        for &(stride, padding, kernel) in &[(1, 1, 3), (2, 1, 3), (1, 3, 7), (2, 0, 3)] {
            let g = ConvGeom {
                in_ch: 2,
                out_ch: 3,
                kernel,
                stride,
                padding,
            };
            let x = Tensor::from_fn(&[2, 2, 9, 8], |i| ((i * 37 % 11) as f64 - 5.0) / 7.0);
            let w = Tensor::from_fn(&[3, 2, kernel, kernel], |i| ((i * 13 % 7) as f64 - 3.0) / 5.0);
            let b = Tensor::from_vec(&[3], vec![0.1, -0.2, 0.3]).unwrap();
            let fast = conv2d(&x, &w, Some(&b), &g);
            let slow = naive_conv(&x, &w, &b, &g);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn separable_adjoint_is_transpose() {
        let x = Tensor::from_fn(&[1, 2, 5, 4], |i| (i as f64).sin());
        let dy = Tensor::from_fn(&[1, 2, 3, 6], |i| (i as f64 * 0.7).cos());
        let a = Tensor::from_fn(&[3, 5], |i| (i as f64 * 0.3).sin());
        let b = Tensor::from_fn(&[6, 4], |i| (i as f64 * 0.9).cos());
        let y = separable(&x, &a, &b);
        let dx = separable_adjoint(&dy, &a, &b);
        let lhs: f64 = y.data().iter().zip(dy.data()).map(|(p, q)| p * q).sum();
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(p, q)| p * q).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn cross_pool_diagonal_is_pooled_product() {
        let maps = Tensor::from_fn(&[3, 2, 2, 2], |i| i as f64 * 0.1);
        let conds = Tensor::from_fn(&[3, 2, 2, 2], |i| 1.0 - i as f64 * 0.05);
        let cp = cross_pool(&maps, &conds);
        let prod = maps.zip_map(&conds, |a, b| a * b);
        let pooled = spatial_mean(&prod);
        for k in 0..3 {
            for i in 0..2 {
                let a = cp.data()[(k * 3 + k) * 2 + i];
                let b = pooled.data()[k * 2 + i];
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
