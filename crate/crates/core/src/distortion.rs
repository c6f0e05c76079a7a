//! Benign perturbations on `[n, 3, h, w]` batches in `[-1, 1]`, the
//! five-by-five level grid, and the differentiable training noiser.

use std::fmt;
use std::io::Cursor;
use std::rc::Rc;
use std::str::FromStr;

use facelock_tensor::kernels::{self, ConvGeom};
use facelock_tensor::{resample, Graph, Scalar, Tensor, Var};
use image::codecs::jpeg::{JpegDecoder, JpegEncoder};
use image::{ExtendedColorType, ImageDecoder};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::imageio::{from_u8, to_u8};
use crate::{invalid, Error, Image, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Compression,
    Downscale,
    GaussianBlur,
    GaussianNoise,
    RandomDrop,
}

impl Kind {
    pub const ALL: [Kind; 5] = [
        Kind::Compression,
        Kind::Downscale,
        Kind::GaussianBlur,
        Kind::GaussianNoise,
        Kind::RandomDrop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Kind::Compression => "compression",
            Kind::Downscale => "downscale",
            Kind::GaussianBlur => "gaussian_blur",
            Kind::GaussianNoise => "gaussian_noise",
            Kind::RandomDrop => "random_drop",
        }
    }

    /// Column heading for the parameter in the grid table.
    pub fn parameter_name(self) -> &'static str {
        match self {
            Kind::Compression => "quality",
            Kind::Downscale => "ratio",
            Kind::GaussianBlur => "kernel",
            Kind::GaussianNoise => "sigma_255",
            Kind::RandomDrop => "holes",
        }
    }

    fn row(self) -> usize {
        Kind::ALL.iter().position(|&k| k == self).expect("kind in ALL")
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Kind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Kind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown perturbation {s:?}")))
    }
}

pub const MAX_LEVEL: u8 = 5;

/// Parameters for levels 1 to 5, rows in [`Kind::ALL`] order.
pub const GRID: [[f64; 5]; 5] = [
    [90.0, 80.0, 70.0, 60.0, 50.0],
    [0.9, 0.8, 0.7, 0.6, 0.5],
    [3.0, 5.0, 7.0, 9.0, 11.0],
    [10.0, 20.0, 30.0, 40.0, 50.0],
    [2.0, 3.0, 4.0, 5.0, 6.0],
];

pub const GRID_VERSION: u32 = 1;

/// One cell of the grid. Level 0 is the unperturbed image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: Kind,
    pub level: u8,
    pub parameter: f64,
}

impl PerturbationSpec {
    pub fn new(kind: Kind, level: u8) -> Result<Self> {
        if level > MAX_LEVEL {
            return invalid(format!("level {level} is outside 0..={MAX_LEVEL}"));
        }
        let parameter = match level {
            0 => 0.0,
            l => GRID[kind.row()][l as usize - 1],
        };
        Ok(PerturbationSpec { kind, level, parameter })
    }

    /// Parses `kind:level`.
    pub fn parse(s: &str) -> Result<Self> {
        let (k, l) = s
            .split_once(':')
            .ok_or_else(|| Error::Invalid(format!("expected kind:level, got {s:?}")))?;
        let level = l
            .parse()
            .map_err(|_| Error::Invalid(format!("bad level in {s:?}")))?;
        PerturbationSpec::new(k.parse()?, level)
    }
}

impl fmt::Display for PerturbationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind, self.level)
    }
}

/// The grid as CSV: a version comment, then `kind,level,parameter_name,parameter`.
pub fn grid_table_csv() -> String {
    let mut out = format!("# perturbation grid v{GRID_VERSION}\nkind,level,parameter_name,parameter\n");
    for kind in Kind::ALL {
        for level in 0..=MAX_LEVEL {
            let spec = PerturbationSpec::new(kind, level).expect("grid cell");
            out.push_str(&format!("{},{},{},{}\n", kind, level, kind.parameter_name(), spec.parameter));
        }
    }
    out
}

/// Applies the grid cell; level 0 returns a bit-identical copy.
pub fn apply(x: &Image, spec: &PerturbationSpec, rng: &mut impl Rng) -> Result<Image> {
    if spec.level == 0 {
        return Ok(x.clone());
    }
    let p = spec.parameter;
    match spec.kind {
        Kind::Compression => jpeg(x, p as u8),
        Kind::Downscale => downscale(x, p),
        Kind::GaussianBlur => gaussian_blur(x, p as usize),
        Kind::GaussianNoise => Ok(gaussian_noise(x, p, rng)),
        Kind::RandomDrop => Ok(random_drop(x, p as usize, rng)),
    }
}

pub fn apply_level(x: &Image, kind: Kind, level: u8, rng: &mut impl Rng) -> Result<Image> {
    apply(x, &PerturbationSpec::new(kind, level)?, rng)
}

fn dims(x: &Image) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [n, 3, h, w] => Ok((n, h, w)),
        _ => invalid(format!("expected an [n, 3, h, w] batch, got {:?}", x.shape())),
    }
}

/// Real baseline JPEG through an 8-bit encode/decode round trip.
pub fn jpeg(x: &Image, quality: u8) -> Result<Image> {
    if !(1..=100).contains(&quality) {
        return invalid(format!("JPEG quality {quality} outside 1..=100"));
    }
    let (n, h, w) = dims(x)?;
    let mut parts = Vec::with_capacity(n);
    for i in 0..n {
        let rgb = to_u8(&x.select_batch(i));
        let mut buf = Vec::new();
        JpegEncoder::new_with_quality(&mut buf, quality).encode(&rgb, w as u32, h as u32, ExtendedColorType::Rgb8)?;
        let dec = JpegDecoder::new(Cursor::new(buf))?;
        let mut pixels = vec![0u8; dec.total_bytes() as usize];
        dec.read_image(&mut pixels)?;
        parts.push(from_u8(&pixels, h, w));
    }
    Ok(Tensor::stack_batch(&parts))
}

fn check_kernel(kernel: usize) -> Result<()> {
    if kernel == 0 || kernel % 2 == 0 {
        return invalid(format!("blur kernel must be odd and positive, got {kernel}"));
    }
    Ok(())
}

fn blur_maps<T: Scalar>(h: usize, w: usize, kernel: usize) -> (Tensor<T>, Tensor<T>) {
    let taps = resample::gaussian_taps(kernel, kernel as f64 / 6.0);
    (resample::convolution_reflect(h, &taps), resample::convolution_reflect(w, &taps))
}

/// Gaussian blur with `sigma = kernel / 6` and reflect padding.
pub fn gaussian_blur<T: Scalar>(x: &Tensor<T>, kernel: usize) -> Result<Tensor<T>> {
    check_kernel(kernel)?;
    let (_, _, h, w) = x.try_dims4().map_err(|e| Error::Invalid(e.to_string()))?;
    if kernel == 1 {
        return Ok(x.clone());
    }
    let (a, b) = blur_maps(h, w, kernel);
    Ok(kernels::separable(x, &a, &b))
}

/// Adds `N(0, (2 sigma / 255)^2)` per value; `sigma` is on the 0-255 scale.
pub fn gaussian_noise(x: &Image, sigma: f64, rng: &mut impl Rng) -> Image {
    if sigma == 0.0 {
        return x.clone();
    }
    let s = (2.0 * sigma / 255.0) as f32;
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| *v += s * rng.sample::<f32, _>(StandardNormal));
    out
}

/// Bilinear resize to `floor(ratio * side)` and back.
pub fn downscale(x: &Image, ratio: f64) -> Result<Image> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return invalid(format!("downscale ratio {ratio} outside (0, 1]"));
    }
    let (_, h, w) = dims(x)?;
    if ratio == 1.0 {
        return Ok(x.clone());
    }
    let (hs, ws) = (((ratio * h as f64).floor() as usize).max(1), ((ratio * w as f64).floor() as usize).max(1));
    let small = kernels::separable(x, &resample::bilinear(hs, h), &resample::bilinear(ws, w));
    Ok(kernels::separable(&small, &resample::bilinear(h, hs), &resample::bilinear(w, ws)))
}

/// An axis-aligned hole: rows `top..top + height`, columns `left..left + width`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Hole {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Rectangles with sides between 10% and 20% of the image side.
pub fn sample_holes(h: usize, w: usize, holes: usize, rng: &mut impl Rng) -> Vec<Hole> {
    let side = |n: usize, rng: &mut dyn rand::RngCore| {
        let lo = ((0.1 * n as f64).round() as usize).max(1);
        let hi = ((0.2 * n as f64).round() as usize).max(lo);
        rng.gen_range(lo..=hi)
    };
    (0..holes)
        .map(|_| {
            let height = side(h, rng);
            let width = side(w, rng);
            Hole {
                top: rng.gen_range(0..=h - height),
                left: rng.gen_range(0..=w - width),
                height,
                width,
            }
        })
        .collect()
}

/// Fills `holes` random rectangles per image with that image's mean colour.
pub fn random_drop(x: &Image, holes: usize, rng: &mut impl Rng) -> Image {
    let (n, _, h, w) = x.dims4();
    let mut out = x.clone();
    for i in 0..n {
        let rects = sample_holes(h, w, holes, rng);
        fill_holes(&mut out, i, &rects);
    }
    out
}

pub fn fill_holes(x: &mut Image, index: usize, rects: &[Hole]) {
    let (_, c, h, w) = x.dims4();
    let base = index * c * h * w;
    let means: Vec<f32> = (0..c)
        .map(|ch| {
            let plane = &x.data()[base + ch * h * w..base + (ch + 1) * h * w];
            (plane.iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64) as f32
        })
        .collect();
    let data = x.data_mut();
    for r in rects {
        for (ch, &m) in means.iter().enumerate() {
            for y in r.top..r.top + r.height {
                let row = base + (ch * h + y) * w;
                data[row + r.left..row + r.left + r.width].fill(m);
            }
        }
    }
}

const LUMA_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, 12, 12, 14, 19, 26, 58, 60, 55, 14, 13, 16, 24, 40, 57, 69, 56, 14, 17, 22, 29, 51, 87,
    80, 62, 18, 22, 37, 56, 68, 109, 103, 77, 24, 35, 55, 64, 81, 104, 113, 92, 49, 64, 78, 87, 103, 121, 120, 101, 72,
    92, 95, 98, 112, 100, 103, 99,
];

const CHROMA_TABLE: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, 18, 21, 26, 66, 99, 99, 99, 99, 24, 26, 56, 99, 99, 99, 99, 99, 47, 66, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99,
];

/// Width of the soft mask in 8-bit quantiser steps.
pub const JPEG_MASK_WIDTH: f64 = 40.0;

/// IJG quality scaling of a base table.
pub fn scaled_table(base: &[u16; 64], quality: u8) -> [f64; 64] {
    let q = quality.clamp(1, 100) as f64;
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    let mut out = [0.0; 64];
    for (o, &b) in out.iter_mut().zip(base) {
        *o = ((b as f64 * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0);
    }
    out
}

/// Per-coefficient keep weights `exp(-(Q / width)^2)` for luma and chroma;
/// the DC weight is pinned to one.
pub fn jpeg_mask_weights(quality: u8) -> [[f64; 64]; 2] {
    let mut out = [[0.0; 64]; 2];
    for (dst, base) in out.iter_mut().zip([&LUMA_TABLE, &CHROMA_TABLE]) {
        let q = scaled_table(base, quality);
        for (d, qv) in dst.iter_mut().zip(q) {
            *d = (-(qv / JPEG_MASK_WIDTH).powi(2)).exp();
        }
        dst[0] = 1.0;
    }
    out
}

const RGB_TO_YCC: [[f64; 3]; 3] = [
    [0.299, 0.587, 0.114],
    [-0.168_736, -0.331_264, 0.5],
    [0.5, -0.418_688, -0.081_312],
];

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for (r, row) in inv.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            let (r1, r2) = ((c + 1) % 3, (c + 2) % 3);
            let (c1, c2) = ((r + 1) % 3, (r + 2) % 3);
            *v = (m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1]) / det;
        }
    }
    inv
}

fn colour_conv<T: Scalar>(m: &[[f64; 3]; 3]) -> Tensor<T> {
    Tensor::from_fn(&[3, 3, 1, 1], |i| T::lit(m[i / 3][i % 3]))
}

const COLOUR_GEOM: ConvGeom = ConvGeom {
    in_ch: 3,
    out_ch: 3,
    kernel: 1,
    stride: 1,
    padding: 0,
};

/// Orthonormal 8-point DCT-II repeated along the diagonal of an `n x n` matrix.
pub fn block_dct<T: Scalar>(n: usize) -> Tensor<T> {
    assert!(n % 8 == 0, "block DCT needs a multiple of 8");
    let mut m = vec![0.0f64; n * n];
    for b in (0..n).step_by(8) {
        for u in 0..8 {
            let cu = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
            for x in 0..8 {
                m[(b + u) * n + b + x] = cu * (std::f64::consts::PI * (2 * x + 1) as f64 * u as f64 / 16.0).cos();
            }
        }
    }
    Tensor::from_vec(&[n, n], m.into_iter().map(T::lit).collect()).expect("dct shape")
}

fn transpose<T: Scalar>(m: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    Tensor::from_fn(&[c, r], |i| m.data()[(i % r) * c + i / r])
}

/// Reflect-pad rows to `n_out >= n_in` as a matrix.
fn reflect_pad<T: Scalar>(n_out: usize, n_in: usize) -> Tensor<T> {
    Tensor::from_fn(&[n_out, n_in], |i| {
        let (o, k) = (i / n_in, i % n_in);
        if resample::reflect(o as isize, n_in) == k {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// Differentiable JPEG stand-in: YCbCr, blockwise DCT, soft attenuation of
/// coefficients by their quantiser step, inverse DCT, RGB. Sides that are
/// not multiples of 8 are reflect-padded and cropped back.
pub fn jpeg_approx_graph<T: Scalar>(g: &mut Graph<T>, x: Var, quality: u8) -> Result<Var> {
    if !(1..=100).contains(&quality) {
        return invalid(format!("JPEG quality {quality} outside 1..=100"));
    }
    let [n, 3, h, w] = *g.shape(x) else {
        return invalid(format!("expected an [n, 3, h, w] batch, got {:?}", g.shape(x)));
    };
    let (hp, wp) = (h.div_ceil(8) * 8, w.div_ceil(8) * 8);
    let fwd = g.constant(colour_conv(&RGB_TO_YCC));
    let back = g.constant(colour_conv(&invert3(&RGB_TO_YCC)));
    let ycc = g.conv2d(x, fwd, None, COLOUR_GEOM);
    let (dh, dw) = (block_dct::<T>(hp), block_dct::<T>(wp));
    let (ph, pw): (Tensor<T>, Tensor<T>) = (reflect_pad(hp, h), reflect_pad(wp, w));
    let mut ah = vec![T::zero(); hp * h];
    kernels::gemm(T::one(), kernels::Mat::new(dh.data(), hp, hp), kernels::Mat::new(ph.data(), hp, h), T::zero(), &mut ah);
    let mut aw = vec![T::zero(); wp * w];
    kernels::gemm(T::one(), kernels::Mat::new(dw.data(), wp, wp), kernels::Mat::new(pw.data(), wp, w), T::zero(), &mut aw);
    let ah = Tensor::from_vec(&[hp, h], ah).expect("pad-dct shape");
    let aw = Tensor::from_vec(&[wp, w], aw).expect("pad-dct shape");
    let coeffs = g.separable(ycc, Rc::new(ah), Rc::new(aw));
    let weights = jpeg_mask_weights(quality);
    let mask = Tensor::from_fn(&[n, 3, hp, wp], |i| {
        let ch = (i / (hp * wp)) % 3;
        let (y, xx) = ((i / wp) % hp, i % wp);
        T::lit(weights[(ch > 0) as usize][(y % 8) * 8 + xx % 8])
    });
    let mv = g.constant(mask);
    let kept = g.mul(coeffs, mv);
    // The inverse DCT followed by the crop is the transpose of the DCT rows.
    let crop_h: Tensor<T> = Tensor::from_fn(&[h, hp], |i| if i / hp == i % hp { T::one() } else { T::zero() });
    let crop_w: Tensor<T> = Tensor::from_fn(&[w, wp], |i| if i / wp == i % wp { T::one() } else { T::zero() });
    let ih = matmul(&crop_h, &transpose(&dh));
    let iw = matmul(&crop_w, &transpose(&dw));
    let spatial = g.separable(kept, Rc::new(ih), Rc::new(iw));
    Ok(g.conv2d(spatial, back, None, COLOUR_GEOM))
}

fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (r, k, c) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![T::zero(); r * c];
    kernels::gemm(T::one(), kernels::Mat::new(a.data(), r, k), kernels::Mat::new(b.data(), k, c), T::zero(), &mut out);
    Tensor::from_vec(&[r, c], out).expect("matmul shape")
}

pub fn jpeg_approx<T: Scalar>(x: &Tensor<T>, quality: u8) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = jpeg_approx_graph(&mut g, xv, quality)?;
    Ok(g.value(y).clone())
}

pub fn gaussian_blur_graph<T: Scalar>(g: &mut Graph<T>, x: Var, kernel: usize) -> Result<Var> {
    check_kernel(kernel)?;
    let [_, _, h, w] = *g.shape(x) else {
        return invalid("blur expects an [n, c, h, w] batch");
    };
    if kernel == 1 {
        return Ok(x);
    }
    let (a, b) = blur_maps(h, w, kernel);
    Ok(g.separable(x, Rc::new(a), Rc::new(b)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiserKind {
    JpegApprox,
    GaussianBlur,
}

/// One sampled distortion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiserDraw {
    JpegApprox { quality: u8 },
    GaussianBlur { kernel: usize },
}

/// Uniform choice over a pool of differentiable distortions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Noiser {
    pub pool: Vec<NoiserKind>,
    pub quality_range: (u8, u8),
    pub blur_kernels: Vec<usize>,
}

impl Default for Noiser {
    fn default() -> Self {
        Noiser {
            pool: vec![NoiserKind::JpegApprox, NoiserKind::GaussianBlur],
            quality_range: (50, 90),
            blur_kernels: vec![3, 5, 7],
        }
    }
}

impl Noiser {
    pub fn validate(&self) -> Result<()> {
        if self.pool.is_empty() {
            return invalid("noiser pool is empty");
        }
        let (lo, hi) = self.quality_range;
        if lo == 0 || hi > 100 || lo > hi {
            return invalid(format!("bad quality range {lo}..={hi}"));
        }
        if self.pool.contains(&NoiserKind::GaussianBlur) {
            if self.blur_kernels.is_empty() {
                return invalid("no blur kernels configured");
            }
            self.blur_kernels.iter().try_for_each(|&k| check_kernel(k))?;
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> NoiserDraw {
        match self.pool[rng.gen_range(0..self.pool.len())] {
            NoiserKind::JpegApprox => NoiserDraw::JpegApprox {
                quality: rng.gen_range(self.quality_range.0..=self.quality_range.1),
            },
            NoiserKind::GaussianBlur => NoiserDraw::GaussianBlur {
                kernel: self.blur_kernels[rng.gen_range(0..self.blur_kernels.len())],
            },
        }
    }
}

impl NoiserDraw {
    pub fn kind(&self) -> NoiserKind {
        match self {
            NoiserDraw::JpegApprox { .. } => NoiserKind::JpegApprox,
            NoiserDraw::GaussianBlur { .. } => NoiserKind::GaussianBlur,
        }
    }

    pub fn apply_graph<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        match *self {
            NoiserDraw::JpegApprox { quality } => jpeg_approx_graph(g, x, quality),
            NoiserDraw::GaussianBlur { kernel } => gaussian_blur_graph(g, x, kernel),
        }
    }

    pub fn apply<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = self.apply_graph(&mut g, xv)?;
        Ok(g.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verification::psnr;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn natural(h: usize, w: usize) -> Image {
        Tensor::from_fn(&[1, 3, h, w], |i| {
            let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
            let (yf, xf) = (y as f32 / h as f32, x as f32 / w as f32);
            let edge = if (xf - 0.5).powi(2) + (yf - 0.45).powi(2) < 0.09 { 0.4 } else { -0.3 };
            (edge + 0.3 * (7.0 * xf + c as f32).sin() * (5.0 * yf).cos() + 0.15 * ((x * 13 + y * 7) % 5) as f32 / 5.0)
                .clamp(-1.0, 1.0)
        })
    }

    #[test]
    fn table_cells() {
        let l3: Vec<f64> = Kind::ALL.iter().map(|&k| PerturbationSpec::new(k, 3).unwrap().parameter).collect();
        assert_eq!(l3, [70.0, 0.7, 7.0, 30.0, 4.0]);
        assert_eq!(PerturbationSpec::new(Kind::Compression, 1).unwrap().parameter, 90.0);
        assert_eq!(PerturbationSpec::new(Kind::GaussianNoise, 5).unwrap().parameter, 50.0);
        assert_eq!(PerturbationSpec::new(Kind::Downscale, 2).unwrap().parameter, 0.8);
        assert!(PerturbationSpec::new(Kind::Downscale, 6).is_err());
        assert_eq!(PerturbationSpec::parse("gaussian_blur:4").unwrap().parameter, 9.0);
        assert!(PerturbationSpec::parse("sharpen:1").is_err());
        let csv = grid_table_csv();
        assert_eq!(csv.lines().count(), 2 + 30);
        assert!(csv.contains("random_drop,5,holes,6"));
    }

    #[test]
    fn level_zero_is_bit_identical() {
        let x = natural(16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for k in Kind::ALL {
            assert_eq!(apply_level(&x, k, 0, &mut rng).unwrap(), x);
        }
    }

    #[test]
    fn degenerate_parameters_are_identity() {
        let x = natural(16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(gaussian_blur(&x, 1).unwrap(), x);
        assert_eq!(gaussian_noise(&x, 0.0, &mut rng), x);
        assert_eq!(downscale(&x, 1.0).unwrap(), x);
        assert_eq!(random_drop(&x, 0, &mut rng), x);
        assert!(gaussian_blur(&x, 4).is_err());
        assert!(downscale(&x, 0.0).is_err());
        assert!(jpeg(&x, 0).is_err());
        assert!(jpeg_approx(&x, 101).is_err());
    }

    #[test]
    fn blur_of_constant_matches_direct_convolution() {
        let x: Tensor<f64> = Tensor::full(&[1, 1, 5, 5], 0.3);
        let y = gaussian_blur(&x, 7).unwrap();
        let taps = resample::gaussian_taps(7, 7.0 / 6.0);
        for r in 0..5 {
            for c in 0..5 {
                let mut s = 0.0;
                for (i, ti) in taps.iter().enumerate() {
                    for (j, tj) in taps.iter().enumerate() {
                        let (sr, sc) = (resample::reflect(r as isize + i as isize - 3, 5), resample::reflect(c as isize + j as isize - 3, 5));
                        s += ti * tj * x.data()[sr * 5 + sc];
                    }
                }
                assert!((y.data()[r * 5 + c] - s).abs() < 1e-12);
                assert!((y.data()[r * 5 + c] - 0.3).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn jpeg_approx_keeps_constants_and_orders_quality() {
        let c: Tensor<f64> = Tensor::full(&[2, 3, 16, 24], -0.4);
        let y = jpeg_approx(&c, 50).unwrap();
        assert!(y.zip_map(&c, |a, b| a - b).max_abs() < 1e-12);

        let x = natural(32, 32);
        let near = jpeg_approx(&x, 100).unwrap();
        assert!(psnr(&x, &near).unwrap() > 50.0);
        let seq: Vec<f64> = [90u8, 80, 70, 60, 50]
            .iter()
            .map(|&q| psnr(&x, &jpeg_approx(&x, q).unwrap()).unwrap())
            .collect();
        assert!(seq.windows(2).all(|w| w[1] <= w[0]), "{seq:?}");
    }

    #[test]
    fn jpeg_approx_pads_odd_sizes() {
        let x = natural(12, 20);
        let y = jpeg_approx(&x, 70).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(psnr(&x, &y).unwrap() > 20.0);
    }

    #[test]
    fn real_jpeg_round_trip_degrades_with_quality() {
        let x = natural(32, 32);
        let hi = psnr(&x, &jpeg(&x, 90).unwrap()).unwrap();
        let lo = psnr(&x, &jpeg(&x, 50).unwrap()).unwrap();
        assert!(hi > lo && lo > 20.0, "{hi} {lo}");
    }

    #[test]
    fn downscale_keeps_shape() {
        let x = natural(32, 32);
        let y = downscale(&x, 0.7).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(psnr(&x, &y).unwrap() > 18.0);
    }

    #[test]
    fn noiser_frequencies_are_uniform() {
        let noiser = Noiser::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let jpeg_count = (0..10_000)
            .filter(|_| noiser.sample(&mut rng).kind() == NoiserKind::JpegApprox)
            .count();
        assert!((4800..=5200).contains(&jpeg_count), "{jpeg_count}");

        let blur_only = Noiser {
            pool: vec![NoiserKind::GaussianBlur],
            ..Noiser::default()
        };
        assert!((0..100).all(|_| blur_only.sample(&mut rng).kind() == NoiserKind::GaussianBlur));
        let empty = Noiser {
            pool: vec![],
            ..Noiser::default()
        };
        assert!(empty.validate().is_err());
    }

    #[test]
    fn noise_mean_is_near_zero() {
        let x: Image = Tensor::zeros(&[1, 1, 1, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let sigma = 2.0 * 30.0 / 255.0;
        let mean = (0..10_000).map(|_| gaussian_noise(&x, 30.0, &mut rng).data()[0] as f64).sum::<f64>() / 10_000.0;
        assert!(mean.abs() <= 3.0 * sigma / 100.0, "{mean}");
        let a = gaussian_noise(&natural(8, 8), 20.0, &mut ChaCha8Rng::seed_from_u64(4));
        let b = gaussian_noise(&natural(8, 8), 20.0, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn random_drop_is_local(seed in 0u64..500, holes in 0usize..7) {
            let x = natural(20, 30);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rects = sample_holes(20, 30, holes, &mut rng);
            let mut y = x.clone();
            fill_holes(&mut y, 0, &rects);
            for i in 0..x.len() {
                let (yy, xx) = ((i / 30) % 20, i % 30);
                let inside = rects.iter().any(|r| yy >= r.top && yy < r.top + r.height && xx >= r.left && xx < r.left + r.width);
                if !inside {
                    prop_assert_eq!(x.data()[i], y.data()[i]);
                }
            }
            for r in &rects {
                prop_assert!(r.height >= 2 && r.height <= 4 && r.width >= 3 && r.width <= 6);
            }
        }
    }
}
