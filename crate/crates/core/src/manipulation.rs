//! Surrogate face manipulations: condition swap, landmark-aligned blend
//! swap, mouth replacement and a face-region tone shift.
//!
//! All image edits act on a single `[1, 3, h, w]` image and leave pixels
//! outside their masks bit-identical.

use std::fmt;
use std::str::FromStr;

use facelock_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::codec::Message;
use crate::model::Model;
use crate::verification::bit_error_rate;
use crate::{check_shape, invalid, Error, Image, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManipulationKind {
    ConditionSwap,
    BlendSwap,
    MouthReplace,
    AttributeShift,
}

impl ManipulationKind {
    pub const ALL: [ManipulationKind; 4] = [
        ManipulationKind::ConditionSwap,
        ManipulationKind::BlendSwap,
        ManipulationKind::MouthReplace,
        ManipulationKind::AttributeShift,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ManipulationKind::ConditionSwap => "condition_swap",
            ManipulationKind::BlendSwap => "blend_swap",
            ManipulationKind::MouthReplace => "mouth_replace",
            ManipulationKind::AttributeShift => "attribute_shift",
        }
    }

    pub fn needs_donor(self) -> bool {
        self != ManipulationKind::AttributeShift
    }
}

impl fmt::Display for ManipulationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ManipulationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ManipulationKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown manipulation {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManipulationSpec {
    pub kind: ManipulationKind,
    pub strength: f64,
}

impl ManipulationSpec {
    pub fn new(kind: ManipulationKind, strength: f64) -> Result<Self> {
        if !(strength > 0.0 && strength <= 1.0) {
            return invalid(format!("strength {strength} outside (0, 1]"));
        }
        Ok(ManipulationSpec { kind, strength })
    }

    /// `kind` or `kind:strength`.
    pub fn parse(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None => ManipulationSpec::new(s.parse()?, 1.0),
            Some((k, v)) => {
                let strength = v
                    .parse()
                    .map_err(|_| Error::Invalid(format!("bad strength in {s:?}")))?;
                ManipulationSpec::new(k.parse()?, strength)
            }
        }
    }
}

impl FromStr for ManipulationSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ManipulationSpec::parse(s)
    }
}

impl fmt::Display for ManipulationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind, self.strength)
    }
}

/// Left eye, right eye, nose tip, left and right mouth corner, in pixels
/// as `(x, y)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmarks {
    pub points: [(f32, f32); 5],
}

impl Landmarks {
    /// Fixed layout for an aligned `size x size` face crop.
    pub fn canonical(size: usize) -> Self {
        let s = size as f32;
        Landmarks {
            points: [
                (0.39 * s, 0.45 * s),
                (0.61 * s, 0.45 * s),
                (0.5 * s, 0.57 * s),
                (0.41 * s, 0.72 * s),
                (0.59 * s, 0.72 * s),
            ],
        }
    }

    /// Face outline from brows to chin, clockwise in image coordinates.
    pub fn face_polygon(&self) -> Vec<(f32, f32)> {
        let [le, re, _, ml, mr] = self.points;
        let d = ((re.0 - le.0).powi(2) + (re.1 - le.1).powi(2)).sqrt();
        vec![
            (le.0 - 0.45 * d, le.1 - 0.5 * d),
            (re.0 + 0.45 * d, re.1 - 0.5 * d),
            (re.0 + 0.6 * d, re.1 + 0.25 * d),
            (mr.0 + 0.35 * d, mr.1),
            (mr.0, mr.1 + 0.45 * d),
            (ml.0, ml.1 + 0.45 * d),
            (ml.0 - 0.35 * d, ml.1),
            (le.0 - 0.6 * d, le.1 + 0.25 * d),
        ]
    }
}

fn polygon_area(poly: &[(f32, f32)]) -> f32 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum::<f32>()
        / 2.0
}

/// Distance from `p` to the polygon boundary, positive inside, zero or
/// negative outside (even-odd rule).
fn inside_distance(poly: &[(f32, f32)], p: (f32, f32)) -> f32 {
    let n = poly.len();
    let mut inside = false;
    let mut best = f32::INFINITY;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        if (a.1 > p.1) != (b.1 > p.1) && p.0 < (b.0 - a.0) * (p.1 - a.1) / (b.1 - a.1) + a.0 {
            inside = !inside;
        }
        let (ex, ey) = (b.0 - a.0, b.1 - a.1);
        let t = (((p.0 - a.0) * ex + (p.1 - a.1) * ey) / (ex * ex + ey * ey)).clamp(0.0, 1.0);
        let (qx, qy) = (a.0 + t * ex - p.0, a.1 + t * ey - p.1);
        best = best.min((qx * qx + qy * qy).sqrt());
    }
    if inside {
        best
    } else {
        -best
    }
}

fn smoothstep(t: f32) -> f32 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Soft polygon mask, exactly zero outside and on the boundary.
pub fn polygon_mask(poly: &[(f32, f32)], h: usize, w: usize, feather: f32) -> Result<Vec<f32>> {
    if poly.len() < 3 || poly.iter().any(|p| !(p.0.is_finite() && p.1.is_finite())) {
        return invalid("degenerate landmark polygon");
    }
    if polygon_area(poly).abs() < 1.0 {
        return invalid("landmark polygon has no area");
    }
    let mut m = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let d = inside_distance(poly, (x as f32 + 0.5, y as f32 + 0.5));
            if d > 0.0 {
                m[y * w + x] = smoothstep(d / feather.max(1e-3));
            }
        }
    }
    Ok(m)
}

/// Least-squares similarity `q ~ a * p + t` over the landmark pairs, in
/// complex form `a = (a_re, a_im)`.
fn similarity(from: &Landmarks, to: &Landmarks) -> ((f32, f32), (f32, f32)) {
    let n = from.points.len() as f32;
    let mean = |l: &Landmarks| {
        let (sx, sy) = l.points.iter().fold((0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1));
        (sx / n, sy / n)
    };
    let (mf, mt) = (mean(from), mean(to));
    let (mut re, mut im, mut norm) = (0.0f32, 0.0f32, 0.0f32);
    for (p, q) in from.points.iter().zip(&to.points) {
        let (zx, zy) = (p.0 - mf.0, p.1 - mf.1);
        let (wx, wy) = (q.0 - mt.0, q.1 - mt.1);
        // conj(z) * w
        re += zx * wx + zy * wy;
        im += zx * wy - zy * wx;
        norm += zx * zx + zy * zy;
    }
    let a = if norm > 0.0 { (re / norm, im / norm) } else { (1.0, 0.0) };
    let t = (mt.0 - (a.0 * mf.0 - a.1 * mf.1), mt.1 - (a.1 * mf.0 + a.0 * mf.1));
    (a, t)
}

fn bilinear_at(img: &Image, c: usize, x: f32, y: f32) -> f32 {
    let (_, _, h, w) = img.dims4();
    let xf = (x - 0.5).clamp(0.0, (w - 1) as f32);
    let yf = (y - 0.5).clamp(0.0, (h - 1) as f32);
    let (x0, y0) = (xf.floor() as usize, yf.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (tx, ty) = (xf - x0 as f32, yf - y0 as f32);
    let at = |yy: usize, xx: usize| img.data()[(c * h + yy) * w + xx];
    let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
    let bottom = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
    top * (1.0 - ty) + bottom * ty
}

fn single(x: &Image) -> Result<(usize, usize)> {
    match *x.shape() {
        [1, 3, h, w] => Ok((h, w)),
        _ => invalid(format!("expected a [1, 3, h, w] image, got {:?}", x.shape())),
    }
}

fn check_strength(strength: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&strength) {
        return invalid(format!("strength {strength} outside [0, 1]"));
    }
    Ok(())
}

/// `x + strength * mask * (edit - x)`; zero-mask pixels are copied.
fn blend_masked(x: &Image, edit: impl Fn(usize, usize, usize) -> f32, mask: &[f32], strength: f32) -> Image {
    let (_, _, h, w) = x.dims4();
    let mut out = x.clone();
    for c in 0..3 {
        for p in 0..h * w {
            let m = mask[p] * strength;
            if m > 0.0 {
                let i = c * h * w + p;
                let v = x.data()[i];
                out.data_mut()[i] = v + m * (edit(c, p / w, p % w) - v);
            }
        }
    }
    out
}

/// Warps the donor's face onto the target landmarks and alpha-blends it
/// inside the target's face polygon.
pub fn blend_swap(x: &Image, donor: &Image, target: &Landmarks, donor_landmarks: &Landmarks, strength: f64) -> Result<Image> {
    let (h, w) = single(x)?;
    check_shape(donor.shape(), x.shape())?;
    check_strength(strength)?;
    let feather = (0.06 * h.min(w) as f32).max(1.0);
    let mask = polygon_mask(&target.face_polygon(), h, w, feather)?;
    let (a, t) = similarity(target, donor_landmarks);
    let edit = |c: usize, y: usize, xx: usize| {
        let (px, py) = (xx as f32 + 0.5, y as f32 + 0.5);
        let (qx, qy) = (a.0 * px - a.1 * py + t.0, a.1 * px + a.0 * py + t.1);
        bilinear_at(donor, c, qx, qy)
    };
    Ok(blend_masked(x, edit, &mask, strength as f32))
}

/// Axis-aligned region in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    /// The mouth box in the lower third of an aligned face crop.
    pub fn lower_third(h: usize, w: usize) -> Self {
        let top = (0.6 * h as f64).round() as usize;
        let bottom = (0.88 * h as f64).round() as usize;
        let left = (0.28 * w as f64).round() as usize;
        let right = (0.72 * w as f64).round() as usize;
        Region {
            top,
            left,
            height: bottom - top,
            width: right - left,
        }
    }

    /// Elliptical soft mask inscribed in the box.
    fn mask(&self, h: usize, w: usize) -> Vec<f32> {
        let mut m = vec![0.0f32; h * w];
        let (cy, cx) = (self.top as f32 + self.height as f32 / 2.0, self.left as f32 + self.width as f32 / 2.0);
        let (ry, rx) = (self.height as f32 / 2.0, self.width as f32 / 2.0);
        for y in self.top..(self.top + self.height).min(h) {
            for x in self.left..(self.left + self.width).min(w) {
                let dy = (y as f32 + 0.5 - cy) / ry;
                let dx = (x as f32 + 0.5 - cx) / rx;
                let r = (dx * dx + dy * dy).sqrt();
                m[y * w + x] = smoothstep((1.0 - r) / 0.35);
            }
        }
        m
    }
}

/// Pastes the donor's mouth region with a feathered elliptical mask.
pub fn mouth_replace(x: &Image, donor: &Image, strength: f64) -> Result<Image> {
    let (h, w) = single(x)?;
    mouth_replace_in(x, donor, &Region::lower_third(h, w), strength)
}

pub fn mouth_replace_in(x: &Image, donor: &Image, region: &Region, strength: f64) -> Result<Image> {
    let (h, w) = single(x)?;
    check_shape(donor.shape(), x.shape())?;
    check_strength(strength)?;
    if region.height == 0 || region.width == 0 || region.top + region.height > h || region.left + region.width > w {
        return invalid(format!("mouth region {region:?} does not fit a {h}x{w} image"));
    }
    let mask = region.mask(h, w);
    let edit = |c: usize, y: usize, xx: usize| donor.data()[(c * h + y) * w + xx];
    Ok(blend_masked(x, edit, &mask, strength as f32))
}

/// Colour rotation about the grey axis plus a warm tint, on `[0, 1]` RGB.
fn tone(rgb: [f32; 3]) -> [f32; 3] {
    let angle = 0.9f32;
    let (s, c) = angle.sin_cos();
    let k = 1.0 / 3.0f32;
    let sq = (1.0f32 / 3.0).sqrt();
    // Rodrigues rotation about (1, 1, 1) / sqrt(3).
    let m = [
        [c + k * (1.0 - c), k * (1.0 - c) - sq * s, k * (1.0 - c) + sq * s],
        [k * (1.0 - c) + sq * s, c + k * (1.0 - c), k * (1.0 - c) - sq * s],
        [k * (1.0 - c) - sq * s, k * (1.0 - c) + sq * s, c + k * (1.0 - c)],
    ];
    let tint = [0.08, 0.02, -0.06];
    let mut out = [0.0; 3];
    for (i, o) in out.iter_mut().enumerate() {
        *o = (m[i][0] * rgb[0] + m[i][1] * rgb[1] + m[i][2] * rgb[2] + tint[i]).clamp(0.0, 1.0);
    }
    out
}

/// Smooth colour and tone change inside the face polygon.
pub fn attribute_shift(x: &Image, landmarks: &Landmarks, strength: f64) -> Result<Image> {
    let (h, w) = single(x)?;
    check_strength(strength)?;
    let feather = (0.06 * h.min(w) as f32).max(1.0);
    let mask = polygon_mask(&landmarks.face_polygon(), h, w, feather)?;
    let hw = h * w;
    let edit = |c: usize, y: usize, xx: usize| {
        let p = y * w + xx;
        let rgb = [0, 1, 2].map(|ch| (x.data()[ch * hw + p] + 1.0) / 2.0);
        tone(rgb)[c] * 2.0 - 1.0
    };
    Ok(blend_masked(x, edit, &mask, strength as f32))
}

/// Inputs for an image-space manipulation.
pub struct Scene<'a> {
    pub image: &'a Image,
    pub landmarks: &'a Landmarks,
    pub donor: Option<(&'a Image, &'a Landmarks)>,
}

/// Applies an image-space manipulation. `ConditionSwap` does not edit
/// pixels and is rejected here; see [`condition_swap_eval`].
pub fn apply(spec: &ManipulationSpec, scene: &Scene<'_>) -> Result<Image> {
    let donor = || scene.donor.ok_or_else(|| Error::Invalid(format!("{} needs a donor image", spec.kind)));
    match spec.kind {
        ManipulationKind::ConditionSwap => invalid("condition_swap changes the key, not the pixels"),
        ManipulationKind::BlendSwap => {
            let (d, dl) = donor()?;
            blend_swap(scene.image, d, scene.landmarks, dl, spec.strength)
        }
        ManipulationKind::MouthReplace => mouth_replace(scene.image, donor()?.0, spec.strength),
        ManipulationKind::AttributeShift => attribute_shift(scene.image, scene.landmarks, spec.strength),
    }
}

/// BER of decoding `marked` with the condition map of `other`.
pub fn condition_swap_eval(model: &Model, marked: &Image, other: &Image, message: &Message) -> Result<f64> {
    let cond = model.conditions(other)?;
    let logits = model.decode_logits(marked, &cond)?;
    bit_error_rate(message, &Message::from_logits(&logits))
}

/// Mask used by [`attribute_shift`] and [`blend_swap`], for inspection.
pub fn face_mask(landmarks: &Landmarks, h: usize, w: usize) -> Result<Tensor<f32>> {
    let feather = (0.06 * h.min(w) as f32).max(1.0);
    let m = polygon_mask(&landmarks.face_polygon(), h, w, feather)?;
    Ok(Tensor::from_vec(&[h, w], m).expect("mask shape"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyface::{render, IdentityParams, Pose};

    fn pair(size: usize) -> (Image, Landmarks, Image, Landmarks) {
        let a = IdentityParams::from_name("a", 5);
        let b = IdentityParams::from_name("b", 5);
        let pose = Pose::neutral();
        (render(&a, &pose, size), a.landmarks(&pose, size), render(&b, &pose, size), b.landmarks(&pose, size))
    }

    fn max_delta_outside(x: &Image, y: &Image, mask: &[f32]) -> f32 {
        let hw = mask.len();
        (0..x.len())
            .filter(|i| mask[i % hw] == 0.0)
            .map(|i| (x.data()[i] - y.data()[i]).abs())
            .fold(0.0, f32::max)
    }

    #[test]
    fn blend_swap_is_local_and_vanishes_at_zero_strength() {
        let (x, lx, d, ld) = pair(48);
        assert_eq!(blend_swap(&x, &d, &lx, &ld, 0.0).unwrap(), x);
        let y = blend_swap(&x, &d, &lx, &ld, 1.0).unwrap();
        let mask = face_mask(&lx, 48, 48).unwrap();
        assert_eq!(max_delta_outside(&x, &y, mask.data()), 0.0);
        assert!(y.zip_map(&x, |a, b| a - b).max_abs() > 0.1);
    }

    #[test]
    fn degenerate_polygon_is_rejected() {
        let (x, _, d, ld) = pair(32);
        let flat = Landmarks { points: [(5.0, 5.0); 5] };
        assert!(blend_swap(&x, &d, &flat, &ld, 1.0).is_err());
    }

    #[test]
    fn mouth_replace_is_local_and_continuous() {
        let (x, _, d, _) = pair(48);
        let region = Region::lower_third(48, 48);
        let y = mouth_replace(&x, &d, 1.0).unwrap();
        assert_eq!(max_delta_outside(&x, &y, &region.mask(48, 48)), 0.0);
        let tiny = mouth_replace(&x, &d, 1e-4).unwrap();
        assert!(tiny.zip_map(&x, |a, b| a - b).max_abs() < 1e-3);
    }

    #[test]
    fn attribute_shift_converges_to_input() {
        let (x, lx, _, _) = pair(32);
        let full = attribute_shift(&x, &lx, 1.0).unwrap();
        assert!(full.zip_map(&x, |a, b| a - b).max_abs() > 0.2);
        let mut last = f32::INFINITY;
        for s in [0.5, 0.1, 0.01, 0.001] {
            let d = attribute_shift(&x, &lx, s).unwrap().zip_map(&x, |a, b| a - b).max_abs();
            assert!(d < last);
            last = d;
        }
        assert!(last < 2e-3);
    }

    #[test]
    fn similarity_recovers_a_known_map() {
        let from = Landmarks::canonical(64);
        let (a, t) = ((0.8f32, 0.3f32), (4.0f32, -2.0f32));
        let to = Landmarks {
            points: from.points.map(|p| (a.0 * p.0 - a.1 * p.1 + t.0, a.1 * p.0 + a.0 * p.1 + t.1)),
        };
        let (ga, gt) = similarity(&from, &to);
        assert!((ga.0 - a.0).abs() < 1e-4 && (ga.1 - a.1).abs() < 1e-4);
        assert!((gt.0 - t.0).abs() < 1e-2 && (gt.1 - t.1).abs() < 1e-2);
    }

    #[test]
    fn spec_parsing() {
        let s = ManipulationSpec::parse("mouth_replace:0.5").unwrap();
        assert_eq!((s.kind, s.strength), (ManipulationKind::MouthReplace, 0.5));
        assert_eq!(ManipulationSpec::parse("blend_swap").unwrap().strength, 1.0);
        assert!(ManipulationSpec::parse("blend_swap:0").is_err());
        assert!(ManipulationSpec::parse("morph").is_err());
    }
}
