//! Frozen attribute encoders, the facial token and the condition map.
//!
//! The shape chain is `512 -> 2x16x16 -> 2xHxW` per attribute, then
//! `6xHxW` for the token and `C_m x H x W` for the condition map.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use facelock_tensor::kernels::{self, ConvGeom};
use facelock_tensor::nn::{Layer, Sequential};
use facelock_tensor::{resample, Graph, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{check_shape, invalid, Error, Result};

pub const EMBEDDING_DIM: usize = 512;
pub const SHUFFLE_FACTOR: usize = 16;
pub const TOKEN_CHANNELS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeKind {
    Identity,
    Appearance,
    Mouth,
}

impl AttributeKind {
    pub const ALL: [AttributeKind; 3] = [AttributeKind::Identity, AttributeKind::Appearance, AttributeKind::Mouth];

    pub fn name(self) -> &'static str {
        match self {
            AttributeKind::Identity => "identity",
            AttributeKind::Appearance => "appearance",
            AttributeKind::Mouth => "mouth",
        }
    }
}

impl fmt::Display for AttributeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttributeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttributeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown attribute kind {s:?}")))
    }
}

/// A 512-d attribute vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeEmbedding(Vec<f32>);

impl AttributeEmbedding {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.len() != EMBEDDING_DIM {
            return invalid(format!("embedding needs {EMBEDDING_DIM} values, got {}", values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("attribute embedding".into()));
        }
        Ok(AttributeEmbedding(values))
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    /// Flat little-endian `f32` dump.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.0.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn cosine(&self, other: &Self) -> f64 {
        let dot: f64 = self.0.iter().zip(&other.0).map(|(&a, &b)| a as f64 * b as f64).sum();
        let na: f64 = self.0.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = other.0.iter().map(|&b| (b as f64).powi(2)).sum::<f64>().sqrt();
        dot / (na * nb).max(f64::MIN_POSITIVE)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeEncoderSpec {
    pub kind: AttributeKind,
    pub backend: String,
    pub frozen: bool,
}

/// A frozen image-to-embedding map.
///
/// `fit` may only estimate input statistics; the weights that define the
/// map are fixed at construction and never see a gradient.
pub trait AttributeEncoder: Send + Sync {
    fn spec(&self) -> AttributeEncoderSpec;

    /// `image` is `[3, h, w]` in `[-1, 1]`.
    fn embed(&self, image: &Tensor<f32>) -> Result<AttributeEmbedding>;

    fn fit(&mut self, images: &[Tensor<f32>]) -> Result<()>;

    /// Fitted statistics, for checkpoints.
    fn state(&self) -> Vec<f32>;

    fn set_state(&mut self, state: &[f32]) -> Result<()>;

    /// Digest of the frozen weights; changes if the backend changes.
    fn fingerprint(&self) -> String;
}

/// Random-feature surrogate: box-resample a region to 32x32, a fixed 5x5
/// stride-2 filter bank with `tanh`, grid pooling plus grid colour means,
/// standardisation, and a fixed gaussian projection to 512 values.
#[derive(Clone, Debug)]
pub struct SurrogateEncoder {
    kind: AttributeKind,
    backend: String,
    filters: Tensor<f32>,
    projection: Tensor<f32>,
    grid: usize,
    mean: Vec<f32>,
    scale: Vec<f32>,
}

const SURROGATE_SIDE: usize = 32;
const SURROGATE_FILTERS: usize = 8;

impl SurrogateEncoder {
    pub const BACKEND: &'static str = "surrogate-v1";

    pub fn new(kind: AttributeKind) -> Self {
        let grid = match kind {
            AttributeKind::Identity => 3,
            AttributeKind::Appearance => 4,
            AttributeKind::Mouth => 2,
        };
        let seed = match kind {
            AttributeKind::Identity => 0x1d,
            AttributeKind::Appearance => 0xa9,
            AttributeKind::Mouth => 0x30,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut filters = Vec::with_capacity(SURROGATE_FILTERS * 75);
        for _ in 0..SURROGATE_FILTERS {
            let mut f: Vec<f32> = (0..75).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
            let mean = f.iter().sum::<f32>() / 75.0;
            f.iter_mut().for_each(|v| *v -= mean);
            let norm = f.iter().map(|v| v * v).sum::<f32>().sqrt();
            f.iter_mut().for_each(|v| *v *= 2.0 / norm);
            filters.extend(f);
        }
        let features = (SURROGATE_FILTERS + 3) * grid * grid;
        let std = (1.0 / features as f64).sqrt() as f32;
        let projection = Tensor::from_fn(&[EMBEDDING_DIM, features], |_| rng.sample::<f32, _>(StandardNormal) * std);
        SurrogateEncoder {
            kind,
            backend: Self::BACKEND.to_string(),
            filters: Tensor::from_vec(&[SURROGATE_FILTERS, 3, 5, 5], filters).expect("filter shape"),
            projection,
            grid,
            mean: vec![0.0; features],
            scale: vec![1.0; features],
        }
    }

    fn feature_count(&self) -> usize {
        self.mean.len()
    }

    /// Rows and columns (fractions of the side) the encoder looks at.
    fn region(&self) -> ((f64, f64), (f64, f64)) {
        match self.kind {
            AttributeKind::Identity => ((0.15, 0.85), (0.15, 0.85)),
            AttributeKind::Appearance => ((0.0, 1.0), (0.0, 1.0)),
            AttributeKind::Mouth => ((2.0 / 3.0, 1.0), (0.0, 1.0)),
        }
    }

    fn raw_features(&self, image: &Tensor<f32>) -> Result<Vec<f32>> {
        let (h, w) = image_hw(image)?;
        let ((r0, r1), (c0, c1)) = self.region();
        let rows: Tensor<f32> = resample::area(SURROGATE_SIDE, h, r0 * h as f64, (r1 - r0) * h as f64);
        let cols: Tensor<f32> = resample::area(SURROGATE_SIDE, w, c0 * w as f64, (c1 - c0) * w as f64);
        let x = image.clone().reshape(&[1, 3, h, w]);
        let crop = kernels::separable(&x, &rows, &cols);
        let geom = ConvGeom {
            in_ch: 3,
            out_ch: SURROGATE_FILTERS,
            kernel: 5,
            stride: 2,
            padding: 2,
        };
        let resp = kernels::conv2d(&crop, &self.filters, None, &geom).map(|v| v.tanh());
        let mut out = grid_means(&resp, self.grid);
        out.extend(grid_means(&crop, self.grid));
        Ok(out)
    }
}

fn image_hw(image: &Tensor<f32>) -> Result<(usize, usize)> {
    match *image.shape() {
        [3, h, w] | [1, 3, h, w] => {
            if !image.all_finite() {
                return Err(Error::NonFinite("image".into()));
            }
            Ok((h, w))
        }
        _ => invalid(format!("expected a [3, h, w] image, got {:?}", image.shape())),
    }
}

/// Per-channel means over a `grid x grid` partition of `[1, c, h, w]`.
fn grid_means(x: &Tensor<f32>, grid: usize) -> Vec<f32> {
    let (_, c, h, w) = x.dims4();
    let mut out = Vec::with_capacity(c * grid * grid);
    for ch in 0..c {
        let plane = &x.data()[ch * h * w..(ch + 1) * h * w];
        for gy in 0..grid {
            for gx in 0..grid {
                let (ya, yb) = (gy * h / grid, (gy + 1) * h / grid);
                let (xa, xb) = (gx * w / grid, (gx + 1) * w / grid);
                let mut s = 0.0f32;
                for y in ya..yb {
                    s += plane[y * w + xa..y * w + xb].iter().sum::<f32>();
                }
                out.push(s / ((yb - ya) * (xb - xa)) as f32);
            }
        }
    }
    out
}

impl AttributeEncoder for SurrogateEncoder {
    fn spec(&self) -> AttributeEncoderSpec {
        AttributeEncoderSpec {
            kind: self.kind,
            backend: self.backend.clone(),
            frozen: true,
        }
    }

    fn embed(&self, image: &Tensor<f32>) -> Result<AttributeEmbedding> {
        let raw = self.raw_features(image)?;
        let z: Vec<f32> = raw
            .iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(&v, (&m, &s))| (v - m) / s)
            .collect();
        let f = z.len();
        let values = self
            .projection
            .data()
            .chunks(f)
            .map(|row| row.iter().zip(&z).map(|(a, b)| a * b).sum())
            .collect();
        AttributeEmbedding::new(values)
    }

    fn fit(&mut self, images: &[Tensor<f32>]) -> Result<()> {
        if images.is_empty() {
            return invalid("cannot fit encoder statistics on zero images");
        }
        let f = self.feature_count();
        let mut sum = vec![0.0f64; f];
        let mut sq = vec![0.0f64; f];
        for img in images {
            for (i, v) in self.raw_features(img)?.into_iter().enumerate() {
                sum[i] += v as f64;
                sq[i] += (v as f64) * (v as f64);
            }
        }
        let n = images.len() as f64;
        for i in 0..f {
            let m = sum[i] / n;
            let var = (sq[i] / n - m * m).max(0.0);
            self.mean[i] = m as f32;
            self.scale[i] = var.sqrt().max(1e-3) as f32;
        }
        Ok(())
    }

    fn state(&self) -> Vec<f32> {
        self.mean.iter().chain(&self.scale).copied().collect()
    }

    fn set_state(&mut self, state: &[f32]) -> Result<()> {
        let f = self.feature_count();
        if state.len() != 2 * f {
            return invalid(format!("{} encoder state needs {} values, got {}", self.kind, 2 * f, state.len()));
        }
        self.mean.copy_from_slice(&state[..f]);
        self.scale.copy_from_slice(&state[f..]);
        Ok(())
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.backend.as_bytes());
        h.update(self.kind.name().as_bytes());
        for v in self.filters.data().iter().chain(self.projection.data()) {
            h.update(v.to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}

type Maker = Box<dyn Fn(AttributeKind) -> Box<dyn AttributeEncoder> + Send + Sync>;

/// Encoder backends by name.
pub struct EncoderRegistry {
    makers: BTreeMap<String, Maker>,
}

impl Default for EncoderRegistry {
    fn default() -> Self {
        let mut r = EncoderRegistry { makers: BTreeMap::new() };
        r.register(SurrogateEncoder::BACKEND, |k| Box::new(SurrogateEncoder::new(k)));
        r
    }
}

impl EncoderRegistry {
    pub fn register(
        &mut self,
        name: &str,
        make: impl Fn(AttributeKind) -> Box<dyn AttributeEncoder> + Send + Sync + 'static,
    ) {
        self.makers.insert(name.to_string(), Box::new(make));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.makers.keys().map(String::as_str)
    }

    pub fn build(&self, name: &str, kind: AttributeKind) -> Result<Box<dyn AttributeEncoder>> {
        let make = self
            .makers
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("no encoder backend named {name:?}")))?;
        Ok(make(kind))
    }
}

/// The identity, appearance and mouth encoders for one working size.
pub struct FacialEncoders {
    size: usize,
    encoders: [Box<dyn AttributeEncoder>; 3],
}

impl fmt::Debug for FacialEncoders {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FacialEncoders")
            .field("size", &self.size)
            .field("specs", &self.specs())
            .finish()
    }
}

impl FacialEncoders {
    pub fn new(registry: &EncoderRegistry, backend: &str, size: usize) -> Result<Self> {
        if size < SHUFFLE_FACTOR {
            return invalid(format!("working size {size} is below {SHUFFLE_FACTOR}"));
        }
        Ok(FacialEncoders {
            size,
            encoders: [
                registry.build(backend, AttributeKind::Identity)?,
                registry.build(backend, AttributeKind::Appearance)?,
                registry.build(backend, AttributeKind::Mouth)?,
            ],
        })
    }

    pub fn surrogate(size: usize) -> Result<Self> {
        Self::new(&EncoderRegistry::default(), SurrogateEncoder::BACKEND, size)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn specs(&self) -> Vec<AttributeEncoderSpec> {
        self.encoders.iter().map(|e| e.spec()).collect()
    }

    pub fn fingerprints(&self) -> Vec<String> {
        self.encoders.iter().map(|e| e.fingerprint()).collect()
    }

    pub fn fit(&mut self, images: &[Tensor<f32>]) -> Result<()> {
        self.encoders.iter_mut().try_for_each(|e| e.fit(images))
    }

    pub fn states(&self) -> Vec<Vec<f32>> {
        self.encoders.iter().map(|e| e.state()).collect()
    }

    pub fn set_states(&mut self, states: &[Vec<f32>]) -> Result<()> {
        if states.len() != 3 {
            return invalid("expected three encoder states");
        }
        for (e, s) in self.encoders.iter_mut().zip(states) {
            e.set_state(s)?;
        }
        Ok(())
    }

    /// Identity, appearance and mouth embeddings of a `[3, size, size]` image.
    pub fn extract(&self, image: &Tensor<f32>) -> Result<[AttributeEmbedding; 3]> {
        let (h, w) = image_hw(image)?;
        if (h, w) != (self.size, self.size) {
            return invalid(format!("encoders expect {0}x{0} images, got {h}x{w}", self.size));
        }
        Ok([
            self.encoders[0].embed(image)?,
            self.encoders[1].embed(image)?,
            self.encoders[2].embed(image)?,
        ])
    }

    /// Facial tokens `[n, 6, size, size]` for a batch `[n, 3, size, size]`.
    pub fn tokens(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (n, _, _, _) = images.try_dims4().map_err(|e| Error::Invalid(e.to_string()))?;
        let mut parts = Vec::with_capacity(n);
        for i in 0..n {
            let [a, b, c] = self.extract(&images.select_batch(i))?;
            parts.push(assemble_facial_token(&a, &b, &c, self.size, self.size)?.0.reshape(&[1, TOKEN_CHANNELS, self.size, self.size]));
        }
        Ok(Tensor::stack_batch(&parts))
    }
}

/// Depth-to-space: `[c * r^2, h, w] -> [c, h * r, w * r]` with
/// `out[c, y, x] = in[c * r^2 + (y % r) * r + x % r, y / r, x / r]`.
pub fn pixel_shuffle<T: Scalar>(input: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [cin, h, w] = *input.shape() else {
        return invalid(format!("pixel_shuffle expects [c, h, w], got {:?}", input.shape()));
    };
    if r == 0 || cin % (r * r) != 0 {
        return invalid(format!("{cin} channels do not divide by r^2 = {}", r * r));
    }
    let c = cin / (r * r);
    let (ho, wo) = (h * r, w * r);
    let src = input.data();
    let data = (0..c * ho * wo)
        .map(|i| {
            let (ch, y, x) = (i / (ho * wo), (i / wo) % ho, i % wo);
            src[((ch * r * r + (y % r) * r + x % r) * h + y / r) * w + x / r]
        })
        .collect();
    Ok(Tensor::from_vec(&[c, ho, wo], data).expect("pixel_shuffle shape"))
}

/// `6 x h x w` assembly of the three embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct FacialToken(pub Tensor<f32>);

/// Shuffles each embedding to `2x16x16`, bilinearly resizes to `h x w`
/// (half-pixel centres) and concatenates identity, appearance, mouth.
pub fn assemble_facial_token(
    id: &AttributeEmbedding,
    app: &AttributeEmbedding,
    mouth: &AttributeEmbedding,
    h: usize,
    w: usize,
) -> Result<FacialToken> {
    if h < SHUFFLE_FACTOR || w < SHUFFLE_FACTOR {
        return invalid(format!("token size {h}x{w} is below {SHUFFLE_FACTOR}x{SHUFFLE_FACTOR}"));
    }
    let rows: Tensor<f32> = resample::bilinear(h, SHUFFLE_FACTOR);
    let cols: Tensor<f32> = resample::bilinear(w, SHUFFLE_FACTOR);
    let mut parts = Vec::with_capacity(3);
    for e in [id, app, mouth] {
        let flat = Tensor::from_vec(&[EMBEDDING_DIM, 1, 1], e.values().to_vec()).expect("embedding shape");
        let small = pixel_shuffle(&flat, SHUFFLE_FACTOR)?.reshape(&[1, 2, SHUFFLE_FACTOR, SHUFFLE_FACTOR]);
        parts.push(kernels::separable(&small, &rows, &cols));
    }
    let token = kernels::concat_channels(&[&parts[0], &parts[1], &parts[2]]);
    Ok(FacialToken(token.reshape(&[TOKEN_CHANNELS, h, w])))
}

/// `C_m x h x w` map; see [`ConditionGenerator`].
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionMap(pub Tensor<f32>);

/// Two 7x7 convolutions with a leaky activation between them and a
/// per-channel instance normalisation after.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionGenerator<T = f32> {
    pub net: Sequential<T>,
}

impl ConditionGenerator<f32> {
    pub fn new(message_len: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        ConditionGenerator {
            net: Sequential::new(
                vec![
                    Layer::conv(TOKEN_CHANNELS, hidden, 7),
                    Layer::LeakyRelu(0.2),
                    Layer::conv(hidden, message_len, 7),
                    Layer::InstanceNorm,
                ],
                rng,
            ),
        }
    }

    pub fn generate(&self, token: &FacialToken) -> Result<ConditionMap> {
        let [c, h, w] = *token.0.shape() else {
            return invalid("facial token must be [6, h, w]");
        };
        check_shape(&[c], &[TOKEN_CHANNELS])?;
        let y = self.net.infer(&token.0.clone().reshape(&[1, c, h, w]));
        let m = y.shape()[1];
        Ok(ConditionMap(y.reshape(&[m, h, w])))
    }
}

impl<T: Scalar> ConditionGenerator<T> {
    pub fn forward(&self, g: &mut Graph<T>, bound: &[Var], tokens: Var) -> Var {
        self.net.forward(g, bound, tokens)
    }

    pub fn cast<U: Scalar>(&self) -> ConditionGenerator<U> {
        ConditionGenerator { net: self.net.cast() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn embedding(f: impl Fn(usize) -> f32) -> AttributeEmbedding {
        AttributeEmbedding::new((0..EMBEDDING_DIM).map(f).collect()).unwrap()
    }

    #[test]
    fn pixel_shuffle_matches_index_map() {
        let r = 2;
        let input = Tensor::from_vec(&[8, 1, 1], (0..8).map(|v| v as f64).collect()).unwrap();
        let out = pixel_shuffle(&input, r).unwrap();
        assert_eq!(out.shape(), [2, 2, 2]);
        for c in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    let expected = (c * r * r + (y % r) * r + (x % r)) as f64;
                    assert_eq!(out.data()[(c * 2 + y) * 2 + x], expected);
                }
            }
        }
    }

    #[test]
    fn pixel_shuffle_rejects_bad_channel_count() {
        let input = Tensor::<f32>::zeros(&[7, 1, 1]);
        assert!(pixel_shuffle(&input, 2).is_err());
    }

    #[test]
    fn embedding_validates() {
        assert!(AttributeEmbedding::new(vec![0.0; 511]).is_err());
        let mut v = vec![0.0; 512];
        v[3] = f32::NAN;
        assert!(matches!(AttributeEmbedding::new(v), Err(Error::NonFinite(_))));
    }

    #[test]
    fn token_shape_and_constant_case() {
        let zero = embedding(|_| 0.0);
        let t = assemble_facial_token(&zero, &zero, &zero, 128, 128).unwrap();
        assert_eq!(t.0.shape(), [6, 128, 128]);
        assert!(t.0.data().iter().all(|&v| v == 0.0));

        let (a, b, c) = (embedding(|_| 0.25), embedding(|_| -1.5), embedding(|_| 3.0));
        let t = assemble_facial_token(&a, &b, &c, 40, 24).unwrap();
        for (ch, v) in [0.25f32, 0.25, -1.5, -1.5, 3.0, 3.0].into_iter().enumerate() {
            let plane = &t.0.data()[ch * 40 * 24..(ch + 1) * 40 * 24];
            assert!(plane.iter().all(|&p| (p - v).abs() < 1e-5), "channel {ch}");
        }
        assert!(assemble_facial_token(&a, &b, &c, 15, 32).is_err());
    }

    #[test]
    fn token_matches_direct_interpolation() {
        let e = embedding(|i| ((i * 37) % 101) as f32 / 50.0 - 1.0);
        let t = assemble_facial_token(&e, &e, &e, 24, 24).unwrap();
        let flat = Tensor::from_vec(&[512, 1, 1], e.values().to_vec()).unwrap();
        let small = pixel_shuffle(&flat, 16).unwrap();
        // Bilinear with half-pixel centres, written out per output pixel.
        let sample = |c: usize, y: usize, x: usize| -> f32 {
            let coord = |o: usize| {
                let s = ((o as f64 + 0.5) * 16.0 / 24.0 - 0.5).max(0.0);
                let i0 = (s.floor() as usize).min(15);
                (i0, (i0 + 1).min(15), s - i0 as f64)
            };
            let (y0, y1, fy) = coord(y);
            let (x0, x1, fx) = coord(x);
            let at = |yy: usize, xx: usize| small.data()[(c * 16 + yy) * 16 + xx] as f64;
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            (top * (1.0 - fy) + bottom * fy) as f32
        };
        for c in 0..2 {
            for y in 0..24 {
                for x in 0..24 {
                    let got = t.0.data()[((2 + c) * 24 + y) * 24 + x];
                    assert!((got - sample(c, y, x)).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn surrogate_is_deterministic_and_sized() {
        let enc = FacialEncoders::surrogate(32).unwrap();
        let img = Tensor::from_fn(&[3, 32, 32], |i| ((i % 17) as f32 / 8.0) - 1.0);
        let a = enc.extract(&img).unwrap();
        let b = enc.extract(&img).unwrap();
        assert_eq!(a, b);
        let zeros = Tensor::zeros(&[3, 32, 32]);
        assert_eq!(enc.extract(&zeros).unwrap(), enc.extract(&zeros).unwrap());
        assert!(enc.extract(&Tensor::zeros(&[3, 16, 16])).is_err());
        let mut bad = img.clone();
        bad.data_mut()[5] = f32::INFINITY;
        assert!(enc.extract(&bad).is_err());
        assert!(enc.specs().iter().all(|s| s.frozen));
    }

    #[test]
    fn state_round_trip() {
        let mut enc = SurrogateEncoder::new(AttributeKind::Mouth);
        let imgs: Vec<_> = (0..4).map(|k| Tensor::from_fn(&[3, 32, 32], |i| ((i * (k + 1)) % 13) as f32 / 13.0)).collect();
        enc.fit(&imgs).unwrap();
        let mut other = SurrogateEncoder::new(AttributeKind::Mouth);
        other.set_state(&enc.state()).unwrap();
        assert_eq!(enc.embed(&imgs[0]).unwrap(), other.embed(&imgs[0]).unwrap());
        assert!(other.set_state(&[0.0; 3]).is_err());
    }

    #[test]
    fn registry_lookup() {
        let r = EncoderRegistry::default();
        assert!(r.names().any(|n| n == SurrogateEncoder::BACKEND));
        assert!(r.build("arcface", AttributeKind::Identity).is_err());
        let e = r.build(SurrogateEncoder::BACKEND, AttributeKind::Mouth).unwrap();
        assert_eq!(e.spec().kind, AttributeKind::Mouth);
        assert_eq!(e.embed(&Tensor::zeros(&[3, 32, 32])).unwrap().to_le_bytes().len(), 2048);
    }

    #[test]
    fn condition_map_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gen = ConditionGenerator::new(32, 8, &mut rng);
        let token = FacialToken(Tensor::from_fn(&[6, 24, 24], |i| (i as f32 * 0.37).sin()));
        let a = gen.generate(&token).unwrap();
        assert_eq!(a.0.shape(), [32, 24, 24]);
        assert_eq!(a, gen.generate(&token).unwrap());
    }

    proptest! {
        #[test]
        fn pixel_shuffle_is_a_bijection(c in 1usize..4, r in 1usize..5, h in 1usize..5, w in 1usize..5) {
            let n = c * r * r * h * w;
            let input = Tensor::from_vec(&[c * r * r, h, w], (0..n).map(|v| v as f64).collect()).unwrap();
            let out = pixel_shuffle(&input, r).unwrap();
            prop_assert_eq!(out.shape(), &[c, h * r, w * r][..]);
            let mut values = out.data().to_vec();
            values.sort_by(f64::total_cmp);
            prop_assert_eq!(values, input.data().to_vec());
        }

        #[test]
        fn shape_chain_holds_for_any_size(h in 16usize..34, w in 16usize..34, c_m in 1usize..9, seed in 0u64..50) {
            let e = |k: usize| embedding(move |i| ((i * 7 + k * 13 + seed as usize) as f32 * 0.1).sin());
            let shuffled = pixel_shuffle(&Tensor::from_vec(&[EMBEDDING_DIM, 1, 1], e(0).0).unwrap(), SHUFFLE_FACTOR).unwrap();
            prop_assert_eq!(shuffled.shape(), &[2, 16, 16][..]);
            let token = assemble_facial_token(&e(0), &e(1), &e(2), h, w).unwrap();
            prop_assert_eq!(token.0.shape(), &[TOKEN_CHANNELS, h, w][..]);
            let gen = ConditionGenerator::new(c_m, 2, &mut ChaCha8Rng::seed_from_u64(seed));
            let map = gen.generate(&token).unwrap();
            prop_assert_eq!(map.0.shape(), &[c_m, h, w][..]);
        }
    }
}
