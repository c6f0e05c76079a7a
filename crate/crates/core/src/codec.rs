//! Messages, the spatial repeat, the condition transform, and the
//! residual encoder / multiply-and-pool decoder.

use std::fmt;
use std::str::FromStr;

use facelock_tensor::nn::{Layer, Sequential};
use facelock_tensor::{Graph, Scalar, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::conditioning::ConditionMap;
use crate::{check_shape, invalid, Error, Result};

pub const DEFAULT_MESSAGE_BITS: usize = 32;

/// A bit string; bit 0 is the most significant bit of the hex form.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Message {
    bits: Vec<bool>,
}

impl Message {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        if bits.is_empty() {
            return invalid("empty message");
        }
        Ok(Message { bits })
    }

    pub fn random(len: usize, rng: &mut impl Rng) -> Self {
        Message {
            bits: (0..len).map(|_| rng.gen()).collect(),
        }
    }

    /// Hex with the first bit as the most significant bit of the first digit.
    pub fn from_hex(s: &str) -> Result<Self> {
        if s.is_empty() || !s.chars().all(|c| c.is_ascii_hexdigit()) {
            return invalid(format!("malformed message hex {s:?}"));
        }
        let bits = s
            .chars()
            .flat_map(|c| {
                let d = c.to_digit(16).expect("checked hex digit");
                (0..4).rev().map(move |b| (d >> b) & 1 == 1)
            })
            .collect();
        Ok(Message { bits })
    }

    /// Lowercase hex; the length must be a multiple of four bits.
    pub fn to_hex(&self) -> String {
        assert!(self.bits.len() % 4 == 0, "message length is not a whole number of hex digits");
        self.bits
            .chunks(4)
            .map(|c| {
                let d = c.iter().fold(0u32, |acc, &b| (acc << 1) | b as u32);
                char::from_digit(d, 16).expect("nibble")
            })
            .collect()
    }

    /// Thresholds logits at zero.
    pub fn from_logits(logits: &[f32]) -> Self {
        Message {
            bits: logits.iter().map(|&z| z > 0.0).collect(),
        }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn complement(&self) -> Self {
        Message {
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// `-1` for a zero bit, `+1` for a one bit.
    pub fn symbols(&self) -> impl Iterator<Item = f32> + '_ {
        self.bits.iter().map(|&b| if b { 1.0 } else { -1.0 })
    }

    pub fn targets(&self) -> impl Iterator<Item = f32> + '_ {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 })
    }
}

impl fmt::Debug for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.bits.len() % 4 == 0 {
            write!(f, "Message({})", self.to_hex())
        } else {
            let s: String = self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect();
            write!(f, "Message(0b{s})")
        }
    }
}

impl FromStr for Message {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Message::from_hex(s)
    }
}

/// `C_m x h x w` with channel `i` constant at the symbol of bit `i`.
pub fn duplicate_message(m: &Message, h: usize, w: usize) -> Tensor<f32> {
    let hw = h * w;
    let mut data = Vec::with_capacity(m.len() * hw);
    for s in m.symbols() {
        data.extend(std::iter::repeat(s).take(hw));
    }
    Tensor::from_vec(&[m.len(), h, w], data).expect("repeat shape")
}

/// Elementwise product of the repeated message and the condition map.
pub fn transform_message(rep: &Tensor<f32>, cond: &ConditionMap) -> Result<Tensor<f32>> {
    check_shape(cond.0.shape(), rep.shape())?;
    Ok(rep.zip_map(&cond.0, |a, b| a * b))
}

/// `x_s = x + alpha * tanh(net([x, cm]))`, `net` two 7x7 convolutions.
#[derive(Clone, Debug, PartialEq)]
pub struct MessageEncoder<T = f32> {
    pub net: Sequential<T>,
    pub alpha: f64,
}

impl MessageEncoder<f32> {
    pub fn new(message_len: usize, hidden: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Self {
        MessageEncoder {
            net: Sequential::new(
                vec![
                    Layer::conv(3 + message_len, hidden, 7),
                    Layer::LeakyRelu(0.2),
                    Layer::conv(hidden, 3, 7),
                ],
                rng,
            ),
            alpha,
        }
    }

    /// Single image `[3, h, w]` with conditional message `[C_m, h, w]`.
    pub fn encode(&self, x: &Tensor<f32>, cm: &Tensor<f32>) -> Result<Tensor<f32>> {
        let [3, h, w] = *x.shape() else {
            return invalid(format!("expected a [3, h, w] image, got {:?}", x.shape()));
        };
        let c = cm.shape()[0];
        check_shape(cm.shape(), &[c, h, w])?;
        let mut g = Graph::new();
        let bound = self.net.bind(&mut g, 0);
        let xv = g.constant(x.clone().reshape(&[1, 3, h, w]));
        let cv = g.constant(cm.clone().reshape(&[1, c, h, w]));
        let y = self.forward(&mut g, &bound, xv, cv);
        let out = g.value(y).clone();
        if !out.all_finite() {
            return Err(Error::NonFinite("encoder output".into()));
        }
        Ok(out.reshape(&[3, h, w]))
    }
}

impl<T: Scalar> MessageEncoder<T> {
    pub fn forward(&self, g: &mut Graph<T>, bound: &[Var], x: Var, cm: Var) -> Var {
        let input = g.concat_channels(&[x, cm]);
        let raw = self.net.forward(g, bound, input);
        let t = g.tanh(raw);
        let r = g.scale(t, self.alpha);
        g.add(x, r)
    }

    pub fn cast<U: Scalar>(&self) -> MessageEncoder<U> {
        MessageEncoder {
            net: self.net.cast(),
            alpha: self.alpha,
        }
    }
}

/// Three 3x3 convolutions producing a `C_m x h x w` map.
#[derive(Clone, Debug, PartialEq)]
pub struct MessageDecoder<T = f32> {
    pub net: Sequential<T>,
}

impl MessageDecoder<f32> {
    pub fn new(message_len: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        MessageDecoder {
            net: Sequential::new(
                vec![
                    Layer::conv(3, hidden, 3),
                    Layer::LeakyRelu(0.2),
                    Layer::conv(hidden, hidden, 3),
                    Layer::LeakyRelu(0.2),
                    Layer::conv(hidden, message_len, 3),
                ],
                rng,
            ),
        }
    }

    /// Logits for one `[3, h, w]` image under `cond`.
    pub fn decode(&self, x: &Tensor<f32>, cond: &ConditionMap) -> Result<Vec<f32>> {
        let [3, h, w] = *x.shape() else {
            return invalid(format!("expected a [3, h, w] image, got {:?}", x.shape()));
        };
        let recovered = self.net.infer(&x.clone().reshape(&[1, 3, h, w]));
        let c = recovered.shape()[1];
        check_shape(cond.0.shape(), &[c, h, w])?;
        let hw = (h * w) as f32;
        Ok(recovered
            .data()
            .chunks(h * w)
            .zip(cond.0.data().chunks(h * w))
            .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p * q).sum::<f32>() / hw)
            .collect())
    }
}

impl<T: Scalar> MessageDecoder<T> {
    pub fn forward(&self, g: &mut Graph<T>, bound: &[Var], x: Var) -> Var {
        self.net.forward(g, bound, x)
    }

    /// Logits `[n, C_m]`: spatial mean of the decoded map times `cond`.
    pub fn logits(&self, g: &mut Graph<T>, bound: &[Var], x: Var, cond: Var) -> Var {
        let d = self.forward(g, bound, x);
        let p = g.mul(d, cond);
        g.spatial_mean(p)
    }

    pub fn cast<U: Scalar>(&self) -> MessageDecoder<U> {
        MessageDecoder { net: self.net.cast() }
    }
}
