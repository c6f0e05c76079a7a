//! The critic that scores covers against watermarked images, the eraser
//! that attacks the message, and their alternating update.

use facelock_tensor::nn::{Layer, Sequential};
use facelock_tensor::optim::Adam;
use facelock_tensor::{Graph, Scalar, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Three strided 3x3 convolutions and a spatial mean: one score per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Critic<T = f32> {
    pub net: Sequential<T>,
}

impl Critic<f32> {
    pub fn new(hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Critic {
            net: Sequential::new(
                vec![
                    Layer::conv_strided(3, hidden, 3, 2),
                    Layer::LeakyRelu(0.2),
                    Layer::conv_strided(hidden, hidden, 3, 2),
                    Layer::LeakyRelu(0.2),
                    Layer::conv_strided(hidden, 1, 3, 2),
                ],
                rng,
            ),
        }
    }

    /// Scores for a batch `[n, 3, h, w]`.
    pub fn score(&self, x: &Tensor<f32>) -> Vec<f32> {
        let mut g = Graph::new();
        let bound = self.net.bind(&mut g, 0);
        let xv = g.constant(x.clone());
        let s = self.forward(&mut g, &bound, xv);
        g.value(s).data().to_vec()
    }
}

impl<T: Scalar> Critic<T> {
    /// `[n, 1]` scores.
    pub fn forward(&self, g: &mut Graph<T>, bound: &[Var], x: Var) -> Var {
        let y = self.net.forward(g, bound, x);
        g.spatial_mean(y)
    }

    /// Clamps every critic parameter into `[-c, c]`.
    pub fn clip(&mut self, c: f64) {
        let (lo, hi) = (T::lit(-c), T::lit(c));
        for p in self.net.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = v.max(lo).min(hi));
        }
    }

    pub fn cast<U: Scalar>(&self) -> Critic<U> {
        Critic { net: self.net.cast() }
    }
}

/// `x + beta * tanh(net(x))` with `net` two 3x3 convolutions.
#[derive(Clone, Debug, PartialEq)]
pub struct Eraser<T = f32> {
    pub net: Sequential<T>,
    pub beta: f64,
}

impl Eraser<f32> {
    pub fn new(hidden: usize, beta: f64, rng: &mut ChaCha8Rng) -> Self {
        Eraser {
            net: Sequential::new(
                vec![Layer::conv(3, hidden, 3), Layer::LeakyRelu(0.2), Layer::conv(hidden, 3, 3)],
                rng,
            ),
            beta,
        }
    }

    pub fn erase(&self, x: &Tensor<f32>) -> Tensor<f32> {
        let mut g = Graph::new();
        let bound = self.net.bind(&mut g, 0);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &bound, xv);
        g.value(y).clone()
    }
}

impl<T: Scalar> Eraser<T> {
    pub fn forward(&self, g: &mut Graph<T>, bound: &[Var], x: Var) -> Var {
        let raw = self.net.forward(g, bound, x);
        let t = g.tanh(raw);
        let r = g.scale(t, self.beta);
        g.add(x, r)
    }

    pub fn cast<U: Scalar>(&self) -> Eraser<U> {
        Eraser {
            net: self.net.cast(),
            beta: self.beta,
        }
    }
}

/// Bit mask of the adversary's parameters on a training graph.
pub const ADVERSARY_GROUP: u8 = 0b10;

/// Critic and eraser with their optimisers.
#[derive(Clone, Debug)]
pub struct Adversary {
    pub critic: Critic,
    pub eraser: Eraser,
    pub clip: f64,
    critic_opt: Adam<f32>,
    eraser_opt: Adam<f32>,
}

/// Graph handles of the adversary's parameters for one forward pass.
pub struct AdversaryBinding {
    pub critic: Vec<Var>,
    pub eraser: Vec<Var>,
}

impl Adversary {
    pub fn new(critic: Critic, eraser: Eraser, lr: f64, clip: f64) -> Self {
        let critic_opt = Adam::new(lr, critic.net.params());
        let eraser_opt = Adam::new(lr, eraser.net.params());
        Adversary {
            critic,
            eraser,
            clip,
            critic_opt,
            eraser_opt,
        }
    }

    pub fn bind(&self, g: &mut Graph<f32>) -> AdversaryBinding {
        AdversaryBinding {
            critic: self.critic.net.bind(g, ADVERSARY_GROUP),
            eraser: self.eraser.net.bind(g, ADVERSARY_GROUP),
        }
    }

    /// One descent step on the adversarial loss `adv_loss` (already on
    /// `g`), touching only critic and eraser, then weight clipping.
    pub fn step(&mut self, g: &Graph<f32>, binding: &AdversaryBinding, adv_loss: Var) -> Result<()> {
        let value = g.value(adv_loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("adversarial loss ({value})")));
        }
        let mut grads = g.backward(adv_loss, ADVERSARY_GROUP);
        let gc: Vec<_> = binding.critic.iter().map(|&v| grads.take(v)).collect();
        let ge: Vec<_> = binding.eraser.iter().map(|&v| grads.take(v)).collect();
        self.critic_opt.update(self.critic.net.params_mut(), &gc);
        self.eraser_opt.update(self.eraser.net.params_mut(), &ge);
        self.critic.clip(self.clip);
        Ok(())
    }
}
