//! The watermarking model: frozen attribute encoders, condition network,
//! message encoder and decoder, plus the training forward pass.

use facelock_tensor::optim::Adam;
use facelock_tensor::{Graph, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{Adversary, AdversaryBinding};
use crate::codec::{duplicate_message, Message, MessageDecoder, MessageEncoder, DEFAULT_MESSAGE_BITS};
use crate::conditioning::{ConditionGenerator, ConditionMap, EncoderRegistry, FacialEncoders, SurrogateEncoder};
use crate::distortion::NoiserDraw;
use crate::objectives::{self, LossWeights};
use crate::{check_shape, invalid, Error, Image, Result};

/// Group bit of the condition network, encoder and decoder parameters.
pub const MAIN_GROUP: u8 = 0b01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub message_bits: usize,
    pub condition_hidden: usize,
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    /// Residual amplitude of the encoder.
    pub alpha: f64,
    pub encoder_backend: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 128,
            message_bits: DEFAULT_MESSAGE_BITS,
            condition_hidden: 16,
            encoder_hidden: 32,
            decoder_hidden: 32,
            alpha: 0.1,
            encoder_backend: SurrogateEncoder::BACKEND.into(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return invalid(format!("image_size {} is below 16", self.image_size));
        }
        if self.message_bits == 0 {
            return invalid("message_bits must be positive");
        }
        if [self.condition_hidden, self.encoder_hidden, self.decoder_hidden].contains(&0) {
            return invalid("hidden widths must be positive");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return invalid(format!("alpha {} outside [0, 1]", self.alpha));
        }
        Ok(())
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub encoders: FacialEncoders,
    pub condition: ConditionGenerator,
    pub encoder: MessageEncoder,
    pub decoder: MessageDecoder,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model").field("config", &self.config).finish_non_exhaustive()
    }
}

/// Graph handles of the trainable parameters.
pub struct ModelBinding {
    pub condition: Vec<Var>,
    pub encoder: Vec<Var>,
    pub decoder: Vec<Var>,
}

/// One training batch; `tokens` are the facial tokens of `images`.
pub struct TrainBatch<'a> {
    pub images: &'a Image,
    pub tokens: &'a Tensor<f32>,
    pub messages: &'a [Message],
}

/// Loss nodes of one training forward pass.
pub struct TrainingGraph {
    pub total: Var,
    pub recon: Var,
    pub noise: Var,
    pub adversarial: Option<Var>,
    pub fragile: Option<Var>,
    pub marked: Var,
    /// Undistorted logits `[n, C_m]`.
    pub logits: Var,
}

/// Promotes `[3, h, w]` to `[1, 3, h, w]` and checks the channel count.
pub fn as_batch(x: &Image) -> Result<Image> {
    match *x.shape() {
        [3, h, w] => Ok(x.clone().reshape(&[1, 3, h, w])),
        [_, 3, _, _] => Ok(x.clone()),
        _ => invalid(format!("expected [n, 3, h, w] images, got {:?}", x.shape())),
    }
}

impl Model {
    pub fn new(config: ModelConfig, registry: &EncoderRegistry, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let encoders = FacialEncoders::new(registry, &config.encoder_backend, config.image_size)?;
        let condition = ConditionGenerator::new(config.message_bits, config.condition_hidden, rng);
        let encoder = MessageEncoder::new(config.message_bits, config.encoder_hidden, config.alpha, rng);
        let decoder = MessageDecoder::new(config.message_bits, config.decoder_hidden, rng);
        Ok(Model {
            config,
            encoders,
            condition,
            encoder,
            decoder,
        })
    }

    fn check_images(&self, x: &Image) -> Result<Image> {
        let x = as_batch(x)?;
        let (_, _, h, w) = x.dims4();
        let s = self.config.image_size;
        if (h, w) != (s, s) {
            return invalid(format!("model expects {s}x{s} images, got {h}x{w}"));
        }
        Ok(x)
    }

    /// Facial tokens `[n, 6, s, s]`.
    pub fn tokens(&self, images: &Image) -> Result<Tensor<f32>> {
        self.encoders.tokens(&self.check_images(images)?)
    }

    /// Condition maps `[n, C_m, s, s]` from precomputed tokens.
    pub fn conditions_from_tokens(&self, tokens: &Tensor<f32>) -> Tensor<f32> {
        self.condition.net.infer(tokens)
    }

    pub fn condition_maps(&self, images: &Image) -> Result<Tensor<f32>> {
        Ok(self.conditions_from_tokens(&self.tokens(images)?))
    }

    /// Condition map of a single image.
    pub fn conditions(&self, image: &Image) -> Result<ConditionMap> {
        let x = self.check_images(image)?;
        if x.shape()[0] != 1 {
            return invalid("conditions() takes a single image");
        }
        let c = self.condition_maps(&x)?;
        let s = self.config.image_size;
        Ok(ConditionMap(c.reshape(&[self.config.message_bits, s, s])))
    }

    fn repeated(&self, messages: &[Message]) -> Result<Tensor<f32>> {
        let s = self.config.image_size;
        let parts = messages
            .iter()
            .map(|m| {
                if m.len() != self.config.message_bits {
                    return invalid(format!("message has {} bits, model uses {}", m.len(), self.config.message_bits));
                }
                Ok(duplicate_message(m, s, s).reshape(&[1, m.len(), s, s]))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack_batch(&parts))
    }

    /// Watermarks a batch under the condition maps `conds`.
    pub fn embed_with(&self, images: &Image, conds: &Tensor<f32>, messages: &[Message]) -> Result<Image> {
        let x = self.check_images(images)?;
        if messages.len() != x.shape()[0] {
            return invalid(format!("{} messages for {} images", messages.len(), x.shape()[0]));
        }
        let rep = self.repeated(messages)?;
        check_shape(conds.shape(), rep.shape())?;
        let mut g = Graph::new();
        let bound = self.encoder.net.bind(&mut g, 0);
        let xv = g.constant(x);
        let cm = g.constant(rep.zip_map(conds, |a, b| a * b));
        let y = self.encoder.forward(&mut g, &bound, xv, cm);
        let out = g.value(y).clone();
        if !out.all_finite() {
            return Err(Error::NonFinite("watermarked image".into()));
        }
        Ok(out)
    }

    pub fn embed_batch(&self, images: &Image, messages: &[Message]) -> Result<Image> {
        let conds = self.condition_maps(images)?;
        self.embed_with(images, &conds, messages)
    }

    /// Watermarks one image; returns `[1, 3, s, s]`.
    pub fn embed(&self, image: &Image, message: &Message) -> Result<Image> {
        self.embed_batch(image, std::slice::from_ref(message))
    }

    /// Logits per image of `images` decoded under `conds`.
    pub fn decode_with(&self, images: &Image, conds: &Tensor<f32>) -> Result<Vec<Vec<f32>>> {
        let x = self.check_images(images)?;
        let (n, _, s, _) = x.dims4();
        check_shape(conds.shape(), &[n, self.config.message_bits, s, s])?;
        let mut g = Graph::new();
        let bound = self.decoder.net.bind(&mut g, 0);
        let xv = g.constant(x);
        let cv = g.constant(conds.clone());
        let z = self.decoder.logits(&mut g, &bound, xv, cv);
        Ok(g.value(z).data().chunks(self.config.message_bits).map(<[f32]>::to_vec).collect())
    }

    /// Logits of a single image under a given condition map.
    pub fn decode_logits(&self, image: &Image, cond: &ConditionMap) -> Result<Vec<f32>> {
        let s = self.config.image_size;
        let c = cond.0.clone().reshape(&[1, self.config.message_bits, s, s]);
        Ok(self.decode_with(image, &c)?.remove(0))
    }

    /// Logits of each image under its own condition map.
    pub fn extract_batch(&self, images: &Image) -> Result<Vec<Vec<f32>>> {
        let conds = self.condition_maps(images)?;
        self.decode_with(images, &conds)
    }

    pub fn extract(&self, image: &Image) -> Result<Message> {
        let logits = self.extract_batch(image)?;
        Ok(Message::from_logits(&logits[0]))
    }

    pub fn bind(&self, g: &mut Graph<f32>) -> ModelBinding {
        ModelBinding {
            condition: self.condition.net.bind(g, MAIN_GROUP),
            encoder: self.encoder.net.bind(g, MAIN_GROUP),
            decoder: self.decoder.net.bind(g, MAIN_GROUP),
        }
    }

    /// Records every loss term for one batch.
    ///
    /// Without a noiser draw the noise term and the contrastive positive
    /// reuse the undistorted decode. Without an adversary the adversarial
    /// term is absent. The contrastive term is skipped at zero weight.
    #[allow(clippy::too_many_arguments)]
    pub fn training_forward(
        &self,
        g: &mut Graph<f32>,
        bound: &ModelBinding,
        batch: &TrainBatch<'_>,
        noiser: Option<&NoiserDraw>,
        adversary: Option<(&Adversary, &AdversaryBinding)>,
        weights: &LossWeights,
        temperature: f64,
    ) -> Result<TrainingGraph> {
        let x = self.check_images(batch.images)?;
        let n = x.shape()[0];
        let s = self.config.image_size;
        check_shape(batch.tokens.shape(), &[n, crate::conditioning::TOKEN_CHANNELS, s, s])?;
        let rep = self.repeated(batch.messages)?;
        check_shape(&[batch.messages.len()], &[n])?;
        let targets = objectives::targets::<f32>(batch.messages);

        let xv = g.constant(x);
        let tv = g.constant(batch.tokens.clone());
        let cond = self.condition.forward(g, &bound.condition, tv);
        let rv = g.constant(rep);
        let cm = g.mul(rv, cond);
        let marked = self.encoder.forward(g, &bound.encoder, xv, cm);

        let dmap = self.decoder.forward(g, &bound.decoder, marked);
        let prod = g.mul(dmap, cond);
        let anchor = g.spatial_mean(prod);
        let recon = objectives::recon_loss_graph(g, anchor, targets.clone());

        let (noise, positive) = match noiser {
            Some(draw) => {
                let distorted = draw.apply_graph(g, marked)?;
                let z = self.decoder.logits(g, &bound.decoder, distorted, cond);
                (objectives::recon_loss_graph(g, z, targets.clone()), z)
            }
            None => (recon, anchor),
        };

        let adversarial = match adversary {
            Some((adv, ab)) if weights.adversarial > 0.0 => {
                let cover = adv.critic.forward(g, &ab.critic, xv);
                let scored = adv.critic.forward(g, &ab.critic, marked);
                let erased = adv.eraser.forward(g, &ab.eraser, marked);
                let z = self.decoder.logits(g, &bound.decoder, erased, cond);
                let bce = objectives::recon_loss_graph(g, z, targets.clone());
                Some(objectives::adv_loss_graph(g, cover, scored, bce))
            }
            _ => None,
        };

        let fragile = if weights.fragile > 0.0 {
            let cross = g.cross_pool(dmap, cond);
            Some(objectives::fragile_loss_graph(g, anchor, positive, cross, temperature)?)
        } else {
            None
        };

        let total = objectives::total_loss_graph(g, recon, noise, adversarial, fragile, weights);
        Ok(TrainingGraph {
            total,
            recon,
            noise,
            adversarial,
            fragile,
            marked,
            logits: anchor,
        })
    }
}

/// Adam state for the condition network, encoder and decoder.
#[derive(Clone, Debug)]
pub struct ModelOptimizer {
    condition: Adam<f32>,
    encoder: Adam<f32>,
    decoder: Adam<f32>,
}

impl ModelOptimizer {
    pub fn new(model: &Model, lr: f64) -> Self {
        ModelOptimizer {
            condition: Adam::new(lr, model.condition.net.params()),
            encoder: Adam::new(lr, model.encoder.net.params()),
            decoder: Adam::new(lr, model.decoder.net.params()),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        for opt in [&mut self.condition, &mut self.encoder, &mut self.decoder] {
            opt.lr = lr;
        }
    }

    /// Descends on `total`, touching only [`MAIN_GROUP`] parameters.
    pub fn step(&mut self, model: &mut Model, g: &Graph<f32>, bound: &ModelBinding, total: Var) -> Result<()> {
        let mut grads = g.backward(total, MAIN_GROUP);
        let mut take = |vars: &[Var]| vars.iter().map(|&v| grads.take(v)).collect::<Vec<_>>();
        let (gc, ge, gd) = (take(&bound.condition), take(&bound.encoder), take(&bound.decoder));
        if [&gc, &ge, &gd].iter().any(|set| set.iter().flatten().any(|t| !t.all_finite())) {
            return Err(Error::NonFinite("gradient".into()));
        }
        self.condition.update(model.condition.net.params_mut(), &gc);
        self.encoder.update(model.encoder.net.params_mut(), &ge);
        self.decoder.update(model.decoder.net.params_mut(), &gd);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversarial::{Critic, Eraser};
    use crate::toyface;
    use rand::SeedableRng;

    fn small() -> (Model, Image) {
        let config = ModelConfig {
            image_size: 16,
            message_bits: 8,
            condition_hidden: 4,
            encoder_hidden: 4,
            decoder_hidden: 4,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = Model::new(config, &EncoderRegistry::default(), &mut rng).unwrap();
        let samples = toyface::generate(2, 2, 16, 3);
        let images: Vec<Image> = samples.iter().map(|s| s.image.clone()).collect();
        let flat: Vec<Image> = images.iter().map(|x| x.clone().reshape(&[3, 16, 16])).collect();
        model.encoders.fit(&flat).unwrap();
        (model, Tensor::stack_batch(&images))
    }

    #[test]
    fn embed_is_a_bounded_residual() {
        let (model, x) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let msgs: Vec<Message> = (0..4).map(|_| Message::random(8, &mut rng)).collect();
        let y = model.embed_batch(&x, &msgs).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.zip_map(&x, |a, b| a - b).max_abs() <= model.config.alpha as f32 + 1e-6);
        assert_eq!(model.extract_batch(&y).unwrap().len(), 4);
    }

    #[test]
    fn wrong_size_or_bits_are_rejected() {
        let (model, x) = small();
        let big = Tensor::<f32>::zeros(&[1, 3, 32, 32]);
        assert!(model.extract(&big).is_err());
        let m = Message::from_hex("abcd").unwrap();
        assert!(model.embed(&x.select_batch(0), &m).is_err());
    }

    #[test]
    fn training_step_reduces_recon_loss() {
        let (mut model, x) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let msgs: Vec<Message> = (0..4).map(|_| Message::random(8, &mut rng)).collect();
        let tokens = model.tokens(&x).unwrap();
        let batch = TrainBatch {
            images: &x,
            tokens: &tokens,
            messages: &msgs,
        };
        let mut adv = Adversary::new(Critic::new(4, &mut rng), Eraser::new(4, 0.05, &mut rng), 1e-3, 0.1);
        let mut opt = ModelOptimizer::new(&model, 1e-2);
        let weights = LossWeights::default();
        let draw = NoiserDraw::GaussianBlur { kernel: 3 };
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..15 {
            let mut g = Graph::new();
            let mb = model.bind(&mut g);
            let ab = adv.bind(&mut g);
            let tg = model
                .training_forward(&mut g, &mb, &batch, Some(&draw), Some((&adv, &ab)), &weights, 0.5)
                .unwrap();
            last = g.value(tg.recon).item();
            first.get_or_insert(last);
            opt.step(&mut model, &g, &mb, tg.total).unwrap();
            adv.step(&g, &ab, tg.adversarial.unwrap()).unwrap();
        }
        assert!(last < first.unwrap(), "{last} vs {first:?}");
    }

    fn main_params(m: &Model) -> Vec<Tensor<f32>> {
        [m.condition.net.params(), m.encoder.net.params(), m.decoder.net.params()].concat()
    }

    fn adversary_params(a: &Adversary) -> Vec<Tensor<f32>> {
        [a.critic.net.params(), a.eraser.net.params()].concat()
    }

    #[test]
    fn each_step_touches_only_its_own_parameters() {
        let (mut model, x) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let msgs: Vec<Message> = (0..4).map(|_| Message::random(8, &mut rng)).collect();
        let tokens = model.tokens(&x).unwrap();
        let batch = TrainBatch {
            images: &x,
            tokens: &tokens,
            messages: &msgs,
        };
        let mut adv = Adversary::new(Critic::new(4, &mut rng), Eraser::new(4, 0.05, &mut rng), 1e-3, 0.1);
        let mut opt = ModelOptimizer::new(&model, 1e-2);
        let (fingerprints, states) = (model.encoders.fingerprints(), model.encoders.states());

        let mut g = Graph::new();
        let mb = model.bind(&mut g);
        let ab = adv.bind(&mut g);
        let draw = NoiserDraw::JpegApprox { quality: 70 };
        let tg = model
            .training_forward(&mut g, &mb, &batch, Some(&draw), Some((&adv, &ab)), &LossWeights::default(), 0.5)
            .unwrap();

        let (model_before, adv_before) = (main_params(&model), adversary_params(&adv));
        opt.step(&mut model, &g, &mb, tg.total).unwrap();
        assert_ne!(main_params(&model), model_before);
        assert_eq!(adversary_params(&adv), adv_before);

        let model_after = main_params(&model);
        adv.step(&g, &ab, tg.adversarial.unwrap()).unwrap();
        assert_ne!(adversary_params(&adv), adv_before);
        assert_eq!(main_params(&model), model_after);

        assert_eq!(model.encoders.fingerprints(), fingerprints);
        assert_eq!(model.encoders.states(), states);
    }

    #[test]
    fn zero_alpha_leaves_nothing_for_the_critic() {
        let (mut model, x) = small();
        model.config.alpha = 0.0;
        model.encoder.alpha = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let msgs: Vec<Message> = (0..4).map(|_| Message::random(8, &mut rng)).collect();
        let marked = model.embed_batch(&x, &msgs).unwrap();
        let critic = Critic::new(4, &mut rng);
        let (cover, scored) = (critic.score(&x), critic.score(&marked));
        let mean = |v: &[f32]| v.iter().sum::<f32>() / v.len() as f32;
        assert_eq!(mean(&cover) - mean(&scored), 0.0);
    }
}
