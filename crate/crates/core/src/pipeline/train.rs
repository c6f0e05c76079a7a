use std::path::Path;

use facelock_tensor::{Graph, Tensor};
use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversarial::{Adversary, Critic, Eraser};
use crate::codec::Message;
use crate::conditioning::EncoderRegistry;
use crate::distortion::Noiser;
use crate::model::{Model, ModelConfig, ModelOptimizer, TrainBatch};
use crate::objectives::LossWeights;
use crate::verification::bit_error_rate;
use crate::{invalid, Error, Result};

use super::checkpoint::{save_checkpoint, CheckpointMeta};
use super::dataset::Dataset;
use super::evaluate::{validation_record, ValidationRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdversaryConfig {
    pub critic_hidden: usize,
    pub eraser_hidden: usize,
    /// Residual amplitude of the eraser.
    pub beta: f64,
    /// Critic weight clip.
    pub clip: f64,
    pub lr: f64,
}

impl Default for AdversaryConfig {
    fn default() -> Self {
        AdversaryConfig {
            critic_hidden: 16,
            eraser_hidden: 16,
            beta: 0.05,
            clip: 0.1,
            lr: 1e-3,
        }
    }
}

/// Main-model learning rate over the run; the adversary keeps its own
/// constant rate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `lr` down to `LR_FLOOR * lr` at the last step.
    Cosine,
}

pub const LR_FLOOR: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    /// InfoNCE temperature.
    pub temperature: f64,
    pub log_every: usize,
    /// Validation interval in steps; 0 disables it.
    pub validate_every: usize,
    /// Steps before the contrastive term is switched on.
    pub fragile_warmup: usize,
    /// Steps over which its weight then ramps linearly to `loss.fragile`.
    pub fragile_ramp: usize,
    pub use_noiser: bool,
    pub use_adversary: bool,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub noiser: Noiser,
    pub adversary: AdversaryConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            steps: 3000,
            batch_size: 8,
            lr: 1e-3,
            lr_schedule: LrSchedule::Constant,
            temperature: 0.5,
            log_every: 100,
            validate_every: 500,
            fragile_warmup: 500,
            fragile_ramp: 500,
            use_noiser: true,
            use_adversary: true,
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            noiser: Noiser::default(),
            adversary: AdversaryConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: TrainConfig = toml::from_str(text).map_err(|e| Error::Format(format!("train config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.use_noiser {
            self.noiser.validate()?;
        }
        if self.batch_size < 2 && self.loss.fragile > 0.0 {
            return invalid("the contrastive term needs batch_size >= 2");
        }
        if self.batch_size == 0 || self.steps == 0 {
            return invalid("batch_size and steps must be positive");
        }
        if !(self.lr > 0.0 && self.temperature > 0.0) {
            return invalid("lr and temperature must be positive");
        }
        Ok(())
    }

    /// Loss weights in effect at `step` (0-based).
    pub fn weights_at(&self, step: usize) -> LossWeights {
        let mut w = self.loss;
        let ramp = if step < self.fragile_warmup {
            0.0
        } else if self.fragile_ramp == 0 {
            1.0
        } else {
            (((step - self.fragile_warmup + 1) as f64) / self.fragile_ramp as f64).min(1.0)
        };
        w.fragile *= ramp;
        w
    }

    /// Main-model learning rate at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let t = step as f64 / self.steps.saturating_sub(1).max(1) as f64;
                let c = 0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos());
                self.lr * (LR_FLOOR + (1.0 - LR_FLOOR) * c)
            }
        }
    }

    /// Hex digest of the canonical TOML form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

/// Loss values and batch BER after one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub recon: f64,
    pub noise: f64,
    pub adversarial: f64,
    pub fragile: f64,
    /// Bit error rate of the undistorted decode on the training batch.
    pub ber: f64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub adversary: Option<Adversary>,
    optimizer: ModelOptimizer,
    rng: ChaCha8Rng,
    data: Dataset,
    dataset_digest: String,
    validation: Option<Dataset>,
    tokens: Vec<Tensor<f32>>,
    by_identity: Vec<Vec<usize>>,
    order: Vec<usize>,
    cursor: usize,
    step: usize,
    pub trace: Vec<StepRecord>,
    pub validation_log: Vec<ValidationRecord>,
}

impl Trainer {
    /// Fits the attribute encoders' input statistics on `train` and caches
    /// every facial token.
    pub fn new(config: TrainConfig, train: &Dataset, registry: &EncoderRegistry) -> Result<Self> {
        config.validate()?;
        if train.size != config.model.image_size {
            return invalid(format!("dataset is {0}x{0}, model expects {1}x{1}", train.size, config.model.image_size));
        }
        let ids = train.identities();
        if ids.len() < config.batch_size {
            return invalid(format!("{} training identities for batch size {}", ids.len(), config.batch_size));
        }
        let by_identity: Vec<Vec<usize>> = ids
            .iter()
            .map(|id| (0..train.len()).filter(|&i| &train.samples[i].identity == id).collect())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut model = Model::new(config.model.clone(), registry, &mut rng)?;
        model.encoders.fit(&train.flat_images())?;
        let tokens = train
            .samples
            .iter()
            .map(|s| model.tokens(&s.image))
            .collect::<Result<Vec<_>>>()?;
        let adversary = config.use_adversary.then(|| {
            let a = &config.adversary;
            Adversary::new(
                Critic::new(a.critic_hidden, &mut rng),
                Eraser::new(a.eraser_hidden, a.beta, &mut rng),
                a.lr,
                a.clip,
            )
        });
        let optimizer = ModelOptimizer::new(&model, config.lr);
        let order = (0..by_identity.len()).collect();
        Ok(Trainer {
            config,
            model,
            adversary,
            optimizer,
            rng,
            data: train.clone(),
            dataset_digest: train.digest(),
            validation: None,
            tokens,
            by_identity,
            order,
            cursor: usize::MAX,
            step: 0,
            trace: Vec::new(),
            validation_log: Vec::new(),
        })
    }

    /// Held-out data checked every `validate_every` steps.
    pub fn with_validation(mut self, val: &Dataset) -> Result<Self> {
        if val.size != self.config.model.image_size {
            return invalid("validation images have the wrong size");
        }
        if val.identities().len() < 2 {
            return invalid("validation needs at least two identities");
        }
        self.validation = Some(val.clone());
        Ok(self)
    }

    pub fn dataset_digest(&self) -> &str {
        &self.dataset_digest
    }

    pub fn checkpoint_meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            steps: self.step,
            train_config: Some(self.config.clone()),
            config_digest: Some(self.config.digest()),
            dataset_digest: Some(self.dataset_digest.clone()),
            halted: None,
        }
    }

    pub fn save(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        let adv = self
            .adversary
            .as_ref()
            .map(|a| (&a.critic, &a.eraser, &self.config.adversary));
        save_checkpoint(path, &self.model, adv, meta)
    }

    fn validate_now(&mut self) -> Result<()> {
        let Some(val) = &self.validation else {
            return Ok(());
        };
        let r = validation_record(&self.model, val, self.step, self.config.seed)?;
        info!(
            "validation step {:>5} clean ber {:.4} mismatched ber {:.4} psnr {:.2} ssim {:.4}",
            r.step, r.clean_ber, r.mismatched_ber, r.psnr, r.ssim
        );
        self.validation_log.push(r);
        Ok(())
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// One sample from each of `batch_size` distinct identities; the
    /// identity order is reshuffled whenever it runs out.
    fn next_indices(&mut self) -> Vec<usize> {
        let b = self.config.batch_size;
        if self.cursor.saturating_add(b) > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let picks = self.order[self.cursor..self.cursor + b].to_vec();
        self.cursor += b;
        picks
            .into_iter()
            .map(|id| *self.by_identity[id].choose(&mut self.rng).expect("identity has samples"))
            .collect()
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let idx = self.next_indices();
        let images = self.data.batch(&idx);
        let tokens = Tensor::stack_batch(&idx.iter().map(|&i| self.tokens[i].clone()).collect::<Vec<_>>());
        let bits = self.config.model.message_bits;
        let messages: Vec<Message> = idx.iter().map(|_| Message::random(bits, &mut self.rng)).collect();
        let draw = self.config.use_noiser.then(|| self.config.noiser.sample(&mut self.rng));

        let mut g = Graph::new();
        let mb = self.model.bind(&mut g);
        let ab = self.adversary.as_ref().map(|a| a.bind(&mut g));
        let batch = TrainBatch {
            images: &images,
            tokens: &tokens,
            messages: &messages,
        };
        let adv = self.adversary.as_ref().zip(ab.as_ref());
        let tg = self.model.training_forward(
            &mut g,
            &mb,
            &batch,
            draw.as_ref(),
            adv,
            &self.config.weights_at(self.step),
            self.config.temperature,
        )?;

        let value = |v: Option<facelock_tensor::Var>| v.map_or(0.0, |v| g.value(v).item() as f64);
        let total = value(Some(tg.total));
        if !total.is_finite() {
            return Err(Error::Diverged {
                step: self.step as u64,
                detail: format!("total loss {total}"),
            });
        }
        let logits = g.value(tg.logits);
        let mut errors = 0.0;
        for (m, z) in messages.iter().zip(logits.data().chunks(bits)) {
            errors += bit_error_rate(m, &Message::from_logits(z))?;
        }
        let ber = errors / messages.len() as f64;
        let record = StepRecord {
            step: self.step,
            total,
            recon: value(Some(tg.recon)),
            noise: value(Some(tg.noise)),
            adversarial: value(tg.adversarial),
            fragile: value(tg.fragile),
            ber,
        };

        self.optimizer.set_lr(self.config.lr_at(self.step));
        self.optimizer.step(&mut self.model, &g, &mb, tg.total).map_err(|e| Error::Diverged {
            step: self.step as u64,
            detail: e.to_string(),
        })?;
        if let (Some(adv), Some(ab), Some(loss)) = (self.adversary.as_mut(), ab.as_ref(), tg.adversarial) {
            adv.step(&g, ab, loss).map_err(|e| Error::Diverged {
                step: self.step as u64,
                detail: e.to_string(),
            })?;
        }
        self.step += 1;
        self.trace.push(record);
        if self.config.validate_every > 0 && self.step % self.config.validate_every == 0 {
            self.validate_now()?;
        }
        let every = self.config.log_every.max(1);
        if self.step % every == 0 || self.step == self.config.steps {
            info!(
                "step {:>5} total {:.4} recon {:.4} noise {:.4} adv {:.4} fragile {:.4} ber {:.4}",
                self.step, record.total, record.recon, record.noise, record.adversarial, record.fragile, record.ber
            );
        } else {
            debug!("step {} total {:.5}", self.step, record.total);
        }
        Ok(record)
    }

    /// Runs the remaining configured steps.
    pub fn run(&mut self) -> Result<()> {
        while self.step < self.config.steps {
            self.step()?;
        }
        Ok(())
    }

    /// Like [`Trainer::run`], but a divergence first writes the last
    /// finite weights to `halt_path`, marked as halted.
    pub fn run_or_halt(&mut self, halt_path: &Path) -> Result<()> {
        match self.run() {
            Err(Error::Diverged { step, detail }) => {
                warn!("training diverged at step {step}: {detail}; writing {}", halt_path.display());
                let meta = CheckpointMeta {
                    halted: Some(format!("step {step}: {detail}")),
                    ..self.checkpoint_meta()
                };
                self.save(halt_path, &meta)?;
                Err(Error::Diverged { step, detail })
            }
            other => other,
        }
    }

    pub fn into_model(self) -> (Model, Option<Adversary>, Vec<StepRecord>) {
        (self.model, self.adversary, self.trace)
    }
}

/// Directory for cached training runs.
pub const CACHE_ENV: &str = "FACELOCK_CACHE";

/// Result of [`train_or_load`].
pub struct TrainedRun {
    pub model: Model,
    pub adversary: Option<(Critic, Eraser)>,
    pub meta: CheckpointMeta,
    pub trace: Vec<StepRecord>,
    pub validation_log: Vec<ValidationRecord>,
    pub from_cache: bool,
}

#[derive(Serialize, Deserialize)]
struct CachedLogs {
    trace: Vec<StepRecord>,
    validation_log: Vec<ValidationRecord>,
}

/// Cache key: the config digest and training-set digest.
pub fn run_key(config: &TrainConfig, train: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update(config.digest().as_bytes());
    h.update(train.digest().as_bytes());
    hex::encode(h.finalize())[..24].to_string()
}

/// Trains, or reuses a finished run from `cache` with the same config and
/// training set. On divergence the last finite weights go to `halt_path`,
/// or next to the cache entry when that is `None`; halted runs are never
/// reused.
pub fn train_or_load(
    config: &TrainConfig,
    train: &Dataset,
    val: Option<&Dataset>,
    registry: &EncoderRegistry,
    cache: Option<&Path>,
    halt_path: Option<&Path>,
) -> Result<TrainedRun> {
    let key = run_key(config, train);
    let paths = cache.map(|d| (d.join(format!("{key}.flck")), d.join(format!("{key}.logs.json"))));
    if let Some((ck, logs)) = &paths {
        if ck.exists() && logs.exists() {
            let c = super::checkpoint::load_checkpoint(ck, registry)?;
            let l: CachedLogs = serde_json::from_str(&std::fs::read_to_string(logs)?)?;
            if c.meta.halted.is_none() && c.meta.steps == config.steps {
                info!("reusing cached run {}", ck.display());
                return Ok(TrainedRun {
                    model: c.model,
                    adversary: c.adversary,
                    meta: c.meta,
                    trace: l.trace,
                    validation_log: l.validation_log,
                    from_cache: true,
                });
            }
        }
    }
    let mut t = Trainer::new(config.clone(), train, registry)?;
    if let Some(v) = val {
        t = t.with_validation(v)?;
    }
    let halt = halt_path
        .map(Path::to_path_buf)
        .or_else(|| paths.as_ref().map(|(ck, _)| ck.with_extension("halted.flck")));
    match &halt {
        Some(h) => t.run_or_halt(h)?,
        None => t.run()?,
    }
    let meta = t.checkpoint_meta();
    if let Some((ck, logs)) = &paths {
        let cached = CachedLogs {
            trace: t.trace.clone(),
            validation_log: t.validation_log.clone(),
        };
        t.save(ck, &meta)?;
        std::fs::write(logs, serde_json::to_string(&cached)?)?;
    }
    let validation_log = std::mem::take(&mut t.validation_log);
    let (model, adversary, trace) = t.into_model();
    Ok(TrainedRun {
        model,
        adversary: adversary.map(|a| (a.critic, a.eraser)),
        meta,
        trace,
        validation_log,
        from_cache: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig {
            steps: 3,
            batch_size: 4,
            model: ModelConfig {
                image_size: 16,
                message_bits: 8,
                condition_hidden: 4,
                encoder_hidden: 4,
                decoder_hidden: 4,
                ..ModelConfig::default()
            },
            adversary: AdversaryConfig {
                critic_hidden: 4,
                eraser_hidden: 4,
                ..AdversaryConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_toml_round_trip_and_digest() {
        let c = tiny();
        let back = TrainConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
        let mut d = c.clone();
        d.seed = 1;
        assert_ne!(d.digest(), c.digest());
        assert!(TrainConfig::from_toml("steps = 0").is_err());
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn cosine_schedule_runs_from_lr_to_the_floor() {
        let c = TrainConfig::from_toml("steps = 101\nlr = 0.002\nlr_schedule = \"cosine\"").unwrap();
        assert_eq!(c.lr_at(0), 0.002);
        assert!((c.lr_at(50) - 0.002 * (LR_FLOOR + (1.0 - LR_FLOOR) * 0.5)).abs() < 1e-15);
        assert!((c.lr_at(100) - 0.002 * LR_FLOOR).abs() < 1e-15);
        assert!((1..101).all(|s| c.lr_at(s) < c.lr_at(s - 1)));
        assert_eq!(TrainConfig::default().lr_at(2999), TrainConfig::default().lr);
    }

    #[test]
    fn traces_are_reproducible() {
        let data = Dataset::toy(4, 2, 16, 3);
        let run = || {
            let mut t = Trainer::new(tiny(), &data, &EncoderRegistry::default()).unwrap();
            t.run().unwrap();
            t.trace
        };
        let (a, b) = (run(), run());
        assert_eq!(a.len(), 3);
        assert_eq!(a, b);
    }

    #[test]
    fn validation_is_logged_on_schedule() {
        let data = Dataset::toy(4, 2, 16, 3);
        let config = TrainConfig {
            steps: 4,
            validate_every: 2,
            ..tiny()
        };
        let mut t = Trainer::new(config, &data, &EncoderRegistry::default())
            .unwrap()
            .with_validation(&Dataset::toy(2, 2, 16, 7))
            .unwrap();
        t.run().unwrap();
        let steps: Vec<usize> = t.validation_log.iter().map(|r| r.step).collect();
        assert_eq!(steps, [2, 4]);
        assert!(t.validation_log.iter().all(|r| (0.0..=1.0).contains(&r.mismatched_ber)));
    }

    #[test]
    fn divergence_writes_a_halted_checkpoint() {
        let data = Dataset::toy(4, 2, 16, 3);
        let mut t = Trainer::new(tiny(), &data, &EncoderRegistry::default()).unwrap();
        for p in t.model.decoder.net.params_mut() {
            *p = p.map(|v| v * 1e30 + 1e30);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("halt.flck");
        let err = t.run_or_halt(&path).unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 0, .. }), "{err}");
        let ck = super::super::load_checkpoint(&path, &EncoderRegistry::default()).unwrap();
        assert!(ck.meta.halted.unwrap().starts_with("step 0"));
        assert_eq!(ck.meta.steps, 0);
    }

    #[test]
    fn cached_runs_are_reused_bit_identically() {
        let data = Dataset::toy(4, 2, 16, 3);
        let dir = tempfile::tempdir().unwrap();
        let reg = EncoderRegistry::default();
        let a = train_or_load(&tiny(), &data, None, &reg, Some(dir.path()), None).unwrap();
        let b = train_or_load(&tiny(), &data, None, &reg, Some(dir.path()), None).unwrap();
        assert!(!a.from_cache && b.from_cache);
        assert_eq!(a.trace, b.trace);
        let x = data.samples[0].image.clone();
        let m = Message::from_hex("a5").unwrap();
        assert_eq!(a.model.embed(&x, &m).unwrap(), b.model.embed(&x, &m).unwrap());
        let other = TrainConfig { seed: 9, ..tiny() };
        assert_ne!(run_key(&other, &data), run_key(&tiny(), &data));
    }
}
