use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::Message;
use crate::distortion::{self, Kind, PerturbationSpec, MAX_LEVEL};
use crate::imageio::quantize;
use crate::manipulation::{self, ManipulationKind, ManipulationSpec, Scene};
use crate::model::Model;
use crate::verification::{
    self, calibrate_black_box, calibrate_white_box, fake_probability, Protocol, ThresholdCalibration, Verdict,
    WhiteBoxOutcome,
};
use crate::{invalid, Image, Result, Tensor};

use super::dataset::Dataset;

const CHUNK: usize = 16;

/// A watermarked copy of one dataset sample as it would be published.
#[derive(Clone, Debug)]
pub struct Protected {
    pub index: usize,
    pub message: Message,
    /// 8-bit quantised `[1, 3, s, s]`.
    pub marked: Image,
}

fn stream(seed: u64, tag: &str) -> ChaCha8Rng {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Embeds a fresh random message into every sample of `data`.
pub fn protect(model: &Model, data: &Dataset, seed: u64) -> Result<Vec<Protected>> {
    let mut rng = stream(seed, "messages");
    let bits = model.config.message_bits;
    let messages: Vec<Message> = (0..data.len()).map(|_| Message::random(bits, &mut rng)).collect();
    let mut out = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(CHUNK) {
        let marked = quantize(&model.embed_batch(&data.batch(chunk), &messages[chunk[0]..chunk[0] + chunk.len()])?);
        for (k, &i) in chunk.iter().enumerate() {
            out.push(Protected {
                index: i,
                message: messages[i].clone(),
                marked: marked.select_batch(k),
            });
        }
    }
    Ok(out)
}

/// BER of each image decoded under its own condition map.
pub fn decode_bers(model: &Model, images: &[Image], messages: &[Message]) -> Result<Vec<f64>> {
    if images.len() != messages.len() {
        return invalid("one message per image");
    }
    let mut out = Vec::with_capacity(images.len());
    for (imgs, msgs) in images.chunks(CHUNK).zip(messages.chunks(CHUNK)) {
        let logits = model.extract_batch(&Tensor::stack_batch(imgs))?;
        for (z, m) in logits.iter().zip(msgs) {
            out.push(verification::bit_error_rate(m, &Message::from_logits(z))?);
        }
    }
    Ok(out)
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelitySummary {
    /// Mean over images with a finite PSNR.
    pub psnr: f64,
    pub ssim: f64,
    pub images: usize,
    /// Images whose 8-bit output equals the cover.
    pub identical: usize,
}

pub fn fidelity_summary(data: &Dataset, protected: &[Protected]) -> Result<FidelitySummary> {
    let (mut psnrs, mut ssims, mut identical) = (Vec::new(), Vec::new(), 0);
    for p in protected {
        let f = verification::fidelity(&data.samples[p.index].image, &p.marked)?;
        if f.psnr.is_finite() {
            psnrs.push(f.psnr);
        } else {
            identical += 1;
        }
        ssims.push(f.ssim);
    }
    Ok(FidelitySummary {
        psnr: mean(&psnrs),
        ssim: mean(&ssims),
        images: protected.len(),
        identical,
    })
}

/// One cell of the robustness sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCell {
    pub kind: Kind,
    pub level: u8,
    pub parameter: f64,
    pub mean_ber: f64,
    /// Mean bitwise decoding accuracy, `1 - mean_ber`.
    pub accuracy: f64,
    #[serde(skip)]
    pub bers: Vec<f64>,
}

fn perturbed_bers(model: &Model, protected: &[Protected], spec: &PerturbationSpec, seed: u64) -> Result<Vec<f64>> {
    let mut rng = stream(seed, &format!("perturb/{spec}"));
    let images = protected
        .iter()
        .map(|p| distortion::apply(&p.marked, spec, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let messages: Vec<Message> = protected.iter().map(|p| p.message.clone()).collect();
    decode_bers(model, &images, &messages)
}

/// Every kind at levels `0..=5`.
pub fn robustness_sweep(model: &Model, protected: &[Protected], seed: u64) -> Result<Vec<RobustnessCell>> {
    let mut cells = Vec::new();
    for kind in Kind::ALL {
        for level in 0..=MAX_LEVEL {
            let spec = PerturbationSpec::new(kind, level)?;
            let bers = perturbed_bers(model, protected, &spec, seed)?;
            let m = mean(&bers);
            cells.push(RobustnessCell {
                kind,
                level,
                parameter: spec.parameter,
                mean_ber: m,
                accuracy: 1.0 - m,
                bers,
            });
        }
    }
    Ok(cells)
}

/// BER of each protected sample under one perturbation kind drawn at
/// random per sample, at `level`.
pub fn robust_bers(model: &Model, protected: &[Protected], level: u8, seed: u64) -> Result<Vec<f64>> {
    let mut rng = stream(seed, &format!("robust/{level}"));
    let mut images = Vec::with_capacity(protected.len());
    for p in protected {
        let kind = *Kind::ALL.choose(&mut rng).expect("kinds");
        images.push(distortion::apply_level(&p.marked, kind, level, &mut rng)?);
    }
    let messages: Vec<Message> = protected.iter().map(|p| p.message.clone()).collect();
    decode_bers(model, &images, &messages)
}

/// The first sample at or after the opposite side of the list with a
/// different identity.
fn donor_index(data: &Dataset, i: usize) -> Result<usize> {
    let n = data.len();
    (0..n)
        .map(|k| (i + n / 2 + k) % n)
        .find(|&j| data.samples[j].identity != data.samples[i].identity)
        .ok_or_else(|| crate::Error::Invalid("manipulations need at least two identities".into()))
}

/// BER of each protected sample after the manipulation.
pub fn manipulation_bers(model: &Model, data: &Dataset, protected: &[Protected], spec: &ManipulationSpec) -> Result<Vec<f64>> {
    if spec.kind == ManipulationKind::ConditionSwap {
        return protected
            .iter()
            .map(|p| {
                let donor = &data.samples[donor_index(data, p.index)?].image;
                manipulation::condition_swap_eval(model, &p.marked, donor, &p.message)
            })
            .collect();
    }
    let mut images = Vec::with_capacity(protected.len());
    for p in protected {
        let s = &data.samples[p.index];
        let d = &data.samples[donor_index(data, p.index)?];
        let scene = Scene {
            image: &p.marked,
            landmarks: &s.landmarks,
            donor: Some((&d.image, &d.landmarks)),
        };
        images.push(quantize(&manipulation::apply(spec, &scene)?));
    }
    let messages: Vec<Message> = protected.iter().map(|p| p.message.clone()).collect();
    decode_bers(model, &images, &messages)
}

/// Periodic training-time check on held-out data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: usize,
    pub clean_ber: f64,
    /// Decoded under another identity's condition map.
    pub mismatched_ber: f64,
    pub psnr: f64,
    pub ssim: f64,
}

pub fn validation_record(model: &Model, data: &Dataset, step: usize, seed: u64) -> Result<ValidationRecord> {
    let protected = protect(model, data, seed)?;
    let images: Vec<Image> = protected.iter().map(|p| p.marked.clone()).collect();
    let messages: Vec<Message> = protected.iter().map(|p| p.message.clone()).collect();
    let clean = decode_bers(model, &images, &messages)?;
    let swap = ManipulationSpec::new(ManipulationKind::ConditionSwap, 1.0)?;
    let mismatched = manipulation_bers(model, data, &protected, &swap)?;
    let f = fidelity_summary(data, &protected)?;
    Ok(ValidationRecord {
        step,
        clean_ber: mean(&clean),
        mismatched_ber: mean(&mismatched),
        psnr: f.psnr,
        ssim: f.ssim,
    })
}

/// Black-box threshold: mean BER of watermarked `data` under a random
/// perturbation at `level` (the paper protocol uses the highest level),
/// plus `safety`.
pub fn calibrate_black_box_on(model: &Model, data: &Dataset, level: u8, safety: f64, seed: u64) -> Result<ThresholdCalibration> {
    let protected = protect(model, data, seed)?;
    let bers = robust_bers(model, &protected, level, seed)?;
    calibrate_black_box(
        &bers,
        safety,
        &format!("robust level {level}, {} samples, dataset {}", bers.len(), &data.digest()[..16]),
    )
}

/// White-box threshold from clean and manipulated copies of `data`.
pub fn calibrate_white_box_on(model: &Model, data: &Dataset, spec: &ManipulationSpec, seed: u64) -> Result<WhiteBoxOutcome> {
    let protected = protect(model, data, seed)?;
    let images: Vec<Image> = protected.iter().map(|p| p.marked.clone()).collect();
    let messages: Vec<Message> = protected.iter().map(|p| p.message.clone()).collect();
    let real = decode_bers(model, &images, &messages)?;
    let fake = manipulation_bers(model, data, &protected, spec)?;
    calibrate_white_box(
        &real,
        &fake,
        &format!("{spec}, {} samples, dataset {}", real.len(), &data.digest()[..16]),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    pub manipulation: String,
    pub protocol: Protocol,
    pub tau: f64,
    pub acc: f64,
    pub auc: f64,
    pub real: usize,
    pub fake: usize,
}

/// ACC and AUC of clean (`real`) against manipulated (`fake`) BERs, both
/// scored by the fake probability at `tau`.
pub fn detection_row(name: &str, real: &[f64], fake: &[f64], calibration: &ThresholdCalibration) -> Result<DetectionRow> {
    let mut scored = Vec::with_capacity(real.len() + fake.len());
    for (bers, label) in [(real, Verdict::Real), (fake, Verdict::Fake)] {
        for &r in bers {
            scored.push((fake_probability(r, calibration.tau)?, label));
        }
    }
    let m = verification::detection_metrics(&scored)?;
    Ok(DetectionRow {
        manipulation: name.to_string(),
        protocol: calibration.protocol,
        tau: calibration.tau,
        acc: m.acc,
        auc: m.auc,
        real: real.len(),
        fake: fake.len(),
    })
}

/// Per-sample verification outcome under one manipulation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image: String,
    pub kind: String,
    pub ber: f64,
    pub p_fake: f64,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManipulationSummary {
    pub spec: ManipulationSpec,
    pub mean_ber: f64,
    /// Fraction of samples whose BER exceeds the black-box threshold.
    pub above_tau: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationConfig {
    pub seed: u64,
    pub manipulations: Vec<ManipulationSpec>,
    /// Level of the benign perturbations used for the false-positive rate.
    pub false_positive_level: u8,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            seed: 0,
            manipulations: ManipulationKind::ALL
                .into_iter()
                .map(|k| ManipulationSpec::new(k, 1.0).expect("unit strength"))
                .collect(),
            false_positive_level: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub samples: usize,
    pub fidelity: FidelitySummary,
    pub clean_ber: f64,
    pub calibration: ThresholdCalibration,
    pub robustness: Vec<RobustnessCell>,
    pub manipulations: Vec<ManipulationSummary>,
    pub detection: Vec<DetectionRow>,
    /// Share of benign-perturbed real samples flagged fake at `tau`.
    pub false_positive_rate: f64,
    pub records: Vec<SampleRecord>,
}

impl EvaluationReport {
    pub fn cell(&self, kind: Kind, level: u8) -> Option<&RobustnessCell> {
        self.robustness.iter().find(|c| c.kind == kind && c.level == level)
    }

    pub fn manipulation(&self, kind: ManipulationKind) -> Option<&ManipulationSummary> {
        self.manipulations.iter().find(|m| m.spec.kind == kind)
    }

    /// Mean AUC over the detection rows of one protocol.
    pub fn mean_auc(&self, protocol: Protocol) -> f64 {
        let v: Vec<f64> = self.detection.iter().filter(|d| d.protocol == protocol).map(|d| d.auc).collect();
        mean(&v)
    }

    pub fn mean_acc(&self, protocol: Protocol) -> f64 {
        let v: Vec<f64> = self.detection.iter().filter(|d| d.protocol == protocol).map(|d| d.acc).collect();
        mean(&v)
    }
}

/// Fidelity, robustness sweep, manipulation BERs and detection metrics on
/// `test` under the given calibration. Extra white-box calibrations (one
/// per manipulation, keyed by kind) add white-box detection rows.
pub fn evaluate(
    model: &Model,
    test: &Dataset,
    calibration: &ThresholdCalibration,
    white_box: &[(ManipulationKind, ThresholdCalibration)],
    config: &EvaluationConfig,
) -> Result<EvaluationReport> {
    let protected = protect(model, test, config.seed)?;
    let fidelity = fidelity_summary(test, &protected)?;
    let robustness = robustness_sweep(model, &protected, config.seed)?;
    let clean: Vec<f64> = robustness
        .iter()
        .find(|c| c.level == 0)
        .map(|c| c.bers.clone())
        .expect("level 0 present");
    let benign: Vec<f64> = robustness
        .iter()
        .filter(|c| c.level == config.false_positive_level)
        .flat_map(|c| c.bers.iter().copied())
        .collect();
    let false_positive_rate = benign.iter().filter(|&&b| b > calibration.tau).count() as f64 / benign.len() as f64;

    let mut manipulations = Vec::new();
    let mut detection = Vec::new();
    let mut records = Vec::new();
    for spec in &config.manipulations {
        let bers = manipulation_bers(model, test, &protected, spec)?;
        let name = spec.kind.name();
        for (p, &b) in protected.iter().zip(&bers) {
            let p_fake = fake_probability(b, calibration.tau)?;
            records.push(SampleRecord {
                image: format!("{}#{}", test.samples[p.index].identity, p.index),
                kind: name.to_string(),
                ber: b,
                p_fake,
                verdict: if p_fake > 0.5 { Verdict::Fake } else { Verdict::Real },
            });
        }
        manipulations.push(ManipulationSummary {
            spec: *spec,
            mean_ber: mean(&bers),
            above_tau: bers.iter().filter(|&&b| b > calibration.tau).count() as f64 / bers.len() as f64,
        });
        detection.push(detection_row(name, &clean, &bers, calibration)?);
        if let Some((_, wb)) = white_box.iter().find(|(k, _)| *k == spec.kind) {
            detection.push(detection_row(name, &clean, &bers, wb)?);
        }
    }
    Ok(EvaluationReport {
        samples: protected.len(),
        fidelity,
        clean_ber: mean(&clean),
        calibration: calibration.clone(),
        robustness,
        manipulations,
        detection,
        false_positive_rate,
        records,
    })
}
