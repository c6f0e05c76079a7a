use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::Message;
use crate::imageio;
use crate::model::Model;
use crate::verification::{self, ThresholdCalibration, VerificationResult};
use crate::{Image, Result};

pub const SIDECAR_VERSION: u32 = 1;

/// Written next to every watermarked PNG. The message itself is not
/// stored, only its digest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedRecord {
    pub version: u32,
    pub image_sha256: String,
    pub message_sha256: String,
    pub message_bits: usize,
    pub checkpoint_sha256: String,
    /// `None` when the output equals the resized cover.
    pub psnr: Option<f64>,
    pub ssim: f64,
}

/// `out.png` -> `out.png.json`.
pub fn sidecar_path(png: &Path) -> PathBuf {
    let mut s = png.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn message_digest(m: &Message) -> String {
    hex::encode(Sha256::digest(m.to_hex().as_bytes()))
}

/// Watermarks `input` (resized to the model's working size) and writes
/// the 8-bit PNG plus its sidecar.
pub fn embed_file(model: &Model, checkpoint_sha256: &str, input: &Path, message: &Message, output: &Path) -> Result<EmbedRecord> {
    let cover = imageio::load(input, model.config.image_size)?;
    let marked = imageio::quantize(&model.embed(&cover, message)?);
    imageio::save_png(output, &marked)?;
    let f = verification::fidelity(&cover, &marked)?;
    let record = EmbedRecord {
        version: SIDECAR_VERSION,
        image_sha256: hex::encode(Sha256::digest(std::fs::read(output)?)),
        message_sha256: message_digest(message),
        message_bits: message.len(),
        checkpoint_sha256: checkpoint_sha256.to_string(),
        psnr: f.psnr.is_finite().then_some(f.psnr),
        ssim: f.ssim,
    };
    std::fs::write(sidecar_path(output), serde_json::to_string_pretty(&record)?)?;
    Ok(record)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Extraction {
    pub message: Message,
    pub logits: Vec<f32>,
}

pub fn extract_image(model: &Model, image: &Image) -> Result<Extraction> {
    let logits = model.extract_batch(image)?.remove(0);
    Ok(Extraction {
        message: Message::from_logits(&logits),
        logits,
    })
}

/// Decodes with the condition map of the file's own content.
pub fn extract_file(model: &Model, path: &Path) -> Result<Extraction> {
    extract_image(model, &imageio::load(path, model.config.image_size)?)
}

pub fn verify_file(model: &Model, path: &Path, expected: &Message, calibration: &ThresholdCalibration) -> Result<VerificationResult> {
    let got = extract_file(model, path)?;
    verification::verify(expected, &got.message, calibration)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::EncoderRegistry;
    use crate::model::ModelConfig;
    use crate::pipeline::Dataset;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn embed_is_idempotent_and_writes_a_sidecar() {
        let config = ModelConfig {
            image_size: 16,
            message_bits: 8,
            condition_hidden: 4,
            encoder_hidden: 4,
            decoder_hidden: 4,
            ..ModelConfig::default()
        };
        let mut model = Model::new(config, &EncoderRegistry::default(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let data = Dataset::toy(2, 1, 16, 5);
        model.encoders.fit(&data.flat_images()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cover = dir.path().join("cover.png");
        imageio::save_png(&cover, &data.samples[0].image).unwrap();
        let m = Message::from_hex("c3").unwrap();
        let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
        let ra = embed_file(&model, "ck", &cover, &m, &a).unwrap();
        let rb = embed_file(&model, "ck", &cover, &m, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(ra, rb);
        let stored: EmbedRecord = serde_json::from_str(&std::fs::read_to_string(sidecar_path(&a)).unwrap()).unwrap();
        assert_eq!(stored.message_sha256, message_digest(&m));
        assert_eq!(extract_file(&model, &a).unwrap().logits.len(), 8);
    }
}
