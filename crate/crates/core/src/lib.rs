//! Attribute-conditioned semi-fragile watermarking for portraits.
//!
//! A 32-bit message is spread over the image, multiplied by a *condition
//! map* computed from frozen facial-attribute embeddings of the portrait,
//! and injected as a bounded residual. Decoding multiplies the decoder's
//! spatial output by the condition map of the image under test, so the
//! message survives benign processing (compression, blur, noise, resizing,
//! occlusion) but collapses towards chance when the attributes that produced
//! the condition map have been altered. Verification thresholds the bit
//! error rate.
//!
//! Module map:
//!
//! | module | contents |
//! |---|---|
//! | [`conditioning`] | attribute encoders, pixel shuffle, facial token, condition map network |
//! | [`codec`] | messages, duplication, transform, residual encoder, decoder |
//! | [`distortion`] | the five benign perturbations, the level grid, the training noiser |
//! | [`adversarial`] | critic and eraser networks and their update step |
//! | [`objectives`] | reconstruction, noise, adversarial and contrastive losses |
//! | [`verification`] | BER, fake probability, threshold calibration, ACC/AUC, PSNR/SSIM |
//! | [`manipulation`] | surrogate face manipulations used to probe fragility |
//! | [`pipeline`] | datasets, training, checkpoints, embed/extract/verify, evaluation, reports |

pub mod adversarial;
pub mod codec;
pub mod conditioning;
pub mod distortion;
pub mod imageio;
pub mod manipulation;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod toyface;
pub mod verification;

pub use facelock_tensor::Tensor;

/// Image batches are `[n, 3, h, w]` tensors with values in `[-1, 1]`.
pub type Image = Tensor<f32>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },
    #[error("area under the ROC curve is undefined: {0}")]
    AucUndefined(String),
    #[error("format: {0}")]
    Format(String),
    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Invalid(msg.into()))
}

pub(crate) fn check_shape(actual: &[usize], expected: &[usize]) -> Result<()> {
    if actual != expected {
        return Err(Error::Shape {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        });
    }
    Ok(())
}

// Runs the guide's snippets under `cargo test --doc`.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/quickstart.md")]
    mod quickstart {}
    #[doc = include_str!("../../../book/src/conditioning.md")]
    mod conditioning {}
    #[doc = include_str!("../../../book/src/messages.md")]
    mod messages {}
    #[doc = include_str!("../../../book/src/perturbations.md")]
    mod perturbations {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
    #[doc = include_str!("../../../book/src/manipulations.md")]
    mod manipulations {}
}
