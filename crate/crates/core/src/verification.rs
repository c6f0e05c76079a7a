//! Bit error rate, the fake-probability ramp, threshold calibration, and
//! detection and fidelity metrics.

use std::fmt;
use std::str::FromStr;

use facelock_tensor::kernels;
use facelock_tensor::{resample, Tensor};
use serde::{Deserialize, Serialize};

use crate::codec::Message;
use crate::{check_shape, invalid, Error, Image, Result};

pub fn bit_error_rate(expected: &Message, decoded: &Message) -> Result<f64> {
    if expected.len() != decoded.len() {
        return invalid(format!("message lengths differ: {} vs {}", expected.len(), decoded.len()));
    }
    let wrong = expected.bits().iter().zip(decoded.bits()).filter(|(a, b)| a != b).count();
    Ok(wrong as f64 / expected.len() as f64)
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau < 0.5) {
        return invalid(format!("threshold {tau} outside (0, 0.5)"));
    }
    Ok(())
}

/// Piecewise-linear map from BER to the probability of manipulation:
/// `0.5 r / tau` up to `tau`, then linear to 1 at `r = 0.5`, then 1.
///
/// The first branch is the continuous reading `0.5 * r / tau`; the
/// constant `0.5 / tau` would exceed 1 and is not used.
pub fn fake_probability(r: f64, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if !(0.0..=1.0).contains(&r) {
        return invalid(format!("BER {r} outside [0, 1]"));
    }
    Ok(if r <= tau {
        0.5 * r / tau
    } else if r <= 0.5 {
        0.5 + 0.5 * (r - tau) / (0.5 - tau)
    } else {
        1.0
    })
}

pub const TAU_STEP: f64 = 0.005;

/// `0.005, 0.010, ..., 0.495`.
pub fn tau_grid() -> Vec<f64> {
    (1..=99).map(|k| k as f64 * TAU_STEP).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    WhiteBox,
    BlackBox,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::WhiteBox => "white_box",
            Protocol::BlackBox => "black_box",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "white_box" => Ok(Protocol::WhiteBox),
            "black_box" => Ok(Protocol::BlackBox),
            _ => invalid(format!("unknown protocol {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCalibration {
    pub tau: f64,
    pub protocol: Protocol,
    /// Digest or description of the data the threshold came from.
    pub provenance: String,
}

const RECORD_HEADER: &str = "facelock-calibration v1";

impl ThresholdCalibration {
    pub fn new(tau: f64, protocol: Protocol, provenance: impl Into<String>) -> Result<Self> {
        check_tau(tau)?;
        Ok(ThresholdCalibration {
            tau,
            protocol,
            provenance: provenance.into(),
        })
    }

    /// `key = value` lines under a version header.
    pub fn to_record(&self) -> String {
        format!(
            "{RECORD_HEADER}\nprotocol = {}\ntau = {}\nprovenance = {}\n",
            self.protocol, self.tau, self.provenance
        )
    }

    pub fn from_record(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(RECORD_HEADER) {
            return invalid("not a calibration record (bad header)");
        }
        let (mut protocol, mut tau, mut provenance) = (None, None, None);
        for line in lines.map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Invalid(format!("bad calibration line {line:?}")))?;
            match k.trim() {
                "protocol" => protocol = Some(v.trim().parse()?),
                "tau" => {
                    tau = Some(
                        v.trim()
                            .parse::<f64>()
                            .map_err(|_| Error::Invalid(format!("bad tau {v:?}")))?,
                    )
                }
                "provenance" => provenance = Some(v.trim().to_string()),
                other => return invalid(format!("unknown calibration key {other:?}")),
            }
        }
        match (tau, protocol, provenance) {
            (Some(t), Some(p), Some(s)) => ThresholdCalibration::new(t, p, s),
            _ => invalid("calibration record is missing a field"),
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// `mean P(fake | fakes) - mean P(fake | reals)` at one threshold.
pub fn white_box_objective(real_bers: &[f64], fake_bers: &[f64], tau: f64) -> Result<f64> {
    let p = |xs: &[f64]| -> Result<f64> {
        let ps = xs.iter().map(|&r| fake_probability(r, tau)).collect::<Result<Vec<_>>>()?;
        Ok(mean(&ps))
    };
    Ok(p(fake_bers)? - p(real_bers)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct WhiteBoxOutcome {
    pub calibration: ThresholdCalibration,
    pub objective: f64,
    /// No threshold scores fakes above reals.
    pub degenerate: bool,
}

/// Grid search for the threshold that best separates fakes from reals;
/// ties go to the smallest threshold.
pub fn calibrate_white_box(real_bers: &[f64], fake_bers: &[f64], provenance: &str) -> Result<WhiteBoxOutcome> {
    if real_bers.is_empty() || fake_bers.is_empty() {
        return invalid("white-box calibration needs both real and fake BERs");
    }
    let mut best: Option<(f64, f64)> = None;
    for tau in tau_grid() {
        let obj = white_box_objective(real_bers, fake_bers, tau)?;
        if best.map_or(true, |(_, b)| obj > b) {
            best = Some((tau, obj));
        }
    }
    let (tau, objective) = best.expect("non-empty grid");
    let degenerate = objective <= 0.0;
    if degenerate {
        log::warn!("white-box objective never exceeds zero; real and fake BERs are indistinguishable");
    }
    Ok(WhiteBoxOutcome {
        calibration: ThresholdCalibration::new(tau, Protocol::WhiteBox, provenance)?,
        objective,
        degenerate,
    })
}

/// Mean of the robust BERs plus `safety`, kept within one grid step of
/// the open interval's ends.
pub fn calibrate_black_box(robust_bers: &[f64], safety: f64, provenance: &str) -> Result<ThresholdCalibration> {
    if robust_bers.is_empty() {
        return invalid("black-box calibration needs robust BERs");
    }
    let tau = (mean(robust_bers) + safety).clamp(TAU_STEP, 0.5 - TAU_STEP);
    ThresholdCalibration::new(tau, Protocol::BlackBox, provenance)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Real,
    Fake,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Real => "real",
            Verdict::Fake => "fake",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationResult {
    pub ber: f64,
    pub p_fake: f64,
    pub verdict: Verdict,
    pub tau: f64,
}

pub fn verify(expected: &Message, decoded: &Message, calibration: &ThresholdCalibration) -> Result<VerificationResult> {
    let ber = bit_error_rate(expected, decoded)?;
    let p_fake = fake_probability(ber, calibration.tau)?;
    Ok(VerificationResult {
        ber,
        p_fake,
        verdict: if p_fake > 0.5 { Verdict::Fake } else { Verdict::Real },
        tau: calibration.tau,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub acc: f64,
    pub auc: f64,
}

/// Mann-Whitney estimate of `P(score_fake > score_real)`, ties counted half.
pub fn auc(scored: &[(f64, Verdict)]) -> Result<f64> {
    let mut sorted: Vec<(f64, Verdict)> = scored.to_vec();
    if sorted.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::NonFinite("detection scores".into()));
    }
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n_fake = sorted.iter().filter(|(_, l)| *l == Verdict::Fake).count();
    let n_real = sorted.len() - n_fake;
    if n_fake == 0 || n_real == 0 {
        return Err(Error::AucUndefined(format!("{n_real} real and {n_fake} fake samples")));
    }
    // Midranks over tie groups.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].0 == sorted[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * sorted[i..=j].iter().filter(|(_, l)| *l == Verdict::Fake).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_fake * (n_fake + 1)) as f64 / 2.0;
    Ok(u / (n_fake * n_real) as f64)
}

/// Accuracy at `p_fake > 0.5` and rank AUC.
pub fn detection_metrics(scored: &[(f64, Verdict)]) -> Result<DetectionMetrics> {
    let auc = auc(scored)?;
    let correct = scored
        .iter()
        .filter(|(p, l)| (*p > 0.5) == (*l == Verdict::Fake))
        .count();
    Ok(DetectionMetrics {
        acc: correct as f64 / scored.len() as f64,
        auc,
    })
}

/// Mean score per group of frames.
pub fn mean_over_frames(frames: &[Vec<f64>]) -> Vec<f64> {
    frames.iter().filter(|f| !f.is_empty()).map(|f| mean(f)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityMetrics {
    /// `f64::INFINITY` for identical images.
    pub psnr: f64,
    pub ssim: f64,
}

/// PSNR in dB with peak 2 on the `[-1, 1]` scale, equal to the 0-255
/// convention with peak 255.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_shape(b.shape(), a.shape())?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (4.0 / mse).log10() })
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// Mean SSIM over images and channels with an 11x11 gaussian window
/// (valid positions only), `K1 = 0.01`, `K2 = 0.03`, dynamic range 2.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_shape(b.shape(), a.shape())?;
    let (_, _, h, w) = a.try_dims4().map_err(|e| Error::Invalid(e.to_string()))?;
    let win = SSIM_WINDOW.min(h).min(w);
    let win = if win % 2 == 0 { win - 1 } else { win };
    let taps = resample::gaussian_taps(win, SSIM_SIGMA);
    let valid = |n: usize| -> Tensor<f64> {
        let m = n + 1 - win;
        Tensor::from_fn(&[m, n], |i| {
            let (o, k) = (i / n, i % n);
            if k >= o && k < o + win {
                taps[k - o]
            } else {
                0.0
            }
        })
    };
    let (rows, cols) = (valid(h), valid(w));
    let a64: Tensor<f64> = a.cast();
    let b64: Tensor<f64> = b.cast();
    let filt = |x: &Tensor<f64>| kernels::separable(x, &rows, &cols);
    let (mu_a, mu_b) = (filt(&a64), filt(&b64));
    let saa = filt(&a64.zip_map(&a64, |x, y| x * y));
    let sbb = filt(&b64.zip_map(&b64, |x, y| x * y));
    let sab = filt(&a64.zip_map(&b64, |x, y| x * y));
    let (c1, c2) = ((0.01f64 * 2.0).powi(2), (0.03f64 * 2.0).powi(2));
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a.data()[i], mu_b.data()[i]);
        let va = saa.data()[i] - ma * ma;
        let vb = sbb.data()[i] - mb * mb;
        let cov = sab.data()[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

pub fn fidelity(x: &Image, xs: &Image) -> Result<FidelityMetrics> {
    Ok(FidelityMetrics {
        psnr: psnr(x, xs)?,
        ssim: ssim(x, xs)?,
    })
}
