//! Loss terms and their weighted sum.
//!
//! Scalar functions here evaluate a loss from plain numbers; the `*_graph`
//! functions record the same quantity on a tape for training.

use std::rc::Rc;

use facelock_tensor::{Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::codec::Message;
use crate::{invalid, Error, Result};

/// Defaults follow `(1, 1, 0.1, 1)` for reconstruction, noise,
/// adversarial and fragile terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub recon: f64,
    pub noise: f64,
    pub adversarial: f64,
    pub fragile: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            recon: 1.0,
            noise: 1.0,
            adversarial: 0.1,
            fragile: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.recon, self.noise, self.adversarial, self.fragile];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return invalid(format!("loss weights must be finite and nonnegative: {all:?}"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub recon: f64,
    pub noise: f64,
    pub adversarial: f64,
    pub fragile: f64,
}

/// `recon + noise - adversarial + fragile`, each weighted.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> f64 {
    w.recon * parts.recon + w.noise * parts.noise - w.adversarial * parts.adversarial + w.fragile * parts.fragile
}

fn bce_term(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

/// Mean binary cross entropy of `sigmoid(logits)` against the bits.
pub fn recon_loss(m: &Message, logits: &[f64]) -> Result<f64> {
    if m.len() != logits.len() {
        return invalid(format!("{} bits but {} logits", m.len(), logits.len()));
    }
    Ok(m.targets().zip(logits).map(|(t, &z)| bce_term(z, t as f64)).sum::<f64>() / m.len() as f64)
}

/// Representations for the contrastive term.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveBatch {
    /// `anchors[k]`: decoded with the sample's own condition.
    pub anchors: Vec<Vec<f64>>,
    /// `positives[k]`: decoded after a distortion, own condition.
    pub positives: Vec<Vec<f64>>,
    /// `cross[k][q]`: sample `k` decoded with the condition of sample `q`;
    /// entries with `q == k` are ignored.
    pub cross: Vec<Vec<Vec<f64>>>,
    pub temperature: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Invalid("zero-norm message representation in the contrastive loss".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// InfoNCE over cosine similarities with in-batch negatives, averaged over
/// anchors, evaluated with max-subtraction.
pub fn fragile_loss(batch: &ContrastiveBatch) -> Result<f64> {
    let n = batch.anchors.len();
    if n < 2 {
        return invalid("the contrastive loss needs at least two samples");
    }
    if batch.positives.len() != n || batch.cross.len() != n || batch.cross.iter().any(|r| r.len() != n) {
        return invalid("contrastive batch parts disagree in size");
    }
    if !(batch.temperature > 0.0) {
        return invalid("temperature must be positive");
    }
    let mut total = 0.0;
    for k in 0..n {
        let mut logits = vec![cosine(&batch.anchors[k], &batch.positives[k])? / batch.temperature];
        for q in (0..n).filter(|&q| q != k) {
            logits.push(cosine(&batch.anchors[k], &batch.cross[k][q])? / batch.temperature);
        }
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = top + logits.iter().map(|l| (l - top).exp()).sum::<f64>().ln();
        total += lse - logits[0];
    }
    Ok(total / n as f64)
}

/// `Dis(x) - Dis(x_s) - BCE(m, Dec(Adv(x_s) | c))` from batch critic
/// scores and the eraser-branch logits.
pub fn adv_loss(critic_cover: &[f64], critic_marked: &[f64], messages: &[Message], erased_logits: &[Vec<f64>]) -> Result<f64> {
    if critic_cover.len() != critic_marked.len() || messages.len() != erased_logits.len() || messages.is_empty() {
        return invalid("adversarial loss inputs disagree in size");
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut bce = 0.0;
    for (m, z) in messages.iter().zip(erased_logits) {
        bce += recon_loss(m, z)?;
    }
    Ok(mean(critic_cover) - mean(critic_marked) - bce / messages.len() as f64)
}

/// 0/1 targets `[n, C_m]` for a batch of messages.
pub fn targets<T: Scalar>(messages: &[Message]) -> Rc<Tensor<T>> {
    let c = messages[0].len();
    let data = messages.iter().flat_map(|m| m.targets().map(|t| T::lit(t as f64))).collect();
    Rc::new(Tensor::from_vec(&[messages.len(), c], data).expect("targets shape"))
}

pub fn recon_loss_graph<T: Scalar>(g: &mut Graph<T>, logits: Var, targets: Rc<Tensor<T>>) -> Var {
    g.bce_with_logits(logits, targets)
}

/// Graph form of [`fragile_loss`]: `anchor` and `positive` are `[n, C_m]`,
/// `cross` is `[n, n, C_m]`.
pub fn fragile_loss_graph<T: Scalar>(g: &mut Graph<T>, anchor: Var, positive: Var, cross: Var, temperature: f64) -> Result<Var> {
    let n = g.shape(anchor)[0];
    if n < 2 {
        return invalid("the contrastive loss needs at least two samples");
    }
    let d = g.shape(anchor)[1];
    for v in [anchor, positive] {
        if g.value(v).data().chunks(d).any(|row| row.iter().all(|&x| x == T::zero())) {
            return Err(Error::Invalid("zero-norm message representation in the contrastive loss".into()));
        }
    }
    Ok(g.info_nce(anchor, positive, cross, temperature))
}

/// `mean(cover scores) - mean(marked scores) - erased BCE`.
pub fn adv_loss_graph<T: Scalar>(g: &mut Graph<T>, critic_cover: Var, critic_marked: Var, erased_bce: Var) -> Var {
    let a = g.mean(critic_cover);
    let b = g.mean(critic_marked);
    let gap = g.sub(a, b);
    g.sub(gap, erased_bce)
}

/// Weighted sum on the tape; a `None` part contributes nothing.
pub fn total_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    recon: Var,
    noise: Var,
    adversarial: Option<Var>,
    fragile: Option<Var>,
    w: &LossWeights,
) -> Var {
    let r = g.scale(recon, w.recon);
    let nz = g.scale(noise, w.noise);
    let mut total = g.add(r, nz);
    if let Some(a) = adversarial {
        let s = g.scale(a, -w.adversarial);
        total = g.add(total, s);
    }
    if let Some(f) = fragile {
        let s = g.scale(f, w.fragile);
        total = g.add(total, s);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bce_limits() {
        let m = Message::from_hex("a5").unwrap();
        let sat: Vec<f64> = m.bits().iter().map(|&b| if b { 60.0 } else { -60.0 }).collect();
        assert!(recon_loss(&m, &sat).unwrap() < 1e-20);
        assert!((recon_loss(&m, &[0.0; 8]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(recon_loss(&m, &[0.0; 7]).is_err());
    }

    #[test]
    fn bce_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = Message::random(8, &mut rng);
        let z: Vec<f64> = (0..8).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let mut oracle = 0.0;
        for (&b, &zi) in m.bits().iter().zip(&z) {
            let p = 1.0 / (1.0 + (-zi).exp());
            oracle -= if b { p.ln() } else { (1.0 - p).ln() };
        }
        assert!((recon_loss(&m, &z).unwrap() - oracle / 8.0).abs() < 1e-9);
    }

    fn batch_from(anchors: Vec<Vec<f64>>, positives: Vec<Vec<f64>>, cross: Vec<Vec<Vec<f64>>>) -> ContrastiveBatch {
        ContrastiveBatch {
            anchors,
            positives,
            cross,
            temperature: 0.5,
        }
    }

    #[test]
    fn info_nce_closed_forms() {
        let v = vec![1.0, 2.0, -0.5];
        for n in [2usize, 3, 8] {
            let b = batch_from(vec![v.clone(); n], vec![v.clone(); n], vec![vec![v.clone(); n]; n]);
            assert!((fragile_loss(&b).unwrap() - (n as f64).ln()).abs() < 1e-12);
        }
        let (u, neg) = (vec![1.0, 0.0], vec![-1.0, 0.0]);
        let b = batch_from(
            vec![u.clone(), u.clone()],
            vec![u.clone(), u.clone()],
            vec![vec![u.clone(), neg.clone()], vec![neg.clone(), u.clone()]],
        );
        let expected = (1.0 + (-4.0f64).exp()).ln();
        assert!((fragile_loss(&b).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.01815).abs() < 1e-5);
    }

    #[test]
    fn info_nce_rejects_zero_norm() {
        let b = batch_from(vec![vec![0.0, 0.0], vec![1.0, 0.0]], vec![vec![1.0, 0.0]; 2], vec![vec![vec![1.0, 1.0]; 2]; 2]);
        assert!(fragile_loss(&b).is_err());
    }

    #[test]
    fn graph_info_nce_matches_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (n, d) = (4, 6);
        let mut r = |len| (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (a, p, c) = (r(n * d), r(n * d), r(n * n * d));
        let batch = ContrastiveBatch {
            anchors: a.chunks(d).map(<[f64]>::to_vec).collect(),
            positives: p.chunks(d).map(<[f64]>::to_vec).collect(),
            cross: c.chunks(n * d).map(|row| row.chunks(d).map(<[f64]>::to_vec).collect()).collect(),
            temperature: 0.5,
        };
        let mut g = Graph::<f64>::new();
        let av = g.constant(Tensor::from_vec(&[n, d], a).unwrap());
        let pv = g.constant(Tensor::from_vec(&[n, d], p).unwrap());
        let cv = g.constant(Tensor::from_vec(&[n, n, d], c).unwrap());
        let l = fragile_loss_graph(&mut g, av, pv, cv, 0.5).unwrap();
        assert!((g.value(l).item() - fragile_loss(&batch).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn adversarial_loss_oracle() {
        let m = vec![Message::from_hex("f0").unwrap(), Message::from_hex("3c").unwrap()];
        let z = vec![vec![0.5, -1.0, 2.0, 0.1, -0.3, 0.7, -2.0, 1.5], vec![-0.2; 8]];
        let got = adv_loss(&[0.3, -0.1], &[0.2, 0.4], &m, &z).unwrap();
        let mut bce = 0.0;
        for (mm, zz) in m.iter().zip(&z) {
            for (&b, &zi) in mm.bits().iter().zip(zz) {
                let p: f64 = 1.0 / (1.0 + (-zi as f64).exp());
                bce -= if b { p.ln() } else { (1.0 - p).ln() } / 8.0;
            }
        }
        let expected = (0.3 - 0.1) / 2.0 - (0.2 + 0.4) / 2.0 - bce / 2.0;
        assert!((got - expected).abs() < 1e-6);
        // Identical cover and marked sets leave only the eraser term.
        let same = adv_loss(&[0.3, -0.1], &[0.3, -0.1], &m, &z).unwrap();
        assert!((same + bce / 2.0).abs() < 1e-12);
    }

    #[test]
    fn total_loss_signs() {
        let parts = LossParts {
            recon: 0.1,
            noise: 0.2,
            adversarial: 0.3,
            fragile: 0.4,
        };
        assert!((total_loss(&parts, &LossWeights::default()) - 0.67).abs() < 1e-12);
        let only_r = LossWeights {
            recon: 1.0,
            noise: 0.0,
            adversarial: 0.0,
            fragile: 0.0,
        };
        assert_eq!(total_loss(&parts, &only_r), 0.1);
        let only_a = LossWeights {
            recon: 0.0,
            noise: 0.0,
            adversarial: 1.0,
            fragile: 0.0,
        };
        let p2 = LossParts {
            adversarial: 2.0,
            ..LossParts::default()
        };
        assert_eq!(total_loss(&p2, &only_a), -2.0);
    }

    proptest! {
        #[test]
        fn info_nce_scale_invariant(seed in 0u64..200, s in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut r = || (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
            let b = batch_from(vec![r(), r(), r()], vec![r(), r(), r()], (0..3).map(|_| vec![r(), r(), r()]).collect());
            let scale = |v: &Vec<f64>| v.iter().map(|x| x * s).collect::<Vec<f64>>();
            let scaled = ContrastiveBatch {
                anchors: b.anchors.iter().map(scale).collect(),
                positives: b.positives.iter().map(scale).collect(),
                cross: b.cross.iter().map(|row| row.iter().map(scale).collect()).collect(),
                temperature: 0.5,
            };
            prop_assert!((fragile_loss(&b).unwrap() - fragile_loss(&scaled).unwrap()).abs() < 1e-9);
            prop_assert!(fragile_loss(&b).unwrap() > 0.0);
        }

        #[test]
        fn info_nce_decreases_with_positive_similarity(t in 0.0f64..0.9) {
            // The positive rotates towards the anchor; negatives stay put.
            let anchor = vec![1.0, 0.0];
            let at = |angle: f64| vec![angle.cos(), angle.sin()];
            let loss = |angle: f64| fragile_loss(&batch_from(
                vec![anchor.clone(), anchor.clone()],
                vec![at(angle), at(angle)],
                vec![vec![anchor.clone(), at(2.0)], vec![at(2.0), anchor.clone()]],
            )).unwrap();
            prop_assert!(loss(t) < loss(t + 0.1));
        }
    }
}
