//! Central finite differences against tape gradients at 64-bit precision.

use facelock::adversarial::Eraser;
use facelock::codec::{MessageDecoder, MessageEncoder};
use facelock::distortion::{gaussian_blur_graph, jpeg_approx_graph};
use facelock::Tensor;
use facelock_tensor::{Graph, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const PROBES: usize = 12;
const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-3;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Reduces an output to a scalar through a fixed random projection, so no
/// coordinate's gradient cancels by symmetry.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(g.shape(y), &mut rng);
    let w = g.constant(w);
    let p = g.mul(y, w);
    g.mean(p)
}

/// Checks `PROBES` random coordinates of `leaf`; returns the worst relative error.
fn check(name: &str, leaf: Tensor<f64>, seed: u64, f: impl Fn(&mut Graph<f64>, Var) -> Var) -> Result<f64, String> {
    if leaf.len() < PROBES {
        return Err(format!("{name}: only {} coordinates", leaf.len()));
    }
    let mut g = Graph::new();
    let x = g.leaf(leaf.clone(), 1);
    let y = f(&mut g, x);
    let analytic = g.backward(y, 1).take(x).ok_or(format!("{name}: no gradient reaches the leaf"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in sample(&mut rng, leaf.len(), PROBES) {
        let eval = |delta: f64| {
            let mut t = leaf.clone();
            t.data_mut()[i] += delta;
            let mut g = Graph::new();
            let x = g.leaf(t, 1);
            let y = f(&mut g, x);
            g.value(y).item()
        };
        let numeric = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
        if !(err <= TOLERANCE) {
            return Err(format!("{name} coord {i}: analytic {a:e} numeric {numeric:e} rel {err:e}"));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

pub fn encoder_residual() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let enc: MessageEncoder<f64> = MessageEncoder::new(4, 6, 0.1, &mut rng).cast();
    let x = random(&[2, 3, 8, 8], &mut rng);
    let cm = random(&[2, 4, 8, 8], &mut rng);
    let forward = |g: &mut Graph<f64>, x: Var, cm: Var, w: Option<Var>| {
        let mut bound = enc.net.bind(g, 0);
        if let Some(w) = w {
            bound[0] = w;
        }
        let y = enc.forward(g, &bound, x, cm);
        project(g, y, 11)
    };
    let a = check("encoder/image", x.clone(), 2, |g, v| {
        let cm = g.constant(cm.clone());
        forward(g, v, cm, None)
    })?;
    let b = check("encoder/message", cm.clone(), 3, |g, v| {
        let x = g.constant(x.clone());
        forward(g, x, v, None)
    })?;
    let c = check("encoder/weights", enc.net.params()[0].clone(), 4, |g, w| {
        let (x, cm) = (g.constant(x.clone()), g.constant(cm.clone()));
        forward(g, x, cm, Some(w))
    })?;
    Ok(a.max(b).max(c))
}

pub fn decoder_logits() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dec: MessageDecoder<f64> = MessageDecoder::new(4, 6, &mut rng).cast();
    let x = random(&[2, 3, 8, 8], &mut rng);
    let cond = random(&[2, 4, 8, 8], &mut rng);
    let forward = |g: &mut Graph<f64>, x: Var, w: Option<Var>| {
        let mut bound = dec.net.bind(g, 0);
        if let Some(w) = w {
            bound[2] = w;
        }
        let c = g.constant(cond.clone());
        let z = dec.logits(g, &bound, x, c);
        project(g, z, 12)
    };
    let a = check("decoder/image", x.clone(), 6, |g, v| forward(g, v, None))?;
    let b = check("decoder/weights", dec.net.params()[2].clone(), 7, |g, w| {
        let x = g.constant(x.clone());
        forward(g, x, Some(w))
    })?;
    Ok(a.max(b))
}

pub fn eraser() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let er: Eraser<f64> = Eraser::new(6, 0.05, &mut rng).cast();
    let x = random(&[2, 3, 8, 8], &mut rng);
    let forward = |g: &mut Graph<f64>, x: Var, w: Option<Var>| {
        let mut bound = er.net.bind(g, 0);
        if let Some(w) = w {
            bound[0] = w;
        }
        let y = er.forward(g, &bound, x);
        project(g, y, 13)
    };
    let a = check("eraser/image", x.clone(), 9, |g, v| forward(g, v, None))?;
    let b = check("eraser/weights", er.net.params()[0].clone(), 10, |g, w| {
        let x = g.constant(x.clone());
        forward(g, x, Some(w))
    })?;
    Ok(a.max(b))
}

pub fn noiser_pool() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    // 12 is not a multiple of the 8x8 block, so the padding path is covered.
    let x = random(&[2, 3, 12, 12], &mut rng);
    let mut worst = 0.0f64;
    for quality in [50, 70, 90] {
        let e = check(&format!("jpeg_approx q{quality}"), x.clone(), 15 + quality as u64, |g, v| {
            let y = jpeg_approx_graph(g, v, quality).unwrap();
            project(g, y, 16)
        })?;
        worst = worst.max(e);
    }
    for kernel in [3, 5, 7] {
        let e = check(&format!("gaussian_blur k{kernel}"), x.clone(), 20 + kernel as u64, |g, v| {
            let y = gaussian_blur_graph(g, v, kernel).unwrap();
            project(g, y, 17)
        })?;
        worst = worst.max(e);
    }
    Ok(worst)
}
