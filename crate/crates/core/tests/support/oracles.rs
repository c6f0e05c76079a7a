//! Closed forms and brute-force references for the scoring arithmetic.
//! Each check returns a one-line summary or the first disagreement.

use facelock::codec::Message;
use facelock::conditioning::pixel_shuffle;
use facelock::objectives::{fragile_loss, fragile_loss_graph, ContrastiveBatch};
use facelock::verification::{auc, bit_error_rate, calibrate_white_box, fake_probability, white_box_objective, Verdict};
use facelock::Tensor;
use facelock_tensor::Graph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INFO_NCE_TOLERANCE: f64 = 1e-6;

pub fn ber_popcount() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for case in 0..1000 {
        let len = rng.gen_range(1..=64usize);
        let mask = if len == 64 { u64::MAX } else { (1u64 << len) - 1 };
        let (a, b) = (rng.gen::<u64>() & mask, rng.gen::<u64>() & mask);
        let msg = |w: u64| Message::new((0..len).map(|i| w >> i & 1 == 1).collect()).unwrap();
        let got = bit_error_rate(&msg(a), &msg(b)).map_err(|e| e.to_string())?;
        let want = (a ^ b).count_ones() as f64 / len as f64;
        if got != want {
            return Err(format!("case {case}: {len} bits, {got} vs popcount {want}"));
        }
    }
    Ok("1000 random word pairs match xor popcount".into())
}

/// Scatters every input element to where depth-to-space sends it.
fn shuffle_by_scatter(c: usize, r: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![f64::NAN; c * h * r * w * r];
    for k in 0..c * r * r {
        let (ch, dy, dx) = (k / (r * r), (k % (r * r)) / r, k % r);
        for i in 0..h {
            for j in 0..w {
                let src = (k * h + i) * w + j;
                out[(ch * h * r + i * r + dy) * w * r + j * r + dx] = src as f64;
            }
        }
    }
    out
}

pub fn pixel_shuffle_index_map() -> Result<String, String> {
    for (r, c, h, w) in [(2, 3, 3, 2), (3, 2, 2, 3), (16, 2, 1, 1), (16, 1, 2, 3)] {
        let n = c * r * r * h * w;
        let input = Tensor::from_vec(&[c * r * r, h, w], (0..n).map(|i| i as f64).collect()).unwrap();
        let got = pixel_shuffle(&input, r).map_err(|e| e.to_string())?;
        if got.shape() != [c, h * r, w * r] {
            return Err(format!("r={r}: shape {:?}", got.shape()));
        }
        let want = shuffle_by_scatter(c, r, h, w);
        if let Some(i) = (0..n).find(|&i| got.data()[i] != want[i]) {
            return Err(format!("r={r}: output {i} reads input {} instead of {}", got.data()[i], want[i]));
        }
    }
    Ok("index maps for r in {2, 3, 16} equal the scatter reference".into())
}

/// Both implementations on the same batch.
fn info_nce_both(anchors: &[Vec<f64>], positives: &[Vec<f64>], cross: &[Vec<Vec<f64>>], temperature: f64) -> Result<[f64; 2], String> {
    let batch = ContrastiveBatch {
        anchors: anchors.to_vec(),
        positives: positives.to_vec(),
        cross: cross.to_vec(),
        temperature,
    };
    let direct = fragile_loss(&batch).map_err(|e| e.to_string())?;
    let (n, d) = (anchors.len(), anchors[0].len());
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::from_vec(&[n, d], anchors.concat()).unwrap());
    let p = g.constant(Tensor::from_vec(&[n, d], positives.concat()).unwrap());
    let x = g.constant(Tensor::from_vec(&[n, n, d], cross.iter().flatten().flatten().copied().collect()).unwrap());
    let loss = fragile_loss_graph(&mut g, a, p, x, temperature).map_err(|e| e.to_string())?;
    Ok([direct, g.value(loss).item()])
}

pub fn info_nce_uniform() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for n in 2..=8 {
        // Positive multiples of one vector: every cosine is 1.
        let v: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut scaled = || -> Vec<f64> {
            let s = rng.gen_range(0.5..2.0);
            v.iter().map(|x| x * s).collect()
        };
        let anchors: Vec<_> = (0..n).map(|_| scaled()).collect();
        let positives: Vec<_> = (0..n).map(|_| scaled()).collect();
        let cross: Vec<Vec<_>> = (0..n).map(|_| (0..n).map(|_| scaled()).collect()).collect();
        let want = (n as f64).ln();
        for got in info_nce_both(&anchors, &positives, &cross, 0.5)? {
            let err = (got - want).abs();
            if !(err <= INFO_NCE_TOLERANCE) {
                return Err(format!("N={n}: {got} vs ln N = {want}"));
            }
            worst = worst.max(err);
        }
    }
    Ok(format!("equal similarities give ln N for N in 2..=8, worst error {worst:.1e}"))
}

pub fn info_nce_two_sample() -> Result<String, String> {
    // Positive cosine +1, negative cosine -1, temperature 0.5.
    let (a, b) = (vec![1.0, 2.0, -0.5], vec![-3.0, 0.5, 1.0]);
    let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
    let anchors = vec![a.clone(), b.clone()];
    let positives = vec![a.iter().map(|x| 2.0 * x).collect(), b.clone()];
    let cross = vec![vec![a.clone(), neg(&a)], vec![neg(&b), b.clone()]];
    let want = (1.0 + (-4.0f64).exp()).ln();
    let mut worst = 0.0f64;
    for got in info_nce_both(&anchors, &positives, &cross, 0.5)? {
        let err = (got - want).abs();
        if !(err <= INFO_NCE_TOLERANCE) {
            return Err(format!("{got} vs ln(1 + e^-4) = {want}"));
        }
        worst = worst.max(err);
    }
    Ok(format!("N=2 with cosines +1/-1 gives ln(1 + e^-4), error {worst:.1e}"))
}

/// Reference ramp, written independently of the library.
fn ramp(r: f64, t: f64) -> f64 {
    if r > 0.5 {
        1.0
    } else if r > t {
        0.5 + (r - t) / (1.0 - 2.0 * t)
    } else {
        r / (2.0 * t)
    }
}

pub fn white_box_grid() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for case in 0..200 {
        let draw = |rng: &mut ChaCha8Rng, lo: u32, hi: u32| -> Vec<f64> {
            let n = rng.gen_range(1..12);
            (0..n).map(|_| rng.gen_range(lo..=hi) as f64 / 64.0).collect()
        };
        let (real_hi, fake_lo) = (rng.gen_range(4..40), rng.gen_range(0..20));
        let reals = draw(&mut rng, 0, real_hi);
        let fakes = draw(&mut rng, fake_lo, 64);
        let objective = |t: f64| {
            let mean = |xs: &[f64]| xs.iter().map(|&r| ramp(r, t)).sum::<f64>() / xs.len() as f64;
            mean(&fakes) - mean(&reals)
        };
        let sweep: Vec<f64> = (1..=99).map(|k| objective(k as f64 / 200.0)).collect();
        let best = sweep.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // Formulas that agree algebraically may round differently, so
        // near-ties resolve to the first grid point within rounding of the max.
        let first = sweep.iter().position(|&o| best - o <= 1e-12).unwrap();
        let got = calibrate_white_box(&reals, &fakes, "oracle").map_err(|e| e.to_string())?;
        let got_index = (got.calibration.tau * 200.0).round() as usize - 1;
        if got_index != first {
            return Err(format!("case {case}: library picks tau index {got_index}, sweep picks {first}"));
        }
        let lib_obj = white_box_objective(&reals, &fakes, got.calibration.tau).map_err(|e| e.to_string())?;
        if (lib_obj - best).abs() > 1e-12 || got.degenerate != (lib_obj <= 0.0) {
            return Err(format!("case {case}: objective {lib_obj} vs sweep {best}"));
        }
    }
    Ok("200 random cases pick the same threshold as an exhaustive sweep".into())
}

pub fn auc_pair_counting() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    for case in 0..500 {
        let n = rng.gen_range(2..=20);
        let mut scored: Vec<(f64, Verdict)> = (0..n)
            .map(|_| (rng.gen_range(0..6) as f64 / 8.0, if rng.gen_bool(0.5) { Verdict::Fake } else { Verdict::Real }))
            .collect();
        scored[0].1 = Verdict::Fake;
        scored[1].1 = Verdict::Real;
        let (mut wins, mut pairs) = (0.0, 0.0);
        for f in scored.iter().filter(|s| s.1 == Verdict::Fake) {
            for r in scored.iter().filter(|s| s.1 == Verdict::Real) {
                pairs += 1.0;
                wins += if f.0 > r.0 {
                    1.0
                } else if f.0 == r.0 {
                    0.5
                } else {
                    0.0
                };
            }
        }
        let got = auc(&scored).map_err(|e| e.to_string())?;
        if got != wins / pairs {
            return Err(format!("case {case}: {got} vs pair count {}", wins / pairs));
        }
    }
    Ok("500 tied samples of at most 20 points match pair counting exactly".into())
}

pub fn fake_probability_shape() -> Result<String, String> {
    let p = |r: f64, t: f64| fake_probability(r, t).map_err(|e| e.to_string());
    for t in [0.005, 0.05, 0.1, 0.2, 0.3, 0.495] {
        let anchors = [(0.0, p(0.0, t)?, 0.0), (t, p(t, t)?, 0.5), (0.5, p(0.5, t)?, 1.0)];
        for (r, got, want) in anchors {
            if got != want {
                return Err(format!("tau {t}: P({r}) = {got}, expected {want}"));
            }
        }
        let mut prev = 0.0;
        for i in 0..1000 {
            let r = i as f64 / 999.0;
            let v = p(r, t)?;
            if v < prev || !(0.0..=1.0).contains(&v) {
                return Err(format!("tau {t}: P({r}) = {v} after {prev}"));
            }
            prev = v;
        }
    }
    Ok("P(0)=0, P(tau)=0.5, P(0.5)=1 and monotone on 1000 points for six thresholds".into())
}
