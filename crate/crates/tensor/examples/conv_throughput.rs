//! Rough single-thread convolution throughput, forward and backward.

use std::time::Instant;

use facelock_tensor::kernels::{conv2d, conv2d_backward, ConvGeom};
use facelock_tensor::Tensor;

fn main() {
    for &(cin, cout, k, hw) in &[(35, 16, 7, 32), (16, 32, 7, 32), (32, 32, 3, 32), (35, 16, 7, 64)] {
        let g = ConvGeom { in_ch: cin, out_ch: cout, kernel: k, stride: 1, padding: k / 2 };
        let x = Tensor::<f32>::from_fn(&[8, cin, hw, hw], |i| (i % 17) as f32 * 0.01);
        let w = Tensor::<f32>::from_fn(&[cout, cin, k, k], |i| (i % 13) as f32 * 0.01);
        let reps = 5;
        let t = Instant::now();
        let mut y = conv2d(&x, &w, None, &g);
        for _ in 1..reps {
            y = conv2d(&x, &w, None, &g);
        }
        let fwd = t.elapsed().as_secs_f64() / reps as f64;
        let t = Instant::now();
        for _ in 0..reps {
            let _ = conv2d_backward(&x, &w, &y, &g, true, true);
        }
        let bwd = t.elapsed().as_secs_f64() / reps as f64;
        let flops = 2.0 * (8 * cin * cout * k * k * hw * hw) as f64;
        println!(
            "{cin:>3}->{cout:<3} k{k} {hw}x{hw}: fwd {:.1} ms ({:.1} GFLOP/s), bwd {:.1} ms ({:.1} GFLOP/s)",
            fwd * 1e3,
            flops / fwd / 1e9,
            bwd * 1e3,
            2.0 * flops / bwd / 1e9
        );
    }
}
