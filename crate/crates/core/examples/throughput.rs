//! Quick single-core throughput probe for the shapes that dominate a
//! training step. Handy when sizing batch counts for a new machine:
//! `cargo run --release -p metacvr-core --example throughput`

use std::time::Instant;

use metacvr_core::Tensor;

fn bench_matmul(m: usize, k: usize, n: usize, reps: usize) {
    let a = Tensor::from_vec(&[m, k], (0..m * k).map(|i| (i % 13) as f32 * 0.1).collect()).unwrap();
    let b = Tensor::from_vec(&[k, n], (0..k * n).map(|i| (i % 7) as f32 * 0.1).collect()).unwrap();
    let start = Instant::now();
    let mut sink = 0.0f32;
    for _ in 0..reps {
        let mut tape: metacvr_core::Tape<f32> = metacvr_core::Tape::new();
        let ai = tape.constant(&a);
        let bi = tape.constant(&b);
        let c = tape.matmul(ai, bi).unwrap();
        sink += tape.value(c)[0];
    }
    let secs = start.elapsed().as_secs_f64();
    let flops = 2.0 * (m * k * n * reps) as f64;
    println!(
        "matmul {m}x{k}x{n}: {:.2} GFLOP/s  ({:.2} ms/op, sink {sink:.1})",
        flops / secs / 1e9,
        secs * 1e3 / reps as f64
    );
}

fn bench_attention(b: usize, t: usize, heads: usize, dh: usize, reps: usize) {
    let d = heads * dh;
    let q = Tensor::from_vec(&[b * t, d], vec![0.01; b * t * d]).unwrap();
    let start = Instant::now();
    for _ in 0..reps {
        let mut tape: metacvr_core::Tape<f32> = metacvr_core::Tape::new();
        let qi = tape.constant(&q);
        let ki = tape.constant(&q);
        let vi = tape.constant(&q);
        let s = tape.attn_scores(qi, ki, t, heads).unwrap();
        let w = tape.softmax_seg(s, t, None).unwrap();
        let _ = tape.attn_apply(w, vi, t, heads).unwrap();
    }
    let secs = start.elapsed().as_secs_f64();
    // scores + apply are each b*t*t*heads*dh MACs
    let flops = (4 * b * t * t * heads * dh * reps) as f64;
    println!(
        "attention b={b} t={t} h={heads} dh={dh}: {:.2} GFLOP/s ({:.2} ms/op)",
        flops / secs / 1e9,
        secs * 1e3 / reps as f64
    );
}

fn main() {
    // behavior-sequence projections, batch 256 x window 30
    bench_matmul(7680, 96, 128, 20);
    // trunk layers
    bench_matmul(256, 372, 512, 100);
    bench_matmul(256, 512, 256, 100);
    bench_matmul(256, 160, 64, 200);
    // big square for the backend's peak
    bench_matmul(1024, 1024, 1024, 8);
    bench_attention(256, 30, 8, 16, 50);
}
