//! Micro-times the scalar transcendentals the training loop leans on.
//! Run: cargo run -p pathstar --example scalar_ops

use std::time::Instant;

fn main() {
    const N: usize = 8_400_000;
    let xs: Vec<f32> = (0..N).map(|i| (i as f32 / N as f32) * 8.0 - 4.0).collect();

    let t0 = Instant::now();
    let mut acc = 0.0f32;
    for &x in &xs {
        acc += x.tanh();
    }
    println!("tanh  x{N}: {:>7.1} ms (acc {acc:.3})", t0.elapsed().as_secs_f64() * 1e3);

    let t0 = Instant::now();
    let mut acc = 0.0f32;
    for &x in &xs {
        acc += x.exp();
    }
    println!("exp   x{N}: {:>7.1} ms (acc {acc:.3})", t0.elapsed().as_secs_f64() * 1e3);

    let t0 = Instant::now();
    let mut acc = 0.0f32;
    for &x in &xs {
        acc += x * x + 0.5 * x;
    }
    println!("fma   x{N}: {:>7.1} ms (acc {acc:.3})", t0.elapsed().as_secs_f64() * 1e3);
}
