//! Times each tape op at desk training shapes (b=128, t=32, d=128, h=4).
//! Run: cargo run -p pathstar --example op_timing

use std::time::Instant;

use pathstar::tape::{Tape, LN_EPS};
use pathstar::tensor::Tensor;

fn timed<R>(label: &str, reps: usize, mut f: impl FnMut() -> R) -> R {
    let mut out = None;
    let t0 = Instant::now();
    for _ in 0..reps {
        out = Some(f());
    }
    let per = t0.elapsed().as_secs_f64() * 1e3 / reps as f64;
    println!("{label:<28} {per:>8.2} ms");
    out.unwrap()
}

fn filled(shape: &[usize], seed: u64) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n)
        .map(|i| ((i as u64).wrapping_mul(6364136223846793005).wrapping_add(seed) >> 33) as f32
            / 4e9
            - 0.25)
        .collect();
    Tensor::from_vec(shape, data).unwrap().param()
}

fn main() {
    let (b, t, d, v) = (128usize, 32usize, 128usize, 54usize);
    let h = 4 * d;
    const REPS: usize = 20;

    let x_tok = filled(&[v, d], 1);
    let x_pos = filled(&[t, d], 2);
    let x_btd = filled(&[b, t, d], 3);
    let w_qkv = filled(&[d, 3 * d], 4);
    let w_proj = filled(&[d, d], 5);
    let w_up = filled(&[d, h], 6);
    let w_down = filled(&[h, d], 7);
    let w_head = filled(&[d, v], 8);
    let gain = filled(&[d], 9);
    let shift = filled(&[d], 10);
    let bias_h = filled(&[h], 11);
    let x_bth = filled(&[b, t, h], 12);
    let x_qkv = filled(&[b, t, 3 * d], 13);
    let ids: Vec<u16> = (0..b * t).map(|i| (i % v) as u16).collect();
    let targets: Vec<u16> = (0..b * t).map(|i| ((i + 7) % v) as u16).collect();
    let mask: Vec<bool> = (0..b * t).map(|i| i % 3 == 0).collect();

    timed("embedding", REPS, || {
        let mut tape = Tape::<f32>::new();
        let e = tape.leaf(&x_tok);
        tape.embedding(e, &ids, b, t).unwrap()
    });
    timed("position_add", REPS, || {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&x_btd);
        let p = tape.leaf(&x_pos);
        tape.position_add(x, p).unwrap()
    });
    timed("layer_norm", REPS, || {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&x_btd);
        let g = tape.leaf(&gain);
        let s = tape.leaf(&shift);
        tape.layer_norm(x, g, s, LN_EPS as f32).unwrap()
    });
    timed("matmul qkv  (128->384)", REPS, || {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&x_btd);
        let w = tape.leaf(&w_qkv);
        tape.matmul(x, w).unwrap()
    });
    timed("matmul proj (128->128)", REPS, || {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&x_btd);
        let w = tape.leaf(&w_proj);
        tape.matmul(x, w).unwrap()
    });
    timed("matmul up   (128->512)", REPS, || {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&x_btd);
        let w = tape.leaf(&w_up);
        tape.matmul(x, w).unwrap()
    });
    timed("matmul down (512->128)", REPS, || {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&x_bth);
        let w = tape.leaf(&w_down);
        tape.matmul(x, w).unwrap()
    });
    timed("matmul head (128->54)", REPS, || {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&x_btd);
        let w = tape.leaf(&w_head);
        tape.matmul(x, w).unwrap()
    });
    timed("add_bias [b,t,512]", REPS, || {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&x_bth);
        let bb = tape.leaf(&bias_h);
        tape.add_bias(x, bb).unwrap()
    });
    timed("causal_attention", REPS, || {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&x_qkv);
        tape.causal_attention(x, 4).unwrap()
    });
    timed("gelu [b,t,512]", REPS, || {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&x_bth);
        tape.gelu(x)
    });
    timed("add [b,t,128]", REPS, || {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&x_btd);
        let y = tape.leaf(&x_btd);
        tape.add(x, y).unwrap()
    });
    timed("cross_entropy  [b,t,54]", REPS, || {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&x_btd);
        let w = tape.leaf(&w_head);
        let logits = tape.matmul(x, w).unwrap();
        let loss = tape
            .masked_cross_entropy(logits, &targets, &mask)
            .unwrap();
        loss
    });
}
