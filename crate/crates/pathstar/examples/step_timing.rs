//! Per-phase wall-clock breakdown of one optimizer step at the benchmark
//! shape (4 layers, d_model 128, batch 128, sequence 32). Run with
//! `cargo run --release --example step_timing` when tuning the engine; the
//! phase totals show where a step actually spends its time.

use pathstar::model::{LanguageModel, ModelConfig, TransformerConfig};
use pathstar::rng::{stream, Domain};
use pathstar::tape::Tape;
use pathstar::train::{adamw_step, AdamState, Objective, TrainConfig};
use rand::Rng;
use std::time::Instant;

fn main() {
    let (b, t, vocab) = (128usize, 32usize, 54usize);
    let config = ModelConfig::Transformer(TransformerConfig {
        n_layers: 4,
        d_model: 128,
        n_heads: 4,
        mlp_expansion: 4,
        max_seq_len: t,
        vocab_size: vocab,
        init_scale: 0.02,
    });
    let mut model = LanguageModel::<f32>::init(&config, 1).unwrap();
    let mut opt = AdamState::new(&model);
    let cfg = TrainConfig {
        objective: Objective::TeacherForced,
        learning_rate: 5e-4,
        weight_decay: 0.01,
        adam_beta1: 0.9,
        adam_beta2: 0.999,
        adam_eps: 1e-8,
        batch_size: b,
        max_epochs: 1,
        stop_at_train_acc: 0.999,
        seed: 1,
    };

    let mut rng = stream(7, Domain::Probe, 0);
    let ids: Vec<u16> = (0..b * t).map(|_| rng.gen_range(0..vocab as u16)).collect();
    let targets: Vec<u16> = (0..b * t).map(|_| rng.gen_range(0..vocab as u16)).collect();
    let mask: Vec<bool> = (0..b * t).map(|i| i % t >= t - 5).collect();

    let phases = [
        "forward", "loss", "backward", "grads", "adamw", "tape_drop",
    ];
    let mut totals = [0f64; 6];
    let steps = 20usize;
    for step in 0..steps + 3 {
        let mut marks = [0f64; 6];
        let t0 = Instant::now();
        let mut tape = Tape::<f32>::new();
        let pass = model.forward(&mut tape, &ids, b, t).unwrap();
        marks[0] = t0.elapsed().as_secs_f64();

        let t1 = Instant::now();
        let loss = tape
            .masked_cross_entropy(pass.logits, &targets, &mask)
            .unwrap();
        let _ = tape.scalar(loss);
        marks[1] = t1.elapsed().as_secs_f64();

        let t2 = Instant::now();
        tape.backward(loss).unwrap();
        marks[2] = t2.elapsed().as_secs_f64();

        let t3 = Instant::now();
        model.zero_grads();
        model.accumulate_grads(&tape, &pass);
        marks[3] = t3.elapsed().as_secs_f64();

        let t4 = Instant::now();
        adamw_step(&mut model, &mut opt, &cfg).unwrap();
        marks[4] = t4.elapsed().as_secs_f64();

        let t5 = Instant::now();
        drop(tape);
        marks[5] = t5.elapsed().as_secs_f64();

        if step >= 3 {
            for (total, mark) in totals.iter_mut().zip(marks) {
                *total += mark;
            }
        }
    }

    let mut step_total = 0f64;
    for (name, total) in phases.iter().zip(totals) {
        let ms = total / steps as f64 * 1e3;
        step_total += ms;
        println!("{name:>9}  {ms:8.2} ms");
    }
    println!("{:>9}  {step_total:8.2} ms", "step");
}
