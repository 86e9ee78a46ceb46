//! Times the training phases at desk shapes to locate bottlenecks.
//! Run: cargo run -p pathstar --example phase_timing

use std::time::Instant;

use pathstar::data::{sample_graph, Topology};
use pathstar::model::{LanguageModel, ModelConfig, TransformerConfig};
use pathstar::rng::{stream, Domain};
use pathstar::tape::Tape;
use pathstar::tokenizer::{encode, Vocab};
use pathstar::train::{adamw_step, build_batch, AdamState, Objective, TrainConfig};

fn main() {
    let topology = Topology::new(2, 5, 50).unwrap();
    let vocab = Vocab::new(50);
    let mut rng = stream(1, Domain::Instance, 0);
    let seqs: Vec<_> = (0..128)
        .map(|_| encode(&sample_graph(&topology, &mut rng), &vocab).unwrap())
        .collect();
    let refs: Vec<&_> = seqs.iter().collect();

    let config = ModelConfig::Transformer(TransformerConfig {
        n_layers: 4,
        d_model: 128,
        n_heads: 4,
        mlp_expansion: 4,
        max_seq_len: 32,
        vocab_size: 54,
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
        batch_size: 128,
        max_epochs: 1,
        stop_at_train_acc: 0.999,
        seed: 1,
    };

    let t0 = Instant::now();
    let batch = build_batch(&refs, Objective::TeacherForced, &vocab).unwrap();
    println!("build_batch        {:>8.1} ms", t0.elapsed().as_secs_f64() * 1e3);

    // warm up once
    {
        let mut tape = Tape::<f32>::new();
        let pass = model.forward(&mut tape, &batch.inputs, batch.b, batch.t).unwrap();
        let loss = tape
            .masked_cross_entropy(pass.logits, &batch.targets, &batch.mask)
            .unwrap();
        tape.backward(loss).unwrap();
        model.zero_grads();
    }

    const REPS: usize = 5;

    let t0 = Instant::now();
    for _ in 0..REPS {
        let mut tape = Tape::<f32>::new();
        let _ = model.forward(&mut tape, &batch.inputs, batch.b, batch.t).unwrap();
    }
    let fwd = t0.elapsed().as_secs_f64() / REPS as f64;
    println!("forward            {:>8.1} ms", fwd * 1e3);

    let t0 = Instant::now();
    let mut node_count = 0;
    for _ in 0..REPS {
        let mut tape = Tape::<f32>::new();
        let pass = model.forward(&mut tape, &batch.inputs, batch.b, batch.t).unwrap();
        let loss = tape
            .masked_cross_entropy(pass.logits, &batch.targets, &batch.mask)
            .unwrap();
        tape.backward(loss).unwrap();
        node_count = tape.len();
        model.zero_grads();
        model.accumulate_grads(&tape, &pass);
    }
    let fb = t0.elapsed().as_secs_f64() / REPS as f64;
    println!("forward+backward   {:>8.1} ms   ({node_count} tape nodes)", fb * 1e3);

    let t0 = Instant::now();
    for _ in 0..REPS {
        let mut tape = Tape::<f32>::new();
        let pass = model.forward(&mut tape, &batch.inputs, batch.b, batch.t).unwrap();
        let loss = tape
            .masked_cross_entropy(pass.logits, &batch.targets, &batch.mask)
            .unwrap();
        tape.backward(loss).unwrap();
        model.zero_grads();
        model.accumulate_grads(&tape, &pass);
        adamw_step(&mut model, &mut opt, &cfg).unwrap();
    }
    let step = t0.elapsed().as_secs_f64() / REPS as f64;
    println!("full step          {:>8.1} ms", step * 1e3);
    println!(
        "projected epoch    {:>8.1} s  (157 batches)",
        step * 157.0
    );
}
