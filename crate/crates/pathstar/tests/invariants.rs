//! Cross-module properties that no amount of training can paper over:
//! causal masking, the autoregressive factorization, tokenizer bijectivity,
//! sampling uniformity, whole-model gradient correctness, and end-to-end
//! determinism.

use pathstar::data::{generate, sample_graph, serialize_line, DatasetSpec, Topology};
use pathstar::eval::{evaluate, EvalOptions};
use pathstar::model::{
    LanguageModel, ModelConfig, RecurrentConfig, TransformerConfig,
};
use pathstar::rng::{stream, Domain};
use pathstar::tape::Tape;
use pathstar::tokenizer::{decode, encode, Vocab};
use pathstar::train::{train, AdamState, Objective, TrainConfig};
use rand::Rng;

fn tiny_configs(vocab: usize, max_seq_len: usize) -> [ModelConfig; 2] {
    [
        ModelConfig::Transformer(TransformerConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            mlp_expansion: 4,
            max_seq_len,
            vocab_size: vocab,
            init_scale: 0.02,
        }),
        ModelConfig::Recurrent(RecurrentConfig {
            n_layers: 2,
            d_model: 16,
            vocab_size: vocab,
        }),
    ]
}

#[test]
fn causal_masking_survives_perturbation() {
    let v = 20usize;
    let t = 10usize;
    for config in tiny_configs(v, t) {
        let model = LanguageModel::<f32>::init(&config, 31).unwrap();
        for case in 0..50u64 {
            let mut rng = stream(100, Domain::Probe, case);
            let ids: Vec<u16> = (0..t).map(|_| rng.gen_range(0..v as u16)).collect();
            let mut tape = Tape::new();
            let pass = model.forward(&mut tape, &ids, 1, t).unwrap();
            let before = tape.value(pass.logits).to_vec();

            // repeating the forward is bitwise stable
            let mut tape2 = Tape::new();
            let pass2 = model.forward(&mut tape2, &ids, 1, t).unwrap();
            assert_eq!(before, tape2.value(pass2.logits));

            let j = rng.gen_range(1..t);
            let mut perturbed = ids.clone();
            perturbed[j] = (perturbed[j] + 1 + rng.gen_range(0..v as u16 - 1)) % v as u16;
            assert_ne!(perturbed[j], ids[j]);
            let mut tape3 = Tape::new();
            let pass3 = model.forward(&mut tape3, &perturbed, 1, t).unwrap();
            let after = tape3.value(pass3.logits);
            assert_eq!(
                &before[..j * v],
                &after[..j * v],
                "{}: token at {j} leaked backward",
                config.arch_name()
            );
        }
    }
}

fn ln_softmax_pick(logits: &[f64], id: u16) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    logits[id as usize] - lse
}

#[test]
fn next_token_factorization_equals_the_joint() {
    let v = 20usize;
    let len = 12usize;
    for config in tiny_configs(v, len) {
        let model = LanguageModel::<f64>::init(&config, 47).unwrap();
        for case in 0..10u64 {
            let mut rng = stream(200, Domain::Probe, case);
            let s: Vec<u16> = (0..len).map(|_| rng.gen_range(0..v as u16)).collect();

            // route one: a single forward over the whole sequence
            let mut tape = Tape::new();
            let t = len - 1;
            let pass = model.forward(&mut tape, &s[..t], 1, t).unwrap();
            let logits = tape.value(pass.logits);
            let joint: f64 = (0..t)
                .map(|i| ln_softmax_pick(&logits[i * v..(i + 1) * v], s[i + 1]))
                .sum();

            // route two: one next-token distribution per prefix
            let chain: f64 = (1..len)
                .map(|i| {
                    let probs = model.next_token_distribution(&s[..i]).unwrap();
                    probs[s[i] as usize].ln()
                })
                .sum();

            assert!(
                (joint - chain).abs() < 1e-10,
                "{}: factorization drifts: {joint} vs {chain}",
                config.arch_name()
            );
        }
    }
}

#[test]
fn tokenizer_bijection_on_a_thousand_instances() {
    let topo = Topology { d: 4, l: 4, n_labels: 60 };
    let vocab = Vocab::new(60);
    for i in 0..1000u64 {
        let g = sample_graph(&topo, &mut stream(300, Domain::Instance, i));
        let seq = encode(&g, &vocab).unwrap();
        // responses never contain structural markers
        for &id in seq.response() {
            assert!(vocab.is_label(id));
        }
        let back = decode(&seq, &vocab).unwrap();
        assert_eq!(back, g, "decode lost instance {i}");
        assert_eq!(encode(&back, &vocab).unwrap(), seq, "re-encode drifted");
    }
}

#[test]
fn goal_arm_choice_is_uniform() {
    let topo = Topology { d: 5, l: 3, n_labels: 40 };
    let n = 10_000usize;
    let mut counts = [0usize; 5];
    for i in 0..n as u64 {
        let g = sample_graph(&topo, &mut stream(400, Domain::Instance, i));
        // count by which arm of the *shuffled* listing holds the goal
        counts[g.goal_arm] += 1;
    }
    let expected = n as f64 / 5.0;
    let sigma = (n as f64 * 0.2 * 0.8).sqrt();
    for (arm, &c) in counts.iter().enumerate() {
        assert!(
            (c as f64 - expected).abs() < 3.0 * sigma,
            "arm {arm} drawn {c} times, expected {expected} ± {:.0}",
            3.0 * sigma
        );
    }
}

#[test]
fn generation_is_deterministic() {
    let spec = DatasetSpec {
        topology: Topology { d: 3, l: 4, n_labels: 30 },
        n_train: 200,
        n_test: 50,
        seed: 77,
    };
    let a = generate(&spec).unwrap();
    let b = generate(&spec).unwrap();
    let lines = |gs: &[pathstar::data::PathStarGraph]| -> Vec<String> {
        gs.iter().map(serialize_line).collect()
    };
    assert_eq!(lines(&a.train), lines(&b.train));
    assert_eq!(lines(&a.test), lines(&b.test));
    assert_eq!(spec.fingerprint(), spec.fingerprint());
}

#[test]
fn whole_model_gradients_match_finite_differences() {
    // 64-bit end-to-end check on every coordinate of a small instance of
    // each architecture: embeddings, attention, recurrence, head, the lot
    let v = 12usize;
    let (b, t) = (2usize, 6usize);
    let h = 1e-5f64;
    let tol = 1e-6f64;

    let configs = [
        ModelConfig::Transformer(TransformerConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            mlp_expansion: 4,
            max_seq_len: t,
            vocab_size: v,
            init_scale: 0.1,
        }),
        ModelConfig::Recurrent(RecurrentConfig {
            n_layers: 2,
            d_model: 8,
            vocab_size: v,
        }),
    ];

    let mut rng = stream(500, Domain::Probe, 0);
    let ids: Vec<u16> = (0..b * t).map(|_| rng.gen_range(0..v as u16)).collect();
    let targets: Vec<u16> = (0..b * t).map(|_| rng.gen_range(0..v as u16)).collect();
    let mask: Vec<bool> = (0..b * t).map(|i| i % t >= 2).collect();

    let loss_of = |model: &LanguageModel<f64>| -> f64 {
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &ids, b, t).unwrap();
        let loss = tape
            .masked_cross_entropy(pass.logits, &targets, &mask)
            .unwrap();
        tape.scalar(loss)
    };

    for config in configs {
        let mut model = LanguageModel::<f64>::init(&config, 61).unwrap();

        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &ids, b, t).unwrap();
        let loss = tape
            .masked_cross_entropy(pass.logits, &targets, &mask)
            .unwrap();
        tape.backward(loss).unwrap();
        model.zero_grads();
        model.accumulate_grads(&tape, &pass);
        let grads: Vec<Vec<f64>> = model
            .named_tensors()
            .iter()
            .map(|(_, t)| t.grad.clone().expect("every parameter gets a gradient"))
            .collect();

        let n_tensors = grads.len();
        let mut checked = 0usize;
        let mut worst = 0.0f64;
        for ti in 0..n_tensors {
            for ci in 0..grads[ti].len() {
                let orig = model.named_tensors_mut()[ti].1.data[ci];
                model.named_tensors_mut()[ti].1.data[ci] = orig + h;
                let up = loss_of(&model);
                model.named_tensors_mut()[ti].1.data[ci] = orig - h;
                let down = loss_of(&model);
                model.named_tensors_mut()[ti].1.data[ci] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads[ti][ci];
                let rel = (analytic - numeric).abs()
                    / 1.0f64.max(analytic.abs()).max(numeric.abs());
                if rel > worst {
                    worst = rel;
                }
                let (name, _) = &model.named_tensors()[ti];
                assert!(
                    rel < tol,
                    "{}: {name}[{ci}] analytic {analytic} vs numeric {numeric}",
                    config.arch_name()
                );
                checked += 1;
            }
        }
        assert!(checked > 1000, "swept only {checked} coordinates");
        println!(
            "{}: {checked} coordinates, worst relative error {worst:.2e}",
            config.arch_name()
        );
    }
}

#[test]
fn identical_runs_produce_identical_reports() {
    let spec = DatasetSpec {
        topology: Topology { d: 2, l: 3, n_labels: 20 },
        n_train: 64,
        n_test: 32,
        seed: 9,
    };
    let vocab = Vocab::new(20);
    let config = ModelConfig::Transformer(TransformerConfig {
        n_layers: 1,
        d_model: 16,
        n_heads: 2,
        mlp_expansion: 4,
        max_seq_len: 32,
        vocab_size: vocab.size(),
        init_scale: 0.02,
    });
    let cfg = TrainConfig {
        objective: Objective::TeacherForced,
        learning_rate: 1e-3,
        weight_decay: 0.01,
        adam_beta1: 0.9,
        adam_beta2: 0.999,
        adam_eps: 1e-8,
        batch_size: 16,
        max_epochs: 3,
        stop_at_train_acc: 0.999,
        seed: 5,
    };
    let run = || {
        let ds = generate(&spec).unwrap();
        let enc = |gs: &[pathstar::data::PathStarGraph]| {
            gs.iter()
                .map(|g| encode(g, &vocab).unwrap())
                .collect::<Vec<_>>()
        };
        let model = LanguageModel::<f32>::init(&config, 13).unwrap();
        let out = train(
            model,
            AdamState::new(&LanguageModel::<f32>::init(&config, 13).unwrap()),
            0,
            &enc(&ds.train),
            &enc(&ds.test),
            &cfg,
            &vocab,
            |_| {},
        )
        .unwrap();
        let mut opts = EvalOptions::new(cfg.objective, 99);
        opts.fingerprint = Some(spec.fingerprint());
        (out.curve.clone(), evaluate(&out.model, &ds.test, &vocab, &opts).unwrap())
    };
    let (curve_a, report_a) = run();
    let (curve_b, report_b) = run();
    assert_eq!(curve_a, curve_b);
    assert_eq!(report_a, report_b);
}
