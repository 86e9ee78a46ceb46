//! The four subcommands. Each owns its output directory, writes every
//! artifact it promises, and finishes by dropping a manifest that echoes
//! the complete effective configuration.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use pathstar::checkpoint::{self, Checkpoint};
use pathstar::data;
use pathstar::error::{Error, Result};
use pathstar::eval::{self, EvalOptions};
use pathstar::model::LanguageModel;
use pathstar::rng::{stream, Domain};
use pathstar::tokenizer::{self, TokenSequence, Vocab};
use pathstar::train::{self, AdamState, Objective, TrainingCurve};

use crate::config::Resolved;
use crate::manifest::{self, RunManifest};

const TRAIN_FILE: &str = "train.txt";
const TEST_FILE: &str = "test.txt";
const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
const BEST_FILE: &str = "best.ckpt";
const CURVE_FILE: &str = "curve.csv";
const BASE_CURVE_FILE: &str = "curve-base.csv";
const REPORT_FILE: &str = "report.json";

fn manifest_skeleton(command: &str, resolved: &Resolved, dataset_fingerprint: String) -> RunManifest {
    RunManifest {
        command: command.to_string(),
        version: manifest::version_string(),
        config_fingerprint: resolved.config.fingerprint(),
        dataset_fingerprint,
        escalated: false,
        outcome: "ok".to_string(),
        last_epoch: None,
        wall_clock_seconds: 0.0,
        artifacts: BTreeMap::new(),
        config: resolved.config.clone(),
    }
}

// ── generate ────────────────────────────────────────────────────────────

pub fn cmd_generate(resolved: &Resolved) -> Result<()> {
    let started = Instant::now();
    let spec = resolved.config.dataset.spec()?;
    std::fs::create_dir_all(&resolved.out_dir)?;

    let dataset = data::generate(&spec)?;
    data::write_lines(&resolved.out_dir.join(TRAIN_FILE), &dataset.train)?;
    data::write_lines(&resolved.out_dir.join(TEST_FILE), &dataset.test)?;

    let mut m = manifest_skeleton("generate", resolved, spec.fingerprint());
    m.artifacts.insert("train".into(), TRAIN_FILE.into());
    m.artifacts.insert("test".into(), TEST_FILE.into());
    m.wall_clock_seconds = started.elapsed().as_secs_f64();
    manifest::write(&resolved.out_dir, &m)?;

    println!(
        "generated {} train + {} test instances of G_{{{},{}}} (N={}) in {}",
        dataset.train.len(),
        dataset.test.len(),
        spec.topology.d,
        spec.topology.l,
        spec.topology.n_labels,
        resolved.out_dir.display()
    );
    println!("dataset fingerprint: {}", spec.fingerprint());
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────────

pub struct TrainFlags {
    pub data: Option<PathBuf>,
    pub resume: bool,
    pub dump_first_batch: bool,
    pub allow_fingerprint_mismatch: bool,
}

/// Loads the data directory's token sequences, checking that the data on
/// disk is the data the config describes (via the generation manifest when
/// present, else by trusting the config's own spec).
fn load_sequences(
    data_dir: &Path,
    resolved: &Resolved,
    allow_mismatch: bool,
) -> Result<(Vec<TokenSequence>, Vec<TokenSequence>, Vocab, String)> {
    let spec = resolved.config.dataset.spec()?;
    let expected = spec.fingerprint();
    let found = match manifest::read(data_dir) {
        Ok(m) => m.dataset_fingerprint,
        Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => expected.clone(),
        Err(e) => return Err(e),
    };
    if found != expected {
        if allow_mismatch {
            eprintln!(
                "warning: data in {} has fingerprint {found}, config describes {expected}; \
                 proceeding because --allow-fingerprint-mismatch is set",
                data_dir.display()
            );
        } else {
            return Err(Error::FingerprintMismatch {
                trained_on: expected,
                found,
            });
        }
    }

    let vocab = Vocab::new(spec.topology.n_labels);
    let train_graphs = data::read_lines(&data_dir.join(TRAIN_FILE), &spec.topology)?;
    let test_graphs = data::read_lines(&data_dir.join(TEST_FILE), &spec.topology)?;
    let train_seqs = train_graphs
        .iter()
        .map(|g| tokenizer::encode(g, &vocab))
        .collect::<Result<Vec<_>>>()?;
    let test_seqs = test_graphs
        .iter()
        .map(|g| tokenizer::encode(g, &vocab))
        .collect::<Result<Vec<_>>>()?;
    Ok((train_seqs, test_seqs, vocab, found))
}

/// Prints the first optimization batch of epoch 1 as JSON and exits, so the
/// exact tensors each objective trains on can be inspected from the shell.
fn dump_first_batch(
    train_seqs: &[TokenSequence],
    objective: Objective,
    vocab: &Vocab,
    batch_size: usize,
    seed: u64,
) -> Result<()> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..train_seqs.len()).collect();
    order.shuffle(&mut stream(seed, Domain::Shuffle, 1));
    let chunk: Vec<&TokenSequence> = order
        .iter()
        .take(batch_size)
        .map(|&i| &train_seqs[i])
        .collect();
    let batch = train::build_batch(&chunk, objective, vocab)?;
    let rows = |flat: &[u16]| -> Vec<Vec<u16>> {
        flat.chunks(batch.t).map(|r| r.to_vec()).collect()
    };
    let payload = serde_json::json!({
        "objective": objective.name(),
        "b": batch.b,
        "t": batch.t,
        "response_start": batch.response_start,
        "inputs": rows(&batch.inputs),
        "targets": rows(&batch.targets),
        "mask": batch.mask.chunks(batch.t).map(|r| r.to_vec()).collect::<Vec<_>>(),
    });
    println!("{payload}");
    Ok(())
}

pub fn cmd_train(resolved: &Resolved, flags: &TrainFlags) -> Result<()> {
    let started = Instant::now();
    let cfg = &resolved.config;
    let data_dir = flags.data.clone().unwrap_or_else(|| resolved.out_dir.clone());
    std::fs::create_dir_all(&resolved.out_dir)?;

    let (train_seqs, test_seqs, vocab, data_fingerprint) =
        load_sequences(&data_dir, resolved, flags.allow_fingerprint_mismatch)?;

    if flags.dump_first_batch {
        return dump_first_batch(
            &train_seqs,
            cfg.train.objective,
            &vocab,
            cfg.train.batch_size,
            cfg.train.seed,
        );
    }

    // Fresh start or resume from this directory's checkpoint.
    let ckpt_path = resolved.out_dir.join(CHECKPOINT_FILE);
    let (model, opt, start_epoch, prior_curve) = if flags.resume {
        let ckpt = checkpoint::load(&ckpt_path)?;
        if ckpt.dataset_fingerprint != data_fingerprint && !flags.allow_fingerprint_mismatch {
            return Err(Error::FingerprintMismatch {
                trained_on: ckpt.dataset_fingerprint,
                found: data_fingerprint,
            });
        }
        let opt = ckpt.opt.ok_or_else(|| {
            Error::Integrity("checkpoint has no optimizer state; cannot resume".into())
        })?;
        let prior = TrainingCurve::read_csv(&resolved.out_dir.join(CURVE_FILE))
            .unwrap_or_default();
        println!("resuming from epoch {}", ckpt.epoch);
        (ckpt.model, opt, ckpt.epoch, prior)
    } else {
        let model = LanguageModel::<f32>::init(&cfg.model_config()?, cfg.train.seed)?;
        let opt = AdamState::new(&model);
        (model, opt, 0, TrainingCurve::default())
    };

    let remaining = cfg.train.max_epochs.saturating_sub(start_epoch);
    if remaining == 0 {
        println!(
            "checkpoint already at epoch {start_epoch} of {}; nothing to train",
            cfg.train.max_epochs
        );
        return Ok(());
    }
    let mut run_cfg = cfg.train.clone();
    run_cfg.max_epochs = remaining;

    let print_epoch = |r: &pathstar::train::EpochRecord| {
        println!(
            "epoch {:>4}  loss {:<10.6} train_acc {:.4}",
            r.epoch, r.train_loss, r.train_acc
        );
        let _ = std::io::stdout().flush();
    };

    let mut m = manifest_skeleton("train", resolved, data_fingerprint.clone());
    let outcome = match train::train(
        model,
        opt,
        start_epoch,
        &train_seqs,
        &test_seqs,
        &run_cfg,
        &vocab,
        print_epoch,
    ) {
        Ok(o) => o,
        Err(e @ Error::Diverged { .. }) => {
            m.outcome = "diverged".into();
            m.wall_clock_seconds = started.elapsed().as_secs_f64();
            manifest::write(&resolved.out_dir, &m)?;
            return Err(e);
        }
        Err(e) => return Err(e),
    };

    // One-shot escalation: only for fresh runs that exhausted their epoch
    // budget below the accuracy stop, and only when the config asks for it.
    let (outcome, escalated, base_curve) = if !outcome.stopped_early && !flags.resume {
        match cfg.escalated_model_config()? {
            Some(big) => {
                println!(
                    "train accuracy {:.4} below stop threshold after {} epochs; \
                     retrying once at the escalated size",
                    outcome.curve.records.last().map(|r| r.train_acc).unwrap_or(0.0),
                    outcome.last_epoch,
                );
                let model = LanguageModel::<f32>::init(&big, cfg.train.seed)?;
                let opt = AdamState::new(&model);
                let escalated_outcome = match train::train(
                    model,
                    opt,
                    0,
                    &train_seqs,
                    &test_seqs,
                    &cfg.train,
                    &vocab,
                    print_epoch,
                ) {
                    Ok(o) => o,
                    Err(e @ Error::Diverged { .. }) => {
                        m.outcome = "diverged".into();
                        m.escalated = true;
                        m.wall_clock_seconds = started.elapsed().as_secs_f64();
                        manifest::write(&resolved.out_dir, &m)?;
                        return Err(e);
                    }
                    Err(e) => return Err(e),
                };
                (escalated_outcome, true, Some(outcome.curve))
            }
            None => (outcome, false, None),
        }
    } else {
        (outcome, false, None)
    };

    // Persist: final + best checkpoints, merged curve, manifest.
    checkpoint::save(
        &ckpt_path,
        &Checkpoint {
            model: outcome.model,
            objective: cfg.train.objective,
            dataset_fingerprint: data_fingerprint.clone(),
            epoch: outcome.last_epoch,
            opt: Some(outcome.opt_state),
        },
    )?;
    checkpoint::save(
        &resolved.out_dir.join(BEST_FILE),
        &Checkpoint {
            model: outcome.best,
            objective: cfg.train.objective,
            dataset_fingerprint: data_fingerprint.clone(),
            epoch: outcome.best_epoch,
            opt: None,
        },
    )?;

    let mut merged = prior_curve;
    merged.records.extend(outcome.curve.records.iter().cloned());
    merged.write_csv(&resolved.out_dir.join(CURVE_FILE))?;
    if let Some(base) = &base_curve {
        base.write_csv(&resolved.out_dir.join(BASE_CURVE_FILE))?;
        m.artifacts.insert("base_curve".into(), BASE_CURVE_FILE.into());
    }

    m.escalated = escalated;
    m.outcome = if outcome.stopped_early {
        "stopped_early".into()
    } else {
        "epoch_budget_exhausted".into()
    };
    m.last_epoch = Some(outcome.last_epoch);
    m.artifacts.insert("checkpoint".into(), CHECKPOINT_FILE.into());
    m.artifacts.insert("best_checkpoint".into(), BEST_FILE.into());
    m.artifacts.insert("curve".into(), CURVE_FILE.into());
    m.wall_clock_seconds = started.elapsed().as_secs_f64();
    manifest::write(&resolved.out_dir, &m)?;

    let last = merged.records.last().expect("at least one epoch ran");
    println!(
        "done: epoch {} train_acc {:.4} ({}) in {:.1}s",
        last.epoch,
        last.train_acc,
        m.outcome,
        m.wall_clock_seconds
    );
    Ok(())
}

// ── eval ────────────────────────────────────────────────────────────────

pub struct EvalFlags {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub allow_fingerprint_mismatch: bool,
    pub temperature: Option<f64>,
    pub n_eval: Option<usize>,
}

pub fn cmd_eval(resolved: &Resolved, flags: &EvalFlags) -> Result<()> {
    let started = Instant::now();
    let cfg = &resolved.config;
    let data_dir = flags.data.clone().unwrap_or_else(|| resolved.out_dir.clone());
    let ckpt_path = flags
        .checkpoint
        .clone()
        .unwrap_or_else(|| resolved.out_dir.join(CHECKPOINT_FILE));
    std::fs::create_dir_all(&resolved.out_dir)?;

    let ckpt = checkpoint::load(&ckpt_path)?;
    let spec = cfg.dataset.spec()?;
    let data_fingerprint = match manifest::read(&data_dir) {
        Ok(m) => m.dataset_fingerprint,
        Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => spec.fingerprint(),
        Err(e) => return Err(e),
    };
    if ckpt.dataset_fingerprint != data_fingerprint {
        if flags.allow_fingerprint_mismatch {
            eprintln!(
                "warning: checkpoint was trained on dataset {}, evaluating against {}; \
                 proceeding because --allow-fingerprint-mismatch is set",
                ckpt.dataset_fingerprint, data_fingerprint
            );
        } else {
            return Err(Error::FingerprintMismatch {
                trained_on: ckpt.dataset_fingerprint,
                found: data_fingerprint,
            });
        }
    }

    let vocab = Vocab::new(spec.topology.n_labels);
    if ckpt.model.vocab_size() != vocab.size() {
        return Err(Error::Config(format!(
            "checkpoint vocabulary is {}, dataset needs {}",
            ckpt.model.vocab_size(),
            vocab.size()
        )));
    }
    let test_graphs = data::read_lines(&data_dir.join(TEST_FILE), &spec.topology)?;

    // The checkpoint knows what it was trained to produce; the objective
    // recorded there decides which optional metrics apply.
    let objective = ckpt.objective;
    let mut opts = EvalOptions::new(objective, cfg.eval.seed);
    opts.n_eval = flags.n_eval.unwrap_or(cfg.eval.n_eval);
    opts.batch_size = cfg.eval.batch_size;
    opts.fingerprint = Some(ckpt.dataset_fingerprint.clone());

    let report = eval::evaluate(&ckpt.model, &test_graphs, &vocab, &opts)?;
    let report_path = resolved.out_dir.join(REPORT_FILE);
    std::fs::write(
        &report_path,
        serde_json::to_string_pretty(&report)
            .map_err(|e| Error::Config(format!("report serialization: {e}")))?
            + "\n",
    )?;

    // Inspection-only sampling: show a few continuations at the requested
    // temperature next to the greedy one and the true path.
    if let Some(temperature) = flags.temperature {
        print_samples(&ckpt.model, &test_graphs, &vocab, temperature, cfg.eval.seed)?;
    }

    // Preserve training facts if this directory already has a manifest.
    let mut m = manifest_skeleton("eval", resolved, data_fingerprint);
    if let Ok(prev) = manifest::read(&resolved.out_dir) {
        m.escalated = prev.escalated;
        m.last_epoch = prev.last_epoch;
        for (k, v) in prev.artifacts {
            m.artifacts.insert(k, v);
        }
    }
    // Record the objective the evaluation actually used (the checkpoint's),
    // so aggregation never mislabels a row.
    m.config.train.objective = objective;
    m.artifacts.insert("report".into(), REPORT_FILE.into());
    m.wall_clock_seconds = started.elapsed().as_secs_f64();
    manifest::write(&resolved.out_dir, &m)?;

    println!(
        "evaluated {} instances with the {} checkpoint from epoch {}",
        report.n_eval,
        objective.name(),
        ckpt.epoch
    );
    println!(
        "acc_ag {:.4}  acc_cheat {:.4}  acc_first {:.4}  acc_snowball {:.4}  (chance {:.4})",
        report.acc_ag, report.acc_cheat, report.acc_first, report.acc_snowball, report.random_baseline
    );
    if let Some(v) = report.acc_teacherless {
        println!("acc_teacherless {v:.4}");
    }
    if let Some(v) = report.acc_rev {
        println!("acc_rev {v:.4}");
    }
    println!("report written to {}", report_path.display());
    Ok(())
}

fn print_samples(
    model: &LanguageModel<f32>,
    test_graphs: &[data::PathStarGraph],
    vocab: &Vocab,
    temperature: f64,
    seed: u64,
) -> Result<()> {
    let n = test_graphs.len().min(3);
    if n == 0 {
        return Ok(());
    }
    let seqs: Vec<TokenSequence> = test_graphs[..n]
        .iter()
        .map(|g| tokenizer::encode(g, vocab))
        .collect::<Result<_>>()?;
    let prefixes: Vec<&[u16]> = seqs.iter().map(|s| s.prefix()).collect();
    let steps = seqs[0].l_resp();
    let mut rng = stream(seed, Domain::Probe, u64::MAX);
    let sampled = eval::sample_decode(model, &prefixes, steps, temperature, &mut rng)?;
    let greedy = eval::greedy_decode(model, &prefixes, steps)?;
    println!("inspection samples at temperature {temperature}:");
    let fmt = |ids: &[u16]| {
        ids.iter()
            .map(|&t| vocab.describe(t))
            .collect::<Vec<_>>()
            .join(" ")
    };
    for i in 0..n {
        println!("  true    {}", fmt(seqs[i].response()));
        println!("  greedy  {}", fmt(&greedy[i]));
        println!("  sampled {}", fmt(&sampled[i]));
    }
    Ok(())
}

// ── report ──────────────────────────────────────────────────────────────

struct RunRow {
    arch: String,
    d: usize,
    l: usize,
    n_labels: usize,
    objective: String,
    report: eval::MetricsReport,
    curve: Option<TrainingCurve>,
}

pub fn cmd_report(run_dirs: &[PathBuf], out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut rows: Vec<RunRow> = Vec::new();
    let mut missing: Vec<String> = Vec::new();

    for dir in run_dirs {
        let m = match manifest::read(dir) {
            Ok(m) => m,
            Err(e) => {
                missing.push(format!("{}: {e}", dir.display()));
                continue;
            }
        };
        let report_rel = m.artifacts.get("report").cloned().unwrap_or_else(|| REPORT_FILE.into());
        let report_text = match std::fs::read_to_string(dir.join(&report_rel)) {
            Ok(t) => t,
            Err(e) => {
                missing.push(format!("{}: no evaluation report ({e})", dir.display()));
                continue;
            }
        };
        let report: eval::MetricsReport = serde_json::from_str(&report_text).map_err(|e| {
            Error::Parse {
                path: dir.join(&report_rel).display().to_string(),
                line: e.line(),
                reason: e.to_string(),
            }
        })?;
        let curve_rel = m.artifacts.get("curve").cloned().unwrap_or_else(|| CURVE_FILE.into());
        let curve = TrainingCurve::read_csv(&dir.join(&curve_rel)).ok();
        rows.push(RunRow {
            arch: m.config.model.arch.clone(),
            d: m.config.dataset.d,
            l: m.config.dataset.l,
            n_labels: m.config.dataset.n_labels,
            objective: m.config.train.objective.name().to_string(),
            report,
            curve,
        });
    }

    for note in &missing {
        eprintln!("warning: skipping {note}");
    }
    rows.sort_by(|a, b| {
        (a.d, a.l, a.n_labels, &a.objective, &a.arch)
            .cmp(&(b.d, b.l, b.n_labels, &b.objective, &b.arch))
    });

    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut summary = String::from("arch,d,l,n_labels,objective,acc_ag,acc_teacherless,acc_rev\n");
    for r in &rows {
        summary.push_str(&format!(
            "{},{},{},{},{},{:.6},{},{}\n",
            r.arch,
            r.d,
            r.l,
            r.n_labels,
            r.objective,
            r.report.acc_ag,
            opt(r.report.acc_teacherless),
            opt(r.report.acc_rev),
        ));
    }
    let summary_path = out_dir.join("summary.csv");
    std::fs::write(&summary_path, &summary)?;

    let mut long = String::from("arch,d,l,n_labels,objective,epoch,position,test_acc\n");
    for r in &rows {
        if let Some(curve) = &r.curve {
            for rec in &curve.records {
                for (i, acc) in rec.test_acc_per_token.iter().enumerate() {
                    long.push_str(&format!(
                        "{},{},{},{},{},{},{},{acc:.6}\n",
                        r.arch,
                        r.d,
                        r.l,
                        r.n_labels,
                        r.objective,
                        rec.epoch,
                        i + 1,
                    ));
                }
            }
        }
    }
    let long_path = out_dir.join("per_token.csv");
    std::fs::write(&long_path, &long)?;

    println!(
        "aggregated {} of {} runs into {} and {}",
        rows.len(),
        run_dirs.len(),
        summary_path.display(),
        long_path.display()
    );
    if !missing.is_empty() {
        println!("{} directories skipped (see warnings)", missing.len());
    }
    Ok(())
}
