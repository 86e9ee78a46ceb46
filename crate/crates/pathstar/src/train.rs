//! The three training regimes and the loop that runs them. Teacher-forced
//! training feeds the ground-truth response shifted right; teacherless
//! training blanks every revealed response token with `$` while keeping the
//! original targets; reversed training flips the response in both inputs
//! and targets. Only response positions contribute to the loss.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::argmax_row;
use crate::model::LanguageModel;
use crate::rng::{stream, Domain};
use crate::tape::Tape;
use crate::tokenizer::{reverse_response, teacherless_inputs, TokenSequence, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    TeacherForced,
    Teacherless,
    Reversed,
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::TeacherForced => "teacher_forced",
            Objective::Teacherless => "teacherless",
            Objective::Reversed => "reversed",
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher_forced" => Ok(Objective::TeacherForced),
            "teacherless" => Ok(Objective::Teacherless),
            "reversed" => Ok(Objective::Reversed),
            other => Err(Error::Config(format!(
                "unknown objective '{other}' (expected teacher_forced, teacherless, or reversed)"
            ))),
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub max_epochs: u32,
    #[serde(default = "default_stop_at")]
    pub stop_at_train_acc: f64,
    pub seed: u64,
}

fn default_learning_rate() -> f64 {
    5e-4
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_batch_size() -> usize {
    128
}
fn default_stop_at() -> f64 {
    0.999
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if self.adam_eps <= 0.0 {
            return Err(Error::Config("adam epsilon must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.stop_at_train_acc > 0.0 && self.stop_at_train_acc <= 1.0) {
            return Err(Error::Config(
                "stop_at_train_acc must lie in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

// ── batches ─────────────────────────────────────────────────────────────

/// Shifted next-token grids: position j of `inputs` predicts `targets[j]`,
/// and `mask[j]` is true exactly where that prediction is a response token.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Vec<u16>,
    pub targets: Vec<u16>,
    pub mask: Vec<bool>,
    pub b: usize,
    pub t: usize,
    /// Response start of the underlying unshifted sequences.
    pub response_start: usize,
}

pub fn build_batch(
    seqs: &[&TokenSequence],
    objective: Objective,
    vocab: &Vocab,
) -> Result<Batch> {
    let first = *seqs.first().ok_or(Error::EmptyBatch)?;
    let len = first.len();
    let rs = first.response_start;
    for seq in seqs {
        if seq.len() != len {
            return Err(Error::MixedLengths(len, seq.len()));
        }
        if seq.response_start != rs {
            return Err(Error::MixedLengths(rs, seq.response_start));
        }
    }
    let b = seqs.len();
    let t = len - 1;
    let mut inputs = Vec::with_capacity(b * t);
    let mut targets = Vec::with_capacity(b * t);
    for seq in seqs {
        let (in_ids, tgt_ids): (Vec<u16>, Vec<u16>) = match objective {
            Objective::TeacherForced => (seq.ids.clone(), seq.ids.clone()),
            Objective::Teacherless => (teacherless_inputs(seq, vocab), seq.ids.clone()),
            Objective::Reversed => {
                let rev = reverse_response(seq).ids;
                (rev.clone(), rev)
            }
        };
        inputs.extend_from_slice(&in_ids[..t]);
        targets.extend_from_slice(&tgt_ids[1..]);
    }
    let row_mask: Vec<bool> = (0..t).map(|j| j + 1 >= rs).collect();
    let mask: Vec<bool> = std::iter::repeat(row_mask).take(b).flatten().collect();
    Ok(Batch {
        inputs,
        targets,
        mask,
        b,
        t,
        response_start: rs,
    })
}

// ── optimizer ───────────────────────────────────────────────────────────

/// AdamW moments, one buffer per parameter tensor in `named_tensors` order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(model: &LanguageModel<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = model
            .named_tensors()
            .iter()
            .map(|(_, t)| vec![0.0; t.numel()])
            .collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One decoupled-decay Adam update from the gradients accumulated in the
/// parameter tensors: weights first shrink by `lr * wd`, then move along
/// the bias-corrected moment estimate. Gradients are consumed.
pub fn adamw_step(
    model: &mut LanguageModel<f32>,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    state.step += 1;
    let lr = cfg.learning_rate as f32;
    let wd = cfg.weight_decay as f32;
    let b1 = cfg.adam_beta1 as f32;
    let b2 = cfg.adam_beta2 as f32;
    let eps = cfg.adam_eps as f32;
    let bc1 = 1.0 - (cfg.adam_beta1).powi(state.step as i32) as f32;
    let bc2 = 1.0 - (cfg.adam_beta2).powi(state.step as i32) as f32;

    let tensors = model.named_tensors_mut();
    if tensors.len() != state.m.len() {
        return Err(Error::Integrity(format!(
            "optimizer tracks {} tensors, model has {}",
            state.m.len(),
            tensors.len()
        )));
    }
    for (i, (name, tensor)) in tensors.into_iter().enumerate() {
        let grad = tensor.grad.take().ok_or_else(|| {
            Error::Integrity(format!("parameter {name} has no gradient to apply"))
        })?;
        if grad.len() != state.m[i].len() {
            return Err(Error::Integrity(format!(
                "optimizer state for {name} has drifted in shape"
            )));
        }
        let decay = 1.0 - lr * wd;
        for (((w, &g), m), v) in tensor
            .data
            .iter_mut()
            .zip(&grad)
            .zip(&mut state.m[i])
            .zip(&mut state.v[i])
        {
            *w *= decay;
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

// ── training loop ───────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: u32,
    pub train_loss: f64,
    pub train_acc: f64,
    /// Test next-token accuracy per response position, under the
    /// objective's own conditioning.
    pub test_acc_per_token: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingCurve {
    pub records: Vec<EpochRecord>,
}

impl TrainingCurve {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let l_resp = self.records.first().map_or(0, |r| r.test_acc_per_token.len());
        write!(f, "epoch,train_loss,train_acc")?;
        for i in 1..=l_resp {
            write!(f, ",test_acc_token_{i}")?;
        }
        writeln!(f)?;
        for r in &self.records {
            write!(f, "{},{},{}", r.epoch, r.train_loss, r.train_acc)?;
            for a in &r.test_acc_per_token {
                write!(f, ",{a}")?;
            }
            writeln!(f)?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let parse_err = |line: usize, reason: String| Error::Parse {
            path: path.display().to_string(),
            line,
            reason,
        };
        let f = BufReader::new(std::fs::File::open(path)?);
        let mut records = Vec::new();
        for (idx, line) in f.lines().enumerate() {
            let line = line?;
            if idx == 0 {
                if !line.starts_with("epoch,train_loss,train_acc") {
                    return Err(parse_err(1, "not a training curve header".into()));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() < 3 {
                return Err(parse_err(idx + 1, "need epoch, loss, and accuracy".into()));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| parse_err(idx + 1, format!("bad number '{s}'")))
            };
            records.push(EpochRecord {
                epoch: fields[0]
                    .parse()
                    .map_err(|_| parse_err(idx + 1, format!("bad epoch '{}'", fields[0])))?,
                train_loss: num(fields[1])?,
                train_acc: num(fields[2])?,
                test_acc_per_token: fields[3..]
                    .iter()
                    .map(|s| num(s))
                    .collect::<Result<Vec<f64>>>()?,
            });
        }
        Ok(TrainingCurve { records })
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters as of the last epoch run.
    pub model: LanguageModel<f32>,
    /// Snapshot of the epoch with the highest train accuracy.
    pub best: LanguageModel<f32>,
    pub best_epoch: u32,
    pub curve: TrainingCurve,
    pub opt_state: AdamState,
    /// Absolute number of the last epoch run (continues across resumes).
    pub last_epoch: u32,
    /// True when the train-accuracy stop fired before max_epochs.
    pub stopped_early: bool,
}

/// Runs up to `cfg.max_epochs` additional epochs. Each epoch reshuffles the
/// train set from (seed, epoch), sweeps it in batches, and evaluates
/// per-position test accuracy. Crossing `stop_at_train_acc` during a sweep
/// triggers a clean confirmation pass over the whole train set with the
/// post-update parameters; only a confirmed crossing stops training.
///
/// `start_epoch` is 0 for fresh runs; resumed runs pass the last completed
/// epoch so numbering continues. `on_epoch` fires once per completed epoch
/// with its freshly recorded row.
pub fn train(
    mut model: LanguageModel<f32>,
    mut opt_state: AdamState,
    start_epoch: u32,
    train_seqs: &[TokenSequence],
    test_seqs: &[TokenSequence],
    cfg: &TrainConfig,
    vocab: &Vocab,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_seqs.is_empty() {
        return Err(Error::EmptyBatch);
    }

    let mut best = model.clone();
    let mut best_epoch = start_epoch;
    let mut best_acc = -1.0f64;
    let mut curve = TrainingCurve::default();
    let mut stopped_early = false;
    let mut last_epoch = start_epoch;

    for epoch in start_epoch + 1..=start_epoch + cfg.max_epochs {
        let mut order: Vec<usize> = (0..train_seqs.len()).collect();
        order.shuffle(&mut stream(cfg.seed, Domain::Shuffle, epoch as u64));

        let mut loss_sum = 0.0f64;
        let mut loss_rows = 0usize;
        let mut exact = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch_seqs: Vec<&TokenSequence> =
                chunk.iter().map(|&i| &train_seqs[i]).collect();
            let batch = build_batch(&batch_seqs, cfg.objective, vocab)?;

            let mut tape = Tape::<f32>::new();
            let pass = model.forward(&mut tape, &batch.inputs, batch.b, batch.t)?;
            let loss = tape.masked_cross_entropy(pass.logits, &batch.targets, &batch.mask)?;
            let loss_val = tape.scalar(loss) as f64;
            if !loss_val.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    loss: loss_val,
                });
            }
            loss_sum += loss_val * batch.b as f64;
            loss_rows += batch.b;
            exact += exact_matches(&tape, &pass, &batch);

            tape.backward(loss)?;
            model.zero_grads();
            model.accumulate_grads(&tape, &pass);
            adamw_step(&mut model, &mut opt_state, cfg)?;
        }

        let mut train_acc = exact as f64 / train_seqs.len() as f64;
        let train_loss = loss_sum / loss_rows as f64;
        last_epoch = epoch;

        let mut stop_now = false;
        if train_acc >= cfg.stop_at_train_acc {
            // measured during the sweep, so parameters moved under it;
            // confirm against the final parameters before stopping
            let confirmed =
                exact_match_accuracy(&model, train_seqs, cfg.objective, vocab, cfg.batch_size)?;
            train_acc = confirmed;
            if confirmed >= cfg.stop_at_train_acc {
                stop_now = true;
            }
        }

        let test_acc_per_token = if test_seqs.is_empty() {
            Vec::new()
        } else {
            crate::eval::per_token_accuracy(
                &model,
                test_seqs,
                cfg.objective,
                vocab,
                cfg.batch_size,
            )?
        };

        curve.records.push(EpochRecord {
            epoch,
            train_loss,
            train_acc,
            test_acc_per_token,
        });
        on_epoch(curve.records.last().unwrap());

        if train_acc > best_acc {
            best_acc = train_acc;
            best = model.clone();
            best_epoch = epoch;
        }
        if stop_now {
            stopped_early = true;
            break;
        }
    }

    Ok(TrainOutcome {
        model,
        best,
        best_epoch,
        curve,
        opt_state,
        last_epoch,
        stopped_early,
    })
}

/// Exact-match rows in a batch whose forward pass is already on the tape.
fn exact_matches(tape: &Tape<f32>, pass: &crate::model::ForwardPass, batch: &Batch) -> usize {
    let v = *tape.shape(pass.logits).last().unwrap();
    let logits = tape.value(pass.logits);
    let mut exact = 0;
    for row in 0..batch.b {
        let all = (0..batch.t)
            .filter(|&j| batch.mask[row * batch.t + j])
            .all(|j| {
                let pos = row * batch.t + j;
                argmax_row(&logits[pos * v..(pos + 1) * v]) == batch.targets[pos]
            });
        if all {
            exact += 1;
        }
    }
    exact
}

/// Teacher-forced exact-match accuracy of `model` on `seqs` under the
/// objective's own input convention, batched, without touching gradients.
pub fn exact_match_accuracy(
    model: &LanguageModel<f32>,
    seqs: &[TokenSequence],
    objective: Objective,
    vocab: &Vocab,
    batch_size: usize,
) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut exact = 0usize;
    for chunk in seqs.chunks(batch_size) {
        let refs: Vec<&TokenSequence> = chunk.iter().collect();
        let batch = build_batch(&refs, objective, vocab)?;
        let mut tape = Tape::<f32>::new();
        let pass = model.forward(&mut tape, &batch.inputs, batch.b, batch.t)?;
        exact += exact_matches(&tape, &pass, &batch);
    }
    Ok(exact as f64 / seqs.len() as f64)
}
