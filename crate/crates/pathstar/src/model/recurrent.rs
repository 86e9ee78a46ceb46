//! Minimal gated-linear recurrent stack: each block layer-norms its input,
//! computes a sigmoid gate and a linear candidate per position, folds them
//! along time with an elementwise gated state update, and follows with the
//! same GELU MLP as the transformer. No positional table — order is carried
//! by the recurrence itself.

use rand_chacha::ChaCha12Rng;

use super::{randn_param, ForwardPass, NormParams, RecurrentConfig, DEFAULT_INIT_SCALE};
use crate::error::Result;
use crate::num::Real;
use crate::tape::{Tape, ValueId, LN_EPS};
use crate::tensor::Tensor;

const MLP_EXPANSION: usize = 4;

#[derive(Debug, Clone)]
pub struct Recurrent<F: Real> {
    pub config: RecurrentConfig,
    tok_emb: Tensor<F>,
    blocks: Vec<Block<F>>,
    ln_f: NormParams<F>,
    head_w: Tensor<F>,
    head_b: Tensor<F>,
}

#[derive(Debug, Clone)]
struct Block<F: Real> {
    ln1: NormParams<F>,
    gate_w: Tensor<F>,
    gate_b: Tensor<F>,
    cand_w: Tensor<F>,
    cand_b: Tensor<F>,
    ln2: NormParams<F>,
    up_w: Tensor<F>,
    up_b: Tensor<F>,
    down_w: Tensor<F>,
    down_b: Tensor<F>,
}

impl<F: Real> Recurrent<F> {
    pub fn init(config: &RecurrentConfig, rng: &mut ChaCha12Rng) -> Self {
        let d = config.d_model;
        let v = config.vocab_size;
        let h = MLP_EXPANSION * d;
        let s = DEFAULT_INIT_SCALE;
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                ln1: NormParams::unit(d),
                gate_w: randn_param(&[d, d], s, rng),
                gate_b: Tensor::zeros(&[d]).param(),
                cand_w: randn_param(&[d, d], s, rng),
                cand_b: Tensor::zeros(&[d]).param(),
                ln2: NormParams::unit(d),
                up_w: randn_param(&[d, h], s, rng),
                up_b: Tensor::zeros(&[h]).param(),
                down_w: randn_param(&[h, d], s, rng),
                down_b: Tensor::zeros(&[d]).param(),
            })
            .collect();
        Recurrent {
            config: *config,
            tok_emb: randn_param(&[v, d], s, rng),
            blocks,
            ln_f: NormParams::unit(d),
            head_w: randn_param(&[d, v], s, rng),
            head_b: Tensor::zeros(&[v]).param(),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out: Vec<(String, &Tensor<F>)> = vec![("tok_emb".into(), &self.tok_emb)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.ln1.gain"), &b.ln1.gain));
            out.push((format!("blocks.{i}.ln1.shift"), &b.ln1.shift));
            out.push((format!("blocks.{i}.gate.w"), &b.gate_w));
            out.push((format!("blocks.{i}.gate.b"), &b.gate_b));
            out.push((format!("blocks.{i}.cand.w"), &b.cand_w));
            out.push((format!("blocks.{i}.cand.b"), &b.cand_b));
            out.push((format!("blocks.{i}.ln2.gain"), &b.ln2.gain));
            out.push((format!("blocks.{i}.ln2.shift"), &b.ln2.shift));
            out.push((format!("blocks.{i}.mlp_up.w"), &b.up_w));
            out.push((format!("blocks.{i}.mlp_up.b"), &b.up_b));
            out.push((format!("blocks.{i}.mlp_down.w"), &b.down_w));
            out.push((format!("blocks.{i}.mlp_down.b"), &b.down_b));
        }
        out.push(("ln_f.gain".into(), &self.ln_f.gain));
        out.push(("ln_f.shift".into(), &self.ln_f.shift));
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out: Vec<(String, &mut Tensor<F>)> = vec![("tok_emb".into(), &mut self.tok_emb)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("blocks.{i}.ln1.gain"), &mut b.ln1.gain));
            out.push((format!("blocks.{i}.ln1.shift"), &mut b.ln1.shift));
            out.push((format!("blocks.{i}.gate.w"), &mut b.gate_w));
            out.push((format!("blocks.{i}.gate.b"), &mut b.gate_b));
            out.push((format!("blocks.{i}.cand.w"), &mut b.cand_w));
            out.push((format!("blocks.{i}.cand.b"), &mut b.cand_b));
            out.push((format!("blocks.{i}.ln2.gain"), &mut b.ln2.gain));
            out.push((format!("blocks.{i}.ln2.shift"), &mut b.ln2.shift));
            out.push((format!("blocks.{i}.mlp_up.w"), &mut b.up_w));
            out.push((format!("blocks.{i}.mlp_up.b"), &mut b.up_b));
            out.push((format!("blocks.{i}.mlp_down.w"), &mut b.down_w));
            out.push((format!("blocks.{i}.mlp_down.b"), &mut b.down_b));
        }
        out.push(("ln_f.gain".into(), &mut self.ln_f.gain));
        out.push(("ln_f.shift".into(), &mut self.ln_f.shift));
        out.push(("head.w".into(), &mut self.head_w));
        out.push(("head.b".into(), &mut self.head_b));
        out
    }

    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        ids: &[u16],
        b: usize,
        t: usize,
    ) -> Result<ForwardPass> {
        let eps = F::from_f64(LN_EPS);
        let mut leaves = Vec::new();
        let mut leaf = |tape: &mut Tape<F>, tensor: &Tensor<F>| -> ValueId {
            let id = tape.leaf(tensor);
            leaves.push(id);
            id
        };

        let tok_emb = leaf(tape, &self.tok_emb);
        let mut x = tape.embedding(tok_emb, ids, b, t)?;

        for blk in &self.blocks {
            let ln1_g = leaf(tape, &blk.ln1.gain);
            let ln1_s = leaf(tape, &blk.ln1.shift);
            let gate_w = leaf(tape, &blk.gate_w);
            let gate_b = leaf(tape, &blk.gate_b);
            let cand_w = leaf(tape, &blk.cand_w);
            let cand_b = leaf(tape, &blk.cand_b);
            let ln2_g = leaf(tape, &blk.ln2.gain);
            let ln2_s = leaf(tape, &blk.ln2.shift);
            let up_w = leaf(tape, &blk.up_w);
            let up_b = leaf(tape, &blk.up_b);
            let down_w = leaf(tape, &blk.down_w);
            let down_b = leaf(tape, &blk.down_b);

            let h = tape.layer_norm(x, ln1_g, ln1_s, eps)?;
            let zp = tape.linear(h, gate_w, gate_b)?;
            let z = tape.sigmoid(zp);
            let c = tape.linear(h, cand_w, cand_b)?;
            let r = tape.gated_recurrence(z, c)?;
            x = tape.add(x, r)?;

            let h2 = tape.layer_norm(x, ln2_g, ln2_s, eps)?;
            let up = tape.linear(h2, up_w, up_b)?;
            let act = tape.gelu(up);
            let down = tape.linear(act, down_w, down_b)?;
            x = tape.add(x, down)?;
        }

        let lnf_g = leaf(tape, &self.ln_f.gain);
        let lnf_s = leaf(tape, &self.ln_f.shift);
        let head_w = leaf(tape, &self.head_w);
        let head_b = leaf(tape, &self.head_b);
        let h = tape.layer_norm(x, lnf_g, lnf_s, eps)?;
        let logits = tape.linear(h, head_w, head_b)?;

        // leaf creation order above matches named_tensors order exactly
        Ok(ForwardPass {
            logits,
            param_leaves: leaves,
        })
    }
}
