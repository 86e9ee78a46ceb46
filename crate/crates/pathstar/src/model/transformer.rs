//! Decoder-only causal transformer: learned token and absolute position
//! embeddings, pre-norm blocks of fused-qkv attention and a GELU MLP,
//! a final norm, and an untied linear head.

use rand_chacha::ChaCha12Rng;

use super::{randn_param, ForwardPass, NormParams, TransformerConfig};
use crate::error::Result;
use crate::num::Real;
use crate::tape::{Tape, ValueId, LN_EPS};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Transformer<F: Real> {
    pub config: TransformerConfig,
    tok_emb: Tensor<F>,
    pos_emb: Tensor<F>,
    blocks: Vec<Block<F>>,
    ln_f: NormParams<F>,
    head_w: Tensor<F>,
    head_b: Tensor<F>,
}

#[derive(Debug, Clone)]
struct Block<F: Real> {
    ln1: NormParams<F>,
    qkv_w: Tensor<F>,
    qkv_b: Tensor<F>,
    proj_w: Tensor<F>,
    proj_b: Tensor<F>,
    ln2: NormParams<F>,
    up_w: Tensor<F>,
    up_b: Tensor<F>,
    down_w: Tensor<F>,
    down_b: Tensor<F>,
}

impl<F: Real> Transformer<F> {
    pub fn init(config: &TransformerConfig, rng: &mut ChaCha12Rng) -> Self {
        let d = config.d_model;
        let v = config.vocab_size;
        let h = config.mlp_expansion * d;
        let s = config.init_scale;
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                ln1: NormParams::unit(d),
                qkv_w: randn_param(&[d, 3 * d], s, rng),
                qkv_b: Tensor::zeros(&[3 * d]).param(),
                proj_w: randn_param(&[d, d], s, rng),
                proj_b: Tensor::zeros(&[d]).param(),
                ln2: NormParams::unit(d),
                up_w: randn_param(&[d, h], s, rng),
                up_b: Tensor::zeros(&[h]).param(),
                down_w: randn_param(&[h, d], s, rng),
                down_b: Tensor::zeros(&[d]).param(),
            })
            .collect();
        Transformer {
            config: *config,
            tok_emb: randn_param(&[v, d], s, rng),
            pos_emb: randn_param(&[config.max_seq_len, d], s, rng),
            blocks,
            ln_f: NormParams::unit(d),
            head_w: randn_param(&[d, v], s, rng),
            head_b: Tensor::zeros(&[v]).param(),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out: Vec<(String, &Tensor<F>)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.ln1.gain"), &b.ln1.gain));
            out.push((format!("blocks.{i}.ln1.shift"), &b.ln1.shift));
            out.push((format!("blocks.{i}.qkv.w"), &b.qkv_w));
            out.push((format!("blocks.{i}.qkv.b"), &b.qkv_b));
            out.push((format!("blocks.{i}.proj.w"), &b.proj_w));
            out.push((format!("blocks.{i}.proj.b"), &b.proj_b));
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
        let mut out: Vec<(String, &mut Tensor<F>)> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("pos_emb".into(), &mut self.pos_emb),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("blocks.{i}.ln1.gain"), &mut b.ln1.gain));
            out.push((format!("blocks.{i}.ln1.shift"), &mut b.ln1.shift));
            out.push((format!("blocks.{i}.qkv.w"), &mut b.qkv_w));
            out.push((format!("blocks.{i}.qkv.b"), &mut b.qkv_b));
            out.push((format!("blocks.{i}.proj.w"), &mut b.proj_w));
            out.push((format!("blocks.{i}.proj.b"), &mut b.proj_b));
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
        let pos_emb = leaf(tape, &self.pos_emb);
        let mut x = tape.embedding(tok_emb, ids, b, t)?;
        x = tape.position_add(x, pos_emb)?;

        for blk in &self.blocks {
            let ln1_g = leaf(tape, &blk.ln1.gain);
            let ln1_s = leaf(tape, &blk.ln1.shift);
            let qkv_w = leaf(tape, &blk.qkv_w);
            let qkv_b = leaf(tape, &blk.qkv_b);
            let proj_w = leaf(tape, &blk.proj_w);
            let proj_b = leaf(tape, &blk.proj_b);
            let ln2_g = leaf(tape, &blk.ln2.gain);
            let ln2_s = leaf(tape, &blk.ln2.shift);
            let up_w = leaf(tape, &blk.up_w);
            let up_b = leaf(tape, &blk.up_b);
            let down_w = leaf(tape, &blk.down_w);
            let down_b = leaf(tape, &blk.down_b);

            let h = tape.layer_norm(x, ln1_g, ln1_s, eps)?;
            let qkv = tape.linear(h, qkv_w, qkv_b)?;
            let att = tape.causal_attention(qkv, self.config.n_heads)?;
            let att = tape.linear(att, proj_w, proj_b)?;
            x = tape.add(x, att)?;

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
