//! Reverse-mode autodiff on a flat tape. Ops append nodes in topological
//! order; `backward` sweeps the tape in reverse, accumulating gradients into
//! per-node buffers that callers pull into their parameter tensors.
//!
//! The op set is exactly what the models need: matmul, a fused linear
//! (matmul + bias), the pointwise nonlinearities, softmax, layer norm,
//! embedding lookup, fused causal attention, a fused gated recurrence, and
//! masked cross-entropy. Multiplications against transposed operands read
//! them through strides rather than materializing copies.

use crate::error::{Error, Result};
use crate::num::Real;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

const GELU_K: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_C: f64 = 0.044715;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(u32);

impl ValueId {
    #[inline]
    fn idx(self) -> usize {
        self.0 as usize
    }
}

enum Op<F: Real> {
    Leaf,
    Matmul {
        a: ValueId,
        b: ValueId,
    },
    Linear {
        x: ValueId,
        w: ValueId,
        bias: ValueId,
    },
    Add {
        a: ValueId,
        b: ValueId,
    },
    Mul {
        a: ValueId,
        b: ValueId,
    },
    AddBias {
        x: ValueId,
        bias: ValueId,
    },
    Scale {
        x: ValueId,
        c: F,
    },
    Gelu {
        x: ValueId,
    },
    Sigmoid {
        x: ValueId,
    },
    Softmax {
        x: ValueId,
    },
    LayerNorm {
        x: ValueId,
        gain: ValueId,
        shift: ValueId,
        eps: F,
    },
    Embedding {
        table: ValueId,
        ids: Vec<u16>,
    },
    PositionAdd {
        x: ValueId,
        table: ValueId,
    },
    CausalAttention {
        qkv: ValueId,
        n_heads: usize,
        probs: Vec<F>,
    },
    GatedRecurrence {
        gate: ValueId,
        cand: ValueId,
    },
    MaskedCrossEntropy {
        logits: ValueId,
        targets: Vec<u16>,
        mask: Vec<bool>,
        probs: Vec<F>,
    },
    Sum {
        x: ValueId,
    },
}

struct Node<F: Real> {
    shape: Vec<usize>,
    value: Vec<F>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
    grads: Vec<Vec<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::with_capacity(128),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.nodes[id.idx()].shape
    }

    pub fn value(&self, id: ValueId) -> &[F] {
        &self.nodes[id.idx()].value
    }

    /// Scalar convenience for loss nodes.
    pub fn scalar(&self, id: ValueId) -> F {
        debug_assert_eq!(self.nodes[id.idx()].value.len(), 1);
        self.nodes[id.idx()].value[0]
    }

    /// Gradient of the last `backward` call w.r.t. `id`, if one was computed.
    pub fn grad(&self, id: ValueId) -> Option<&[F]> {
        self.grads.get(id.idx()).filter(|g| !g.is_empty()).map(|g| g.as_slice())
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op<F>, needs_grad: bool) -> ValueId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let id = ValueId(self.nodes.len() as u32);
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        id
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.idx()].needs_grad
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    pub fn leaf(&mut self, t: &Tensor<F>) -> ValueId {
        self.push(
            t.shape.clone(),
            t.data.clone(),
            Op::Leaf,
            t.requires_grad,
        )
    }

    pub fn leaf_data(&mut self, shape: &[usize], data: Vec<F>, requires_grad: bool) -> ValueId {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "leaf_data shape/buffer mismatch"
        );
        self.push(shape.to_vec(), data, Op::Leaf, requires_grad)
    }

    // ── Forward ops ─────────────────────────────────────────────────────

    /// `a[..., k] @ b[k, n]`; leading axes of `a` are flattened into rows.
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        let ok = ash.len() >= 2 && bsh.len() == 2 && ash[ash.len() - 1] == bsh[0];
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ash.to_vec(),
                rhs: bsh.to_vec(),
            });
        }
        let k = bsh[0];
        let n = bsh[1];
        let m = self.nodes[a.idx()].value.len() / k;
        let mut out_shape = ash.to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![F::ZERO; m * n];
        F::gemm(
            m,
            k,
            n,
            F::ONE,
            &self.nodes[a.idx()].value,
            &self.nodes[b.idx()].value,
            F::ZERO,
            &mut out,
        );
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out_shape, out, Op::Matmul { a, b }, ng))
    }

    /// Fused `x[..., k] @ w[k, n] + bias[n]`; leading axes of `x` flatten into
    /// rows and the bias broadcasts over them. One tape node instead of a
    /// matmul/add_bias pair — the bias seeds the output buffer and the GEMM
    /// accumulates on top.
    pub fn linear(&mut self, x: ValueId, w: ValueId, bias: ValueId) -> Result<ValueId> {
        let (xsh, wsh) = (self.shape(x), self.shape(w));
        let ok = xsh.len() >= 2 && wsh.len() == 2 && xsh[xsh.len() - 1] == wsh[0];
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: xsh.to_vec(),
                rhs: wsh.to_vec(),
            });
        }
        let k = wsh[0];
        let n = wsh[1];
        if self.shape(bias) != [n] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: wsh.to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let m = self.nodes[x.idx()].value.len() / k;
        let mut out_shape = xsh.to_vec();
        *out_shape.last_mut().unwrap() = n;
        let bv = &self.nodes[bias.idx()].value;
        let mut out = vec![F::ZERO; m * n];
        for row in out.chunks_mut(n) {
            row.copy_from_slice(bv);
        }
        F::gemm(
            m,
            k,
            n,
            F::ONE,
            &self.nodes[x.idx()].value,
            &self.nodes[w.idx()].value,
            F::ONE,
            &mut out,
        );
        let ng = self.needs(x) || self.needs(w) || self.needs(bias);
        Ok(self.push(out_shape, out, Op::Linear { x, w, bias }, ng))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<F> = self.nodes[a.idx()]
            .value
            .iter()
            .zip(&self.nodes[b.idx()].value)
            .map(|(&x, &y)| x + y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add { a, b }, ng))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<F> = self.nodes[a.idx()]
            .value
            .iter()
            .zip(&self.nodes[b.idx()].value)
            .map(|(&x, &y)| x * y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Mul { a, b }, ng))
    }

    /// `x[..., n] + bias[n]`, bias broadcast over leading axes.
    pub fn add_bias(&mut self, x: ValueId, bias: ValueId) -> Result<ValueId> {
        let (xsh, bsh) = (self.shape(x), self.shape(bias));
        let n = *xsh.last().unwrap_or(&0);
        if bsh.len() != 1 || bsh[0] != n || n == 0 {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: xsh.to_vec(),
                rhs: bsh.to_vec(),
            });
        }
        let bv = &self.nodes[bias.idx()].value;
        let mut out = self.nodes[x.idx()].value.clone();
        for row in out.chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(bv) {
                *o += b;
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        let shape = xsh.to_vec();
        Ok(self.push(shape, out, Op::AddBias { x, bias }, ng))
    }

    pub fn scale(&mut self, x: ValueId, c: F) -> ValueId {
        let out: Vec<F> = self.nodes[x.idx()].value.iter().map(|&v| v * c).collect();
        let ng = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Scale { x, c }, ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: ValueId) -> ValueId {
        let k = F::from_f64(GELU_K);
        let c = F::from_f64(GELU_C);
        let half = F::from_f64(0.5);
        let out: Vec<F> = self.nodes[x.idx()]
            .value
            .iter()
            .map(|&v| {
                let u = k * (v + c * v * v * v);
                half * v * (F::ONE + u.tanh_fast())
            })
            .collect();
        let ng = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Gelu { x }, ng)
    }

    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        let out: Vec<F> = self.nodes[x.idx()]
            .value
            .iter()
            .map(|&v| stable_sigmoid(v))
            .collect();
        let ng = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Sigmoid { x }, ng)
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: ValueId) -> Result<ValueId> {
        let xsh = self.shape(x);
        let n = *xsh.last().unwrap_or(&0);
        if n == 0 {
            return Err(Error::BadShape {
                op: "softmax",
                expected: "non-empty last axis".into(),
                got: xsh.to_vec(),
            });
        }
        let mut out = self.nodes[x.idx()].value.clone();
        for row in out.chunks_mut(n) {
            softmax_row(row);
        }
        let ng = self.needs(x);
        let shape = xsh.to_vec();
        Ok(self.push(shape, out, Op::Softmax { x }, ng))
    }

    /// Layer norm over the last axis: `(x - mean) / sqrt(var + eps) * gain + shift`.
    pub fn layer_norm(
        &mut self,
        x: ValueId,
        gain: ValueId,
        shift: ValueId,
        eps: F,
    ) -> Result<ValueId> {
        let xsh = self.shape(x);
        let n = *xsh.last().unwrap_or(&0);
        if n == 0 || self.shape(gain) != [n] || self.shape(shift) != [n] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: xsh.to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let inv_n = F::ONE / F::from_f64(n as f64);
        let gv = &self.nodes[gain.idx()].value;
        let sv = &self.nodes[shift.idx()].value;
        let xv = &self.nodes[x.idx()].value;
        let mut out = vec![F::ZERO; xv.len()];
        for (orow, xrow) in out.chunks_mut(n).zip(xv.chunks(n)) {
            let mean = xrow.iter().copied().sum::<F>() * inv_n;
            let mut var = F::ZERO;
            for &v in xrow {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_n;
            let inv_std = F::ONE / (var + eps).sqrt();
            for j in 0..n {
                let xhat = (xrow[j] - mean) * inv_std;
                orow[j] = xhat * gv[j] + sv[j];
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(shift);
        let shape = xsh.to_vec();
        Ok(self.push(shape, out, Op::LayerNorm { x, gain, shift, eps }, ng))
    }

    /// Rows of `table[v, d]` gathered by token id; output `[b, t, d]`.
    pub fn embedding(&mut self, table: ValueId, ids: &[u16], b: usize, t: usize) -> Result<ValueId> {
        let tsh = self.shape(table);
        if tsh.len() != 2 {
            return Err(Error::BadShape {
                op: "embedding",
                expected: "2-d table".into(),
                got: tsh.to_vec(),
            });
        }
        if ids.len() != b * t {
            return Err(Error::BadShape {
                op: "embedding",
                expected: format!("{} ids for a {b}x{t} grid", b * t),
                got: vec![ids.len()],
            });
        }
        let (v, d) = (tsh[0], tsh[1]);
        let tv = &self.nodes[table.idx()].value;
        let mut out = vec![F::ZERO; b * t * d];
        for (pos, &id) in ids.iter().enumerate() {
            let id = id as usize;
            if id >= v {
                return Err(Error::TokenOutOfRange {
                    id: id as u32,
                    size: v,
                });
            }
            out[pos * d..(pos + 1) * d].copy_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let ng = self.needs(table);
        Ok(self.push(
            vec![b, t, d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// `x[b, t, d] + table[0..t, d]`, same row of the table for every batch item.
    pub fn position_add(&mut self, x: ValueId, table: ValueId) -> Result<ValueId> {
        let xsh = self.shape(x).to_vec();
        let tsh = self.shape(table);
        if xsh.len() != 3 || tsh.len() != 2 || xsh[2] != tsh[1] {
            return Err(Error::ShapeMismatch {
                op: "position_add",
                lhs: xsh.clone(),
                rhs: tsh.to_vec(),
            });
        }
        let (b, t, d) = (xsh[0], xsh[1], xsh[2]);
        if t > tsh[0] {
            return Err(Error::ContextOverflow {
                max: tsh[0],
                needed: t,
            });
        }
        let tv = &self.nodes[table.idx()].value;
        let mut out = self.nodes[x.idx()].value.clone();
        for bi in 0..b {
            for ti in 0..t {
                let o = (bi * t + ti) * d;
                let p = ti * d;
                for j in 0..d {
                    out[o + j] += tv[p + j];
                }
            }
        }
        let ng = self.needs(x) || self.needs(table);
        Ok(self.push(xsh, out, Op::PositionAdd { x, table }, ng))
    }

    /// Multi-head causal self-attention over a packed `[b, t, 3d]` qkv tensor
    /// (query rows first, then key, then value). Softmax over positions <= i.
    pub fn causal_attention(&mut self, qkv: ValueId, n_heads: usize) -> Result<ValueId> {
        let sh = self.shape(qkv).to_vec();
        if sh.len() != 3 || sh[2] % 3 != 0 {
            return Err(Error::BadShape {
                op: "causal_attention",
                expected: "[b, t, 3*d_model] packed qkv".into(),
                got: sh,
            });
        }
        let (b, t, d3) = (sh[0], sh[1], sh[2]);
        let d = d3 / 3;
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::BadShape {
                op: "causal_attention",
                expected: format!("head count dividing d_model={d}"),
                got: vec![n_heads],
            });
        }
        let dh = d / n_heads;
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());
        let xv = &self.nodes[qkv.idx()].value;

        let mut out = vec![F::ZERO; b * t * d];
        let mut probs = vec![F::ZERO; b * n_heads * t * t];
        let mut q = vec![F::ZERO; t * dh];
        let mut k = vec![F::ZERO; t * dh];
        let mut v = vec![F::ZERO; t * dh];
        let mut scores = vec![F::ZERO; t * t];
        let mut ctx = vec![F::ZERO; t * dh];

        for bi in 0..b {
            for hi in 0..n_heads {
                let col = hi * dh;
                for ti in 0..t {
                    let base = (bi * t + ti) * d3;
                    let row = ti * dh;
                    q[row..row + dh].copy_from_slice(&xv[base + col..base + col + dh]);
                    k[row..row + dh].copy_from_slice(&xv[base + d + col..base + d + col + dh]);
                    v[row..row + dh]
                        .copy_from_slice(&xv[base + 2 * d + col..base + 2 * d + col + dh]);
                }
                // scores = scale * Q @ K^T, K read transposed through strides
                F::gemm_strided(
                    t, dh, t, scale, &q, dh as isize, 1, &k, 1, dh as isize, F::ZERO, &mut scores,
                    t as isize, 1,
                );
                // causal softmax: row i normalizes over columns 0..=i
                for i in 0..t {
                    let row = &mut scores[i * t..i * t + t];
                    softmax_row(&mut row[..i + 1]);
                    for x in row[i + 1..].iter_mut() {
                        *x = F::ZERO;
                    }
                }
                probs[(bi * n_heads + hi) * t * t..(bi * n_heads + hi + 1) * t * t]
                    .copy_from_slice(&scores);
                F::gemm(t, t, dh, F::ONE, &scores, &v, F::ZERO, &mut ctx);
                for ti in 0..t {
                    let o = (bi * t + ti) * d + col;
                    out[o..o + dh].copy_from_slice(&ctx[ti * dh..(ti + 1) * dh]);
                }
            }
        }
        let ng = self.needs(qkv);
        Ok(self.push(
            vec![b, t, d],
            out,
            Op::CausalAttention {
                qkv,
                n_heads,
                probs,
            },
            ng,
        ))
    }

    /// Elementwise gated accumulation along the time axis:
    /// `h_t = (1 - z_t) * h_{t-1} + z_t * c_t`, `h_{-1} = 0`.
    pub fn gated_recurrence(&mut self, gate: ValueId, cand: ValueId) -> Result<ValueId> {
        let zs = self.shape(gate).to_vec();
        if zs != self.shape(cand) || zs.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "gated_recurrence",
                lhs: zs,
                rhs: self.shape(cand).to_vec(),
            });
        }
        let (b, t, d) = (zs[0], zs[1], zs[2]);
        let zv = &self.nodes[gate.idx()].value;
        let cv = &self.nodes[cand.idx()].value;
        let mut out = vec![F::ZERO; b * t * d];
        for bi in 0..b {
            for ti in 0..t {
                let o = (bi * t + ti) * d;
                if ti == 0 {
                    for j in 0..d {
                        out[o + j] = zv[o + j] * cv[o + j];
                    }
                } else {
                    let prev = o - d;
                    for j in 0..d {
                        let z = zv[o + j];
                        out[o + j] = (F::ONE - z) * out[prev + j] + z * cv[o + j];
                    }
                }
            }
        }
        let ng = self.needs(gate) || self.needs(cand);
        Ok(self.push(zs, out, Op::GatedRecurrence { gate, cand }, ng))
    }

    /// Mean negative log-likelihood of `targets` under softmax(logits),
    /// averaged over positions where `mask` is true. Scalar output.
    pub fn masked_cross_entropy(
        &mut self,
        logits: ValueId,
        targets: &[u16],
        mask: &[bool],
    ) -> Result<ValueId> {
        let lsh = self.shape(logits);
        let v = *lsh.last().unwrap_or(&0);
        if v == 0 {
            return Err(Error::BadShape {
                op: "masked_cross_entropy",
                expected: "non-empty class axis".into(),
                got: lsh.to_vec(),
            });
        }
        let rows = self.nodes[logits.idx()].value.len() / v;
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::BadShape {
                op: "masked_cross_entropy",
                expected: format!("{rows} targets and mask entries"),
                got: vec![targets.len(), mask.len()],
            });
        }
        let m = mask.iter().filter(|&&x| x).count();
        if m == 0 {
            return Err(Error::EmptyMask);
        }
        let lv = &self.nodes[logits.idx()].value;
        let mut probs = vec![F::ZERO; lv.len()];
        let mut total = F::ZERO;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let tgt = targets[r] as usize;
            if tgt >= v {
                return Err(Error::TargetOutOfRange {
                    id: tgt as u32,
                    vocab: v,
                });
            }
            let row = &lv[r * v..(r + 1) * v];
            let prow = &mut probs[r * v..(r + 1) * v];
            prow.copy_from_slice(row);
            let logp_tgt = log_softmax_row_at(prow, tgt);
            total -= logp_tgt;
        }
        let loss = total / F::from_f64(m as f64);
        let ng = self.needs(logits);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::MaskedCrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Sum of all elements; scalar.
    pub fn sum(&mut self, x: ValueId) -> ValueId {
        let s: F = self.nodes[x.idx()].value.iter().copied().sum();
        let ng = self.needs(x);
        self.push(vec![], vec![s], Op::Sum { x }, ng)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Gradients land in per-node buffers,
    /// readable through `grad`. Leaves created with `requires_grad = false`
    /// and anything depending only on them are skipped.
    pub fn backward(&mut self, root: ValueId) -> Result<()> {
        let rn = &self.nodes[root.idx()];
        if rn.value.len() != 1 {
            return Err(Error::NonScalarRoot {
                shape: rn.shape.clone(),
            });
        }
        self.grads = self
            .nodes
            .iter()
            .map(|n| {
                if n.needs_grad {
                    vec![F::ZERO; n.value.len()]
                } else {
                    Vec::new()
                }
            })
            .collect();
        if !self.nodes[root.idx()].needs_grad {
            return Ok(()); // nothing trainable below the root
        }
        self.grads[root.idx()][0] = F::ONE;

        for i in (0..=root.idx()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            // Take the output gradient out so input accumulation can borrow
            // `self.grads` mutably without aliasing.
            let g = std::mem::take(&mut self.grads[i]);
            self.backprop_node(i, &g);
            self.grads[i] = g;
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[F]) {
        // Split borrows: nodes are read-only here except for op scratch.
        match &self.nodes[i].op {
            Op::Leaf => {}

            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let k = self.nodes[b.idx()].shape[0];
                let n = self.nodes[b.idx()].shape[1];
                let m = self.nodes[a.idx()].value.len() / k;
                if self.needs(a) {
                    // dA += g @ B^T, reading B transposed through strides
                    let bv = &self.nodes[b.idx()].value;
                    let da = &mut self.grads[a.idx()];
                    F::gemm_strided(
                        m, n, k, F::ONE, g, n as isize, 1, bv, 1, n as isize, F::ONE, da,
                        k as isize, 1,
                    );
                }
                if self.needs(b) {
                    // dB += A^T @ g
                    let av = &self.nodes[a.idx()].value;
                    let db = &mut self.grads[b.idx()];
                    F::gemm_strided(
                        k, m, n, F::ONE, av, 1, k as isize, g, n as isize, 1, F::ONE, db,
                        n as isize, 1,
                    );
                }
            }

            Op::Linear { x, w, bias } => {
                let (x, w, bias) = (*x, *w, *bias);
                let k = self.nodes[w.idx()].shape[0];
                let n = self.nodes[w.idx()].shape[1];
                let m = self.nodes[x.idx()].value.len() / k;
                if self.needs(x) {
                    // dX += g @ W^T
                    let wv = &self.nodes[w.idx()].value;
                    let dx = &mut self.grads[x.idx()];
                    F::gemm_strided(
                        m, n, k, F::ONE, g, n as isize, 1, wv, 1, n as isize, F::ONE, dx,
                        k as isize, 1,
                    );
                }
                if self.needs(w) {
                    // dW += X^T @ g
                    let xv = &self.nodes[x.idx()].value;
                    let dw = &mut self.grads[w.idx()];
                    F::gemm_strided(
                        k, m, n, F::ONE, xv, 1, k as isize, g, n as isize, 1, F::ONE, dw,
                        n as isize, 1,
                    );
                }
                if self.needs(bias) {
                    let db = &mut self.grads[bias.idx()];
                    for row in g.chunks(n) {
                        axpy(db, row);
                    }
                }
            }

            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    axpy(&mut self.grads[a.idx()], g);
                }
                if self.needs(b) {
                    axpy(&mut self.grads[b.idx()], g);
                }
            }

            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let bv = std::mem::take(&mut self.nodes[b.idx()].value);
                    for ((da, &gv), &y) in self.grads[a.idx()].iter_mut().zip(g).zip(&bv) {
                        *da += gv * y;
                    }
                    self.nodes[b.idx()].value = bv;
                }
                if self.needs(b) {
                    let av = std::mem::take(&mut self.nodes[a.idx()].value);
                    for ((db, &gv), &x) in self.grads[b.idx()].iter_mut().zip(g).zip(&av) {
                        *db += gv * x;
                    }
                    self.nodes[a.idx()].value = av;
                }
            }

            Op::AddBias { x, bias } => {
                let (x, bias) = (*x, *bias);
                let n = self.nodes[bias.idx()].value.len();
                if self.needs(x) {
                    axpy(&mut self.grads[x.idx()], g);
                }
                if self.needs(bias) {
                    let db = &mut self.grads[bias.idx()];
                    for row in g.chunks(n) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                }
            }

            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                if self.needs(x) {
                    for (d, &gv) in self.grads[x.idx()].iter_mut().zip(g) {
                        *d += gv * c;
                    }
                }
            }

            Op::Gelu { x } => {
                let x = *x;
                if self.needs(x) {
                    let k = F::from_f64(GELU_K);
                    let c = F::from_f64(GELU_C);
                    let half = F::from_f64(0.5);
                    let three = F::from_f64(3.0);
                    let xv = std::mem::take(&mut self.nodes[x.idx()].value);
                    for ((d, &gv), &v) in self.grads[x.idx()].iter_mut().zip(g).zip(&xv) {
                        let u = k * (v + c * v * v * v);
                        let th = u.tanh_fast();
                        let du = k * (F::ONE + three * c * v * v);
                        let dy = half * (F::ONE + th) + half * v * (F::ONE - th * th) * du;
                        *d += gv * dy;
                    }
                    self.nodes[x.idx()].value = xv;
                }
            }

            Op::Sigmoid { x } => {
                let x = *x;
                if self.needs(x) {
                    let yv = std::mem::take(&mut self.nodes[i].value);
                    for ((d, &gv), &s) in self.grads[x.idx()].iter_mut().zip(g).zip(&yv) {
                        *d += gv * s * (F::ONE - s);
                    }
                    self.nodes[i].value = yv;
                }
            }

            Op::Softmax { x } => {
                let x = *x;
                if self.needs(x) {
                    let n = *self.nodes[i].shape.last().unwrap();
                    let pv = std::mem::take(&mut self.nodes[i].value);
                    {
                        let dx = &mut self.grads[x.idx()];
                        for (r, (prow, grow)) in pv.chunks(n).zip(g.chunks(n)).enumerate() {
                            let dot: F = prow.iter().zip(grow).map(|(&p, &gv)| p * gv).sum();
                            let drow = &mut dx[r * n..(r + 1) * n];
                            for j in 0..n {
                                drow[j] += prow[j] * (grow[j] - dot);
                            }
                        }
                    }
                    self.nodes[i].value = pv;
                }
            }

            Op::LayerNorm { x, gain, shift, eps } => {
                let (x, gain, shift, eps) = (*x, *gain, *shift, *eps);
                let n = *self.nodes[i].shape.last().unwrap();
                let inv_n = F::ONE / F::from_f64(n as f64);
                let xv = std::mem::take(&mut self.nodes[x.idx()].value);
                let gv = std::mem::take(&mut self.nodes[gain.idx()].value);
                let (nx, ngain, nshift) = (self.needs(x), self.needs(gain), self.needs(shift));
                let mut xhat = vec![F::ZERO; n];
                for (r, (xrow, grow)) in xv.chunks(n).zip(g.chunks(n)).enumerate() {
                    let mean = xrow.iter().copied().sum::<F>() * inv_n;
                    let mut var = F::ZERO;
                    for &v in xrow {
                        let dl = v - mean;
                        var += dl * dl;
                    }
                    var *= inv_n;
                    let inv_std = F::ONE / (var + eps).sqrt();
                    for j in 0..n {
                        xhat[j] = (xrow[j] - mean) * inv_std;
                    }
                    if ngain {
                        let dg = &mut self.grads[gain.idx()];
                        for j in 0..n {
                            dg[j] += grow[j] * xhat[j];
                        }
                    }
                    if nshift {
                        let ds = &mut self.grads[shift.idx()];
                        for j in 0..n {
                            ds[j] += grow[j];
                        }
                    }
                    if nx {
                        let mut sum1 = F::ZERO;
                        let mut sum2 = F::ZERO;
                        for j in 0..n {
                            let dxhat = grow[j] * gv[j];
                            sum1 += dxhat;
                            sum2 += dxhat * xhat[j];
                        }
                        let dx = &mut self.grads[x.idx()][r * n..(r + 1) * n];
                        for j in 0..n {
                            let dxhat = grow[j] * gv[j];
                            dx[j] += inv_std * (dxhat - (sum1 + xhat[j] * sum2) * inv_n);
                        }
                    }
                }
                self.nodes[x.idx()].value = xv;
                self.nodes[gain.idx()].value = gv;
            }

            Op::Embedding { table, ids: _ } => {
                let table = *table;
                if self.needs(table) {
                    let d = *self.nodes[i].shape.last().unwrap();
                    let ids = std::mem::take(match_embedding_ids(&mut self.nodes[i].op));
                    {
                        let dt = &mut self.grads[table.idx()];
                        for (pos, &id) in ids.iter().enumerate() {
                            let dst = &mut dt[id as usize * d..(id as usize + 1) * d];
                            let src = &g[pos * d..(pos + 1) * d];
                            for (a, &b) in dst.iter_mut().zip(src) {
                                *a += b;
                            }
                        }
                    }
                    *match_embedding_ids(&mut self.nodes[i].op) = ids;
                }
            }

            Op::PositionAdd { x, table } => {
                let (x, table) = (*x, *table);
                let sh = &self.nodes[i].shape;
                let (b, t, d) = (sh[0], sh[1], sh[2]);
                if self.needs(x) {
                    axpy(&mut self.grads[x.idx()], g);
                }
                if self.needs(table) {
                    let dt = &mut self.grads[table.idx()];
                    for bi in 0..b {
                        for ti in 0..t {
                            let o = (bi * t + ti) * d;
                            for j in 0..d {
                                dt[ti * d + j] += g[o + j];
                            }
                        }
                    }
                }
            }

            Op::CausalAttention { qkv, n_heads, .. } => {
                let (qkv, n_heads) = (*qkv, *n_heads);
                if self.needs(qkv) {
                    let sh = &self.nodes[i].shape;
                    let (b, t, d) = (sh[0], sh[1], sh[2]);
                    let probs = std::mem::take(match_attention_probs(&mut self.nodes[i].op));
                    let xv = std::mem::take(&mut self.nodes[qkv.idx()].value);
                    self.attention_backward(qkv, n_heads, b, t, d, &probs, &xv, g);
                    self.nodes[qkv.idx()].value = xv;
                    *match_attention_probs(&mut self.nodes[i].op) = probs;
                }
            }

            Op::GatedRecurrence { gate, cand } => {
                let (gate, cand) = (*gate, *cand);
                let sh = &self.nodes[i].shape;
                let (b, t, d) = (sh[0], sh[1], sh[2]);
                let hv = std::mem::take(&mut self.nodes[i].value);
                let zv = std::mem::take(&mut self.nodes[gate.idx()].value);
                let cv = std::mem::take(&mut self.nodes[cand.idx()].value);
                let (nz, nc) = (self.needs(gate), self.needs(cand));
                let mut carry = vec![F::ZERO; d];
                for bi in 0..b {
                    carry.fill(F::ZERO);
                    for ti in (0..t).rev() {
                        let o = (bi * t + ti) * d;
                        for j in 0..d {
                            let gh = g[o + j] + carry[j];
                            let z = zv[o + j];
                            let h_prev = if ti == 0 { F::ZERO } else { hv[o - d + j] };
                            if nz {
                                self.grads[gate.idx()][o + j] += gh * (cv[o + j] - h_prev);
                            }
                            if nc {
                                self.grads[cand.idx()][o + j] += gh * z;
                            }
                            carry[j] = gh * (F::ONE - z);
                        }
                    }
                }
                self.nodes[i].value = hv;
                self.nodes[gate.idx()].value = zv;
                self.nodes[cand.idx()].value = cv;
            }

            Op::MaskedCrossEntropy {
                logits,
                targets,
                mask,
                probs,
            } => {
                let logits = *logits;
                if self.needs(logits) {
                    let v = *self.nodes[logits.idx()].shape.last().unwrap();
                    let m = mask.iter().filter(|&&x| x).count();
                    let gscale = g[0] / F::from_f64(m as f64);
                    // probs rows are zero-filled outside the mask
                    let dl = &mut self.grads[logits.idx()];
                    for (r, (&masked, &tgt)) in mask.iter().zip(targets.iter()).enumerate() {
                        if !masked {
                            continue;
                        }
                        let prow = &probs[r * v..(r + 1) * v];
                        let drow = &mut dl[r * v..(r + 1) * v];
                        for j in 0..v {
                            drow[j] += gscale * prow[j];
                        }
                        drow[tgt as usize] -= gscale;
                    }
                }
            }

            Op::Sum { x } => {
                let x = *x;
                if self.needs(x) {
                    let gv = g[0];
                    for d in self.grads[x.idx()].iter_mut() {
                        *d += gv;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &mut self,
        qkv: ValueId,
        n_heads: usize,
        b: usize,
        t: usize,
        d: usize,
        probs: &[F],
        xv: &[F],
        g: &[F],
    ) {
        let d3 = 3 * d;
        let dh = d / n_heads;
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());
        let mut q = vec![F::ZERO; t * dh];
        let mut k = vec![F::ZERO; t * dh];
        let mut v = vec![F::ZERO; t * dh];
        let mut g_ctx = vec![F::ZERO; t * dh];
        let mut ds = vec![F::ZERO; t * t];
        let mut dq = vec![F::ZERO; t * dh];
        let mut dk = vec![F::ZERO; t * dh];
        let mut dv = vec![F::ZERO; t * dh];

        for bi in 0..b {
            for hi in 0..n_heads {
                let col = hi * dh;
                for ti in 0..t {
                    let base = (bi * t + ti) * d3;
                    let go = (bi * t + ti) * d + col;
                    let row = ti * dh;
                    q[row..row + dh].copy_from_slice(&xv[base + col..base + col + dh]);
                    k[row..row + dh].copy_from_slice(&xv[base + d + col..base + d + col + dh]);
                    v[row..row + dh]
                        .copy_from_slice(&xv[base + 2 * d + col..base + 2 * d + col + dh]);
                    g_ctx[row..row + dh].copy_from_slice(&g[go..go + dh]);
                }
                let p = &probs[(bi * n_heads + hi) * t * t..(bi * n_heads + hi + 1) * t * t];
                // dV = P^T @ g_ctx, P read transposed through strides
                F::gemm_strided(
                    t, t, dh, F::ONE, p, 1, t as isize, &g_ctx, dh as isize, 1, F::ZERO, &mut dv,
                    dh as isize, 1,
                );
                // dP = g_ctx @ V^T, then softmax backward row-wise into ds
                F::gemm_strided(
                    t, dh, t, F::ONE, &g_ctx, dh as isize, 1, &v, 1, dh as isize, F::ZERO, &mut ds,
                    t as isize, 1,
                );
                for ii in 0..t {
                    let prow = &p[ii * t..ii * t + t];
                    let dsrow = &mut ds[ii * t..ii * t + t];
                    let mut dot = F::ZERO;
                    for j in 0..=ii {
                        dot += dsrow[j] * prow[j];
                    }
                    for j in 0..t {
                        dsrow[j] = if j <= ii {
                            prow[j] * (dsrow[j] - dot)
                        } else {
                            F::ZERO
                        };
                    }
                }
                // dQ = scale * ds @ K ; dK = scale * ds^T @ Q
                F::gemm(t, t, dh, scale, &ds, &k, F::ZERO, &mut dq);
                F::gemm_strided(
                    t, t, dh, scale, &ds, 1, t as isize, &q, dh as isize, 1, F::ZERO, &mut dk,
                    dh as isize, 1,
                );

                let dgrad = &mut self.grads[qkv.idx()];
                for ti in 0..t {
                    let base = (bi * t + ti) * d3;
                    let row = ti * dh;
                    axpy(&mut dgrad[base + col..base + col + dh], &dq[row..row + dh]);
                    axpy(
                        &mut dgrad[base + d + col..base + d + col + dh],
                        &dk[row..row + dh],
                    );
                    axpy(
                        &mut dgrad[base + 2 * d + col..base + 2 * d + col + dh],
                        &dv[row..row + dh],
                    );
                }
            }
        }
    }
}

// ── helpers ─────────────────────────────────────────────────────────────

fn stable_sigmoid<F: Real>(x: F) -> F {
    if x >= F::ZERO {
        F::ONE / (F::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::ONE + e)
    }
}

/// In-place max-subtracted softmax of one row.
fn softmax_row<F: Real>(row: &mut [F]) {
    let mut mx = row[0];
    for &v in row.iter() {
        mx = mx.maximum(v);
    }
    let mut sum = F::ZERO;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    let inv = F::ONE / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Turns a logit row into softmax probabilities in place and returns
/// `log softmax(row)[target]`.
fn log_softmax_row_at<F: Real>(row: &mut [F], target: usize) -> F {
    let mut mx = row[0];
    for &v in row.iter() {
        mx = mx.maximum(v);
    }
    let mut sum = F::ZERO;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    let inv = F::ONE / sum;
    let logp = (row[target] * inv).ln();
    for v in row.iter_mut() {
        *v *= inv;
    }
    logp
}

fn axpy<F: Real>(dst: &mut [F], src: &[F]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn match_embedding_ids<F: Real>(op: &mut Op<F>) -> &mut Vec<u16> {
    match op {
        Op::Embedding { ids, .. } => ids,
        _ => unreachable!("op is an embedding"),
    }
}

fn match_attention_probs<F: Real>(op: &mut Op<F>) -> &mut Vec<F> {
    match op {
        Op::CausalAttention { probs, .. } => probs,
        _ => unreachable!("op is an attention"),
    }
}
