//! Finite-difference verification of every backward rule. Each op gets a
//! randomized property suite: random shapes and data, analytic gradients
//! from the tape, central differences from rebuilt forwards, relative error
//! under 1e-4 with step 1e-4 in f64.
//!
//! Non-scalar outputs are reduced through sum(y * w) with a tracked random
//! weight leaf, so upstream gradients are non-uniform and the weight's own
//! gradient is checked for free.

use pathstar::gradcheck::{check, CheckLeaf, DEFAULT_STEP, DEFAULT_TOL};
use pathstar::tape::{Tape, ValueId, LN_EPS};
use proptest::prelude::*;

const CASES: u32 = 120;

fn cfg() -> ProptestConfig {
    ProptestConfig {
        cases: CASES,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

fn data(len: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-2.0f64..2.0, len)
}

/// sum(y * w) where w is the last leaf.
fn weighted_sum(tape: &mut Tape<f64>, y: ValueId, w: ValueId) -> pathstar::Result<ValueId> {
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

proptest! {
    #![proptest_config(cfg())]

    #[test]
    fn matmul_grads(
        (m, k, n) in (1usize..4, 1usize..5, 1usize..4),
        seed_a in data(3 * 4 * 5), seed_b in data(5 * 4), seed_w in data(3 * 4 * 4),
    ) {
        let leaves = vec![
            CheckLeaf::new(&[m, k], seed_a[..m * k].to_vec()),
            CheckLeaf::new(&[k, n], seed_b[..k * n].to_vec()),
            CheckLeaf::new(&[m, n], seed_w[..m * n].to_vec()),
        ];
        check(&leaves, |tape, ids| {
            let y = tape.matmul(ids[0], ids[1])?;
            weighted_sum(tape, y, ids[2])
        }, DEFAULT_STEP, DEFAULT_TOL).unwrap();
    }

    #[test]
    fn matmul_grads_batched_lhs(
        (b, t, k, n) in (1usize..3, 1usize..4, 1usize..4, 1usize..4),
        seed_a in data(2 * 3 * 3), seed_b in data(3 * 3), seed_w in data(2 * 3 * 3),
    ) {
        let leaves = vec![
            CheckLeaf::new(&[b, t, k], seed_a[..b * t * k].to_vec()),
            CheckLeaf::new(&[k, n], seed_b[..k * n].to_vec()),
            CheckLeaf::new(&[b, t, n], seed_w[..b * t * n].to_vec()),
        ];
        check(&leaves, |tape, ids| {
            let y = tape.matmul(ids[0], ids[1])?;
            weighted_sum(tape, y, ids[2])
        }, DEFAULT_STEP, DEFAULT_TOL).unwrap();
    }

    #[test]
    fn linear_grads(
        (b, t, k, n) in (1usize..3, 1usize..4, 1usize..4, 1usize..4),
        seed_x in data(2 * 3 * 3), seed_w in data(3 * 3), seed_b in data(3),
        seed_u in data(2 * 3 * 3),
    ) {
        let leaves = vec![
            CheckLeaf::new(&[b, t, k], seed_x[..b * t * k].to_vec()),
            CheckLeaf::new(&[k, n], seed_w[..k * n].to_vec()),
            CheckLeaf::new(&[n], seed_b[..n].to_vec()),
            CheckLeaf::new(&[b, t, n], seed_u[..b * t * n].to_vec()),
        ];
        check(&leaves, |tape, ids| {
            let y = tape.linear(ids[0], ids[1], ids[2])?;
            weighted_sum(tape, y, ids[3])
        }, DEFAULT_STEP, DEFAULT_TOL).unwrap();
    }

    #[test]
    fn add_and_mul_grads(
        len in 1usize..12,
        seed_a in data(12), seed_b in data(12), seed_w in data(12),
    ) {
        let leaves = vec![
            CheckLeaf::new(&[len], seed_a[..len].to_vec()),
            CheckLeaf::new(&[len], seed_b[..len].to_vec()),
            CheckLeaf::new(&[len], seed_w[..len].to_vec()),
        ];
        check(&leaves, |tape, ids| {
            let s = tape.add(ids[0], ids[1])?;
            let p = tape.mul(s, ids[0])?; // reuse a leaf: tests accumulation
            weighted_sum(tape, p, ids[2])
        }, DEFAULT_STEP, DEFAULT_TOL).unwrap();
    }

    #[test]
    fn add_bias_grads(
        (rows, n) in (1usize..5, 1usize..5),
        seed_x in data(4 * 4), seed_b in data(4), seed_w in data(4 * 4),
    ) {
        let leaves = vec![
            CheckLeaf::new(&[rows, n], seed_x[..rows * n].to_vec()),
            CheckLeaf::new(&[n], seed_b[..n].to_vec()),
            CheckLeaf::new(&[rows, n], seed_w[..rows * n].to_vec()),
        ];
        check(&leaves, |tape, ids| {
            let y = tape.add_bias(ids[0], ids[1])?;
            weighted_sum(tape, y, ids[2])
        }, DEFAULT_STEP, DEFAULT_TOL).unwrap();
    }

    #[test]
    fn scale_gelu_sigmoid_grads(
        len in 1usize..10,
        c in -3.0f64..3.0,
        seed_x in data(10), seed_w in data(10),
    ) {
        let leaves = vec![
            CheckLeaf::new(&[len], seed_x[..len].to_vec()),
            CheckLeaf::new(&[len], seed_w[..len].to_vec()),
        ];
        check(&leaves, |tape, ids| {
            let s = tape.scale(ids[0], c);
            let g = tape.gelu(s);
            let y = tape.sigmoid(g);
            weighted_sum(tape, y, ids[1])
        }, DEFAULT_STEP, DEFAULT_TOL).unwrap();
    }

    #[test]
    fn softmax_grads(
        (rows, n) in (1usize..4, 2usize..6),
        seed_x in data(3 * 5), seed_w in data(3 * 5),
    ) {
        let leaves = vec![
            CheckLeaf::new(&[rows, n], seed_x[..rows * n].to_vec()),
            CheckLeaf::new(&[rows, n], seed_w[..rows * n].to_vec()),
        ];
        check(&leaves, |tape, ids| {
            let y = tape.softmax(ids[0])?;
            weighted_sum(tape, y, ids[1])
        }, DEFAULT_STEP, DEFAULT_TOL).unwrap();
    }

    #[test]
    fn layer_norm_grads(
        (rows, n) in (1usize..4, 2usize..6),
        seed_x in data(3 * 5), seed_g in data(5), seed_s in data(5), seed_w in data(3 * 5),
    ) {
        let leaves = vec![
            CheckLeaf::new(&[rows, n], seed_x[..rows * n].to_vec()),
            CheckLeaf::new(&[n], seed_g[..n].to_vec()),
            CheckLeaf::new(&[n], seed_s[..n].to_vec()),
            CheckLeaf::new(&[rows, n], seed_w[..rows * n].to_vec()),
        ];
        check(&leaves, |tape, ids| {
            let y = tape.layer_norm(ids[0], ids[1], ids[2], LN_EPS)?;
            weighted_sum(tape, y, ids[3])
        }, DEFAULT_STEP, DEFAULT_TOL).unwrap();
    }

    #[test]
    fn embedding_grads(
        (v, d, b, t) in (2usize..5, 1usize..4, 1usize..3, 1usize..4),
        seed_table in data(4 * 3), seed_w in data(2 * 3 * 3),
        id_seed in proptest::collection::vec(0usize..100, 6),
    ) {
        let ids: Vec<u16> = id_seed[..b * t].iter().map(|&x| (x % v) as u16).collect();
        let leaves = vec![
            CheckLeaf::new(&[v, d], seed_table[..v * d].to_vec()),
            CheckLeaf::new(&[b, t, d], seed_w[..b * t * d].to_vec()),
        ];
        check(&leaves, move |tape, lids| {
            let y = tape.embedding(lids[0], &ids, b, t)?;
            weighted_sum(tape, y, lids[1])
        }, DEFAULT_STEP, DEFAULT_TOL).unwrap();
    }

    #[test]
    fn position_add_grads(
        (b, t, d, extra) in (1usize..3, 1usize..4, 1usize..4, 0usize..3),
        seed_x in data(2 * 3 * 3), seed_p in data(6 * 3), seed_w in data(2 * 3 * 3),
    ) {
        let p_rows = t + extra;
        let leaves = vec![
            CheckLeaf::new(&[b, t, d], seed_x[..b * t * d].to_vec()),
            CheckLeaf::new(&[p_rows, d], seed_p[..p_rows * d].to_vec()),
            CheckLeaf::new(&[b, t, d], seed_w[..b * t * d].to_vec()),
        ];
        check(&leaves, |tape, ids| {
            let y = tape.position_add(ids[0], ids[1])?;
            weighted_sum(tape, y, ids[2])
        }, DEFAULT_STEP, DEFAULT_TOL).unwrap();
    }

    #[test]
    fn causal_attention_grads(
        (b, t, heads, dh) in (1usize..3, 1usize..5, 1usize..3, 1usize..3),
        seed_qkv in data(2 * 4 * 3 * 4), seed_w in data(2 * 4 * 4),
    ) {
        let d = heads * dh;
        let leaves = vec![
            CheckLeaf::new(&[b, t, 3 * d], seed_qkv[..b * t * 3 * d].to_vec()),
            CheckLeaf::new(&[b, t, d], seed_w[..b * t * d].to_vec()),
        ];
        check(&leaves, move |tape, ids| {
            let y = tape.causal_attention(ids[0], heads)?;
            weighted_sum(tape, y, ids[1])
        }, DEFAULT_STEP, DEFAULT_TOL).unwrap();
    }

    #[test]
    fn gated_recurrence_grads(
        (b, t, d) in (1usize..3, 1usize..5, 1usize..4),
        seed_z in proptest::collection::vec(0.05f64..0.95, 2 * 4 * 3),
        seed_c in data(2 * 4 * 3), seed_w in data(2 * 4 * 3),
    ) {
        let leaves = vec![
            CheckLeaf::new(&[b, t, d], seed_z[..b * t * d].to_vec()),
            CheckLeaf::new(&[b, t, d], seed_c[..b * t * d].to_vec()),
            CheckLeaf::new(&[b, t, d], seed_w[..b * t * d].to_vec()),
        ];
        check(&leaves, |tape, ids| {
            let y = tape.gated_recurrence(ids[0], ids[1])?;
            weighted_sum(tape, y, ids[2])
        }, DEFAULT_STEP, DEFAULT_TOL).unwrap();
    }

    #[test]
    fn masked_cross_entropy_grads(
        (rows, v) in (1usize..5, 2usize..6),
        seed_logits in data(4 * 5),
        target_seed in proptest::collection::vec(0usize..100, 4),
        mask_seed in proptest::collection::vec(proptest::bool::ANY, 4),
        upstream in 0.3f64..2.0,
    ) {
        let targets: Vec<u16> = target_seed[..rows].iter().map(|&x| (x % v) as u16).collect();
        let mut mask = mask_seed[..rows].to_vec();
        if !mask.iter().any(|&m| m) {
            mask[0] = true; // the empty mask is a forward error, not a gradient case
        }
        let leaves = vec![CheckLeaf::new(&[rows, v], seed_logits[..rows * v].to_vec())];
        check(&leaves, move |tape, ids| {
            let loss = tape.masked_cross_entropy(ids[0], &targets, &mask)?;
            Ok(tape.scale(loss, upstream))
        }, DEFAULT_STEP, DEFAULT_TOL).unwrap();
    }

    #[test]
    fn full_block_composition_grads(
        seed_x in data(2 * 3 * 4), seed_wq in data(4 * 12), seed_b in data(12),
        seed_g in data(4), seed_s in data(4), seed_w in data(2 * 3 * 4),
    ) {
        // layer_norm -> qkv projection -> attention -> weighted sum, checking
        // gradient flow across op boundaries rather than per-op in isolation
        let (b, t, d) = (2usize, 3usize, 4usize);
        let leaves = vec![
            CheckLeaf::new(&[b, t, d], seed_x),
            CheckLeaf::new(&[d, 3 * d], seed_wq),
            CheckLeaf::new(&[3 * d], seed_b),
            CheckLeaf::new(&[d], seed_g),
            CheckLeaf::new(&[d], seed_s),
            CheckLeaf::new(&[b, t, d], seed_w),
        ];
        check(&leaves, |tape, ids| {
            let ln = tape.layer_norm(ids[0], ids[3], ids[4], LN_EPS)?;
            let qkv = tape.linear(ln, ids[1], ids[2])?;
            let att = tape.causal_attention(qkv, 2)?;
            let res = tape.add(att, ids[0])?;
            weighted_sum(tape, res, ids[5])
        }, DEFAULT_STEP, DEFAULT_TOL).unwrap();
    }
}
