//! Central-difference gradient checking. The analytic gradients from
//! `Tape::backward` are compared against (f(x+h) - f(x-h)) / 2h computed by
//! rebuilding the tape from perturbed leaf data, so the two sides share no
//! code path beyond the forward op itself.

use crate::error::Result;
use crate::tape::{Tape, ValueId};

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_TOL: f64 = 1e-4;

/// One differentiable input to the graph under test.
#[derive(Clone)]
pub struct CheckLeaf {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl CheckLeaf {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        CheckLeaf {
            shape: shape.to_vec(),
            data,
        }
    }
}

/// Builds the graph twice per perturbed element and every element of every
/// leaf, failing with the first coordinate whose relative error
/// `|a - n| / max(1, |a|, |n|)` exceeds `tol`. `build` must be a pure
/// function of the leaf data.
pub fn check<B>(leaves: &[CheckLeaf], build: B, h: f64, tol: f64) -> std::result::Result<(), String>
where
    B: Fn(&mut Tape<f64>, &[ValueId]) -> Result<ValueId>,
{
    let eval = |datas: &[Vec<f64>]| -> std::result::Result<(f64, Option<Vec<Vec<f64>>>), String> {
        let mut tape = Tape::<f64>::new();
        let ids: Vec<ValueId> = leaves
            .iter()
            .zip(datas)
            .map(|(leaf, data)| tape.leaf_data(&leaf.shape, data.clone(), true))
            .collect();
        let root = build(&mut tape, &ids).map_err(|e| format!("forward failed: {e}"))?;
        if tape.value(root).len() != 1 {
            return Err(format!(
                "root must be scalar, got shape {:?}",
                tape.shape(root)
            ));
        }
        let y = tape.scalar(root);
        tape.backward(root).map_err(|e| format!("backward failed: {e}"))?;
        let grads = ids
            .iter()
            .map(|&id| tape.grad(id).unwrap_or(&[]).to_vec())
            .collect();
        Ok((y, Some(grads)))
    };

    let base: Vec<Vec<f64>> = leaves.iter().map(|l| l.data.clone()).collect();
    let (_, grads) = eval(&base)?;
    let grads = grads.unwrap();

    let mut work = base.clone();
    for (li, leaf) in leaves.iter().enumerate() {
        for ei in 0..leaf.data.len() {
            let orig = work[li][ei];
            work[li][ei] = orig + h;
            let (y_plus, _) = eval(&work)?;
            work[li][ei] = orig - h;
            let (y_minus, _) = eval(&work)?;
            work[li][ei] = orig;

            let numeric = (y_plus - y_minus) / (2.0 * h);
            let analytic = grads[li].get(ei).copied().unwrap_or(0.0);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0);
            if !rel.is_finite() || rel > tol {
                return Err(format!(
                    "leaf {li} element {ei}: analytic {analytic:.9e} vs numeric {numeric:.9e} \
                     (rel err {rel:.3e} > {tol:.1e})"
                ));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn passes_on_a_correct_gradient() {
        let leaves = vec![CheckLeaf::new(&[3], vec![0.5, -1.2, 2.0])];
        check(
            &leaves,
            |tape, ids| {
                let sq = tape.mul(ids[0], ids[0])?;
                Ok(tape.sum(sq))
            },
            DEFAULT_STEP,
            DEFAULT_TOL,
        )
        .unwrap();
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // sum(2x) has gradient 2, but scale-then-detach via a fresh leaf
        // built from values only sees gradient of sum alone. Simulate a bug
        // by comparing sum(x) forward with a doubled forward value.
        let leaves = vec![CheckLeaf::new(&[2], vec![1.0, 2.0])];
        let err = check(
            &leaves,
            |tape, ids| {
                // forward value depends on x twice, but one path is hidden
                // from the tape: rebuild the data as an untracked leaf.
                let hidden =
                    tape.leaf_data(&[2], vec![1.0, 2.0], false);
                let doubled = tape.add(ids[0], hidden)?;
                Ok(tape.sum(doubled))
            },
            DEFAULT_STEP,
            DEFAULT_TOL,
        );
        // the hidden leaf is rebuilt from constants, so numeric = 1 and
        // analytic = 1 agree here; instead check an actually-broken build
        // where forward uses x^2 but we only tape x.
        assert!(err.is_ok(), "control case should pass");

        let err = check(
            &leaves,
            |tape, ids| {
                // value path: x * x_const where x_const tracks no gradient;
                // true derivative of the *function of the data* is 2x, the
                // tape only reports x_const = x, so the check must fail.
                let frozen_copy = {
                    let data = tape.value(ids[0]).to_vec();
                    tape.leaf_data(&[2], data, false)
                };
                let sq = tape.mul(ids[0], frozen_copy)?;
                Ok(tape.sum(sq))
            },
            DEFAULT_STEP,
            DEFAULT_TOL,
        )
        .unwrap_err();
        assert!(err.contains("rel err"), "got: {err}");
    }
}
