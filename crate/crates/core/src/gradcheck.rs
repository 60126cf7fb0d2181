//! Central-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic − numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst coordinate
    pub worst: (usize, usize),
    pub coordinates: usize,
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if value.len() != 1 {
        return Err(Error::Param(format!(
            "grad_check needs a scalar function, got shape {:?}",
            value.shape()
        )));
    }
    Ok(value.data()[0])
}

/// Compares the tape gradient of the scalar function `f` at `inputs` with
/// central differences of step [`FD_STEP`] on every coordinate.
pub fn grad_check<F>(f: F, inputs: &[Tensor]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad_tensor(v)).collect();
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..probe[i].len() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + FD_STEP;
            let plus = eval(&f, &probe)?;
            probe[i].data_mut()[j] = orig - FD_STEP;
            let minus = eval(&f, &probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = grad.data()[j];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite {
                    op: format!("grad_check input {i}"),
                    index: j,
                });
            }
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (i, j);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LAYER_NORM_EPS;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(shape, 1.0, &mut rng)
    }

    #[test]
    fn sum_of_squares_is_exact() {
        let x = rand_tensor(&[3, 4], 1);
        let r = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)
            },
            &[x],
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
        assert_eq!(r.coordinates, 12);
    }

    #[test]
    fn layer_norm_sum() {
        let x = rand_tensor(&[2, 5], 2);
        let g = rand_tensor(&[5], 3);
        let b = rand_tensor(&[5], 4);
        let w = rand_tensor(&[2, 5], 5);
        // Plain sum(layer_norm(x)) has an identically-zero x-gradient, so a
        // random weighting is added as well.
        let r = grad_check(
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)?;
                let s = t.sum(y)?;
                let wy = t.mul(y, v[3])?;
                let ws = t.sum(wy)?;
                t.add(s, ws)
            },
            &[x, g, b, w],
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn non_scalar_function_is_rejected() {
        let x = rand_tensor(&[2], 1);
        assert!(grad_check(|t, v| t.scale(v[0], 2.0), &[x]).is_err());
    }

    fn weighted(t: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
        let wv = t.constant(w.clone());
        let p = t.mul(y, wv)?;
        t.sum(p)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn every_op_passes_grad_check(seed in 0u64..10_000, m in 1usize..5, k in 1usize..5, n in 1usize..5) {
            let a = rand_tensor(&[2, m, k], seed);
            let b = rand_tensor(&[k, n], seed + 1);
            let bb = rand_tensor(&[2, k, n], seed + 2);
            let bias = rand_tensor(&[n], seed + 3);
            let w_out = rand_tensor(&[2, m, n], seed + 4);
            let w_in = rand_tensor(&[2, m, k], seed + 5);
            let wt = w_out.clone();
            let r = grad_check(move |t, v| {
                let c = t.matmul(v[0], v[1])?;
                let c2 = t.matmul(v[0], v[2])?;
                let c = t.add(c, c2)?;
                let lin = t.linear(v[0], v[5], Some(v[3]))?;
                let c = t.add(c, lin)?;
                let s = t.sigmoid(c)?;
                let th = t.tanh(c)?;
                let sm = t.softmax(c)?;
                let e = t.add(s, th)?;
                let e = t.add(e, sm)?;
                let e = t.scale(e, 0.7)?;
                weighted(t, e, &wt)
            }, &[a.clone(), b, bb, bias, w_in.clone(), rand_tensor(&[n, k], seed + 6)]).unwrap();
            prop_assert!(r.max_rel_error < 1e-4, "{:?}", r);

            // relu away from its kink
            let shifted = a.map(|x| if x.abs() < 0.05 { x + 0.1 } else { x });
            let w2 = w_in.clone();
            let r = grad_check(move |t, v| {
                let y = t.relu(v[0])?;
                weighted(t, y, &w2)
            }, &[shifted]).unwrap();
            prop_assert!(r.max_rel_error < 1e-4, "{:?}", r);
        }

        #[test]
        fn route_ops_pass_grad_check(seed in 0u64..10_000, n in 1usize..5, dk in 1usize..4, dr in 1usize..4) {
            let q = rand_tensor(&[2, n, dk], seed);
            let k = rand_tensor(&[2, n, dk], seed + 1);
            let qr = rand_tensor(&[2, n, dr], seed + 2);
            let kr = rand_tensor(&[2, n, n, dr], seed + 3);
            let v = rand_tensor(&[2, n, dk], seed + 4);
            let vr = rand_tensor(&[2, n, n, dk], seed + 5);
            let pool_v = rand_tensor(&[dk], seed + 6);
            let w = rand_tensor(&[2, dk + dk], seed + 7);
            let weights = rand_tensor(&[2, n], seed + 8);
            let r = grad_check(move |t, x| {
                let s = t.route_scores(x[0], x[1], x[2], x[3], 0.5)?;
                let a = t.softmax(s)?;
                let o = t.route_attn(a, x[4], x[5])?;
                let o = t.add_rows(o, x[6], &[0, n])?;
                let sig = t.sigmoid(s)?;
                let o2 = t.route_attn(sig, x[4], x[5])?;
                let cat = t.concat(&[o, o2])?;
                let pooled = t.pool_rows(cat, &weights)?;
                weighted(t, pooled, &w)
            }, &[q, k, qr, kr, v, vr, pool_v]).unwrap();
            prop_assert!(r.max_rel_error < 1e-4, "{:?}", r);
        }

        #[test]
        fn layer_norm_and_losses_pass_grad_check(seed in 0u64..10_000, rows in 1usize..5, d in 2usize..6) {
            let x = rand_tensor(&[rows, d], seed);
            let g = rand_tensor(&[d], seed + 1);
            let b = rand_tensor(&[d], seed + 2);
            let target = rand_tensor(&[rows, d], seed + 3).map(|v| v + 5.0);
            let labels = rand_tensor(&[rows, d], seed + 4).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            let mut mask: Vec<bool> = (0..rows * d).map(|i| (i * 7 + seed as usize) % 3 != 0).collect();
            mask[0] = true;
            let r = grad_check(move |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)?;
                let mae = t.masked_mae(y, &target, &mask)?;
                let bce = t.masked_bce(y, &labels, &mask)?;
                let m = t.mean(y)?;
                let s = t.add(mae, bce)?;
                t.add(s, m)
            }, &[x, g, b]).unwrap();
            prop_assert!(r.max_rel_error < 1e-4, "{:?}", r);
        }
    }
}
