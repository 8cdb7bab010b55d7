//! Central finite-difference verification of tape gradients.
//!
//! The numeric side never touches the backward pass: it re-evaluates the
//! forward function at perturbed inputs, so it stays an independent
//! oracle for whatever the tape computes analytically.

use crate::error::{Error, Result};
use crate::params::{ParamRegistry, PassBindings};
use crate::tape::{Tape, TensorId};

/// Relative error of one coordinate: |analytic - numeric| / max(1, |analytic|).
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn check_step(h: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Config(format!("finite-difference step {h} outside [1e-7, 1e-3]")));
    }
    Ok(())
}

/// Compare the tape gradient of `f` at `x` against central differences.
///
/// `f` builds a scalar from the input leaf on a fresh tape and must be
/// deterministic. Returns the max over coordinates of the relative error.
pub fn finite_diff_check<F>(f: F, x: &[f64], shape: &[usize], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId>,
{
    check_step(h)?;
    let mut tape = Tape::new();
    let leaf = tape.tensor(x.to_vec(), shape, true)?;
    let loss = f(&mut tape, leaf)?;
    tape.backward(loss)?;
    let analytic: Vec<f64> = match tape.grad(leaf) {
        Some(g) => g.to_vec(),
        None => vec![0.0; x.len()],
    };

    let eval = |data: &[f64]| -> Result<f64> {
        let mut t = Tape::new();
        let leaf = t.tensor(data.to_vec(), shape, false)?;
        let out = f(&mut t, leaf)?;
        t.item(out)
    };

    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = eval(&probe)?;
        probe[i] = orig - h;
        let fm = eval(&probe)?;
        probe[i] = orig;
        worst = worst.max(rel_err(analytic[i], (fp - fm) / (2.0 * h)));
    }
    Ok(worst)
}

/// Result of a whole-model gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_coord: usize,
    pub coords_checked: usize,
}

/// Check every coordinate of every registered parameter.
///
/// `loss` evaluates the scalar objective from the registry's current
/// values; the analytic gradients come from one taped backward pass,
/// the numeric ones from re-running `loss` at (+/- h) perturbations.
pub fn check_param_gradients<L>(registry: &mut ParamRegistry, h: f64, loss: L) -> Result<GradCheckReport>
where
    L: Fn(&mut Tape, &mut PassBindings, &ParamRegistry) -> Result<TensorId>,
{
    check_step(h)?;
    let mut tape = Tape::new();
    let mut bindings = PassBindings::new(registry);
    let loss_id = loss(&mut tape, &mut bindings, registry)?;
    tape.backward(loss_id)?;
    let analytic = bindings.collect_grads(&tape, registry);

    let eval = |registry: &ParamRegistry| -> Result<f64> {
        let mut tape = Tape::new();
        let mut bindings = PassBindings::new(registry);
        let id = loss(&mut tape, &mut bindings, registry)?;
        tape.item(id)
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_coord: 0,
        coords_checked: 0,
    };
    for p in 0..registry.len() {
        let id = crate::params::ParamId(p);
        let n = registry.get(id).numel();
        for i in 0..n {
            let orig = registry.get(id).data[i];
            registry.data_mut(id)[i] = orig + h;
            let fp = eval(registry)?;
            registry.data_mut(id)[i] = orig - h;
            let fm = eval(registry)?;
            registry.data_mut(id)[i] = orig;
            let err = rel_err(analytic[p][i], (fp - fm) / (2.0 * h));
            report.coords_checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = registry.get(id).name.clone();
                report.worst_coord = i;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_gradient_is_near_exact() {
        let x = vec![0.4, -1.2, 2.0];
        let err = finite_diff_check(|t, x| t.sum_all(x), &x, &[3], 1e-5).unwrap();
        assert!(err <= 1e-10, "err = {err}");
    }

    #[test]
    fn sigmoid_sum_matches_to_1e6() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let err = finite_diff_check(
                |t, x| {
                    let s = t.sigmoid(x)?;
                    t.sum_all(s)
                },
                &x,
                &[2, 3],
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-6, "seed {seed}: err = {err}");
        }
    }

    #[test]
    fn step_outside_range_rejected() {
        let x = vec![1.0];
        assert!(finite_diff_check(|t, x| t.sum_all(x), &x, &[1], 1e-2).is_err());
        assert!(finite_diff_check(|t, x| t.sum_all(x), &x, &[1], 1e-8).is_err());
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let a: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            // grad wrt a with b fixed
            let err_a = finite_diff_check(
                |t, x| {
                    let bt = t.constant(b.clone(), &[4, 2])?;
                    let y = t.matmul(x, bt)?;
                    t.sum_all(y)
                },
                &a,
                &[3, 4],
                1e-5,
            )
            .unwrap();
            // grad wrt b with a fixed
            let err_b = finite_diff_check(
                |t, x| {
                    let at = t.constant(a.clone(), &[3, 4])?;
                    let y = t.matmul(at, x)?;
                    t.sum_all(y)
                },
                &b,
                &[4, 2],
                1e-5,
            )
            .unwrap();
            assert!(err_a <= 1e-6 && err_b <= 1e-6, "seed {seed}: {err_a} {err_b}");
        }
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let x: Vec<f64> = (0..20).map(|_| rng.random_range(-3.0..3.0)).collect();
            let w: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
            let err = finite_diff_check(
                |t, x| {
                    let sm = t.softmax(x, 1)?;
                    let wt = t.constant(w.clone(), &[4, 5])?;
                    let prod = t.mul(sm, wt)?;
                    t.sum_all(prod)
                },
                &x,
                &[4, 5],
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-6, "seed {seed}: err = {err}");
        }
    }

    #[test]
    fn every_op_passes_a_finite_difference_sweep() {
        // weighted sums force non-trivial cotangents through each op
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x: Vec<f64> = (0..12).map(|_| rng.random_range(0.25..2.0)).collect();
        let w: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let weighted_sum = |t: &mut Tape, y: TensorId, w: &[f64]| -> Result<TensorId> {
            let n = t.value(y).len();
            let wt = t.constant(w[..n].to_vec(), &[n])?;
            let yr = t.reshape(y, &[1, n])?;
            let wr = t.reshape(wt, &[1, n])?;
            let p = t.mul(yr, wr)?;
            t.sum_all(p)
        };
        type OpBuilder = fn(&mut Tape, TensorId) -> Result<TensorId>;
        let cases: Vec<(&str, OpBuilder)> = vec![
            ("sigmoid", |t, x| t.sigmoid(x)),
            ("tanh", |t, x| t.tanh(x)),
            ("relu", |t, x| t.relu(x)),
            ("exp", |t, x| t.exp(x)),
            ("log", |t, x| t.log(x)),
            ("sqrt", |t, x| t.sqrt(x)),
            ("neg", |t, x| t.neg(x)),
            ("scale", |t, x| t.scale(x, -2.5)),
            ("add_scalar", |t, x| t.add_scalar(x, 1.25)),
            ("transpose", |t, x| t.transpose(x)),
            ("softmax0", |t, x| t.softmax(x, 0)),
            ("log_softmax", |t, x| t.log_softmax(x, 1)),
            ("sum_axis0", |t, x| t.sum_axis(x, 0)),
            ("sum_axis1", |t, x| t.sum_axis(x, 1)),
            ("slice", |t, x| t.slice_cols(x, 1, 2)),
            ("gather", |t, x| t.gather_rows(x, &[2, 0, 2])),
            ("reshape", |t, x| t.reshape(x, &[4, 3])),
        ];
        for (name, build) in cases {
            let err = finite_diff_check(
                |t, xid| {
                    let y = build(t, xid)?;
                    weighted_sum(t, y, &w)
                },
                &x,
                &[3, 4],
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-6, "{name}: err = {err}");
        }
    }

    #[test]
    fn broadcast_binary_ops_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(0.5..2.0)).collect();
        let row: Vec<f64> = (0..3).map(|_| rng.random_range(0.5..2.0)).collect();
        let col: Vec<f64> = (0..2).map(|_| rng.random_range(0.5..2.0)).collect();
        type BinBuilder = fn(&mut Tape, TensorId, TensorId) -> Result<TensorId>;
        let ops: Vec<(&str, BinBuilder)> = vec![
            ("add", |t, a, b| t.add(a, b)),
            ("sub", |t, a, b| t.sub(a, b)),
            ("mul", |t, a, b| t.mul(a, b)),
            ("div", |t, a, b| t.div(a, b)),
        ];
        for (name, op) in &ops {
            // broadcast against a row
            let err = finite_diff_check(
                |t, xid| {
                    let r = t.constant(row.clone(), &[1, 3])?;
                    let y = op(t, xid, r)?;
                    t.sum_all(y)
                },
                &x,
                &[2, 3],
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-6, "{name} row: {err}");
            // gradient into the broadcast column side
            let err = finite_diff_check(
                |t, cid| {
                    let xt = t.constant(x.clone(), &[2, 3])?;
                    let y = op(t, xt, cid)?;
                    t.sum_all(y)
                },
                &col,
                &[2, 1],
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-6, "{name} col: {err}");
        }
    }

    #[test]
    fn layer_norm_and_cosine_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let err = finite_diff_check(
            |t, xid| {
                let g = t.constant(vec![1.1, 0.9, 1.3, 0.7], &[4])?;
                let b = t.constant(vec![0.1, -0.2, 0.0, 0.4], &[4])?;
                let y = t.layer_norm(xid, g, b)?;
                let w = t.constant((0..8).map(|i| 0.3 + i as f64 * 0.1).collect(), &[2, 4])?;
                let p = t.mul(y, w)?;
                t.sum_all(p)
            },
            &x,
            &[2, 4],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "layer_norm: {err}");

        let v: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let other: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let err = finite_diff_check(
            |t, vid| {
                let o = t.constant(other.clone(), &[5])?;
                t.cosine_similarity(vid, o)
            },
            &v,
            &[5],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "cosine: {err}");
    }

    #[test]
    fn masked_mean_gradient_matches_finite_differences() {
        let x = vec![0.5, -1.0, 2.0, 0.25, 3.0, -0.5];
        let err = finite_diff_check(
            |t, xid| {
                let m = t.constant(vec![1.0, 0.0, 1.0], &[3])?;
                let y = t.masked_mean_rows(xid, m)?;
                let w = t.constant(vec![2.0, -3.0], &[1, 2])?;
                let p = t.mul(y, w)?;
                t.sum_all(p)
            },
            &x,
            &[3, 2],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "masked_mean: {err}");
    }
}
