//! Central finite-difference gradient checking.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng;
use crate::tensor::Tensor;

/// Largest relative disagreement between the analytic gradient of `f` at
/// `x` and a central difference with the given step, measured per
/// coordinate as `|analytic - numeric| / max(1, |analytic|)`.
pub fn fd_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Contract("finite-difference step must be positive".into()));
    }
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let out = f(&mut g, xv)?;
    g.backward(out)?;
    let analytic = g.grad(xv);

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(t);
        let out = f(&mut g, v)?;
        Ok(g.value(out).data()[0])
    };
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(probe.clone())?;
        probe.data_mut()[i] = orig - step;
        let down = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.data()[i];
        worst = worst.max(libm::fabs(a - numeric) / libm::fabs(a).max(1.0));
    }
    Ok(worst)
}

/// Like [`fd_check`] but over several independent inputs at once; returns
/// the worst error across all of them.
pub fn fd_check_many<F>(f: F, xs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut worst: f64 = 0.0;
    for target in 0..xs.len() {
        let err = fd_check(
            |g, v| {
                let vars: Vec<Var> = xs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| if i == target { v } else { g.constant(t.clone()) })
                    .collect();
                f(g, &vars)
            },
            &xs[target],
            step,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Every differentiable graph operation, as a name and a closure mapping
/// its inputs to an output tensor.
type OpCase = (&'static str, Vec<Tensor>, fn(&mut Graph, &[Var]) -> Result<Var>);

fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut r = rng::seeded(seed);
    let mut u = |shape: &[usize]| Tensor::uniform(shape, 1.0, &mut r);
    // Keep ReLU inputs away from the kink.
    let mut relu_in = u(&[3, 4]);
    for v in relu_in.data_mut() {
        if libm::fabs(*v) < 0.05 {
            *v += 0.1 * v.signum();
        }
    }
    vec![
        ("matmul", vec![u(&[3, 4]), u(&[4, 2])], |g, x| g.matmul(x[0], x[1])),
        ("add", vec![u(&[3, 4]), u(&[3, 4])], |g, x| g.add(x[0], x[1])),
        ("sub", vec![u(&[3, 4]), u(&[3, 4])], |g, x| g.sub(x[0], x[1])),
        ("mul", vec![u(&[3, 4]), u(&[3, 4])], |g, x| g.mul(x[0], x[1])),
        ("scale", vec![u(&[3, 4])], |g, x| Ok(g.scale(x[0], 1.7))),
        ("add_row", vec![u(&[3, 4]), u(&[1, 4])], |g, x| g.add_row(x[0], x[1])),
        ("affine", vec![u(&[3, 4]), u(&[4, 2]), u(&[1, 2])], |g, x| g.affine(x[0], x[1], x[2])),
        ("relu", vec![relu_in], |g, x| Ok(g.relu(x[0]))),
        ("sigmoid", vec![u(&[3, 4])], |g, x| Ok(g.sigmoid(x[0]))),
        ("tanh", vec![u(&[3, 4])], |g, x| Ok(g.tanh(x[0]))),
        ("softmax_rows", vec![u(&[3, 4])], |g, x| Ok(g.softmax_rows(x[0]))),
        ("log_softmax_rows", vec![u(&[3, 4])], |g, x| Ok(g.log_softmax_rows(x[0]))),
        ("layer_norm", vec![u(&[3, 5]), u(&[1, 5]), u(&[1, 5])], |g, x| g.layer_norm(x[0], x[1], x[2])),
        ("concat_cols", vec![u(&[3, 2]), u(&[3, 3])], |g, x| g.concat_cols(&[x[0], x[1]])),
        ("concat_rows", vec![u(&[2, 4]), u(&[3, 4])], |g, x| g.concat_rows(&[x[0], x[1]])),
        ("slice_cols", vec![u(&[3, 5])], |g, x| g.slice_cols(x[0], 1, 3)),
        ("gather_rows", vec![u(&[4, 3])], |g, x| g.gather_rows(x[0], Arc::new(vec![2, 0, 2, 3, 1]))),
        ("reshape", vec![u(&[3, 4])], |g, x| g.reshape(x[0], &[2, 6])),
        ("sum", vec![u(&[3, 4])], |g, x| Ok(g.sum(x[0]))),
        ("mean", vec![u(&[3, 4])], |g, x| Ok(g.mean(x[0]))),
        ("group_weighted_sum", vec![u(&[2, 3]), u(&[6, 4])], |g, x| g.group_weighted_sum(x[0], x[1])),
        ("attention", vec![u(&[4, 4]), u(&[5, 4]), u(&[5, 4])], |g, x| {
            let allow = Arc::new(vec![vec![0], vec![0, 1, 2], vec![1, 2, 3, 4], vec![4]]);
            g.attention(x[0], x[1], x[2], 2, allow)
        }),
    ]
}

/// Gradient check of every differentiable operation on inputs drawn from
/// `seed`. Each output is reduced to a scalar through a fixed random
/// weighting so every output coordinate matters.
pub fn op_sweep(seed: u64, step: f64) -> Result<Vec<(&'static str, f64)>> {
    let mut out = Vec::new();
    for (i, (name, inputs, op)) in op_cases(seed).into_iter().enumerate() {
        let shape = {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            let y = op(&mut g, &vars)?;
            g.value(y).shape().to_vec()
        };
        let w = Tensor::uniform(&shape, 1.0, &mut rng::keyed(seed, rng::purpose::GRADCHECK, 0, i as u64));
        let err = fd_check_many(
            |g, x| {
                let y = op(g, x)?;
                let wv = g.constant(w.clone());
                let yw = g.mul(y, wv)?;
                Ok(g.sum(yw))
            },
            &inputs,
            step,
        )?;
        out.push((name, err));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_no_error() {
        let x = Tensor::row_vector(&[0.3, -1.0, 7.5]);
        let err = fd_check(|g, v| Ok(g.sum(v)), &x, 1e-5).unwrap();
        assert!(err < 1e-10);
    }

    #[test]
    fn square_sum_matches_hand_derivative() {
        let x = Tensor::row_vector(&[1.0, 2.0]);
        let mut g = Graph::new();
        let v = g.leaf(x.clone());
        let sq = g.mul(v, v).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(v).data(), &[2.0, 4.0]);
        let err = fd_check(
            |g, v| {
                let sq = g.mul(v, v)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6);
    }

    #[test]
    fn every_op_passes() {
        for (name, err) in op_sweep(3, 1e-5).unwrap() {
            assert!(err < 1e-6, "{name}: {err}");
        }
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::scalar(1.0);
        assert!(fd_check(|g, v| Ok(g.sum(v)), &x, 0.0).is_err());
    }
}
