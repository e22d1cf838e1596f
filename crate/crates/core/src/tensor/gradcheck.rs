//! Central-difference gradient checks in fp64.
//!
//! The relative error of one coordinate is `|a - n| / max(|a|, |n|, 1e-8)`
//! where `a` is the autodiff gradient and `n` the numeric estimate
//! `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`.

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::Result;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval_scalar<F>(f: &F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.input(x);
    let out = f(&mut g, xv)?;
    Ok(g.value(out).iter().sum())
}

/// Autodiff gradient of a scalar function with respect to `x`.
pub fn autodiff_grad<F>(f: &F, x: &Tensor<f64>) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.input(&x.clone().with_requires_grad(true));
    let out = f(&mut g, xv)?;
    g.backward(out)?;
    Ok(g.grad(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]))
}

/// Max relative error between autodiff and central differences over every coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let analytic = autodiff_grad(&f, x)?;
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        worst = worst.max(relative_error(analytic[i], (up - down) / (2.0 * eps)));
    }
    Ok(worst)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Tensor name (or `"input"`) and flat index of the worst coordinate.
    pub worst: (String, usize),
    pub checked: usize,
}

/// Evenly spaced coordinates, at most `limit` of them.
fn sample_indices(len: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(l) if l < len => (0..l).map(|i| i * len / l).collect(),
        _ => (0..len).collect(),
    }
}

/// Gradient check of a model loss against every active parameter and the input.
///
/// `f` builds the loss from a fresh graph, the store, and the input node.
/// `per_tensor` bounds how many coordinates of each tensor are probed.
pub fn grad_check_model<F>(
    store: &mut ParamStore<f64>,
    input: &Tensor<f64>,
    mut f: F,
    eps: f64,
    per_tensor: Option<usize>,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &mut ParamStore<f64>, Var) -> Result<Var>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let xv = g.input(&input.clone().with_requires_grad(true));
    let loss = f(&mut g, store, xv)?;
    g.backward_into(loss, store)?;
    let input_grad = g.grad(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.numel()]);

    let mut eval = |store: &mut ParamStore<f64>, x: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.input(x);
        let out = f(&mut g, store, xv)?;
        Ok(g.value(out)[0])
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (String::new(), 0),
        checked: 0,
    };
    let record = |name: &str, i: usize, err: f64, report: &mut GradCheckReport| {
        report.checked += 1;
        if err > report.max_rel_error || report.worst.0.is_empty() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = (name.to_string(), i);
        }
    };

    let ids: Vec<_> = store.active_ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let analytic = store
            .get(id)
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; store.get(id).numel()]);
        for i in sample_indices(analytic.len(), per_tensor) {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + eps;
            let up = eval(store, input)?;
            store.get_mut(id).data_mut()[i] = orig - eps;
            let down = eval(store, input)?;
            store.get_mut(id).data_mut()[i] = orig;
            record(&name, i, relative_error(analytic[i], (up - down) / (2.0 * eps)), &mut report);
        }
    }

    let mut probe = input.clone();
    for i in sample_indices(input.numel(), per_tensor) {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(store, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(store, &probe)?;
        probe.data_mut()[i] = orig;
        record("input", i, relative_error(input_grad[i], (up - down) / (2.0 * eps)), &mut report);
    }
    store.zero_grad();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::<f64>::gaussian(&[12], 0.0, 1.0, 5).unwrap();
        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::<f64>::gaussian(&[4], 0.0, 1.0, 1).unwrap();
        let grad = autodiff_grad(
            &|g: &mut Graph<f64>, _x| g.constant(&[1], vec![3.0]),
            &x,
        )
        .unwrap();
        assert_eq!(grad, vec![0.0; 4]);
    }
}
