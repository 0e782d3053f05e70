use crate::error::TensorError;

use super::{Graph, Tensor, Var};

/// Relative error with the conventional floor so near-zero derivatives
/// do not blow up the ratio.
pub(crate) fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Compare the reverse-mode gradient of `f` at `x` against central
/// differences, returning the max relative error over coordinates.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, Var) -> Var,
{
    if eps <= 0.0 {
        return Err(TensorError::Contract(format!("grad_check eps must be > 0, got {eps}")));
    }
    let analytic = {
        let mut g = Graph::new();
        let xv = g.leaf(x, true);
        let root = f(&mut g, xv);
        g.backward(root)?;
        g.grad(xv)
            .expect("x is a requires_grad leaf; backward populates its grad")
            .to_vec()
    };

    let eval = |data: &Tensor<f64>| -> f64 {
        let mut g = Graph::new();
        let xv = g.leaf(data, false);
        let root = f(&mut g, xv);
        g.scalar_value(root)
    };

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe);
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Central-difference check over a set of named tensors (model parameters).
/// `forward` rebuilds the scalar loss from the current tensor values;
/// `analytic` is the reverse-mode gradient for each tensor, aligned by index.
pub fn grad_check_store<F>(
    tensors: &mut [Tensor<f64>],
    analytic: &[Vec<f64>],
    mut forward: F,
    eps: f64,
) -> Result<f64, TensorError>
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    if eps <= 0.0 {
        return Err(TensorError::Contract(format!("grad_check eps must be > 0, got {eps}")));
    }
    assert_eq!(tensors.len(), analytic.len(), "analytic grads misaligned");
    let mut worst = 0.0f64;
    for ti in 0..tensors.len() {
        assert_eq!(tensors[ti].len(), analytic[ti].len(), "grad shape mismatch");
        for i in 0..tensors[ti].len() {
            let orig = tensors[ti].data()[i];
            tensors[ti].data_mut()[i] = orig + eps;
            let plus = forward(tensors);
            tensors[ti].data_mut()[i] = orig - eps;
            let minus = forward(tensors);
            tensors[ti].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[ti][i], numeric));
        }
    }
    Ok(worst)
}
