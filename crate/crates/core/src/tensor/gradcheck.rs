//! Central finite-difference gradient checking.
//!
//! The numeric side only evaluates forward values on fresh graphs whose
//! inputs are constants, so it never touches the backward pass it checks.

use super::{Graph, Tensor, Var};
use crate::error::Result;
use crate::scalar::Scalar;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|, 1e-8)` with norms taken over whole tensors.
pub fn relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let denom = analytic.l2_norm().max(numeric.l2_norm()).max(1e-8);
    diff / denom
}

/// Central differences of a scalar function of several tensors.
pub fn numeric_gradients<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&[Tensor<f64>]) -> Result<f64>,
{
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[k].shape());
        for i in 0..inputs[k].numel() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let plus = f(&work)?;
            work[k].data_mut()[i] = orig - h;
            let minus = f(&work)?;
            work[k].data_mut()[i] = orig;
            g.data_mut()[i] = (plus - minus) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// Compares tape gradients of `build` against central differences and
/// returns the worst relative error over all inputs.
///
/// `build` receives the graph and one leaf per input and must return a
/// scalar node.
pub fn check<F>(build: F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let forward = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };
    let numeric = numeric_gradients(forward, inputs, FD_STEP)?;

    let mut worst = 0.0f64;
    for (v, num) in vars.iter().zip(&numeric) {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(num.shape()));
        worst = worst.max(relative_error(&analytic, num));
    }
    Ok(worst)
}

/// Reduces a matrix node to a scalar with fixed pseudo-random weights so
/// every output entry contributes a distinct amount to the gradient.
pub fn weighted_sum<T: Scalar>(g: &mut Graph<T>, x: Var, salt: u64) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let n: usize = shape.iter().product();
    let mut state = salt ^ 0x9E37_79B9_7F4A_7C15;
    let weights = (0..n)
        .map(|_| {
            state = state
                .wrapping_mul(6_364_136_223_846_793_005)
                .wrapping_add(1_442_695_040_888_963_407);
            T::lit(((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0)
        })
        .collect();
    let w = g.constant(Tensor::from_parts(shape, weights));
    let prod = g.mul(x, w)?;
    g.sum(prod)
}
