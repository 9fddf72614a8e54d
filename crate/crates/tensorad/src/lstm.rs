//! LSTM layer composed from primitive ops (gate order i, f, g, o).

use crate::error::{Result, TensorError};
use crate::ops::Ops;
use crate::real::Real;
use crate::tensor::Tensor;

/// Trainable parameters of one LSTM direction.
#[derive(Debug, Clone)]
pub struct LstmWeights<V> {
    /// `[D, 4H]`
    pub w_ih: V,
    /// `[H, 4H]`
    pub w_hh: V,
    /// `[4H]`
    pub bias: V,
}

/// Parameters of one direction: `4 * (H * (D + H) + H)`.
pub fn lstm_param_count(input: usize, hidden: usize) -> usize {
    4 * (hidden * (input + hidden) + hidden)
}

/// Runs one direction over a time-major `[T * B, D]` input.
///
/// Returns the hidden state `[B, H]` for every time step in input order,
/// regardless of the direction of travel.
pub fn lstm_direction<E: Real, O: Ops<E>>(
    ops: &O,
    inputs: &O::V,
    steps: usize,
    batch: usize,
    weights: &LstmWeights<O::V>,
    reverse: bool,
) -> Result<Vec<O::V>> {
    let in_shape = ops.shape(inputs);
    let whh = ops.shape(&weights.w_hh);
    if whh.len() != 2 || whh[1] != 4 * whh[0] {
        return Err(TensorError::invalid("lstm", format!("w_hh must be [H, 4H], got {whh:?}")));
    }
    let hidden = whh[0];
    if steps == 0 || in_shape.len() != 2 || in_shape[0] != steps * batch {
        return Err(TensorError::invalid(
            "lstm",
            format!("input {in_shape:?} is not [T * B, D] with T = {steps}, B = {batch}"),
        ));
    }
    // Input projections for all steps in one product.
    let x_proj = ops.add_bias(&ops.matmul(inputs, &weights.w_ih)?, &weights.bias)?;
    let mut h = ops.constant(Tensor::zeros(&[batch, hidden]));
    let mut c = ops.constant(Tensor::zeros(&[batch, hidden]));
    let mut outputs: Vec<Option<O::V>> = vec![None; steps];
    let order: Vec<usize> = if reverse { (0..steps).rev().collect() } else { (0..steps).collect() };
    for t in order {
        let xt = ops.narrow(&x_proj, 0, t * batch, batch)?;
        let gates = ops.add(&xt, &ops.matmul(&h, &weights.w_hh)?)?;
        let i = ops.sigmoid(&ops.narrow(&gates, 1, 0, hidden)?);
        let f = ops.sigmoid(&ops.narrow(&gates, 1, hidden, hidden)?);
        let g = ops.tanh(&ops.narrow(&gates, 1, 2 * hidden, hidden)?);
        let o = ops.sigmoid(&ops.narrow(&gates, 1, 3 * hidden, hidden)?);
        c = ops.add(&ops.mul(&f, &c)?, &ops.mul(&i, &g)?)?;
        h = ops.mul(&o, &ops.tanh(&c))?;
        outputs[t] = Some(h.clone());
    }
    Ok(outputs.into_iter().map(|o| o.expect("every step visited")).collect())
}

/// Uni- or bidirectional LSTM layer. Bidirectional outputs are the
/// concatenation `[h_fwd_t, h_bwd_t]` along the feature axis.
pub fn lstm_layer<E: Real, O: Ops<E>>(
    ops: &O,
    inputs: &O::V,
    steps: usize,
    batch: usize,
    forward: &LstmWeights<O::V>,
    backward: Option<&LstmWeights<O::V>>,
) -> Result<Vec<O::V>> {
    let fwd = lstm_direction(ops, inputs, steps, batch, forward, false)?;
    let Some(bw) = backward else {
        return Ok(fwd);
    };
    let bwd = lstm_direction(ops, inputs, steps, batch, bw, true)?;
    fwd.iter()
        .zip(&bwd)
        .map(|(a, b)| ops.concat(&[a.clone(), b.clone()], 1))
        .collect()
}
