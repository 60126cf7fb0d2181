//! Neural-network building blocks on top of the tape: initialization,
//! dropout, and untracked convenience wrappers for single ops.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Epsilon added to the variance inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropoutMode {
    /// Independent Bernoulli per element.
    #[default]
    Element,
    /// One draw per (graph, feature channel), shared by every node of the graph.
    Channel,
}

/// Weight matrix `[out, inp]` drawn from `U(-1/√inp, 1/√inp)`.
pub fn init_linear<R: Rng + ?Sized>(out: usize, inp: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(&[out, inp], 1.0 / (inp as f64).sqrt(), rng)
}

/// Bias vector for a layer with `inp` inputs, same bound as the weights.
pub fn init_bias<R: Rng + ?Sized>(out: usize, inp: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(&[out], 1.0 / (inp as f64).sqrt(), rng)
}

/// Multiplicative dropout mask with survivors scaled by `1/(1-rate)`.
///
/// In channel mode the second-to-last axis is the node axis: one draw per
/// leading index and channel is broadcast across it.
pub fn dropout_mask<R: Rng + ?Sized>(
    shape: &[usize],
    rate: f64,
    mode: DropoutMode,
    rng: &mut R,
) -> Result<Tensor> {
    check_rate(rate)?;
    let keep = 1.0 / (1.0 - rate);
    let mut draw = || if rng.gen::<f64>() < rate { 0.0 } else { keep };
    let mut mask = Tensor::zeros(shape);
    match mode {
        DropoutMode::Element => mask.data_mut().iter_mut().for_each(|m| *m = draw()),
        DropoutMode::Channel => {
            let d = shape.last().copied().unwrap_or(1);
            let nodes = if shape.len() >= 2 { shape[shape.len() - 2] } else { 1 };
            let groups = mask.len() / (d * nodes).max(1);
            let data = mask.data_mut();
            for g in 0..groups {
                for c in 0..d {
                    let m = draw();
                    for i in 0..nodes {
                        data[(g * nodes + i) * d + c] = m;
                    }
                }
            }
        }
    }
    Ok(mask)
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Param(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// Applies dropout on the tape; the identity when not training or `rate == 0`.
pub fn dropout<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Var,
    rate: f64,
    mode: DropoutMode,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let mask = dropout_mask(tape.value(x).shape(), rate, mode, rng)?;
    let m = tape.constant(mask);
    tape.mul(x, m)
}

/// Row-wise softmax over the last axis of an untracked tensor.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = tape.softmax(v)?;
    Ok(tape.value(y).clone())
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (v, g, b) = (
        tape.constant(x.clone()),
        tape.constant(gamma.clone()),
        tape.constant(beta.clone()),
    );
    let y = tape.layer_norm(v, g, b, LAYER_NORM_EPS)?;
    Ok(tape.value(y).clone())
}

pub fn elementwise(f: Activation, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = apply(&mut tape, f, v)?;
    Ok(tape.value(y).clone())
}

pub fn apply(tape: &mut Tape, f: Activation, x: Var) -> Result<Var> {
    match f {
        Activation::Sigmoid => tape.sigmoid(x),
        Activation::Relu => tape.relu(x),
        Activation::Tanh => tape.tanh(x),
    }
}
