//! Parameter containers shared by the encoder, fusion layers and heads.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Checkpoint, NamedTensor, Tape, Tensor, Var};

/// A named, ordered collection of parameter tensors.
///
/// `visit` and `params_mut` must walk the tensors in the same order; that
/// order is also the binding order used by forward passes.
pub trait Params<T: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>));
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>>;

    fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |n, t| out.push((n, t)));
        out
    }

    fn num_params(&self) -> usize {
        self.named_params("").iter().map(|(_, t)| t.numel()).sum()
    }

    fn to_named_tensors(&self, prefix: &str) -> Vec<NamedTensor> {
        self.named_params(prefix)
            .into_iter()
            .map(|(n, t)| NamedTensor::from_tensor(n, t))
            .collect()
    }

    /// Overwrites every tensor from the checkpoint entries under `prefix`.
    fn load_from(&mut self, prefix: &str, ckpt: &Checkpoint) -> Result<()> {
        let names: Vec<String> = self.named_params(prefix).into_iter().map(|(n, _)| n).collect();
        let mut loaded = Vec::with_capacity(names.len());
        for name in &names {
            let entry = ckpt
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            loaded.push(entry);
        }
        for (dst, src) in self.params_mut().into_iter().zip(loaded) {
            if dst.shape() != src.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    src.name,
                    src.shape,
                    dst.shape()
                )));
            }
            *dst = src.to_tensor()?;
        }
        Ok(())
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Registers parameters on a tape, recording the bound handles in order.
pub struct Binder<'t, T: Scalar> {
    pub tape: &'t mut Tape<T>,
    trainable: bool,
    vars: Vec<Var>,
}

impl<'t, T: Scalar> Binder<'t, T> {
    pub fn new(tape: &'t mut Tape<T>, trainable: bool) -> Self {
        Binder {
            tape,
            trainable,
            vars: Vec::new(),
        }
    }

    pub fn bind(&mut self, t: &Tensor<T>) -> Var {
        let v = if self.trainable {
            self.tape.param(t)
        } else {
            self.tape.constant(t.clone())
        };
        self.vars.push(v);
        v
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    pub fn into_vars(self) -> Vec<Var> {
        self.vars
    }
}

/// Gradients for `vars` after a backward pass; frozen vars yield zeros.
pub fn gradients<T: Scalar>(tape: &Tape<T>, vars: &[Var]) -> Vec<Vec<T>> {
    vars.iter()
        .map(|&v| match tape.grad(v) {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); tape.value(v).numel()],
        })
        .collect()
}

/// Global L2 norm clipping; returns the pre-clip norm.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| {
            let x = v.to_f64_lossy();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::from_f64_lossy(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Affine map `x·W + b` with `W` stored `in×out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl<T: Scalar> Linear<T> {
    /// Xavier/Glorot uniform weights, zero bias.
    pub fn xavier(input: usize, output: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let data = (0..input * output)
            .map(|_| T::from_f64_lossy(rng.gen_range(-limit..=limit)))
            .collect();
        Linear {
            weight: Tensor::new(vec![input, output], data).expect("shape"),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[input, output]),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, b: &mut Binder<'_, T>) -> LinearVars {
        LinearVars {
            weight: b.bind(&self.weight),
            bias: b.bind(&self.bias),
        }
    }
}

impl LinearVars {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        tape.add_bias(y, self.bias)
    }
}

impl<T: Scalar> Params<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<T> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormVars {
    pub gain: Var,
    pub bias: Var,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<T: Scalar> LayerNormParams<T> {
    pub fn new(dim: usize) -> Self {
        LayerNormParams {
            gain: Tensor::full(&[dim], T::one()),
            bias: Tensor::zeros(&[dim]),
        }
    }

    pub fn bind(&self, b: &mut Binder<'_, T>) -> LayerNormVars {
        LayerNormVars {
            gain: b.bind(&self.gain),
            bias: b.bind(&self.bias),
        }
    }
}

impl LayerNormVars {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.layer_norm(x, self.gain, self.bias, T::from_f64_lossy(LAYER_NORM_EPS))
    }
}

impl<T: Scalar> Params<T> for LayerNormParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(join(prefix, "gain"), &self.gain);
        f(join(prefix, "bias"), &self.bias);
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.gain, &mut self.bias]
    }
}

pub(crate) fn prefixed(prefix: &str, name: &str) -> String {
    join(prefix, name)
}
