//! Central finite-difference checks of tape gradients in `f64`.
//!
//! Relative error per coordinate is `|a - n| / max(|a|, |n|, REL_FLOOR)`,
//! where `a` is the analytic and `n` the numeric derivative. At `h = 1e-5`
//! round-off in the two loss evaluations alone reaches `1e-9` in the
//! difference quotient for losses of order one, so gradients below the
//! floor are compared at an absolute resolution of `REL_FLOOR · 1e-4 = 1e-8`.

use rand::seq::index::sample;

use crate::error::Result;
use crate::nn::Params;
use crate::rng::rng;
use crate::tensor::{Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Location of the worst coordinate.
    pub worst: String,
    pub checked: usize,
}

impl GradCheck {
    fn new() -> Self {
        GradCheck { max_rel_error: 0.0, worst: String::new(), checked: 0 }
    }

    fn record(&mut self, analytic: f64, numeric: f64, at: impl FnOnce() -> String) {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        self.checked += 1;
        if rel > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = self.max_rel_error.max(rel);
            self.worst = format!("{} (analytic {analytic:e}, numeric {numeric:e})", at());
        }
    }
}

/// Checks every input coordinate of a scalar function built on a tape.
pub fn check_op<F>(inputs: &[Tensor<f64>], f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x)).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).numel()]))
        .collect();
    let mut report = GradCheck::new();
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        for j in 0..xs[i].numel() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&xs)?;
            xs[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&xs)?;
            xs[i].data_mut()[j] = orig;
            report.record(analytic[i][j], (up - down) / (2.0 * FD_STEP), || format!("input {i}[{j}]"));
        }
    }
    Ok(report)
}

/// Checks up to `per_tensor` randomly chosen coordinates of every parameter
/// tensor of `model` against `analytic` (in `params_mut` order).
pub fn check_params<M, L>(model: &mut M, analytic: &[Vec<f64>], per_tensor: usize, seed: u64, loss: L) -> Result<GradCheck>
where
    M: Params<f64>,
    L: Fn(&M) -> Result<f64>,
{
    let names: Vec<String> = model.named_params("").into_iter().map(|(n, _)| n).collect();
    let mut r = rng(seed);
    let mut report = GradCheck::new();
    for (t, name) in names.iter().enumerate() {
        let numel = model.params_mut()[t].numel();
        let picks = sample(&mut r, numel, per_tensor.min(numel)).into_vec();
        for j in picks {
            let orig = model.params_mut()[t].data()[j];
            model.params_mut()[t].data_mut()[j] = orig + FD_STEP;
            let up = loss(model)?;
            model.params_mut()[t].data_mut()[j] = orig - FD_STEP;
            let down = loss(model)?;
            model.params_mut()[t].data_mut()[j] = orig;
            report.record(analytic[t][j], (up - down) / (2.0 * FD_STEP), || format!("{name}[{j}]"));
        }
    }
    Ok(report)
}
