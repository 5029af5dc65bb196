//! Elementwise arithmetic, activations and reductions.

use crate::error::{invalid, shape_mismatch, Result};
use crate::tape::{Backward, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

struct Binary(BinaryKind);

impl Backward for Binary {
    fn name(&self) -> &'static str {
        match self.0 {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (a, b) = (inputs[0], inputs[1]);
        Ok(match self.0 {
            BinaryKind::Add => vec![Some(grad.clone()), Some(grad.clone())],
            BinaryKind::Sub => vec![Some(grad.clone()), Some(grad.map(|g| -g))],
            BinaryKind::Mul => {
                let ga = zip_map(grad, b, |g, y| g * y);
                let gb = zip_map(grad, a, |g, x| g * x);
                vec![Some(ga), Some(gb)]
            }
            BinaryKind::Div => {
                let ga = zip_map(grad, b, |g, y| g / y);
                let mut gb = grad.clone();
                for ((g, x), y) in gb.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                    *g = -*g * x / (y * y);
                }
                vec![Some(ga), Some(gb)]
            }
        })
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn binary(tape: &mut Tape, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
    let (ta, tb) = (tape.value(a), tape.value(b));
    if ta.shape() != tb.shape() {
        return Err(shape_mismatch(Binary(kind).name(), ta.shape(), tb.shape()));
    }
    let out = match kind {
        BinaryKind::Add => zip_map(ta, tb, |x, y| x + y),
        BinaryKind::Sub => zip_map(ta, tb, |x, y| x - y),
        BinaryKind::Mul => zip_map(ta, tb, |x, y| x * y),
        BinaryKind::Div => zip_map(ta, tb, |x, y| x / y),
    };
    Ok(tape.push(out, &[a, b], Binary(kind)))
}

pub fn add(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    binary(tape, a, b, BinaryKind::Add)
}

pub fn sub(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    binary(tape, a, b, BinaryKind::Sub)
}

pub fn mul(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    binary(tape, a, b, BinaryKind::Mul)
}

pub fn div(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    binary(tape, a, b, BinaryKind::Div)
}

#[derive(Clone, Copy)]
enum UnaryKind {
    Scale(f64),
    Offset,
    Relu,
    Tanh,
    Sigmoid,
    Exp,
    Clamp(f64, f64),
}

struct Unary(UnaryKind);

impl Backward for Unary {
    fn name(&self) -> &'static str {
        match self.0 {
            UnaryKind::Scale(_) => "scale",
            UnaryKind::Offset => "add_scalar",
            UnaryKind::Relu => "relu",
            UnaryKind::Tanh => "tanh",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Exp => "exp",
            UnaryKind::Clamp(..) => "clamp",
        }
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let g = match self.0 {
            UnaryKind::Scale(s) => grad.map(|g| g * s),
            UnaryKind::Offset => grad.clone(),
            UnaryKind::Relu => zip_map(grad, x, |g, x| if x > 0.0 { g } else { 0.0 }),
            UnaryKind::Tanh => zip_map(grad, output, |g, y| g * (1.0 - y * y)),
            UnaryKind::Sigmoid => zip_map(grad, output, |g, y| g * y * (1.0 - y)),
            UnaryKind::Exp => zip_map(grad, output, |g, y| g * y),
            UnaryKind::Clamp(lo, hi) => zip_map(grad, x, |g, x| if x >= lo && x <= hi { g } else { 0.0 }),
        };
        Ok(vec![Some(g)])
    }
}

fn unary(tape: &mut Tape, x: Var, kind: UnaryKind, f: impl Fn(f64) -> f64) -> Var {
    let out = tape.value(x).map(f);
    tape.push(out, &[x], Unary(kind))
}

pub fn scale(tape: &mut Tape, x: Var, s: f64) -> Var {
    unary(tape, x, UnaryKind::Scale(s), |v| v * s)
}

pub fn add_scalar(tape: &mut Tape, x: Var, c: f64) -> Var {
    unary(tape, x, UnaryKind::Offset, |v| v + c)
}

pub fn relu(tape: &mut Tape, x: Var) -> Var {
    unary(tape, x, UnaryKind::Relu, |v| v.max(0.0))
}

pub fn tanh(tape: &mut Tape, x: Var) -> Var {
    unary(tape, x, UnaryKind::Tanh, f64::tanh)
}

pub fn sigmoid(tape: &mut Tape, x: Var) -> Var {
    unary(tape, x, UnaryKind::Sigmoid, |v| 1.0 / (1.0 + (-v).exp()))
}

pub fn exp(tape: &mut Tape, x: Var) -> Var {
    unary(tape, x, UnaryKind::Exp, f64::exp)
}

/// Clamps into `[lo, hi]`; the gradient is zero where the clamp is active.
pub fn clamp(tape: &mut Tape, x: Var, lo: f64, hi: f64) -> Var {
    unary(tape, x, UnaryKind::Clamp(lo, hi), |v| v.clamp(lo, hi))
}

struct SumAll;

impl Backward for SumAll {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(Tensor::full(inputs[0].shape(), grad.item()))])
    }
}

/// Sum of every element, as a one-element tensor.
pub fn sum(tape: &mut Tape, x: Var) -> Var {
    let s = tape.value(x).sum();
    tape.push(Tensor::scalar(s), &[x], SumAll)
}

pub fn mean(tape: &mut Tape, x: Var) -> Var {
    let n = tape.value(x).len().max(1) as f64;
    let s = sum(tape, x);
    scale(tape, s, 1.0 / n)
}

struct Reshape(Vec<usize>);

impl Backward for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(grad.clone().reshape(&self.0)?)])
    }
}

pub fn reshape(tape: &mut Tape, x: Var, shape: &[usize]) -> Result<Var> {
    let src = tape.value(x);
    let original = src.shape().to_vec();
    let out = src.clone().reshape(shape)?;
    Ok(tape.push(out, &[x], Reshape(original)))
}

struct Select {
    len: usize,
    index: usize,
}

impl Backward for Select {
    fn name(&self) -> &'static str {
        "select"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let mut g = Tensor::zeros(inputs[0].shape());
        g.data_mut()[self.index] = grad.item();
        debug_assert_eq!(g.len(), self.len);
        Ok(vec![Some(g)])
    }
}

/// Picks one element (flat index) as a one-element tensor.
pub fn select(tape: &mut Tape, x: Var, index: usize) -> Result<Var> {
    let t = tape.value(x);
    if index >= t.len() {
        return Err(invalid("select", format!("index {index} out of {} elements", t.len())));
    }
    let out = Tensor::scalar(t.data()[index]);
    let len = t.len();
    Ok(tape.push(out, &[x], Select { len, index }))
}

struct Stack(usize);

impl Backward for Stack {
    fn name(&self) -> &'static str {
        "stack_scalars"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok((0..self.0).map(|i| Some(Tensor::scalar(grad.data()[i]))).collect())
    }
}

/// Gathers one-element tensors into a vector.
pub fn stack_scalars(tape: &mut Tape, xs: &[Var]) -> Result<Var> {
    let mut data = Vec::with_capacity(xs.len());
    for &x in xs {
        let t = tape.value(x);
        if t.len() != 1 {
            return Err(invalid("stack_scalars", format!("expected scalar, got {:?}", t.shape())));
        }
        data.push(t.item());
    }
    Ok(tape.push(Tensor::from_vec(data), xs, Stack(xs.len())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(vec![1.0, -2.0, 3.5, 0.0]));
        let s = sum(&mut tape, x);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(vec![1.0, 2.0]));
        let s = sum(&mut tape, x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(crate::TensorError::TapeConsumed)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(vec![1.0, 2.0]));
        let y = relu(&mut tape, x);
        assert!(matches!(tape.backward(y), Err(crate::TensorError::NotScalar(_))));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::zeros(&[2, 3]));
        let b = tape.input(Tensor::zeros(&[3, 2]));
        let err = add(&mut tape, a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(vec![-1.0, 0.5, 2.0]));
        let y = clamp(&mut tape, x, 0.0, 1.0);
        let s = sum(&mut tape, y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }
}
