//! Graph-building variables and reverse-mode differentiation.
//!
//! Every operation on [`Var`]s records its inputs when at least one of them
//! requires a gradient. The vector-Jacobian product of each operation is itself
//! written with `Var` operations, so calling [`grad`] with `create_graph = true`
//! yields gradients that can be differentiated again. This is what the
//! gradient penalty of a WGAN-GP critic needs.

use std::collections::{HashMap, HashSet};
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::{branches, kernels};
use crate::Tensor;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone)]
enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar,
    Exp,
    Ln,
    Sqrt,
    Tanh,
    Sigmoid,
    Relu,
    LeakyRelu(f64),
    Abs,
    Square,
    SumTo,
    BroadcastTo,
    Reshape,
    Conv2d { stride: usize, pad: usize },
    ConvTranspose { stride: usize, pad: usize },
    ConvWeightGrad { stride: usize, pad: usize },
    MatMul,
    Transpose,
    Reverse(f64),
}

struct GradFn {
    op: Op,
    inputs: Vec<Var>,
}

struct Node {
    id: u64,
    value: Tensor,
    requires_grad: bool,
    grad_fn: Option<GradFn>,
}

/// A node in a differentiable computation.
///
/// Cloning a `Var` is cheap and shares the node. Values are immutable once
/// created; parameters are updated by building fresh leaves from new tensors.
#[derive(Clone)]
pub struct Var(Arc<Node>);

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, {:?}, grad={})", self.0.id, self.0.value, self.0.requires_grad)
    }
}

impl Var {
    fn make(value: Tensor, requires_grad: bool, grad_fn: Option<GradFn>) -> Var {
        Var(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            grad_fn,
        }))
    }

    /// A value that never receives gradients.
    pub fn constant(value: Tensor) -> Var {
        Var::make(value, false, None)
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn leaf(value: Tensor) -> Var {
        Var::make(value, true, None)
    }

    pub fn scalar(value: f64) -> Var {
        Var::constant(Tensor::scalar(value))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// A constant sharing this node's value.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    fn record(value: Tensor, op: Op, inputs: &[&Var]) -> Var {
        if inputs.iter().any(|v| v.requires_grad()) {
            let inputs = inputs.iter().map(|v| (*v).clone()).collect();
            Var::make(value, true, Some(GradFn { op, inputs }))
        } else {
            Var::constant(value)
        }
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&self, other: &Var) -> Var {
        let v = self.value().broadcast_zip(other.value(), |a, b| a + b);
        Var::record(v, Op::Add, &[self, other])
    }

    pub fn sub(&self, other: &Var) -> Var {
        let v = self.value().broadcast_zip(other.value(), |a, b| a - b);
        Var::record(v, Op::Sub, &[self, other])
    }

    pub fn mul(&self, other: &Var) -> Var {
        let v = self.value().broadcast_zip(other.value(), |a, b| a * b);
        Var::record(v, Op::Mul, &[self, other])
    }

    pub fn div(&self, other: &Var) -> Var {
        let v = self.value().broadcast_zip(other.value(), |a, b| a / b);
        Var::record(v, Op::Div, &[self, other])
    }

    /// Multiplies by a constant tensor (no gradient flows into `mask`).
    pub fn mul_const(&self, mask: &Tensor) -> Var {
        self.mul(&Var::constant(mask.clone()))
    }

    pub fn neg(&self) -> Var {
        Var::record(self.value().map(|a| -a), Op::Neg, &[self])
    }

    pub fn scale(&self, c: f64) -> Var {
        Var::record(self.value().map(|a| a * c), Op::Scale(c), &[self])
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        Var::record(self.value().map(|a| a + c), Op::AddScalar, &[self])
    }

    pub fn exp(&self) -> Var {
        Var::record(self.value().map(f64::exp), Op::Exp, &[self])
    }

    pub fn ln(&self) -> Var {
        Var::record(self.value().map(f64::ln), Op::Ln, &[self])
    }

    pub fn sqrt(&self) -> Var {
        Var::record(self.value().map(f64::sqrt), Op::Sqrt, &[self])
    }

    pub fn tanh(&self) -> Var {
        Var::record(self.value().map(f64::tanh), Op::Tanh, &[self])
    }

    pub fn sigmoid(&self) -> Var {
        Var::record(self.value().map(sigmoid), Op::Sigmoid, &[self])
    }

    pub fn relu(&self) -> Var {
        branches::note(self.value());
        Var::record(self.value().map(|a| a.max(0.0)), Op::Relu, &[self])
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        branches::note(self.value());
        let v = self.value().map(|a| if a > 0.0 { a } else { a * slope });
        Var::record(v, Op::LeakyRelu(slope), &[self])
    }

    pub fn abs(&self) -> Var {
        branches::note(self.value());
        Var::record(self.value().map(f64::abs), Op::Abs, &[self])
    }

    pub fn square(&self) -> Var {
        Var::record(self.value().map(|a| a * a), Op::Square, &[self])
    }

    /// Identity in the forward pass; scales incoming gradients by `-lambda`.
    pub fn reverse_grad(&self, lambda: f64) -> Var {
        Var::record(self.value().clone(), Op::Reverse(lambda), &[self])
    }

    // ---- shape -----------------------------------------------------------

    pub fn sum_to(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        Var::record(self.value().sum_to(shape), Op::SumTo, &[self])
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        Var::record(self.value().broadcast_to(shape), Op::BroadcastTo, &[self])
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        Var::record(self.value().reshape(shape), Op::Reshape, &[self])
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Var {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Var {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes_keepdim(&self, axes: &[usize]) -> Var {
        let mut shape = self.shape().to_vec();
        for &a in axes {
            shape[a] = 1;
        }
        self.sum_to(&shape)
    }

    pub fn mean_axes_keepdim(&self, axes: &[usize]) -> Var {
        let count: usize = axes.iter().map(|&a| self.shape()[a]).product();
        self.sum_axes_keepdim(axes).scale(1.0 / count as f64)
    }

    // ---- linear algebra --------------------------------------------------

    pub fn matmul(&self, other: &Var) -> Var {
        Var::record(kernels::matmul(self.value(), other.value()), Op::MatMul, &[self, other])
    }

    pub fn transpose2(&self) -> Var {
        Var::record(self.value().transpose2(), Op::Transpose, &[self])
    }

    /// Cross-correlation of an NCHW input with an OIHW weight.
    pub fn conv2d(&self, weight: &Var, stride: usize, pad: usize) -> Var {
        let v = kernels::conv2d(self.value(), weight.value(), stride, pad);
        Var::record(v, Op::Conv2d { stride, pad }, &[self, weight])
    }

    /// Transposed convolution producing spatial size `out_hw`; `weight` is
    /// laid out as for the forward convolution it transposes (`[C_in_of_self, C_out, k, k]`).
    pub fn conv_transpose2d(&self, weight: &Var, stride: usize, pad: usize, out_hw: (usize, usize)) -> Var {
        let v = kernels::conv2d_transpose(self.value(), weight.value(), stride, pad, out_hw);
        Var::record(v, Op::ConvTranspose { stride, pad }, &[self, weight])
    }

    fn conv_weight_grad(x: &Var, gy: &Var, stride: usize, pad: usize, k_hw: (usize, usize)) -> Var {
        let v = kernels::conv2d_weight_grad(x.value(), gy.value(), stride, pad, k_hw);
        Var::record(v, Op::ConvWeightGrad { stride, pad }, &[x, gy])
    }
}

pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

fn hw(shape: &[usize]) -> (usize, usize) {
    (shape[2], shape[3])
}

/// Vector-Jacobian product of one recorded op. `needs[i]` says whether input
/// `i` wants a gradient.
fn vjp(op: &Op, inputs: &[Var], g: &Var, needs: &[bool]) -> Vec<Option<Var>> {
    let want = |i: usize, f: &dyn Fn() -> Var| if needs[i] { Some(f()) } else { None };
    match op {
        Op::Add => {
            let (a, b) = (&inputs[0], &inputs[1]);
            vec![want(0, &|| g.sum_to(a.shape())), want(1, &|| g.sum_to(b.shape()))]
        }
        Op::Sub => {
            let (a, b) = (&inputs[0], &inputs[1]);
            vec![want(0, &|| g.sum_to(a.shape())), want(1, &|| g.neg().sum_to(b.shape()))]
        }
        Op::Mul => {
            let (a, b) = (&inputs[0], &inputs[1]);
            vec![
                want(0, &|| g.mul(b).sum_to(a.shape())),
                want(1, &|| g.mul(a).sum_to(b.shape())),
            ]
        }
        Op::Div => {
            let (a, b) = (&inputs[0], &inputs[1]);
            vec![
                want(0, &|| g.div(b).sum_to(a.shape())),
                want(1, &|| g.mul(a).div(&b.square()).neg().sum_to(b.shape())),
            ]
        }
        Op::Neg => vec![want(0, &|| g.neg())],
        Op::Scale(c) => vec![want(0, &|| g.scale(*c))],
        Op::AddScalar => vec![want(0, &|| g.clone())],
        Op::Exp => vec![want(0, &|| g.mul(&inputs[0].exp()))],
        Op::Ln => vec![want(0, &|| g.div(&inputs[0]))],
        Op::Sqrt => vec![want(0, &|| g.div(&inputs[0].sqrt().scale(2.0)))],
        Op::Tanh => vec![want(0, &|| {
            let t = inputs[0].tanh();
            g.mul(&t.square().neg().add_scalar(1.0))
        })],
        Op::Sigmoid => vec![want(0, &|| {
            let s = inputs[0].sigmoid();
            g.mul(&s.mul(&s.neg().add_scalar(1.0)))
        })],
        Op::Relu => vec![want(0, &|| {
            g.mul_const(&inputs[0].value().map(|a| if a > 0.0 { 1.0 } else { 0.0 }))
        })],
        Op::LeakyRelu(slope) => vec![want(0, &|| {
            g.mul_const(&inputs[0].value().map(|a| if a > 0.0 { 1.0 } else { *slope }))
        })],
        Op::Abs => vec![want(0, &|| g.mul_const(&inputs[0].value().map(f64::signum_or_zero)))],
        Op::Square => vec![want(0, &|| g.mul(&inputs[0]).scale(2.0))],
        Op::SumTo => vec![want(0, &|| g.broadcast_to(inputs[0].shape()))],
        Op::BroadcastTo => vec![want(0, &|| g.sum_to(inputs[0].shape()))],
        Op::Reshape => vec![want(0, &|| g.reshape(inputs[0].shape()))],
        Op::Conv2d { stride, pad } => {
            let (x, w) = (&inputs[0], &inputs[1]);
            vec![
                want(0, &|| g.conv_transpose2d(w, *stride, *pad, hw(x.shape()))),
                want(1, &|| Var::conv_weight_grad(x, g, *stride, *pad, hw(w.shape()))),
            ]
        }
        Op::ConvTranspose { stride, pad } => {
            // z = convT(y, w): <G, z> = <conv(G, w), y> = <wgrad(G, y), w>
            let (y, w) = (&inputs[0], &inputs[1]);
            vec![
                want(0, &|| g.conv2d(w, *stride, *pad)),
                want(1, &|| Var::conv_weight_grad(g, y, *stride, *pad, hw(w.shape()))),
            ]
        }
        Op::ConvWeightGrad { stride, pad } => {
            // W = wgrad(x, y): <G, W> = <conv(x, G), y> = <convT(y, G), x>
            let (x, y) = (&inputs[0], &inputs[1]);
            vec![
                want(0, &|| y.conv_transpose2d(g, *stride, *pad, hw(x.shape()))),
                want(1, &|| x.conv2d(g, *stride, *pad)),
            ]
        }
        Op::MatMul => {
            let (a, b) = (&inputs[0], &inputs[1]);
            vec![
                want(0, &|| g.matmul(&b.transpose2())),
                want(1, &|| a.transpose2().matmul(g)),
            ]
        }
        Op::Transpose => vec![want(0, &|| g.transpose2())],
        Op::Reverse(lambda) => vec![want(0, &|| g.scale(-lambda))],
    }
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

/// Nodes reachable from `root` that require gradients, in topological order
/// (inputs before consumers).
fn topo_order(root: &Var) -> Vec<Var> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Var, bool)> = vec![(root.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !v.requires_grad() || !visited.insert(v.0.id) {
            continue;
        }
        stack.push((v.clone(), true));
        if let Some(gf) = &v.0.grad_fn {
            for input in gf.inputs.iter().rev() {
                if input.requires_grad() && !visited.contains(&input.0.id) {
                    stack.push((input.clone(), false));
                }
            }
        }
    }
    order
}

/// Gradients of the scalar `output` with respect to each of `wrt`.
///
/// Inputs that do not influence `output` receive zeros. With
/// `create_graph = true` the returned gradients are themselves differentiable.
pub fn grad(output: &Var, wrt: &[Var], create_graph: bool) -> Vec<Var> {
    assert_eq!(output.value().len(), 1, "grad() needs a scalar output, got {:?}", output.shape());
    let wanted: HashSet<u64> = wrt.iter().map(|v| v.0.id).collect();
    let order = topo_order(output);
    let mut grads: HashMap<u64, Var> = HashMap::new();
    let mut kept: HashMap<u64, Var> = HashMap::new();
    grads.insert(output.0.id, Var::constant(Tensor::ones(output.shape())));

    for node in order.iter().rev() {
        let Some(g) = grads.remove(&node.0.id) else { continue };
        if wanted.contains(&node.0.id) {
            kept.insert(node.0.id, g.clone());
        }
        let Some(gf) = &node.0.grad_fn else { continue };
        let needs: Vec<bool> = gf.inputs.iter().map(|v| v.requires_grad()).collect();
        let (inputs, g) = if create_graph {
            (gf.inputs.clone(), g)
        } else {
            (gf.inputs.iter().map(Var::detach).collect::<Vec<_>>(), g.detach())
        };
        let parts = vjp(&gf.op, &inputs, &g, &needs);
        for (input, part) in gf.inputs.iter().zip(parts) {
            let Some(part) = part else { continue };
            let part = if create_graph { part } else { part.detach() };
            let entry = grads.remove(&input.0.id);
            let acc = match entry {
                Some(prev) => prev.add(&part),
                None => part,
            };
            grads.insert(input.0.id, acc);
        }
    }

    wrt.iter()
        .map(|v| {
            kept.remove(&v.0.id)
                .unwrap_or_else(|| Var::constant(Tensor::zeros(v.shape())))
        })
        .collect()
}

impl Add for &Var {
    type Output = Var;
    fn add(self, rhs: &Var) -> Var {
        Var::add(self, rhs)
    }
}

impl Sub for &Var {
    type Output = Var;
    fn sub(self, rhs: &Var) -> Var {
        Var::sub(self, rhs)
    }
}

impl Mul for &Var {
    type Output = Var;
    fn mul(self, rhs: &Var) -> Var {
        Var::mul(self, rhs)
    }
}

impl Div for &Var {
    type Output = Var;
    fn div(self, rhs: &Var) -> Var {
        Var::div(self, rhs)
    }
}

impl Neg for &Var {
    type Output = Var;
    fn neg(self) -> Var {
        Var::neg(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_build_no_graph() {
        let a = Var::constant(Tensor::ones(&[3]));
        let b = a.mul(&a).sum();
        assert!(!b.requires_grad());
    }

    #[test]
    fn simple_product_rule() {
        let x = Var::leaf(Tensor::new(&[2], vec![2.0, -3.0]));
        let y = x.mul(&x).mul(&x).sum(); // sum x^3
        let g = grad(&y, &[x.clone()], false);
        assert_eq!(g[0].value().data(), &[12.0, 27.0]);
    }

    #[test]
    fn second_derivative_of_cubic() {
        let x = Var::leaf(Tensor::scalar(1.5));
        let y = x.square().mul(&x);
        let dy = &grad(&y, &[x.clone()], true)[0];
        assert!((dy.value().item() - 3.0 * 1.5 * 1.5).abs() < 1e-12);
        let d2y = &grad(dy, &[x.clone()], false)[0];
        assert!((d2y.value().item() - 6.0 * 1.5).abs() < 1e-12);
    }

    #[test]
    fn unreached_inputs_get_zero() {
        let x = Var::leaf(Tensor::ones(&[2]));
        let z = Var::leaf(Tensor::ones(&[3]));
        let g = grad(&x.sum(), &[z], false);
        assert_eq!(g[0].value().data(), &[0.0; 3]);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let x = Var::leaf(Tensor::scalar(2.0));
        let y = x.add(&x).mul(&x); // 2x^2
        let g = grad(&y, &[x.clone()], false);
        assert_eq!(g[0].value().item(), 8.0);
    }

    #[test]
    fn reverse_grad_negates() {
        let x = Var::leaf(Tensor::new(&[2], vec![1.0, -2.0]));
        let y = x.reverse_grad(0.5);
        assert_eq!(y.value(), x.value());
        let w = Var::constant(Tensor::new(&[2], vec![1.0, -2.0]));
        let g = grad(&y.mul(&w).sum(), &[x.clone()], false);
        assert_eq!(g[0].value().data(), &[-0.5, 1.0]);
    }
}
