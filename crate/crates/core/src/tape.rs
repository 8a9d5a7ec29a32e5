//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to the [`Tape`]; inputs always precede the
//! node that consumes them, so a single reverse sweep over the node list
//! visits each node once and applies the chain rule.

use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            // `f64::max` would turn NaN into 0 and hide a diverged loss.
            Activation::Relu => {
                if v.is_nan() {
                    v
                } else {
                    v.max(0.0)
                }
            }
            Activation::Sigmoid => {
                let y = if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                };
                // Saturated outputs stay strictly inside (0, 1).
                y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
            }
        }
    }

    /// Derivative expressed through the activation's output `y`.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 3 || kernel.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d expects [c,h,w] input and [o,c,k,k] kernels, got {input:?} and {kernel:?}"
            )));
        }
        let (c_in, h, w) = (input[0], input[1], input[2]);
        let (c_out, kc, k, k2) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kc != c_in || k != k2 {
            return Err(Error::shape(format!(
                "kernel {kernel:?} incompatible with input {input:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d stride must be positive"));
        }
        if k > h + 2 * padding || k > w + 2 * padding {
            return Err(Error::shape(format!(
                "kernel side {k} exceeds padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        Ok(ConvGeometry {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            padding,
            out_h: (h + 2 * padding - k) / stride + 1,
            out_w: (w + 2 * padding - k) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Unfolds the input into a `[c_in·k·k, out_h·out_w]` column matrix.
    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let n = self.out_len();
        let mut cols = vec![0.0; self.patch_len() * n];
        for c in 0..self.c_in {
            let plane = &input[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oi in 0..self.out_h {
                        let ii = (oi * self.stride + ki) as isize - self.padding as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        let src_row = &plane[ii as usize * self.w..(ii as usize + 1) * self.w];
                        for oj in 0..self.out_w {
                            let jj = (oj * self.stride + kj) as isize - self.padding as isize;
                            if jj >= 0 && jj < self.w as isize {
                                dst[oi * self.out_w + oj] = src_row[jj as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Scatters column gradients back onto the input layout (adjoint of `im2col`).
    fn col2im_acc(&self, cols: &[f64], input_grad: &mut [f64]) {
        let n = self.out_len();
        for c in 0..self.c_in {
            let plane = &mut input_grad[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let src = &cols[row * n..(row + 1) * n];
                    for oi in 0..self.out_h {
                        let ii = (oi * self.stride + ki) as isize - self.padding as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        for oj in 0..self.out_w {
                            let jj = (oj * self.stride + kj) as isize - self.padding as isize;
                            if jj >= 0 && jj < self.w as isize {
                                plane[ii as usize * self.w + jj as usize] +=
                                    src[oi * self.out_w + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
        cols: Option<Vec<f64>>,
    },
    Activation(Var, Activation),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Row(Var, usize),
    Cosine {
        u: Var,
        v: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Floor applied to vector norms inside [`Tape::cosine`].
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`]: one optional gradient per node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, `None` when the loss does not depend on it
    /// through differentiable nodes.
    pub fn get(&self, var: Var) -> Option<Tensor> {
        let g = self.grads.get(var.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[var.0].clone(), g.clone()).expect("gradient shape"))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Which inputs of every ReLU on the tape are positive, in tape order.
    /// Two evaluations with equal patterns lie on the same linear piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Activation(x, Activation::Relu) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.nodes[x.0].value.data().iter().map(|&v| v > 0.0))
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that gradients do not flow into.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Copy of `x`'s current value as a constant leaf; gradients stop here.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.clone();
        self.constant(v)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `W·x + b` for a matrix `W[m×n]`, vector `x[n]` and optional bias `b[m]`.
    pub fn linear(&mut self, w: Var, x: Var, b: Option<Var>) -> Result<Var> {
        let n = self.value(x).numel();
        let col = self.reshape(x, &[n, 1])?;
        let prod = self.matmul(w, col)?;
        let m = self.value(prod).numel();
        let flat = self.reshape(prod, &[m])?;
        match b {
            Some(b) => self.add(flat, b),
            None => Ok(flat),
        }
    }

    /// Cross-correlation of a `[c_in,h,w]` input with `[c_out,c_in,k,k]` kernels,
    /// plus an optional per-output-channel bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeometry::new(
            self.value(input).shape(),
            self.value(kernel).shape(),
            stride,
            padding,
        )?;
        if let Some(b) = bias {
            if self.value(b).shape() != [geom.c_out] {
                return Err(Error::shape(format!(
                    "conv bias {:?} for {} output channels",
                    self.value(b).shape(),
                    geom.c_out
                )));
            }
        }
        let cols = geom.im2col(self.value(input).data());
        let n = geom.out_len();
        let mut out = vec![0.0; geom.c_out * n];
        if let Some(b) = bias {
            for (o, &bv) in self.value(b).data().iter().enumerate() {
                out[o * n..(o + 1) * n].fill(bv);
            }
        }
        gemm_acc(
            geom.c_out,
            geom.patch_len(),
            n,
            self.value(kernel).data(),
            false,
            &cols,
            false,
            &mut out,
        );
        let value = Tensor::new(vec![geom.c_out, geom.out_h, geom.out_w], out)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        let rg = self.rg(&inputs);
        let keep_cols = self.requires_grad(kernel);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols: keep_cols.then_some(cols),
            },
            rg,
        ))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let value = self.value(x).map(|v| kind.apply(v));
        let rg = self.rg(&[x]);
        self.push(value, Op::Activation(x, kind), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!(
                "softmax axis {axis} for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |t: usize| (o * len + t) * inner + i;
                let max = (0..len)
                    .map(|t| src[at(t)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for t in 0..len {
                    let e = (src[at(t)] - max).exp();
                    out[at(t)] = e;
                    total += e;
                }
                for t in 0..len {
                    out[at(t)] /= total;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(format!("{what} of {sa:?} and {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, factor), rg)
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    /// Sum of several same-shaped tensors.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let (first, rest) = xs
            .split_first()
            .ok_or_else(|| Error::contract("add_all of an empty list"))?;
        rest.iter().try_fold(*first, |acc, &x| self.add(acc, x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Concatenation of flattened inputs into one vector, in argument order.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::contract("concat of an empty list"));
        }
        let data: Vec<f64> = xs
            .iter()
            .flat_map(|&x| self.value(x).data().iter().copied())
            .collect();
        let rg = self.rg(xs);
        Ok(self.push(Tensor::vector(data), Op::Concat(xs.to_vec()), rg))
    }

    /// Row `index` of a 2-D tensor as a vector.
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let shape = self.value(x).shape();
        if shape.len() != 2 {
            return Err(Error::shape(format!("row() on shape {shape:?}")));
        }
        if index >= shape[0] {
            return Err(Error::Domain(format!(
                "row {index} of a {}-row table",
                shape[0]
            )));
        }
        let cols = shape[1];
        let data = self.value(x).data()[index * cols..(index + 1) * cols].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::vector(data), Op::Row(x, index), rg))
    }

    /// Cosine similarity of two equal-length tensors, norms floored at [`NORM_FLOOR`].
    pub fn cosine(&mut self, u: Var, v: Var) -> Result<Var> {
        self.same_shape(u, v, "cosine")?;
        let s = cosine_value(self.value(u).data(), self.value(v).data());
        let rg = self.rg(&[u, v]);
        Ok(self.push(Tensor::scalar(s), Op::Cosine { u, v }, rg))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward from non-scalar of shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        // Only nodes that take part in differentiation report gradients.
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let mut send = |var: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[var.0].requires_grad {
                return;
            }
            let slot =
                grads[var.0].get_or_insert_with(|| vec![0.0; self.nodes[var.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                // dA = G·Bᵀ, dB = Aᵀ·G
                send(*a, &|acc| gemm_acc(m, n, k, g, false, vb, true, acc));
                send(*b, &|acc| gemm_acc(k, m, n, va, true, g, false, acc));
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let n = geom.out_len();
                let p = geom.patch_len();
                if let Some(b) = bias {
                    send(*b, &|acc| {
                        for (o, a) in acc.iter_mut().enumerate() {
                            *a += g[o * n..(o + 1) * n].iter().sum::<f64>();
                        }
                    });
                }
                if let Some(cols) = cols {
                    send(*kernel, &|acc| {
                        gemm_acc(geom.c_out, n, p, g, false, cols, true, acc)
                    });
                }
                let kv = self.value(*kernel).data();
                send(*input, &|acc| {
                    let mut dcols = vec![0.0; p * n];
                    gemm_acc(p, geom.c_out, n, kv, true, g, false, &mut dcols);
                    geom.col2im_acc(&dcols, acc);
                });
            }
            Op::Activation(x, kind) => {
                let y = node.value.data();
                send(*x, &|acc| {
                    for ((a, &gi), &yi) in acc.iter_mut().zip(g).zip(y) {
                        *a += gi * kind.derivative_from_output(yi);
                    }
                });
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = node.value.data();
                let (outer, len, inner) = (*outer, *len, *inner);
                send(*x, &|acc| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |t: usize| (o * len + t) * inner + i;
                            let dot: f64 = (0..len).map(|t| g[at(t)] * y[at(t)]).sum();
                            for t in 0..len {
                                acc[at(t)] += y[at(t)] * (g[at(t)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                send(*a, &|acc| add_into(acc, g, 1.0));
                send(*b, &|acc| add_into(acc, g, 1.0));
            }
            Op::Sub(a, b) => {
                send(*a, &|acc| add_into(acc, g, 1.0));
                send(*b, &|acc| add_into(acc, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                send(*a, &|acc| {
                    for ((s, &gi), &bi) in acc.iter_mut().zip(g).zip(vb) {
                        *s += gi * bi;
                    }
                });
                send(*b, &|acc| {
                    for ((s, &gi), &ai) in acc.iter_mut().zip(g).zip(va) {
                        *s += gi * ai;
                    }
                });
            }
            Op::Scale(x, factor) => send(*x, &|acc| add_into(acc, g, *factor)),
            Op::Sum(x) => send(*x, &|acc| acc.iter_mut().for_each(|a| *a += g[0])),
            Op::Reshape(x) => send(*x, &|acc| add_into(acc, g, 1.0)),
            Op::Concat(xs) => {
                let mut offset = 0;
                for x in xs {
                    let len = self.value(*x).numel();
                    send(*x, &|acc| add_into(acc, &g[offset..offset + len], 1.0));
                    offset += len;
                }
            }
            Op::Row(x, index) => {
                let cols = g.len();
                send(*x, &|acc| {
                    add_into(&mut acc[index * cols..(index + 1) * cols], g, 1.0)
                });
            }
            Op::Cosine { u, v } => {
                let (uu, vv) = (self.value(*u).data(), self.value(*v).data());
                let s = node.value.data()[0];
                send(*u, &|acc| cosine_grad_acc(uu, vv, s, g[0], acc));
                send(*v, &|acc| cosine_grad_acc(vv, uu, s, g[0], acc));
            }
        }
        Ok(())
    }
}

fn add_into(acc: &mut [f64], g: &[f64], factor: f64) {
    for (a, &gi) in acc.iter_mut().zip(g) {
        *a += factor * gi;
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Cosine similarity with each norm floored at [`NORM_FLOOR`].
pub fn cosine_value(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    dot / (norm(u).max(NORM_FLOOR) * norm(v).max(NORM_FLOOR))
}

/// Accumulates `g · ∂cos(x, y)/∂x`.
fn cosine_grad_acc(x: &[f64], y: &[f64], s: f64, g: f64, acc: &mut [f64]) {
    let nx_raw = norm(x);
    let nx = nx_raw.max(NORM_FLOOR);
    let ny = norm(y).max(NORM_FLOOR);
    // Below the floor the x-norm is a constant, so only the dot product term remains.
    let radial = if nx_raw > NORM_FLOOR {
        s / (nx * nx)
    } else {
        0.0
    };
    for ((a, &xi), &yi) in acc.iter_mut().zip(x).zip(y) {
        *a += g * (yi / (nx * ny) - radial * xi);
    }
}
