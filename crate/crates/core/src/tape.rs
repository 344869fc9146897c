//! Reverse-mode automatic differentiation over a recorded op list.
//!
//! Every vector-Jacobian product is itself recorded on the tape as ordinary
//! ops, so the result of [`Tape::grad`] can be differentiated again. That is
//! what lets the distiller backpropagate through an unrolled SGD loop into
//! the synthetic inputs.

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, ConvDims};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    MatMulTn(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    ScaleBy(Var, Var),
    MulConst(Var, Tensor),
    BiasAdd(Var, Var),
    BiasReduce(Var),
    BiasBroadcast(Var),
    Relu(Var),
    Conv2d { x: Var, w: Var, pad: usize },
    Conv2dBackInput { g: Var, w: Var, pad: usize },
    Conv2dBackWeight { x: Var, g: Var, pad: usize },
    AvgPool { x: Var, size: usize },
    AvgPoolBack { g: Var, size: usize },
    Reshape(Var),
    Slice { x: Var, offset: usize },
    Scatter { x: Var, offset: usize },
    Sum(Var),
    BroadcastScalar(Var),
    Softmax(Var),
    RowSum(Var),
    BroadcastCols(Var),
    CrossEntropy { logits: Var, labels: Vec<usize> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Constant => vec![],
            MatMul(a, b) | MatMulNt(a, b) | MatMulTn(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) => {
                vec![*a, *b]
            }
            ScaleBy(a, b) | BiasAdd(a, b) => vec![*a, *b],
            Scale(a, _) | MulConst(a, _) | BiasReduce(a) | BiasBroadcast(a) | Relu(a) => vec![*a],
            Conv2d { x, w, .. } => vec![*x, *w],
            Conv2dBackInput { g, w, .. } => vec![*g, *w],
            Conv2dBackWeight { x, g, .. } => vec![*x, *g],
            AvgPool { x, .. } | AvgPoolBack { g: x, .. } => vec![*x],
            Reshape(a) | Slice { x: a, .. } | Scatter { x: a, .. } => vec![*a],
            Sum(a) | BroadcastScalar(a) | Softmax(a) | RowSum(a) | BroadcastCols(a) => vec![*a],
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of primitive ops. Inputs always precede the ops that use
/// them, so a reverse sweep is a valid topological order.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    fn check_same(&self, context: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                context,
                expected: self.shape(a).to_vec(),
                actual: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn dims2(&self, context: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape {
                context,
                expected: vec![0, 0],
                actual: other.to_vec(),
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul lhs", a)?;
        let (k2, n) = self.dims2("matmul rhs", b)?;
        if k != k2 {
            return Err(Error::Shape {
                context: "matmul inner",
                expected: vec![k],
                actual: vec![k2],
            });
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul_nt lhs", a)?;
        let (n, k2) = self.dims2("matmul_nt rhs", b)?;
        if k != k2 {
            return Err(Error::Shape {
                context: "matmul_nt inner",
                expected: vec![k],
                actual: vec![k2],
            });
        }
        let out = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b)))
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let (k, m) = self.dims2("matmul_tn lhs", a)?;
        let (k2, n) = self.dims2("matmul_tn rhs", b)?;
        if k != k2 {
            return Err(Error::Shape {
                context: "matmul_tn inner",
                expected: vec![k],
                actual: vec![k2],
            });
        }
        let out = kernels::matmul_tn(self.value(a).data(), self.value(b).data(), k, m, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulTn(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let out = self.value(a).zip(self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("sub", a, b)?;
        let out = self.value(a).zip(self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let out = self.value(a).zip(self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    /// Multiplies every element of `a` by the single-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Shape {
                context: "scale_by scalar",
                expected: vec![1],
                actual: self.shape(s).to_vec(),
            });
        }
        let c = self.value(s).item();
        let out = self.value(a).map(|x| x * c);
        Ok(self.push(out, Op::ScaleBy(a, s)))
    }

    /// Element-wise product with a fixed tensor (masks, ReLU gates).
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(Error::Shape {
                context: "mul_const",
                expected: self.shape(a).to_vec(),
                actual: c.shape().to_vec(),
            });
        }
        let out = self.value(a).zip(&c, |x, y| x * y);
        Ok(self.push(out, Op::MulConst(a, c)))
    }

    /// Adds `b[c]` along axis 1 of `x`.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let channels = shape.get(1).copied().unwrap_or(0);
        if shape.len() < 2 || self.value(b).len() != channels {
            return Err(Error::Shape {
                context: "bias_add",
                expected: vec![channels],
                actual: self.shape(b).to_vec(),
            });
        }
        let out = kernels::bias_add(self.value(x).data(), self.value(b).data(), &shape);
        Ok(self.push(Tensor::new(shape, out)?, Op::BiasAdd(x, b)))
    }

    fn bias_reduce(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let out = kernels::bias_reduce(self.value(x).data(), &shape);
        Ok(self.push(Tensor::from_vec(out), Op::BiasReduce(x)))
    }

    fn bias_broadcast(&mut self, b: Var, shape: Vec<usize>) -> Result<Var> {
        let out = kernels::bias_broadcast(self.value(b).data(), &shape);
        Ok(self.push(Tensor::new(shape, out)?, Op::BiasBroadcast(b)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    fn conv_dims(&self, x_shape: &[usize], w_shape: &[usize], pad: usize) -> Result<ConvDims> {
        let (&[n, ci, h, wd], &[co, ci2, k, k2]) = (x_shape, w_shape) else {
            return Err(Error::Shape {
                context: "conv2d rank",
                expected: vec![0, 0, 0, 0],
                actual: x_shape.to_vec(),
            });
        };
        if ci != ci2 || k != k2 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::Shape {
                context: "conv2d",
                expected: x_shape.to_vec(),
                actual: w_shape.to_vec(),
            });
        }
        Ok(ConvDims {
            batch: n,
            in_ch: ci,
            out_ch: co,
            height: h,
            width: wd,
            kernel: k,
            pad,
        })
    }

    /// Stride-1 convolution, `x[N,Ci,H,W]`, `w[Co,Ci,K,K]`, zero padding `pad`.
    pub fn conv2d(&mut self, x: Var, w: Var, pad: usize) -> Result<Var> {
        let d = self.conv_dims(self.shape(x), self.shape(w), pad)?;
        let out = kernels::conv2d(self.value(x).data(), self.value(w).data(), &d);
        let shape = vec![d.batch, d.out_ch, d.out_h(), d.out_w()];
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv2d { x, w, pad }))
    }

    fn conv2d_back_input(&mut self, g: Var, w: Var, pad: usize, in_shape: &[usize]) -> Result<Var> {
        let d = self.conv_dims(in_shape, self.shape(w), pad)?;
        let out = kernels::conv2d_back_input(self.value(g).data(), self.value(w).data(), &d);
        Ok(self.push(Tensor::new(in_shape.to_vec(), out)?, Op::Conv2dBackInput { g, w, pad }))
    }

    fn conv2d_back_weight(&mut self, x: Var, g: Var, pad: usize, w_shape: &[usize]) -> Result<Var> {
        let d = self.conv_dims(self.shape(x), w_shape, pad)?;
        let out = kernels::conv2d_back_weight(self.value(x).data(), self.value(g).data(), &d);
        Ok(self.push(Tensor::new(w_shape.to_vec(), out)?, Op::Conv2dBackWeight { x, g, pad }))
    }

    pub fn avg_pool(&mut self, x: Var, size: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || size == 0 || shape[2] < size || shape[3] < size {
            return Err(Error::Shape {
                context: "avg_pool",
                expected: vec![0, 0, size, size],
                actual: shape,
            });
        }
        let out = kernels::avg_pool(self.value(x).data(), &shape, size);
        let out_shape = vec![shape[0], shape[1], shape[2] / size, shape[3] / size];
        Ok(self.push(Tensor::new(out_shape, out)?, Op::AvgPool { x, size }))
    }

    fn avg_pool_back(&mut self, g: Var, size: usize, in_shape: &[usize]) -> Result<Var> {
        let out = kernels::avg_pool_back(self.value(g).data(), in_shape, size);
        Ok(self.push(Tensor::new(in_shape.to_vec(), out)?, Op::AvgPoolBack { g, size }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Contiguous window of the flattened `x`, reshaped to `shape`.
    pub fn slice(&mut self, x: Var, offset: usize, shape: Vec<usize>) -> Result<Var> {
        let len: usize = shape.iter().product();
        let src = self.value(x).data();
        if offset + len > src.len() {
            return Err(Error::Shape {
                context: "slice",
                expected: vec![offset + len],
                actual: vec![src.len()],
            });
        }
        let out = Tensor::new(shape, src[offset..offset + len].to_vec())?;
        Ok(self.push(out, Op::Slice { x, offset }))
    }

    /// Embeds `x` into zeros of `shape` at flat `offset`.
    fn scatter(&mut self, x: Var, offset: usize, shape: Vec<usize>) -> Result<Var> {
        let mut out = Tensor::zeros(shape);
        let src = self.value(x).data();
        out.data_mut()[offset..offset + src.len()].copy_from_slice(src);
        Ok(self.push(out, Op::Scatter { x, offset }))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = kernels::sum(self.value(x).data());
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    fn broadcast_scalar(&mut self, s: Var, shape: Vec<usize>) -> Result<Var> {
        let out = Tensor::full(shape, self.value(s).item());
        Ok(self.push(out, Op::BroadcastScalar(s)))
    }

    pub fn softmax(&mut self, z: Var) -> Result<Var> {
        let (r, c) = self.dims2("softmax", z)?;
        let out = kernels::softmax_rows(self.value(z).data(), r, c);
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::Softmax(z)))
    }

    fn row_sum(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2("row_sum", x)?;
        let out = kernels::row_sum(self.value(x).data(), r, c);
        Ok(self.push(Tensor::new(vec![r, 1], out)?, Op::RowSum(x)))
    }

    fn broadcast_cols(&mut self, x: Var, cols: usize) -> Result<Var> {
        let rows = self.value(x).len();
        let src = self.value(x).data();
        let out: Vec<f32> = src.iter().flat_map(|&v| std::iter::repeat_n(v, cols)).collect();
        Ok(self.push(Tensor::new(vec![rows, cols], out)?, Op::BroadcastCols(x)))
    }

    /// Mean softmax cross-entropy of `logits[N,C]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2("cross_entropy", logits)?;
        if r != labels.len() {
            return Err(Error::Shape {
                context: "cross_entropy labels",
                expected: vec![r],
                actual: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::InvalidInput(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let rows = kernels::cross_entropy_rows(self.value(logits).data(), labels, c);
        let mean = rows.iter().sum::<f64>() / r as f64;
        Ok(self.push(
            Tensor::scalar(mean as f32),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Gradients of the single-element `output` with respect to each of `wrt`.
    ///
    /// The returned vars live on this tape; differentiating them again gives
    /// second-order quantities. Inputs that `output` does not depend on get a
    /// zero constant.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        if self.value(output).len() != 1 {
            return Err(Error::Shape {
                context: "grad output",
                expected: vec![1],
                actual: self.shape(output).to_vec(),
            });
        }
        let end = output.0 + 1;
        // Forward reachability from wrt.
        let mut reach = vec![false; end];
        for &w in wrt {
            if w.0 < end {
                reach[w.0] = true;
            }
        }
        for i in 0..end {
            if !reach[i] && self.nodes[i].op.inputs().iter().any(|v| reach[v.0]) {
                reach[i] = true;
            }
        }

        let mut adjoint: Vec<Option<Var>> = vec![None; end];
        if reach[output.0] {
            let seed = self.constant(Tensor::scalar(1.0));
            adjoint[output.0] = Some(seed);
        }
        for i in (0..end).rev() {
            let Some(up) = adjoint[i] else { continue };
            if !reach[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            for (input, contrib) in self.vjp(Var(i), &op, up)? {
                if !reach[input.0] {
                    continue;
                }
                adjoint[input.0] = Some(match adjoint[input.0] {
                    None => contrib,
                    Some(prev) => self.add(prev, contrib)?,
                });
            }
        }

        wrt.iter()
            .map(|&w| match adjoint.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let shape = self.shape(w).to_vec();
                    Ok(self.constant(Tensor::zeros(shape)))
                }
            })
            .collect()
    }

    fn vjp(&mut self, node: Var, op: &Op, up: Var) -> Result<Vec<(Var, Var)>> {
        use Op::*;
        Ok(match op {
            Leaf | Constant => vec![],
            MatMul(a, b) => {
                let ga = self.matmul_nt(up, *b)?;
                let gb = self.matmul_tn(*a, up)?;
                vec![(*a, ga), (*b, gb)]
            }
            MatMulNt(a, b) => {
                let ga = self.matmul(up, *b)?;
                let gb = self.matmul_tn(up, *a)?;
                vec![(*a, ga), (*b, gb)]
            }
            MatMulTn(a, b) => {
                let ga = self.matmul_nt(*b, up)?;
                let gb = self.matmul(*a, up)?;
                vec![(*a, ga), (*b, gb)]
            }
            Add(a, b) => vec![(*a, up), (*b, up)],
            Sub(a, b) => {
                let neg = self.scale(up, -1.0);
                vec![(*a, up), (*b, neg)]
            }
            Mul(a, b) => {
                let ga = self.mul(up, *b)?;
                let gb = self.mul(up, *a)?;
                vec![(*a, ga), (*b, gb)]
            }
            Scale(a, c) => vec![(*a, self.scale(up, *c))],
            ScaleBy(a, s) => {
                let ga = self.scale_by(up, *s)?;
                let prod = self.mul(up, *a)?;
                let gs = self.sum(prod);
                vec![(*a, ga), (*s, gs)]
            }
            MulConst(a, c) => vec![(*a, self.mul_const(up, c.clone())?)],
            BiasAdd(x, b) => {
                let gb = self.bias_reduce(up)?;
                vec![(*x, up), (*b, gb)]
            }
            BiasReduce(x) => {
                let shape = self.shape(*x).to_vec();
                vec![(*x, self.bias_broadcast(up, shape)?)]
            }
            BiasBroadcast(b) => vec![(*b, self.bias_reduce(up)?)],
            Relu(x) => {
                let gate = self.value(*x).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                vec![(*x, self.mul_const(up, gate)?)]
            }
            Conv2d { x, w, pad } => {
                let x_shape = self.shape(*x).to_vec();
                let w_shape = self.shape(*w).to_vec();
                let gx = self.conv2d_back_input(up, *w, *pad, &x_shape)?;
                let gw = self.conv2d_back_weight(*x, up, *pad, &w_shape)?;
                vec![(*x, gx), (*w, gw)]
            }
            Conv2dBackInput { g, w, pad } => {
                // node = A_w^T g; d/dg = A_w up, d/dw = back_weight(up, g)
                let w_shape = self.shape(*w).to_vec();
                let gg = self.conv2d(up, *w, *pad)?;
                let gw = self.conv2d_back_weight(up, *g, *pad, &w_shape)?;
                vec![(*g, gg), (*w, gw)]
            }
            Conv2dBackWeight { x, g, pad } => {
                // node = d/dw <conv(x, w), g>; linear in both x and g
                let x_shape = self.shape(*x).to_vec();
                let gx = self.conv2d_back_input(*g, up, *pad, &x_shape)?;
                let gg = self.conv2d(*x, up, *pad)?;
                vec![(*x, gx), (*g, gg)]
            }
            AvgPool { x, size } => {
                let in_shape = self.shape(*x).to_vec();
                vec![(*x, self.avg_pool_back(up, *size, &in_shape)?)]
            }
            AvgPoolBack { g, size } => vec![(*g, self.avg_pool(up, *size)?)],
            Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                vec![(*x, self.reshape(up, shape)?)]
            }
            Slice { x, offset } => {
                let shape = self.shape(*x).to_vec();
                vec![(*x, self.scatter(up, *offset, shape)?)]
            }
            Scatter { x, offset } => {
                let shape = self.shape(*x).to_vec();
                vec![(*x, self.slice(up, *offset, shape)?)]
            }
            Sum(x) => {
                let shape = self.shape(*x).to_vec();
                vec![(*x, self.broadcast_scalar(up, shape)?)]
            }
            BroadcastScalar(s) => vec![(*s, self.sum(up))],
            Softmax(z) => {
                // s ⊙ (up − rowsum(up ⊙ s))
                let cols = self.shape(*z)[1];
                let us = self.mul(up, node)?;
                let rs = self.row_sum(us)?;
                let bc = self.broadcast_cols(rs, cols)?;
                let centered = self.sub(up, bc)?;
                vec![(*z, self.mul(node, centered)?)]
            }
            RowSum(x) => {
                let cols = self.shape(*x)[1];
                vec![(*x, self.broadcast_cols(up, cols)?)]
            }
            BroadcastCols(x) => vec![(*x, self.row_sum(up)?)],
            CrossEntropy { logits, labels } => {
                let (r, c) = self.dims2("cross_entropy", *logits)?;
                let mut onehot = Tensor::zeros(vec![r, c]);
                for (i, &y) in labels.iter().enumerate() {
                    onehot.data_mut()[i * c + y] = 1.0;
                }
                let s = self.softmax(*logits)?;
                let target = self.constant(onehot);
                let diff = self.sub(s, target)?;
                let mean = self.scale(diff, 1.0 / r as f32);
                vec![(*logits, self.scale_by(mean, up)?)]
            }
        })
    }
}
