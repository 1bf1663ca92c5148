//! Wengert tape: every operation appends a node holding its value and the
//! recipe for its vector-Jacobian product. Node order is a topological order,
//! so the backward sweep is a single reverse pass over the node list.

use crate::gemm::{gemm, gemm_new, Layout};
use crate::tensor::{check_rank, split_axis, Tensor};
use crate::{AutodiffError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Neg,
    Exp,
    Log,
    Sin,
    Cos,
    Sqrt,
    Abs,
    Relu,
    Sigmoid,
    Square,
    Scale(f64),
    Offset(f64),
    Clamp(f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Minimum,
    Maximum,
}

/// Which operand (if any) is a rank-0 tensor broadcast over the other.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    None,
    Lhs,
    Rhs,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Unary(Unary, Var),
    Binary(Binary, Var, Var, Broadcast),
    MatMul {
        lhs: Var,
        rhs: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Expand {
        input: Var,
        axis: usize,
    },
    Reshape(Var),
    CumsumExclusive(Var),
    AddBias(Var, Var),
    Fourier {
        input: Var,
        frequencies: Vec<f64>,
    },
    StopGradient,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient, kept for leaves only.
    grad: Option<Vec<f64>>,
}

/// Record of the operations executed during one forward pass.
///
/// Leaves that require gradients accumulate `d loss / d leaf` across calls to
/// [`Tape::backward`]; callers reset them with [`Tape::zero_grad`].
#[derive(Debug, Default)]
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

    /// Register an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Accumulated gradient of a leaf, `None` until a backward pass reaches it.
    pub fn grad(&self, var: Var) -> Option<&[f64]> {
        self.nodes[var.0].grad.as_deref()
    }

    /// Gradient of a leaf as a tensor, zeros when none has been accumulated.
    pub fn grad_tensor(&self, var: Var) -> Tensor {
        let node = &self.nodes[var.0];
        let data = node
            .grad
            .clone()
            .unwrap_or_else(|| vec![0.0; node.value.numel()]);
        Tensor::from_parts(node.value.shape().to_vec(), data)
    }

    pub fn zero_grad(&mut self, vars: &[Var]) {
        for &v in vars {
            if let Some(g) = self.nodes[v.0].grad.as_mut() {
                g.fill(0.0);
            }
        }
    }

    pub fn zero_grad_all(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.fill(0.0);
            }
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let input = &self.nodes[x.0];
        let src = input.value.data();
        let data: Vec<f64> = match kind {
            Unary::Neg => src.iter().map(|v| -v).collect(),
            Unary::Exp => src.iter().map(|v| v.exp()).collect(),
            Unary::Log => src.iter().map(|v| v.ln()).collect(),
            Unary::Sin => src.iter().map(|v| v.sin()).collect(),
            Unary::Cos => src.iter().map(|v| v.cos()).collect(),
            Unary::Sqrt => src.iter().map(|v| v.sqrt()).collect(),
            Unary::Abs => src.iter().map(|v| v.abs()).collect(),
            Unary::Relu => src.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            Unary::Sigmoid => src.iter().map(|&v| sigmoid(v)).collect(),
            Unary::Square => src.iter().map(|v| v * v).collect(),
            Unary::Scale(c) => src.iter().map(|v| v * c).collect(),
            Unary::Offset(c) => src.iter().map(|v| v + c).collect(),
            Unary::Clamp(lo, hi) => src.iter().map(|v| v.clamp(lo, hi)).collect(),
        };
        let shape = input.value.shape().to_vec();
        let rg = input.requires_grad;
        self.push(Tensor::from_parts(shape, data), Op::Unary(kind, x), rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Unary::Neg, x)
    }
    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(Unary::Log, x)
    }
    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(Unary::Sin, x)
    }
    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(Unary::Cos, x)
    }
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(Unary::Sqrt, x)
    }
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(Unary::Abs, x)
    }
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }
    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Unary::Square, x)
    }
    /// `c * x` for a constant `c`.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(Unary::Scale(c), x)
    }
    /// `x + c` for a constant `c`.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        self.unary(Unary::Offset(c), x)
    }

    /// Elementwise clamp into `[lo, hi]`; the gradient is zero outside the bounds.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi || lo.is_nan() || hi.is_nan() {
            return Err(AutodiffError::InvalidBounds { lo, hi });
        }
        Ok(self.unary(Unary::Clamp(lo, hi), x))
    }

    /// Identity in the forward pass, blocks all gradient flow.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.push(value, Op::StopGradient, false)
    }

    fn binary(&mut self, kind: Binary, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let (sa, sb) = (na.value.shape(), nb.value.shape());
        let broadcast = if sa == sb {
            Broadcast::None
        } else if sa.is_empty() {
            Broadcast::Lhs
        } else if sb.is_empty() {
            Broadcast::Rhs
        } else {
            return Err(AutodiffError::ShapeMismatch {
                op: name,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        };
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
            Binary::Minimum => {
                if x <= y {
                    x
                } else {
                    y
                }
            }
            Binary::Maximum => {
                if x >= y {
                    x
                } else {
                    y
                }
            }
        };
        let (da, db) = (na.value.data(), nb.value.data());
        let (shape, data): (Vec<usize>, Vec<f64>) = match broadcast {
            Broadcast::None => (
                sa.to_vec(),
                da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            ),
            Broadcast::Lhs => (sb.to_vec(), db.iter().map(|&y| f(da[0], y)).collect()),
            Broadcast::Rhs => (sa.to_vec(), da.iter().map(|&x| f(x, db[0])).collect()),
        };
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Binary(kind, a, b, broadcast),
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, "add", a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, "sub", a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, "mul", a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, "div", a, b)
    }
    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Minimum, "minimum", a, b)
    }
    /// Elementwise maximum; ties send the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Maximum, "maximum", a, b)
    }

    /// Matrix product for `[m,k]·[k,n]`, `[m,k]·[k]` and `[k]·[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let (sa, sb) = (na.value.shape(), nb.value.shape());
        let mismatch = || AutodiffError::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        let (m, k, n, out_shape) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n, vec![*m, *n]),
            ([m, k], [k2]) if k == k2 => (*m, *k, 1, vec![*m]),
            ([k], [k2, n]) if k == k2 => (1, *k, *n, vec![*n]),
            _ => return Err(mismatch()),
        };
        let out = gemm_new(
            m,
            k,
            n,
            na.value.data(),
            Layout::Normal,
            nb.value.data(),
            Layout::Normal,
        );
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::MatMul {
                lhs: a,
                rhs: b,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// Sum of all elements, rank-0 result.
    pub fn sum(&mut self, x: Var) -> Var {
        let node = &self.nodes[x.0];
        let s = node.value.data().iter().sum();
        let rg = node.requires_grad;
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean of all elements, rank-0 result.
    pub fn mean(&mut self, x: Var) -> Var {
        let node = &self.nodes[x.0];
        let n = node.value.numel().max(1) as f64;
        let s: f64 = node.value.data().iter().sum();
        let rg = node.requires_grad;
        self.push(Tensor::scalar(s / n), Op::Mean(x), rg)
    }

    /// Sum over the last axis, dropping it.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let rank = self.nodes[x.0].value.rank();
        if rank == 0 {
            return Err(AutodiffError::InvalidAxis {
                op: "sum_axis",
                axis: 0,
                shape: Vec::new(),
            });
        }
        self.sum_axis(x, rank - 1)
    }

    /// Sum over `axis`, dropping it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let node = &self.nodes[x.0];
        let shape = node.value.shape();
        if axis >= shape.len() {
            return Err(AutodiffError::InvalidAxis {
                op: "sum_axis",
                axis,
                shape: shape.to_vec(),
            });
        }
        let (outer, extent, inner) = split_axis(shape, axis);
        let src = node.value.data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut data[o * inner..(o + 1) * inner];
            for r in 0..extent {
                let row = &src[(o * extent + r) * inner..][..inner];
                dst.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let rg = node.requires_grad;
        let out = Tensor::from_parts(out_shape, data);
        Ok(self.push(out, Op::SumAxis(x, axis), rg))
    }

    /// Join tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or(AutodiffError::EmptyInput { op: "concat" })?;
        let base = self.nodes[first.0].value.shape().to_vec();
        if axis >= base.len() {
            return Err(AutodiffError::InvalidAxis {
                op: "concat",
                axis,
                shape: base,
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.nodes[v.0].value.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let node = &self.nodes[v.0];
                let block = node.value.shape()[axis] * inner;
                data.extend_from_slice(&node.value.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Sub-range `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let node = &self.nodes[x.0];
        let shape = node.value.shape();
        if axis >= shape.len() {
            return Err(AutodiffError::InvalidAxis {
                op: "slice",
                axis,
                shape: shape.to_vec(),
            });
        }
        if start > end || end > shape[axis] {
            return Err(AutodiffError::InvalidRange {
                op: "slice",
                start,
                end,
                extent: shape[axis],
            });
        }
        let (outer, extent, inner) = split_axis(shape, axis);
        let len = end - start;
        let mut data = Vec::with_capacity(outer * len * inner);
        let src = node.value.data();
        for o in 0..outer {
            let base = o * extent * inner;
            data.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let rg = node.requires_grad;
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Slice {
                input: x,
                axis,
                start,
            },
            rg,
        ))
    }

    /// Insert a new axis of extent `size` at position `axis`, repeating the input.
    pub fn expand(&mut self, x: Var, axis: usize, size: usize) -> Result<Var> {
        let node = &self.nodes[x.0];
        let shape = node.value.shape();
        if axis > shape.len() {
            return Err(AutodiffError::InvalidAxis {
                op: "expand",
                axis,
                shape: shape.to_vec(),
            });
        }
        let mut out_shape = shape.to_vec();
        out_shape.insert(axis, size);
        check_rank("expand", &out_shape)?;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let src = node.value.data();
        let mut data = Vec::with_capacity(outer * size * inner);
        for o in 0..outer {
            let block = &src[o * inner..(o + 1) * inner];
            for _ in 0..size {
                data.extend_from_slice(block);
            }
        }
        let rg = node.requires_grad;
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Expand { input: x, axis },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let node = &self.nodes[x.0];
        check_rank("reshape", shape)?;
        if shape.iter().product::<usize>() != node.value.numel() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: node.value.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = node.value.data().to_vec();
        let rg = node.requires_grad;
        Ok(self.push(Tensor::from_parts(shape.to_vec(), data), Op::Reshape(x), rg))
    }

    /// Exclusive prefix sum along the last axis: `out[..., j] = Σ_{i<j} x[..., i]`.
    pub fn cumsum_exclusive(&mut self, x: Var) -> Result<Var> {
        let node = &self.nodes[x.0];
        let shape = node.value.shape();
        let Some(&inner) = shape.last() else {
            return Err(AutodiffError::InvalidAxis {
                op: "cumsum_exclusive",
                axis: 0,
                shape: shape.to_vec(),
            });
        };
        let src = node.value.data();
        let mut data = vec![0.0; src.len()];
        if inner > 0 {
            for (row_in, row_out) in src.chunks_exact(inner).zip(data.chunks_exact_mut(inner)) {
                let mut acc = 0.0;
                for (o, &v) in row_out.iter_mut().zip(row_in) {
                    *o = acc;
                    acc += v;
                }
            }
        }
        let rg = node.requires_grad;
        let out = Tensor::from_parts(shape.to_vec(), data);
        Ok(self.push(out, Op::CumsumExclusive(x), rg))
    }

    /// `x + b` with `b` of shape `[m]` repeated over every leading index of `x`
    /// (`[..., m]`).
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (nx, nb) = (&self.nodes[x.0], &self.nodes[b.0]);
        let (sx, sb) = (nx.value.shape(), nb.value.shape());
        let m = match (sx.last(), sb) {
            (Some(&m), &[mb]) if m == mb => m,
            _ => {
                return Err(AutodiffError::ShapeMismatch {
                    op: "add_bias",
                    lhs: sx.to_vec(),
                    rhs: sb.to_vec(),
                })
            }
        };
        let bias = nb.value.data();
        let data: Vec<f64> = if m == 0 {
            Vec::new()
        } else {
            let rows = nx.value.data().chunks_exact(m);
            rows.flat_map(|row| row.iter().zip(bias).map(|(x, b)| x + b))
                .collect()
        };
        let rg = nx.requires_grad || nb.requires_grad;
        let out = Tensor::from_parts(sx.to_vec(), data);
        Ok(self.push(out, Op::AddBias(x, b), rg))
    }

    /// Sines then cosines of `f * x` for each frequency `f`, stacked on a new
    /// trailing axis of extent `2 * frequencies.len()`.
    pub fn fourier(&mut self, x: Var, frequencies: &[f64]) -> Result<Var> {
        let node = &self.nodes[x.0];
        let mut shape = node.value.shape().to_vec();
        shape.push(2 * frequencies.len());
        check_rank("fourier", &shape)?;
        let nf = frequencies.len();
        let src = node.value.data();
        let mut data = vec![0.0; src.len() * 2 * nf];
        if nf > 0 {
            for (row, &v) in data.chunks_exact_mut(2 * nf).zip(src) {
                let (sines, cosines) = row.split_at_mut(nf);
                for ((s, c), &f) in sines.iter_mut().zip(cosines.iter_mut()).zip(frequencies) {
                    let a = v * f;
                    *s = a.sin();
                    *c = a.cos();
                }
            }
        }
        let rg = node.requires_grad;
        let op = Op::Fourier {
            input: x,
            frequencies: frequencies.to_vec(),
        };
        Ok(self.push(Tensor::from_parts(shape, data), op, rg))
    }

    /// Reverse sweep from a rank-0 `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_shape = self.nodes[loss.0].value.shape();
        if !loss_shape.is_empty() {
            return Err(AutodiffError::NonScalarLoss {
                shape: loss_shape.to_vec(),
            });
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match node.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
            } else {
                self.propagate(&self.nodes[i].op, i, g, &mut adj);
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, op: &Op, i: usize, g_owned: Vec<f64>, adj: &mut [Option<Vec<f64>>]) {
        let g = g_owned.as_slice();
        let out = self.nodes[i].value.data();
        match *op {
            Op::Leaf | Op::StopGradient => {}
            Op::Unary(kind, x) => {
                if !self.wants(x) {
                    return;
                }
                let xs = self.nodes[x.0].value.data();
                let pairs = g.iter().zip(xs.iter().zip(out));
                match kind {
                    Unary::Neg => accumulate(adj, x, pairs.map(|(g, _)| -g)),
                    Unary::Exp => accumulate(adj, x, pairs.map(|(g, (_, y))| g * y)),
                    Unary::Log => accumulate(adj, x, pairs.map(|(g, (x, _))| g / x)),
                    Unary::Sin => accumulate(adj, x, pairs.map(|(g, (x, _))| g * x.cos())),
                    Unary::Cos => accumulate(adj, x, pairs.map(|(g, (x, _))| -(g * x.sin()))),
                    Unary::Sqrt => accumulate(adj, x, pairs.map(|(g, (_, y))| g * 0.5 / y)),
                    Unary::Abs => accumulate(
                        adj,
                        x,
                        pairs.map(|(g, (x, _))| {
                            if *x > 0.0 {
                                *g
                            } else if *x < 0.0 {
                                -g
                            } else {
                                0.0
                            }
                        }),
                    ),
                    Unary::Relu => accumulate(
                        adj,
                        x,
                        pairs.map(|(g, (x, _))| if *x > 0.0 { *g } else { 0.0 }),
                    ),
                    Unary::Sigmoid => {
                        accumulate(adj, x, pairs.map(|(g, (_, y))| g * y * (1.0 - y)))
                    }
                    Unary::Square => accumulate(adj, x, pairs.map(|(g, (x, _))| 2.0 * g * x)),
                    Unary::Scale(c) => accumulate(adj, x, pairs.map(|(g, _)| g * c)),
                    Unary::Offset(_) => accumulate_owned(adj, x, g_owned),
                    Unary::Clamp(lo, hi) => accumulate(
                        adj,
                        x,
                        pairs.map(|(g, (x, _))| if *x >= lo && *x <= hi { *g } else { 0.0 }),
                    ),
                }
            }
            Op::Binary(kind, a, b, broadcast) => {
                self.propagate_binary(kind, a, b, broadcast, g, adj)
            }
            Op::MatMul { lhs, rhs, m, k, n } => {
                if self.wants(lhs) {
                    let bv = self.nodes[rhs.0].value.data();
                    // dA[m,k] += dC[m,n] · Bᵀ
                    match adj[lhs.0].as_mut() {
                        Some(acc) => gemm(
                            m,
                            n,
                            k,
                            g,
                            Layout::Normal,
                            bv,
                            Layout::Transposed(n),
                            acc,
                            1.0,
                        ),
                        None => {
                            adj[lhs.0] = Some(gemm_new(
                                m,
                                n,
                                k,
                                g,
                                Layout::Normal,
                                bv,
                                Layout::Transposed(n),
                            ))
                        }
                    }
                }
                if self.wants(rhs) {
                    let av = self.nodes[lhs.0].value.data();
                    // dB[k,n] += Aᵀ · dC[m,n]
                    match adj[rhs.0].as_mut() {
                        Some(acc) => gemm(
                            k,
                            m,
                            n,
                            av,
                            Layout::Transposed(k),
                            g,
                            Layout::Normal,
                            acc,
                            1.0,
                        ),
                        None => {
                            adj[rhs.0] = Some(gemm_new(
                                k,
                                m,
                                n,
                                av,
                                Layout::Transposed(k),
                                g,
                                Layout::Normal,
                            ))
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if self.wants(x) {
                    let len = self.nodes[x.0].value.numel();
                    slot(adj, x, len).iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Mean(x) => {
                if self.wants(x) {
                    let len = self.nodes[x.0].value.numel();
                    let s = g[0] / len.max(1) as f64;
                    slot(adj, x, len).iter_mut().for_each(|a| *a += s);
                }
            }
            Op::SumAxis(x, axis) => {
                if self.wants(x) {
                    let xv = &self.nodes[x.0].value;
                    let (outer, extent, inner) = split_axis(xv.shape(), axis);
                    let acc = slot(adj, x, xv.numel());
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for r in 0..extent {
                            let dst = &mut acc[(o * extent + r) * inner..][..inner];
                            dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    }
                }
            }
            Op::Concat { ref inputs, axis } => {
                let out_shape = self.nodes[i].value.shape();
                let (outer, total, inner) = split_axis(out_shape, axis);
                let mut offset = 0;
                for &v in inputs {
                    let shape = self.nodes[v.0].value.shape();
                    let block = shape[axis] * inner;
                    if self.wants(v) {
                        let acc = slot(adj, v, outer * block);
                        for o in 0..outer {
                            let src = &g[o * total * inner + offset..][..block];
                            acc[o * block..(o + 1) * block]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                    offset += block;
                }
            }
            Op::Slice { input, axis, start } => {
                if self.wants(input) {
                    let in_shape = self.nodes[input.0].value.shape();
                    let (outer, extent, inner) = split_axis(in_shape, axis);
                    let len = self.nodes[i].value.shape()[axis];
                    let acc = slot(adj, input, outer * extent * inner);
                    for o in 0..outer {
                        let dst = &mut acc[o * extent * inner + start * inner..][..len * inner];
                        let src = &g[o * len * inner..][..len * inner];
                        dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Expand { input, axis } => {
                if self.wants(input) {
                    let in_shape = self.nodes[input.0].value.shape();
                    let outer: usize = in_shape[..axis].iter().product();
                    let inner: usize = in_shape[axis..].iter().product();
                    let size = self.nodes[i].value.shape()[axis];
                    let acc = slot(adj, input, outer * inner);
                    for o in 0..outer {
                        let dst = &mut acc[o * inner..(o + 1) * inner];
                        for r in 0..size {
                            let src = &g[(o * size + r) * inner..][..inner];
                            dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if self.wants(x) {
                    accumulate_owned(adj, x, g_owned);
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(b) {
                    let m = self.nodes[b.0].value.numel();
                    let acc = slot(adj, b, m);
                    if m > 0 {
                        for row in g.chunks_exact(m) {
                            acc.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                        }
                    }
                }
                if self.wants(x) {
                    accumulate_owned(adj, x, g_owned);
                }
            }
            Op::Fourier {
                input,
                ref frequencies,
            } => {
                if self.wants(input) && !frequencies.is_empty() {
                    let nf = frequencies.len();
                    // d sin(f x) = f cos(f x), d cos(f x) = -f sin(f x)
                    let terms = out.chunks_exact(2 * nf).zip(g.chunks_exact(2 * nf));
                    accumulate(
                        adj,
                        input,
                        terms.map(|(y, g)| {
                            let (s, c) = y.split_at(nf);
                            let (gs, gc) = g.split_at(nf);
                            (0..nf)
                                .map(|l| frequencies[l] * (gs[l] * c[l] - gc[l] * s[l]))
                                .sum()
                        }),
                    );
                }
            }
            Op::CumsumExclusive(x) => {
                if self.wants(x) {
                    let inner = *self.nodes[x.0].value.shape().last().unwrap_or(&1);
                    let acc = slot(adj, x, g.len());
                    if inner > 0 {
                        // d x_i = Σ_{j>i} g_j
                        for (row_acc, row_g) in
                            acc.chunks_exact_mut(inner).zip(g.chunks_exact(inner))
                        {
                            let mut suffix = 0.0;
                            for j in (0..inner).rev() {
                                row_acc[j] += suffix;
                                suffix += row_g[j];
                            }
                        }
                    }
                }
            }
        }
    }

    fn propagate_binary(
        &self,
        kind: Binary,
        a: Var,
        b: Var,
        broadcast: Broadcast,
        g: &[f64],
        adj: &mut [Option<Vec<f64>>],
    ) {
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let n = g.len();
        let at = |j: usize| {
            if broadcast == Broadcast::Lhs {
                av[0]
            } else {
                av[j]
            }
        };
        let bt = |j: usize| {
            if broadcast == Broadcast::Rhs {
                bv[0]
            } else {
                bv[j]
            }
        };
        // Partial derivatives of the elementwise map at position j.
        let da = |j: usize| -> f64 {
            match kind {
                Binary::Add | Binary::Sub => 1.0,
                Binary::Mul => bt(j),
                Binary::Div => 1.0 / bt(j),
                Binary::Minimum => f64::from(u8::from(at(j) <= bt(j))),
                Binary::Maximum => f64::from(u8::from(at(j) >= bt(j))),
            }
        };
        let db = |j: usize| -> f64 {
            match kind {
                Binary::Add => 1.0,
                Binary::Sub => -1.0,
                Binary::Mul => at(j),
                Binary::Div => -at(j) / (bt(j) * bt(j)),
                Binary::Minimum => f64::from(u8::from(at(j) > bt(j))),
                Binary::Maximum => f64::from(u8::from(at(j) < bt(j))),
            }
        };
        if self.wants(a) {
            if broadcast == Broadcast::Lhs {
                let s: f64 = (0..n).map(|j| g[j] * da(j)).sum();
                slot(adj, a, 1)[0] += s;
            } else {
                accumulate(adj, a, (0..n).map(|j| g[j] * da(j)));
            }
        }
        if self.wants(b) {
            if broadcast == Broadcast::Rhs {
                let s: f64 = (0..n).map(|j| g[j] * db(j)).sum();
                slot(adj, b, 1)[0] += s;
            } else {
                accumulate(adj, b, (0..n).map(|j| g[j] * db(j)));
            }
        }
    }
}

/// Add `values` into the adjoint of `v`, taking them as the adjoint when none exists yet.
fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, values: impl Iterator<Item = f64>) {
    match adj[v.0].as_mut() {
        Some(acc) => acc.iter_mut().zip(values).for_each(|(a, b)| *a += b),
        None => adj[v.0] = Some(values.collect()),
    }
}

fn accumulate_owned(adj: &mut [Option<Vec<f64>>], v: Var, values: Vec<f64>) {
    match adj[v.0].as_mut() {
        Some(acc) => acc.iter_mut().zip(&values).for_each(|(a, b)| *a += b),
        None => adj[v.0] = Some(values),
    }
}

fn slot(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    adj[v.0].get_or_insert_with(|| vec![0.0; len])
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
