use super::{cst, numel, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::ot::{self, ProjectionSet};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    /// Value with no gradient path (constants and results of ops on constants).
    Const,
    /// Leaf that collects gradient.
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gather {
        table: Var,
        idx: Vec<usize>,
    },
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    StraightThrough {
        to: Var,
    },
    SlicedGw {
        c: Var,
        x: Var,
        grad_c: Vec<T>,
        grad_x: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape of recorded operations, rebuilt for every forward pass.
///
/// Nodes are appended in execution order, so every op's inputs precede it
/// and [`backward`](Graph::backward) simply walks the tape in reverse.
#[derive(Debug)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// `(outer, len_axis, inner)` strides for iterating along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes that carry a backward rule.
    pub fn recorded_ops(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Const | Op::Leaf))
            .count()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(&self.nodes[v.0].shape, self.nodes[v.0].value.clone())
            .expect("graph values are finite")
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs: bool) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let op = if needs { op } else { Op::Const };
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad: needs,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a tensor as a leaf; it collects gradient iff `requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        let needs = t.requires_grad();
        let op = if needs { Op::Leaf } else { Op::Const };
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op,
            needs_grad: needs,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that collects gradient regardless of the tensor's flag.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "constant",
                format!("shape {shape:?} with {} values", data.len()),
            ));
        }
        self.push("constant", shape.to_vec(), data, Op::Const, false)
    }

    /// Copy of `v` with no gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Const,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, format!("expected rank-2 operand, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let s = av[i * k + p];
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &bj) in orow.iter_mut().zip(brow) {
                    *o = *o + s * bj;
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b), needs)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        self.push(name, shape, out, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x + bias` where `bias` is a vector matching the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let width = *self.shape(x).last().unwrap_or(&1);
        if self.shape(bias) != [width] {
            return Err(Error::shape(
                "add_bias",
                format!("x {:?}, bias {:?}", self.shape(x), self.shape(bias)),
            ));
        }
        let bv = self.value(bias);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % width])
            .collect();
        let needs = self.needs(x) || self.needs(bias);
        let shape = self.shape(x).to_vec();
        self.push("add_bias", shape, out, Op::AddBias(x, bias), needs)
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let needs = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push(name, shape, out, op, needs)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        self.unary("scale", x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        self.unary("add_scalar", x, |v| v + s, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(T::zero()), Op::Relu(x))
    }

    /// GELU, tanh approximation (as in GPT-2).
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (c, a, half) = (cst::<T>(GELU_C), cst::<T>(GELU_A), cst::<T>(0.5));
        self.unary(
            "gelu",
            x,
            move |v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()),
            Op::Gelu(x),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, |v| v.ln(), Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, |v| v.exp(), Op::Exp(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} for shape {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..len {
                    max = max.max(xv[at(j)]);
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (xv[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum = sum + e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / sum;
                }
            }
        }
        let needs = self.needs(x);
        self.push("softmax", shape, out, Op::Softmax { x, axis }, needs)
    }

    /// Normalizes over the last axis, then applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().unwrap_or(&1);
        if self.shape(gamma) != [width] || self.shape(beta) != [width] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "x {shape:?}, gamma {:?}, beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let rows = numel(&shape) / width;
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let n = cst::<T>(width as f64);
        let eps = cst::<T>(eps);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * width..(r + 1) * width];
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) / n;
            let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..width {
                let h = (row[j] - mean) * rs;
                xhat[r * width + j] = h;
                out[r * width + j] = h * gv[j] + bv[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            needs,
        )
    }

    /// Rows of a `[V, D]` table selected by `idx`, giving `[idx.len(), D]`.
    pub fn embedding(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix_dims("embedding_gather", table)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
            return Err(Error::shape(
                "embedding_gather",
                format!("index {bad} out of range for table [{v}, {d}]"),
            ));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let needs = self.needs(table);
        self.push(
            "embedding_gather",
            vec![idx.len(), d],
            out,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            needs,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(x)) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let out = self.value(x).to_vec();
        let needs = self.needs(x);
        self.push("reshape", shape.to_vec(), out, Op::Reshape(x), needs)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for shape {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {base:?} along axis {axis}", s),
                ));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &v in inputs {
                let block = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v)[o * block..(o + 1) * block]);
            }
        }
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(
            "concat",
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            needs,
        )
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("{start}..{} along axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let needs = self.needs(x);
        self.push("slice", oshape, out, Op::Slice { x, axis, start }, needs)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("transpose", x)?;
        let xv = self.value(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        let needs = self.needs(x);
        self.push("transpose", vec![c, r], out, Op::Transpose(x), needs)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().fold(T::zero(), |a, &b| a + b);
        let needs = self.needs(x);
        self.push("sum", vec![], vec![s], Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = cst::<T>(self.value(x).len() as f64);
        let s = self.value(x).iter().fold(T::zero(), |a, &b| a + b) / n;
        let needs = self.needs(x);
        self.push("mean", vec![], vec![s], Op::Mean(x), needs)
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse_loss", a, b)?;
        let n = cst::<T>(self.value(a).len() as f64);
        let s = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
            / n;
        let needs = self.needs(a) || self.needs(b);
        self.push("mse_loss", vec![], vec![s], Op::Mse(a, b), needs)
    }

    /// Mean over rows of `-log softmax(logits)[target]`; logits are `[N, V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, vocab) = self.matrix_dims("cross_entropy_loss", logits)?;
        if targets.len() != rows {
            return Err(Error::shape(
                "cross_entropy_loss",
                format!("{rows} rows of logits, {} targets", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::shape(
                "cross_entropy_loss",
                format!("target {bad} out of range for {vocab} classes"),
            ));
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); rows * vocab];
        let mut total = T::zero();
        for r in 0..rows {
            let row = &lv[r * vocab..(r + 1) * vocab];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut sum = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[r * vocab + j] = e;
                sum = sum + e;
            }
            for p in &mut probs[r * vocab..(r + 1) * vocab] {
                *p = *p / sum;
            }
            total = total - (row[targets[r]] - max - sum.ln());
        }
        let loss = total / cst::<T>(rows as f64);
        let needs = self.needs(logits);
        self.push(
            "cross_entropy_loss",
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            needs,
        )
    }

    /// Takes its value from `value` and sends all of its gradient to `grad_to`.
    ///
    /// With `value = quantized` and `grad_to = features` this is the
    /// straight-through estimator; `value` itself receives no gradient.
    pub fn straight_through(&mut self, value: Var, grad_to: Var) -> Result<Var> {
        self.same_shape("straight_through", value, grad_to)?;
        let out = self.value(value).to_vec();
        let needs = self.needs(grad_to);
        let shape = self.shape(value).to_vec();
        self.push(
            "straight_through",
            shape,
            out,
            Op::StraightThrough { to: grad_to },
            needs,
        )
    }

    /// Sliced Gromov-Wasserstein discrepancy between the rows of `c` and `x`
    /// (both `[n, d]`). Sort permutations are held fixed during backward.
    pub fn sliced_gw(&mut self, c: Var, x: Var, proj: &ProjectionSet) -> Result<Var> {
        let (n, d) = self.matrix_dims("sliced_gw", c)?;
        let (n2, d2) = self.matrix_dims("sliced_gw", x)?;
        if n != n2 || d != d2 || d != proj.dim() {
            return Err(Error::shape(
                "sliced_gw",
                format!("c [{n}, {d}], x [{n2}, {d2}], directions of dim {}", proj.dim()),
            ));
        }
        let cv: Vec<f64> = self.value(c).iter().map(|v| v.to_f64().unwrap()).collect();
        let xv: Vec<f64> = self.value(x).iter().map(|v| v.to_f64().unwrap()).collect();
        let (cost, gc, gx) = ot::sliced_gw_with_grad(&cv, &xv, n, d, proj);
        let needs = self.needs(c) || self.needs(x);
        self.push(
            "sliced_gw",
            vec![],
            vec![cst(cost)],
            Op::SlicedGw {
                c,
                x,
                grad_c: gc.into_iter().map(cst).collect(),
                grad_x: gx.into_iter().map(cst).collect(),
            },
            needs,
        )
    }

    /// Reverse-mode sweep from a scalar `loss`. Fills gradients for every
    /// node on a gradient path; read them with [`grad`](Graph::grad).
    /// A graph can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Backward("graph already consumed".into()));
        }
        if self.nodes.is_empty() {
            return Err(Error::Backward("empty graph".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            backward_node(&self.nodes, node, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient accumulated at `v` by the last backward pass, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients for `vars`, zero-filled where none arrived.
    pub fn grads_of(&self, vars: &[Var]) -> Vec<Vec<T>> {
        vars.iter()
            .map(|&v| {
                self.grad(v)
                    .map(<[T]>::to_vec)
                    .unwrap_or_else(|| vec![T::zero(); self.nodes[v.0].value.len()])
            })
            .collect()
    }
}

/// Dot product with eight independent partial sums (vectorizes; the
/// summation order is fixed, so results stay deterministic).
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            lanes[l] = lanes[l] + x[l] * y[l];
        }
    }
    let mut s = ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]));
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        s = s + *x * *y;
    }
    s
}

fn acc<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    v: Var,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[v.0].needs_grad {
        return;
    }
    let g = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
    f(g);
}

fn backward_node<T: Scalar>(
    nodes: &[Node<T>],
    node: &Node<T>,
    gout: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let out = &node.value;
    match &node.op {
        Op::Const | Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            let n = nodes[b.0].shape[1];
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            acc(nodes, grads, *a, |ga| {
                for i in 0..m {
                    let grow = &gout[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bv[p * n..(p + 1) * n];
                        ga[i * k + p] = ga[i * k + p] + dot(grow, brow);
                    }
                }
            });
            acc(nodes, grads, *b, |gb| {
                for i in 0..m {
                    let grow = &gout[i * n..(i + 1) * n];
                    for p in 0..k {
                        let s = av[i * k + p];
                        for (g, &x) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *g = *g + s * x;
                        }
                    }
                }
            });
        }
        Op::Add(a, b) => {
            acc(nodes, grads, *a, |g| add_into(g, gout));
            acc(nodes, grads, *b, |g| add_into(g, gout));
        }
        Op::Sub(a, b) => {
            acc(nodes, grads, *a, |g| add_into(g, gout));
            acc(nodes, grads, *b, |g| {
                for (g, &x) in g.iter_mut().zip(gout) {
                    *g = *g - x;
                }
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            acc(nodes, grads, *a, |g| {
                for i in 0..g.len() {
                    g[i] = g[i] + gout[i] * bv[i];
                }
            });
            acc(nodes, grads, *b, |g| {
                for i in 0..g.len() {
                    g[i] = g[i] + gout[i] * av[i];
                }
            });
        }
        Op::AddBias(x, b) => {
            acc(nodes, grads, *x, |g| add_into(g, gout));
            let width = nodes[b.0].value.len();
            acc(nodes, grads, *b, |g| {
                for (i, &x) in gout.iter().enumerate() {
                    g[i % width] = g[i % width] + x;
                }
            });
        }
        Op::Scale(x, s) => acc(nodes, grads, *x, |g| {
            for (g, &o) in g.iter_mut().zip(gout) {
                *g = *g + o * *s;
            }
        }),
        Op::AddScalar(x) => acc(nodes, grads, *x, |g| add_into(g, gout)),
        Op::Relu(x) => {
            let xv = &nodes[x.0].value;
            acc(nodes, grads, *x, |g| {
                for i in 0..g.len() {
                    if xv[i] > T::zero() {
                        g[i] = g[i] + gout[i];
                    }
                }
            })
        }
        Op::Gelu(x) => {
            let xv = &nodes[x.0].value;
            let (c, a, half) = (cst::<T>(GELU_C), cst::<T>(GELU_A), cst::<T>(0.5));
            let three = cst::<T>(3.0);
            acc(nodes, grads, *x, |g| {
                for i in 0..g.len() {
                    let v = xv[i];
                    let t = (c * (v + a * v * v * v)).tanh();
                    let d = half * (T::one() + t)
                        + half * v * (T::one() - t * t) * c * (T::one() + three * a * v * v);
                    g[i] = g[i] + gout[i] * d;
                }
            })
        }
        Op::Sigmoid(x) => acc(nodes, grads, *x, |g| {
            for i in 0..g.len() {
                g[i] = g[i] + gout[i] * out[i] * (T::one() - out[i]);
            }
        }),
        Op::Log(x) => {
            let xv = &nodes[x.0].value;
            acc(nodes, grads, *x, |g| {
                for i in 0..g.len() {
                    g[i] = g[i] + gout[i] / xv[i];
                }
            })
        }
        Op::Exp(x) => acc(nodes, grads, *x, |g| {
            for i in 0..g.len() {
                g[i] = g[i] + gout[i] * out[i];
            }
        }),
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = axis_split(&node.shape, *axis);
            acc(nodes, grads, *x, |g| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot = (0..len).fold(T::zero(), |s, j| s + gout[at(j)] * out[at(j)]);
                        for j in 0..len {
                            g[at(j)] = g[at(j)] + out[at(j)] * (gout[at(j)] - dot);
                        }
                    }
                }
            })
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let width = nodes[gamma.0].value.len();
            let rows = xhat.len() / width;
            let gv = &nodes[gamma.0].value;
            acc(nodes, grads, *gamma, |g| {
                for r in 0..rows {
                    for j in 0..width {
                        g[j] = g[j] + gout[r * width + j] * xhat[r * width + j];
                    }
                }
            });
            acc(nodes, grads, *beta, |g| {
                for r in 0..rows {
                    for j in 0..width {
                        g[j] = g[j] + gout[r * width + j];
                    }
                }
            });
            let n = cst::<T>(width as f64);
            acc(nodes, grads, *x, |g| {
                for r in 0..rows {
                    let base = r * width;
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for j in 0..width {
                        let d = gout[base + j] * gv[j];
                        mean_d = mean_d + d;
                        mean_dx = mean_dx + d * xhat[base + j];
                    }
                    mean_d = mean_d / n;
                    mean_dx = mean_dx / n;
                    for j in 0..width {
                        let d = gout[base + j] * gv[j];
                        g[base + j] =
                            g[base + j] + rstd[r] * (d - mean_d - xhat[base + j] * mean_dx);
                    }
                }
            });
        }
        Op::Gather { table, idx } => {
            let d = nodes[table.0].shape[1];
            acc(nodes, grads, *table, |g| {
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut g[i * d..(i + 1) * d], &gout[r * d..(r + 1) * d]);
                }
            })
        }
        Op::Reshape(x) => acc(nodes, grads, *x, |g| add_into(g, gout)),
        Op::Concat { inputs, axis } => {
            let (outer, _, inner) = axis_split(&node.shape, *axis);
            let mut offset = 0;
            let mut starts = Vec::with_capacity(inputs.len());
            for &v in inputs {
                starts.push(offset);
                offset += nodes[v.0].shape[*axis] * inner;
            }
            let row = offset;
            for (k, &v) in inputs.iter().enumerate() {
                let block = nodes[v.0].shape[*axis] * inner;
                let start = starts[k];
                acc(nodes, grads, v, |g| {
                    for o in 0..outer {
                        add_into(
                            &mut g[o * block..(o + 1) * block],
                            &gout[o * row + start..o * row + start + block],
                        );
                    }
                });
            }
        }
        Op::Slice { x, axis, start } => {
            let (outer, full, inner) = axis_split(&nodes[x.0].shape, *axis);
            let len = node.shape[*axis];
            acc(nodes, grads, *x, |g| {
                for o in 0..outer {
                    let base = o * full * inner + start * inner;
                    add_into(
                        &mut g[base..base + len * inner],
                        &gout[o * len * inner..(o + 1) * len * inner],
                    );
                }
            })
        }
        Op::Transpose(x) => {
            let (r, c) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
            acc(nodes, grads, *x, |g| {
                for i in 0..r {
                    for j in 0..c {
                        g[i * c + j] = g[i * c + j] + gout[j * r + i];
                    }
                }
            })
        }
        Op::Sum(x) => acc(nodes, grads, *x, |g| {
            for v in g.iter_mut() {
                *v = *v + gout[0];
            }
        }),
        Op::Mean(x) => {
            let n = cst::<T>(nodes[x.0].value.len() as f64);
            acc(nodes, grads, *x, |g| {
                for v in g.iter_mut() {
                    *v = *v + gout[0] / n;
                }
            })
        }
        Op::Mse(a, b) => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let k = cst::<T>(2.0) * gout[0] / cst::<T>(av.len() as f64);
            acc(nodes, grads, *a, |g| {
                for i in 0..g.len() {
                    g[i] = g[i] + k * (av[i] - bv[i]);
                }
            });
            acc(nodes, grads, *b, |g| {
                for i in 0..g.len() {
                    g[i] = g[i] - k * (av[i] - bv[i]);
                }
            });
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let rows = targets.len();
            let vocab = probs.len() / rows.max(1);
            let k = gout[0] / cst::<T>(rows as f64);
            acc(nodes, grads, *logits, |g| {
                for r in 0..rows {
                    for j in 0..vocab {
                        let onehot = if j == targets[r] { T::one() } else { T::zero() };
                        g[r * vocab + j] = g[r * vocab + j] + k * (probs[r * vocab + j] - onehot);
                    }
                }
            })
        }
        Op::StraightThrough { to } => acc(nodes, grads, *to, |g| add_into(g, gout)),
        Op::SlicedGw {
            c,
            x,
            grad_c,
            grad_x,
        } => {
            acc(nodes, grads, *c, |g| {
                for (g, &d) in g.iter_mut().zip(grad_c) {
                    *g = *g + gout[0] * d;
                }
            });
            acc(nodes, grads, *x, |g| {
                for (g, &d) in g.iter_mut().zip(grad_x) {
                    *g = *g + gout[0] * d;
                }
            });
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}
