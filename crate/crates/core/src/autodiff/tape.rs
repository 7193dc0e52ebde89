use super::{AutodiffError, Tensor};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside this module.
///
/// `backward` receives the recorded input values, the output value and the
/// upstream gradient, and returns one gradient buffer per input (same lengths
/// as the inputs).
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Vec<f64>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// Right operand is either the same shape or one row broadcast over the batch.
    Binary {
        kind: Binary,
        lhs: Var,
        rhs: Var,
        broadcast: bool,
    },
    Scale(Var, f64),
    Relu(Var),
    RowSums(Var),
    ColumnMeans(Var),
    SquaredL2(Var),
    Sum(Var),
    Mean(Var),
    GatherRows(Var, Vec<usize>),
    GradScale(Var, f64),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Linear record of operations for reverse-mode differentiation.
///
/// Inputs of every node precede it, so a single reverse sweep visits each
/// operation once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

type Result<T> = std::result::Result<T, AutodiffError>;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, mut value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: "leaf" });
        }
        value.clear_grad();
        Ok(self.push_unchecked(value, Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass, if one has run.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn check(&self, v: Var) -> Result<&Tensor> {
        self.nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or(AutodiffError::UnknownVar(v.0))
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if self.backward_done {
            return Err(AutodiffError::BackwardTwice);
        }
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        Ok(self.push_unchecked(value, op))
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let aip = ad[i * k + p];
                let brow = &bd[p * m..(p + 1) * m];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        let value = Tensor::matrix(n, m, out)?;
        self.push("matmul", value, Op::MatMul(a, b))
    }

    fn binary(&mut self, kind: Binary, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        let broadcast = if ta.shape() == tb.shape() {
            false
        } else if ta.rank() == 2
            && tb.numel() == ta.cols()
            && (tb.shape() == [ta.cols()] || tb.shape() == [1, ta.cols()])
        {
            true
        } else {
            return Err(AutodiffError::ShapeMismatch {
                op: name,
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        };
        let c = tb.numel();
        let bd = tb.data();
        let out: Vec<f64> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(idx, &x)| {
                let y = if broadcast { bd[idx % c] } else { bd[idx] };
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                }
            })
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        self.push(
            name,
            value,
            Op::Binary {
                kind,
                lhs: a,
                rhs: b,
                broadcast,
            },
        )
    }

    /// Elementwise sum; `b` may also be a single row broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, "mul", a, b)
    }

    /// Adds a `[m]` bias to every row of an `[n, m]` matrix.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.check(x)?, self.check(bias)?);
        if tx.rank() != 2 || tb.rank() != 1 || tb.numel() != tx.cols() {
            return Err(AutodiffError::ShapeMismatch {
                op: "bias_add",
                left: tx.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        self.binary(Binary::Add, "bias_add", x, bias)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let t = self.check(x)?;
        let out = t.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("scale", value, Op::Scale(x, factor))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.check(x)?;
        let out = t.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("relu", value, Op::Relu(x))
    }

    /// `[n, m] -> [n, 1]`, summing each row.
    pub fn row_sums(&mut self, x: Var) -> Result<Var> {
        let t = self.check(x)?;
        let (n, m) = (t.rows(), t.cols());
        let out = (0..n).map(|i| t.data()[i * m..(i + 1) * m].iter().sum()).collect();
        let value = Tensor::matrix(n, 1, out)?;
        self.push("row_sums", value, Op::RowSums(x))
    }

    /// `[n, m] -> [1, m]`, averaging over rows.
    pub fn column_means(&mut self, x: Var) -> Result<Var> {
        let t = self.check(x)?;
        let (n, m) = (t.rows(), t.cols());
        let mut out = vec![0.0; m];
        for i in 0..n {
            for (o, v) in out.iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let value = Tensor::matrix(1, m, out)?;
        self.push("column_means", value, Op::ColumnMeans(x))
    }

    /// Sum of squares of every element.
    pub fn squared_l2(&mut self, x: Var) -> Result<Var> {
        let t = self.check(x)?;
        let s = t.data().iter().map(|v| v * v).sum();
        self.push("squared_l2", Tensor::scalar(s), Op::SquaredL2(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = self.check(x)?;
        let s = t.data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.check(x)?;
        let s: f64 = t.data().iter().sum();
        let m = s / t.numel() as f64;
        self.push("mean", Tensor::scalar(m), Op::Mean(x))
    }

    /// Selects rows of a matrix; the backward pass scatters gradients back.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let value = self.check(x)?.select_rows(indices)?;
        self.push("gather_rows", value, Op::GatherRows(x, indices.to_vec()))
    }

    /// Identity in the forward pass; multiplies the incoming gradient by `factor`.
    pub fn grad_scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let mut value = self.check(x)?.clone();
        value.clear_grad();
        self.push("grad_scale", value, Op::GradScale(x, factor))
    }

    /// Records a precomputed output together with its backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        let name = op.name();
        self.push(name, value, Op::Custom(inputs.to_vec(), op))
    }

    /// Populates the gradient of `loss` with respect to every recorded tensor.
    ///
    /// Tensors that do not influence `loss` receive zero gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(AutodiffError::BackwardTwice);
        }
        let lt = self.check(loss)?;
        if !lt.is_scalar() {
            return Err(AutodiffError::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    let (ad, bd) = (ta.data(), tb.data());
                    let mut ga = vec![0.0; n * k];
                    let mut gb = vec![0.0; k * m];
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let brow = &bd[p * m..(p + 1) * m];
                            ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            let aip = ad[i * k + p];
                            for (o, gv) in gb[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                *o += aip * gv;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Binary {
                    kind,
                    lhs,
                    rhs,
                    broadcast,
                } => {
                    let (ta, tb) = (val(*lhs), val(*rhs));
                    let c = tb.numel();
                    let bidx = |i: usize| if *broadcast { i % c } else { i };
                    let (ga, gb_full): (Vec<f64>, Vec<f64>) = match kind {
                        Binary::Add => (g.clone(), g.clone()),
                        Binary::Sub => (g.clone(), g.iter().map(|v| -v).collect()),
                        Binary::Mul => (
                            g.iter()
                                .enumerate()
                                .map(|(i, gv)| gv * tb.data()[bidx(i)])
                                .collect(),
                            g.iter().zip(ta.data()).map(|(gv, av)| gv * av).collect(),
                        ),
                    };
                    let gb = if *broadcast {
                        let mut acc = vec![0.0; c];
                        for (i, v) in gb_full.iter().enumerate() {
                            acc[i % c] += v;
                        }
                        acc
                    } else {
                        gb_full
                    };
                    accumulate(&mut grads, *lhs, ga);
                    accumulate(&mut grads, *rhs, gb);
                }
                Op::Scale(x, f) => {
                    let f = *f;
                    accumulate(&mut grads, *x, g.iter().map(|v| v * f).collect());
                }
                Op::Relu(x) => {
                    let gx = g
                        .iter()
                        .zip(val(*x).data())
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::RowSums(x) => {
                    let t = val(*x);
                    let m = t.cols();
                    let gx = (0..t.numel()).map(|i| g[i / m]).collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::ColumnMeans(x) => {
                    let t = val(*x);
                    let (n, m) = (t.rows(), t.cols());
                    let inv = 1.0 / n as f64;
                    let gx = (0..t.numel()).map(|i| g[i % m] * inv).collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::SquaredL2(x) => {
                    let g0 = g[0];
                    let gx = val(*x).data().iter().map(|v| 2.0 * v * g0).collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sum(x) => {
                    accumulate(&mut grads, *x, vec![g[0]; val(*x).numel()]);
                }
                Op::Mean(x) => {
                    let n = val(*x).numel();
                    accumulate(&mut grads, *x, vec![g[0] / n as f64; n]);
                }
                Op::GatherRows(x, indices) => {
                    let t = val(*x);
                    let m = t.cols();
                    let mut gx = vec![0.0; t.numel()];
                    for (r, &src) in indices.iter().enumerate() {
                        for (o, gv) in gx[src * m..(src + 1) * m]
                            .iter_mut()
                            .zip(&g[r * m..(r + 1) * m])
                        {
                            *o += gv;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::GradScale(x, f) => {
                    let f = *f;
                    accumulate(&mut grads, *x, g.iter().map(|v| v * f).collect());
                }
                Op::Custom(inputs, op) => {
                    let tin: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                    let gin = op.backward(&tin, &node.value, &g);
                    debug_assert_eq!(gin.len(), inputs.len());
                    for (v, gv) in inputs.iter().zip(gin) {
                        accumulate(&mut grads, *v, gv);
                    }
                }
            }
            grads[idx] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            let g = g.unwrap_or_else(|| vec![0.0; node.value.numel()]);
            if g.iter().any(|v| !v.is_finite()) {
                return Err(AutodiffError::NonFinite { op: "backward" });
            }
            node.value.set_grad(g);
        }
        self.backward_done = true;
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
        slot @ None => *slot = Some(g),
    }
}
