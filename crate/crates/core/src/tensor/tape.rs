use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    /// Matrix plus a 1 x cols row vector broadcast over every row.
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var, T),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Log(Var),
    Pow(Var, T),
    Clamp(Var, T, T),
    ConcatCols(Var, Var),
    Transpose(Var),
    /// `out[i][j] = col[i] + other[j]` for two column vectors.
    OuterAdd(Var, Var),
    MaskedSoftmax(Var, Vec<bool>),
    Sum(Var),
    ColSum(Var),
    ColMean(Var),
    ColMax(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations in execution order; `backward` replays them in reverse.
///
/// Gradients of leaves accumulate across `backward` calls until
/// [`Tape::zero_grad`] is called.
#[derive(Debug, Default)]
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn unary(&mut self, name: &'static str, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let out = self.value(a).map(f);
        self.push(name, out, op, &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::Matmul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.value(a).shape(), self.value(row).shape());
        if sr != (1, sa.1) {
            return Err(Error::shape("add_row", sa, sr));
        }
        let r = self.value(row).data().to_vec();
        let x = self.value(a);
        let out = Tensor::from_fn(sa.0, sa.1, |i, j| x.get(i, j) + r[j]);
        self.push("add_row", out, Op::AddRow(a, row), &[a, row])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let out = Tensor::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) * y.get(i, j));
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.unary("scale", a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        self.unary("add_scalar", a, Op::AddScalar(a, s), |x| x + s)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, Op::Relu(a), |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Result<Var> {
        self.unary("leaky_relu", a, Op::LeakyRelu(a, slope), |x| {
            if x > T::zero() {
                x
            } else {
                x * slope
            }
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, Op::Sigmoid(a), sigmoid)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).data().iter().find(|x| **x <= T::zero()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {x:?}"),
            });
        }
        self.unary("log", a, Op::Log(a), T::ln)
    }

    pub fn pow(&mut self, a: Var, exponent: T) -> Result<Var> {
        if exponent.fract() != T::zero() {
            if let Some(x) = self.value(a).data().iter().find(|x| **x < T::zero()) {
                return Err(Error::Domain {
                    op: "pow",
                    detail: format!("negative base {x:?} with fractional exponent"),
                });
            }
        }
        self.unary("pow", a, Op::Pow(a, exponent), |x| x.powf(exponent))
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        self.unary("clamp", a, Op::Clamp(a, lo, hi), |x| x.max(lo).min(hi))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.rows() != y.rows() {
            return Err(Error::shape("concat_cols", x.shape(), y.shape()));
        }
        let ca = x.cols();
        let out = Tensor::from_fn(x.rows(), ca + y.cols(), |i, j| {
            if j < ca {
                x.get(i, j)
            } else {
                y.get(i, j - ca)
            }
        });
        self.push("concat_cols", out, Op::ConcatCols(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    /// Pairwise sum of two column vectors: an `n x m` matrix with entry
    /// `(i, j) = col[i] + other[j]`.
    pub fn outer_add(&mut self, col: Var, other: Var) -> Result<Var> {
        let (x, y) = (self.value(col), self.value(other));
        if x.cols() != 1 || y.cols() != 1 {
            return Err(Error::shape("outer_add", x.shape(), y.shape()));
        }
        let out = Tensor::from_fn(x.rows(), y.rows(), |i, j| x.get(i, 0) + y.get(j, 0));
        self.push("outer_add", out, Op::OuterAdd(col, other), &[col, other])
    }

    /// Softmax over the `true` entries of each row. Masked entries and rows
    /// without any unmasked entry come out as zero.
    pub fn row_softmax_masked(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let x = self.value(a);
        if mask.len() != x.len() {
            return Err(Error::shape("row_softmax_masked", x.shape(), (mask.len(), 1)));
        }
        let (rows, cols) = x.shape();
        let mut out = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let m = &mask[i * cols..(i + 1) * cols];
            let row = x.row(i);
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(&v, _)| v)
                .fold(None, |acc: Option<T>, v| Some(acc.map_or(v, |a| a.max(v))));
            let Some(max) = max else { continue };
            let mut denom = T::zero();
            for j in 0..cols {
                if m[j] {
                    let e = (row[j] - max).exp();
                    out.set(i, j, e);
                    denom = denom + e;
                }
            }
            for (j, &on) in m.iter().enumerate() {
                if on {
                    out.set(i, j, out.get(i, j) / denom);
                }
            }
        }
        self.push("row_softmax_masked", out, Op::MaskedSoftmax(a, mask.to_vec()), &[a])
    }

    /// Sum of all entries as a 1 x 1 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push("sum", Tensor::full(1, 1, s), Op::Sum(a), &[a])
    }

    pub fn col_sum(&mut self, a: Var) -> Result<Var> {
        let out = col_reduce(self.value(a), |acc, x| acc + x);
        self.push("col_sum", out, Op::ColSum(a), &[a])
    }

    pub fn col_mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let n = T::of(x.rows() as f64);
        let out = col_reduce(x, |acc, v| acc + v).map(|s| s / n);
        self.push("col_mean", out, Op::ColMean(a), &[a])
    }

    pub fn col_max(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rows() == 0 {
            return Err(Error::shape("col_max", x.shape(), (1, x.cols())));
        }
        let mut arg = vec![0usize; x.cols()];
        let mut out = Tensor::zeros(1, x.cols());
        for (j, slot) in arg.iter_mut().enumerate() {
            let mut best = x.get(0, j);
            for i in 1..x.rows() {
                if x.get(i, j) > best {
                    best = x.get(i, j);
                    *slot = i;
                }
            }
            out.set(0, j, best);
        }
        self.push("col_max", out, Op::ColMax(a, arg), &[a])
    }

    /// Back-propagates from a scalar `loss`, accumulating into every leaf
    /// that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::shape("backward", shape, (1, 1)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(1, 1, T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[idx] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            for (input, contrib) in self.input_grads(idx, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn input_grads(&self, idx: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[idx];
        let y = &node.value;
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                if self.wants(*a) {
                    out.push((*a, g.matmul(&self.value(*b).transpose())?));
                }
                if self.wants(*b) {
                    out.push((*b, self.value(*a).transpose().matmul(g)?));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::AddRow(a, r) => {
                out.push((*a, g.clone()));
                if self.wants(*r) {
                    out.push((*r, col_reduce(g, |acc, x| acc + x)));
                }
            }
            Op::Mul(a, b) => {
                let (x, z) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    out.push((*a, zip(g, z, |g, z| g * z)));
                }
                if self.wants(*b) {
                    out.push((*b, zip(g, x, |g, x| g * x)));
                }
            }
            Op::Scale(a, s) => out.push((*a, g.map(|v| v * *s))),
            Op::AddScalar(a, _) => out.push((*a, g.clone())),
            Op::Relu(a) => {
                let x = self.value(*a);
                out.push((*a, zip(g, x, |g, x| if x > T::zero() { g } else { T::zero() })));
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                out.push((*a, zip(g, x, |g, x| if x > T::zero() { g } else { g * *slope })));
            }
            Op::Sigmoid(a) => out.push((*a, zip(g, y, |g, s| g * s * (T::one() - s)))),
            Op::Log(a) => out.push((*a, zip(g, self.value(*a), |g, x| g / x))),
            Op::Pow(a, e) => {
                let e = *e;
                out.push((
                    *a,
                    zip(g, self.value(*a), |g, x| {
                        if e == T::zero() {
                            T::zero()
                        } else {
                            g * e * x.powf(e - T::one())
                        }
                    }),
                ));
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                out.push((
                    *a,
                    zip(g, self.value(*a), |g, x| if x >= lo && x <= hi { g } else { T::zero() }),
                ));
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                out.push((*a, Tensor::from_fn(g.rows(), ca, |i, j| g.get(i, j))));
                out.push((*b, Tensor::from_fn(g.rows(), cb, |i, j| g.get(i, ca + j))));
            }
            Op::Transpose(a) => out.push((*a, g.transpose())),
            Op::OuterAdd(c, o) => {
                if self.wants(*c) {
                    let rows = Tensor::from_fn(g.rows(), 1, |i, _| g.row(i).iter().copied().sum());
                    out.push((*c, rows));
                }
                if self.wants(*o) {
                    out.push((*o, col_reduce(g, |acc, x| acc + x).transpose()));
                }
            }
            Op::MaskedSoftmax(a, mask) => {
                let (rows, cols) = y.shape();
                let mut dx = Tensor::zeros(rows, cols);
                for i in 0..rows {
                    let mut dot = T::zero();
                    for j in 0..cols {
                        if mask[i * cols + j] {
                            dot = dot + y.get(i, j) * g.get(i, j);
                        }
                    }
                    for j in 0..cols {
                        if mask[i * cols + j] {
                            dx.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                        }
                    }
                }
                out.push((*a, dx));
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                out.push((*a, Tensor::full(r, c, g.get(0, 0))));
            }
            Op::ColSum(a) => {
                let (r, c) = self.value(*a).shape();
                out.push((*a, Tensor::from_fn(r, c, |_, j| g.get(0, j))));
            }
            Op::ColMean(a) => {
                let (r, c) = self.value(*a).shape();
                let n = T::of(r as f64);
                out.push((*a, Tensor::from_fn(r, c, |_, j| g.get(0, j) / n)));
            }
            Op::ColMax(a, arg) => {
                let (r, c) = self.value(*a).shape();
                out.push((
                    *a,
                    Tensor::from_fn(r, c, |i, j| if arg[j] == i { g.get(0, j) } else { T::zero() }),
                ));
            }
        }
        Ok(out)
    }
}

pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn zip<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

fn col_reduce<T: Element>(x: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let mut out = Tensor::zeros(1, x.cols());
    for i in 0..x.rows() {
        for (j, &v) in x.row(i).iter().enumerate() {
            out.set(0, j, f(out.get(0, j), v));
        }
    }
    out
}
