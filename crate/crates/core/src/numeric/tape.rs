//! Matrix-level reverse-mode differentiation.
//!
//! A [`GradientTape`] records every primitive applied to [`Var`] handles and
//! replays them backwards to produce the gradient of a scalar with respect to
//! a flat parameter vector. Parameter leaves remember their offset into that
//! vector, so several forward passes through the same network simply
//! accumulate into the same gradient slots.

use crate::error::{Error, Result};

use super::kernels::{self, Activation};

/// Handle to a value recorded on a [`GradientTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param { offset: usize },
    MatMulT { x: Var, w: Var },
    AddBias { x: Var, b: Var },
    Act { x: Var, act: Activation },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Square(Var),
    Sigmoid(Var),
    BlockMean { x: Var, block: usize },
    Mean(Var),
    Sum(Var),
    AddBroadcast { x: Var, s: Var },
    HConcat(Vec<Var>),
}

#[derive(Debug, Clone)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct GradientTape {
    nodes: Vec<Node>,
}

impl GradientTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        if rows * cols != value.len() {
            return Err(Error::Shape(format!(
                "constant {rows}x{cols} with {} entries",
                value.len()
            )));
        }
        Ok(self.push(rows, cols, value, Op::Constant))
    }

    /// Leaf bound to `values`, which sit at `offset` in the flat parameter vector.
    pub fn param(&mut self, offset: usize, rows: usize, cols: usize, values: &[f64]) -> Result<Var> {
        if rows * cols != values.len() {
            return Err(Error::Shape(format!(
                "param {rows}x{cols} with {} entries",
                values.len()
            )));
        }
        Ok(self.push(rows, cols, values.to_vec(), Op::Param { offset }))
    }

    /// `x · wᵀ` with `x: n×k`, `w: m×k`.
    pub fn matmul_t(&mut self, x: Var, w: Var) -> Result<Var> {
        let (n, k) = self.shape(x);
        let (m, kw) = self.shape(w);
        if k != kw {
            return Err(Error::Shape(format!("matmul_t: {n}x{k} · ({m}x{kw})ᵀ")));
        }
        let out = kernels::matmul_t(self.value(x), n, k, self.value(w), m);
        Ok(self.push(n, m, out, Op::MatMulT { x, w }))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, m) = self.shape(x);
        if self.shape(b) != (1, m) {
            return Err(Error::Shape(format!(
                "add_bias: bias {:?} for {n}x{m}",
                self.shape(b)
            )));
        }
        let mut out = self.value(x).to_vec();
        kernels::add_bias(&mut out, self.value(b));
        Ok(self.push(n, m, out, Op::AddBias { x, b }))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        let (n, m) = self.shape(x);
        let out = self.value(x).iter().map(|&v| act.apply(v)).collect();
        self.push(n, m, out, Op::Act { x, act })
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (n, m) = self.same_shape(a, b, what)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(n, m, out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let (n, m) = self.shape(a);
        let out = self.value(a).iter().map(|&x| c * x).collect();
        self.push(n, m, out, Op::Scale(a, c))
    }

    /// `a + c` elementwise.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let (n, m) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x + c).collect();
        self.push(n, m, out, Op::Offset(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let (n, m) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x * x).collect();
        self.push(n, m, out, Op::Square(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (n, m) = self.shape(a);
        let out = self.value(a).iter().map(|&x| kernels::sigmoid(x)).collect();
        self.push(n, m, out, Op::Sigmoid(a))
    }

    /// Mean over consecutive groups of `block` entries (row-major); returns a column.
    pub fn block_mean(&mut self, a: Var, block: usize) -> Result<Var> {
        let len = self.value(a).len();
        if block == 0 || len % block != 0 {
            return Err(Error::Shape(format!("block_mean: {len} entries, block {block}")));
        }
        let out = kernels::block_mean(self.value(a), block);
        Ok(self.push(len / block, 1, out, Op::BlockMean { x: a, block }))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        if self.value(a).is_empty() {
            return Err(Error::Shape("mean of empty node".into()));
        }
        let out = vec![kernels::mean(self.value(a))];
        Ok(self.push(1, 1, out, Op::Mean(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = vec![self.value(a).iter().sum()];
        self.push(1, 1, out, Op::Sum(a))
    }

    /// Adds the `1×1` node `s` to every entry of `x`.
    pub fn add_broadcast(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(Error::Shape("add_broadcast: scalar expected".into()));
        }
        let (n, m) = self.shape(x);
        let c = self.scalar(s);
        let out = self.value(x).iter().map(|&v| v + c).collect();
        Ok(self.push(n, m, out, Op::AddBroadcast { x, s }))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn hconcat(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts
            .first()
            .map(|&p| self.shape(p).0)
            .ok_or_else(|| Error::Shape("hconcat of nothing".into()))?;
        if parts.iter().any(|&p| self.shape(p).0 != n) {
            return Err(Error::Shape("hconcat: row counts differ".into()));
        }
        let m: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(n * m);
        for r in 0..n {
            for &p in parts {
                let c = self.shape(p).1;
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        Ok(self.push(n, m, out, Op::HConcat(parts.to_vec())))
    }

    /// Gradient of the scalar `loss` with respect to a flat parameter vector of
    /// length `n_params`. Parameters never touched by `loss` get exactly zero.
    pub fn gradient(&self, loss: Var, n_params: usize) -> Result<Vec<f64>> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Shape(format!(
                "gradient of non-scalar {:?}",
                self.shape(loss)
            )));
        }
        let l = self.scalar(loss);
        if !l.is_finite() {
            return Err(Error::NonFinite(format!("loss = {l}")));
        }
        let mut grads = vec![0.0; n_params];
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param { offset } => {
                    let end = offset + g.len();
                    if end > n_params {
                        return Err(Error::Shape(format!(
                            "parameter slot {offset}..{end} exceeds {n_params}"
                        )));
                    }
                    for (acc, v) in grads[*offset..end].iter_mut().zip(&g) {
                        *acc += v;
                    }
                }
                Op::MatMulT { x, w } => {
                    let (n, k) = self.shape(*x);
                    let m = node.cols;
                    let dx = kernels::matmul(&g, n, m, self.value(*w), k);
                    accumulate(&mut adj, *x, &dx);
                    let slot = adj[w.0].get_or_insert_with(|| vec![0.0; m * k]);
                    kernels::matmul_tn_acc(&g, n, m, self.value(*x), k, slot);
                }
                Op::AddBias { x, b } => {
                    accumulate(&mut adj, *x, &g);
                    let m = node.cols;
                    let slot = adj[b.0].get_or_insert_with(|| vec![0.0; m]);
                    for row in g.chunks_exact(m) {
                        for (s, v) in slot.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                }
                Op::Act { x, act } => {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(self.value(*x))
                        .map(|(&gi, &xi)| gi * act.derivative(xi))
                        .collect();
                    accumulate(&mut adj, *x, &dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, &g);
                    accumulate(&mut adj, *b, &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *a, &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(&mut adj, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let da: Vec<f64> = g.iter().zip(self.value(*b)).map(|(x, y)| x * y).collect();
                    let db: Vec<f64> = g.iter().zip(self.value(*a)).map(|(x, y)| x * y).collect();
                    accumulate(&mut adj, *a, &da);
                    accumulate(&mut adj, *b, &db);
                }
                Op::Scale(a, c) => {
                    let da: Vec<f64> = g.iter().map(|v| c * v).collect();
                    accumulate(&mut adj, *a, &da);
                }
                Op::Offset(a) => accumulate(&mut adj, *a, &g),
                Op::Square(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.value(*a))
                        .map(|(gi, x)| 2.0 * x * gi)
                        .collect();
                    accumulate(&mut adj, *a, &da);
                }
                Op::Sigmoid(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&node.value)
                        .map(|(gi, s)| gi * s * (1.0 - s))
                        .collect();
                    accumulate(&mut adj, *a, &da);
                }
                Op::BlockMean { x, block } => {
                    let inv = 1.0 / *block as f64;
                    let da: Vec<f64> = g
                        .iter()
                        .flat_map(|gi| std::iter::repeat(gi * inv).take(*block))
                        .collect();
                    accumulate(&mut adj, *x, &da);
                }
                Op::Mean(a) => {
                    let len = self.value(*a).len();
                    let da = vec![g[0] / len as f64; len];
                    accumulate(&mut adj, *a, &da);
                }
                Op::Sum(a) => {
                    let len = self.value(*a).len();
                    accumulate(&mut adj, *a, &vec![g[0]; len]);
                }
                Op::AddBroadcast { x, s } => {
                    accumulate(&mut adj, *x, &g);
                    let total: f64 = g.iter().sum();
                    accumulate(&mut adj, *s, &[total]);
                }
                Op::HConcat(parts) => {
                    let n = node.rows;
                    let m = node.cols;
                    let mut start = 0;
                    for &p in parts {
                        let c = self.shape(p).1;
                        let mut dp = Vec::with_capacity(n * c);
                        for r in 0..n {
                            dp.extend_from_slice(&g[r * m + start..r * m + start + c]);
                        }
                        accumulate(&mut adj, p, &dp);
                        start += c;
                    }
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut adj[v.0] {
        Some(acc) => {
            for (a, x) in acc.iter_mut().zip(g) {
                *a += x;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}
