//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its value and the rule needed to push adjoints back to its parents. Nodes
//! are appended in evaluation order, so the node list is already a
//! topological order and [`Tape::backward`] simply walks it in reverse.
//!
//! Trainable tensors live in a [`ParamStore`] outside the tape; a fresh tape
//! is built for every forward pass and references parameters by [`ParamId`].

use std::collections::HashMap;

use super::tensor::{dot, matmul_nn, matmul_nt, matmul_tn, sigmoid, Tensor};
use crate::error::{Error, Result};

/// Scores are clipped to `[BCE_CLIP, 1 - BCE_CLIP]` inside logarithms.
pub const BCE_CLIP: f64 = 1e-7;

/// Norms below this are treated as zero by [`Tape::row_normalize`].
const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// One gradient per parameter of the store the loss was built against.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients {
            grads: store
                .values
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    LogSumExpRows(Var),
    ConcatCols(Var, Var),
    Transpose(Var),
    Reparameterize {
        mu: Var,
        logvar: Var,
        eps: Tensor,
    },
    GaussianKl {
        q_mu: Var,
        q_logvar: Var,
        p_mu: Var,
        p_logvar: Var,
    },
    GatherRows(Var, Vec<usize>),
    GatherElements(Var, Vec<(usize, usize)>),
    PairDots(Var, Vec<(usize, usize)>),
    RowNormalize(Var),
    Diag(Var),
    FillDiagonal(Var),
    BceSum(Var, Vec<f64>),
}

#[derive(Debug)]
struct TapeNode {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<TapeNode>,
    params: HashMap<ParamId, Var>,
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(TapeNode {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Registers a parameter leaf. Repeated calls with the same id return the
    /// same node so that every use accumulates into one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let value = matmul_nn(self.value(a), self.value(b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    /// Entrywise product.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("hadamard", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    /// Adds a `1 x cols` row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        if sr.0 != 1 || sr.1 != sx.1 {
            return Err(Error::shape("add_row", sx, sr));
        }
        let mut value = self.value(x).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..sx.0 {
            for (o, b) in value.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        let ng = self.ng(x) || self.ng(row);
        Ok(self.push(value, Op::AddRow(x, row), ng))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let ng = self.ng(x);
        self.push(value, op, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive entry {bad}"),
            });
        }
        Ok(self.unary(x, f64::ln, Op::Log(x)))
    }

    pub fn negate(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| c * v, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let n = self.negate(x);
        self.add_scalar(n, 1.0)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        if self.value(x).is_empty() {
            return Err(Error::Empty("sum"));
        }
        let value = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        Ok(self.push(value, Op::Sum(x), ng))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::Empty("mean"));
        }
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        let ng = self.ng(x);
        Ok(self.push(value, Op::Mean(x), ng))
    }

    /// Row-wise `log Σ_j exp(x_ij)` as an `n x 1` column, stabilized by
    /// subtracting each row's maximum.
    pub fn log_sum_exp_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::Empty("log_sum_exp_rows"));
        }
        let out: Vec<f64> = (0..t.rows()).map(|i| log_sum_exp(t.row(i))).collect();
        let ng = self.ng(x);
        Ok(self.push(Tensor::column(&out), Op::LogSumExpRows(x), ng))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.0 != sb.0 {
            return Err(Error::shape("concat_cols", sa, sb));
        }
        let mut value = Tensor::zeros(sa.0, sa.1 + sb.1);
        for i in 0..sa.0 {
            let row = value.row_mut(i);
            row[..sa.1].copy_from_slice(self.nodes[a.0].value.row(i));
            row[sa.1..].copy_from_slice(self.nodes[b.0].value.row(i));
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::ConcatCols(a, b), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        let ng = self.ng(x);
        self.push(value, Op::Transpose(x), ng)
    }

    /// `mu + exp(logvar / 2) ⊙ eps` with caller-supplied standard-normal `eps`.
    pub fn reparameterize(&mut self, mu: Var, logvar: Var, eps: Tensor) -> Result<Var> {
        self.same_shape("reparameterize", mu, logvar)?;
        if eps.shape() != self.shape(mu) {
            return Err(Error::shape("reparameterize", self.shape(mu), eps.shape()));
        }
        let m = self.value(mu);
        let lv = self.value(logvar);
        let data = m
            .data()
            .iter()
            .zip(lv.data())
            .zip(eps.data())
            .map(|((&m, &l), &e)| m + (0.5 * l).exp() * e)
            .collect();
        let value = Tensor::from_vec(m.rows(), m.cols(), data)?;
        let ng = self.ng(mu) || self.ng(logvar);
        Ok(self.push(value, Op::Reparameterize { mu, logvar, eps }, ng))
    }

    /// Closed-form `KL(q || p)` between diagonal Gaussians given by mean and
    /// log-variance, summed over every entry.
    pub fn gaussian_kl(&mut self, q_mu: Var, q_logvar: Var, p_mu: Var, p_logvar: Var) -> Result<Var> {
        self.same_shape("gaussian_kl", q_mu, q_logvar)?;
        self.same_shape("gaussian_kl", q_mu, p_mu)?;
        self.same_shape("gaussian_kl", q_mu, p_logvar)?;
        let kl = gaussian_kl_value(
            self.value(q_mu),
            self.value(q_logvar),
            self.value(p_mu),
            self.value(p_logvar),
        );
        let ng = [q_mu, q_logvar, p_mu, p_logvar].iter().any(|&v| self.ng(v));
        Ok(self.push(
            Tensor::scalar(kl),
            Op::GaussianKl {
                q_mu,
                q_logvar,
                p_mu,
                p_logvar,
            },
            ng,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", (r, c), (bad, 0)));
        }
        let value = self.value(x).select_rows(idx);
        let ng = self.ng(x);
        Ok(self.push(value, Op::GatherRows(x, idx.to_vec()), ng))
    }

    /// Picks `x[i, j]` for each pair, as a column.
    pub fn gather_elements(&mut self, x: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let (r, c) = self.shape(x);
        if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= r || j >= c) {
            return Err(Error::shape("gather_elements", (r, c), (i, j)));
        }
        let t = self.value(x);
        let vals: Vec<f64> = pairs.iter().map(|&(i, j)| t.get(i, j)).collect();
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::column(&vals),
            Op::GatherElements(x, pairs.to_vec()),
            ng,
        ))
    }

    /// Column of row inner products `<x_u, x_v>` for each `(u, v)`.
    pub fn pair_dots(&mut self, x: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let (r, c) = self.shape(x);
        if let Some(&(u, v)) = pairs.iter().find(|&&(u, v)| u >= r || v >= r) {
            return Err(Error::shape("pair_dots", (r, c), (u, v)));
        }
        let t = self.value(x);
        let vals: Vec<f64> = pairs.iter().map(|&(u, v)| dot(t.row(u), t.row(v))).collect();
        let ng = self.ng(x);
        Ok(self.push(Tensor::column(&vals), Op::PairDots(x, pairs.to_vec()), ng))
    }

    /// Scales each row to unit Euclidean norm; zero rows stay zero.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            let norm = dot(row, row).sqrt();
            if norm < NORM_FLOOR {
                row.iter_mut().for_each(|v| *v = 0.0);
            } else {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        let ng = self.ng(x);
        self.push(value, Op::RowNormalize(x), ng)
    }

    /// Diagonal of a square matrix as a column.
    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if r != c {
            return Err(Error::shape("diag", (r, c), (c, r)));
        }
        let t = self.value(x);
        let vals: Vec<f64> = (0..r).map(|i| t.get(i, i)).collect();
        let ng = self.ng(x);
        Ok(self.push(Tensor::column(&vals), Op::Diag(x), ng))
    }

    /// Overwrites the diagonal of a square matrix with `value`; the
    /// overwritten entries receive no gradient.
    pub fn fill_diagonal(&mut self, x: Var, value: f64) -> Result<Var> {
        let (r, c) = self.shape(x);
        if r != c {
            return Err(Error::shape("fill_diagonal", (r, c), (c, r)));
        }
        let mut t = self.value(x).clone();
        for i in 0..r {
            t.set(i, i, value);
        }
        let ng = self.ng(x);
        Ok(self.push(t, Op::FillDiagonal(x), ng))
    }

    /// Summed binary cross-entropy of `sigmoid(logits)` against 0/1 labels,
    /// with probabilities clipped to `[BCE_CLIP, 1 - BCE_CLIP]`.
    pub fn bce_sum(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if c != 1 || r != labels.len() {
            return Err(Error::shape("bce_sum", (r, c), (labels.len(), 1)));
        }
        let loss: f64 = self
            .value(logits)
            .data()
            .iter()
            .zip(labels)
            .map(|(&x, &y)| {
                let xc = x.clamp(-bce_logit_bound(), bce_logit_bound());
                y * softplus(-xc) + (1.0 - y) * softplus(xc)
            })
            .sum();
        let ng = self.ng(logits);
        Ok(self.push(Tensor::scalar(loss), Op::BceSum(logits, labels.to_vec()), ng))
    }

    /// Propagates adjoints from a scalar `loss` back to every parameter leaf.
    /// Parameters the loss does not depend on get a zero gradient.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads = Gradients::zeros_like(store);
        let mut adj: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let y = &node.value;
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => grads.grads[id.0].add_assign(&g),
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        let da = matmul_nt(&g, self.value(*b));
                        self.acc(&mut adj, *a, da);
                    }
                    if self.ng(*b) {
                        let db = matmul_tn(self.value(*a), &g);
                        self.acc(&mut adj, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    self.acc(&mut adj, *a, g.clone());
                    self.acc(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    self.acc(&mut adj, *a, g.clone());
                    self.acc(&mut adj, *b, g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        let da = g.zip_map(self.value(*b), |g, b| g * b);
                        self.acc(&mut adj, *a, da);
                    }
                    if self.ng(*b) {
                        let db = g.zip_map(self.value(*a), |g, a| g * a);
                        self.acc(&mut adj, *b, db);
                    }
                }
                Op::AddRow(x, row) => {
                    if self.ng(*row) {
                        let mut db = Tensor::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (o, v) in db.data_mut().iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        self.acc(&mut adj, *row, db);
                    }
                    self.acc(&mut adj, *x, g);
                }
                Op::Sigmoid(x) => {
                    let d = g.zip_map(y, |g, s| g * s * (1.0 - s));
                    self.acc(&mut adj, *x, d);
                }
                Op::Tanh(x) => {
                    let d = g.zip_map(y, |g, t| g * (1.0 - t * t));
                    self.acc(&mut adj, *x, d);
                }
                Op::Relu(x) => {
                    let d = g.zip_map(self.value(*x), |g, v| if v > 0.0 { g } else { 0.0 });
                    self.acc(&mut adj, *x, d);
                }
                Op::Exp(x) => {
                    let d = g.zip_map(y, |g, e| g * e);
                    self.acc(&mut adj, *x, d);
                }
                Op::Log(x) => {
                    let d = g.zip_map(self.value(*x), |g, v| g / v);
                    self.acc(&mut adj, *x, d);
                }
                Op::Neg(x) => self.acc(&mut adj, *x, g.map(|v| -v)),
                Op::Scale(x, c) => {
                    let c = *c;
                    self.acc(&mut adj, *x, g.map(|v| c * v));
                }
                Op::AddScalar(x) => self.acc(&mut adj, *x, g),
                Op::Sum(x) => {
                    let (r, c) = self.shape(*x);
                    self.acc(&mut adj, *x, Tensor::filled(r, c, g.item()));
                }
                Op::Mean(x) => {
                    let (r, c) = self.shape(*x);
                    let n = (r * c) as f64;
                    self.acc(&mut adj, *x, Tensor::filled(r, c, g.item() / n));
                }
                Op::LogSumExpRows(x) => {
                    let xv = self.value(*x);
                    let mut d = Tensor::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        let (gr, lse) = (g.get(r, 0), y.get(r, 0));
                        for (o, &v) in d.row_mut(r).iter_mut().zip(xv.row(r)) {
                            *o = gr * (v - lse).exp();
                        }
                    }
                    self.acc(&mut adj, *x, d);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.shape(*a).1;
                    let cb = self.shape(*b).1;
                    let mut da = Tensor::zeros(g.rows(), ca);
                    let mut db = Tensor::zeros(g.rows(), cb);
                    for r in 0..g.rows() {
                        da.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                        db.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                    }
                    self.acc(&mut adj, *a, da);
                    self.acc(&mut adj, *b, db);
                }
                Op::Transpose(x) => self.acc(&mut adj, *x, g.transpose()),
                Op::Reparameterize { mu, logvar, eps } => {
                    if self.ng(*logvar) {
                        let lv = self.value(*logvar);
                        let mut d = g.zip_map(lv, |g, l| g * 0.5 * (0.5 * l).exp());
                        for (o, e) in d.data_mut().iter_mut().zip(eps.data()) {
                            *o *= e;
                        }
                        self.acc(&mut adj, *logvar, d);
                    }
                    self.acc(&mut adj, *mu, g);
                }
                Op::GaussianKl {
                    q_mu,
                    q_logvar,
                    p_mu,
                    p_logvar,
                } => {
                    let s = g.item();
                    let (qm, qlv) = (self.value(*q_mu), self.value(*q_logvar));
                    let (pm, plv) = (self.value(*p_mu), self.value(*p_logvar));
                    let (r, c) = qm.shape();
                    let mut d_qm = Tensor::zeros(r, c);
                    let mut d_qlv = Tensor::zeros(r, c);
                    let mut d_pm = Tensor::zeros(r, c);
                    let mut d_plv = Tensor::zeros(r, c);
                    for k in 0..r * c {
                        let diff = qm.data()[k] - pm.data()[k];
                        let inv_pvar = (-plv.data()[k]).exp();
                        let qvar = qlv.data()[k].exp();
                        d_qm.data_mut()[k] = s * diff * inv_pvar;
                        d_pm.data_mut()[k] = -s * diff * inv_pvar;
                        d_qlv.data_mut()[k] = s * 0.5 * (qvar * inv_pvar - 1.0);
                        d_plv.data_mut()[k] =
                            s * 0.5 * (1.0 - (qvar + diff * diff) * inv_pvar);
                    }
                    self.acc(&mut adj, *q_mu, d_qm);
                    self.acc(&mut adj, *q_logvar, d_qlv);
                    self.acc(&mut adj, *p_mu, d_pm);
                    self.acc(&mut adj, *p_logvar, d_plv);
                }
                Op::GatherRows(x, idx) => {
                    let (r, c) = self.shape(*x);
                    let mut d = Tensor::zeros(r, c);
                    for (k, &i) in idx.iter().enumerate() {
                        for (o, v) in d.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    self.acc(&mut adj, *x, d);
                }
                Op::GatherElements(x, pairs) => {
                    let (r, c) = self.shape(*x);
                    let mut d = Tensor::zeros(r, c);
                    for (k, &(i, j)) in pairs.iter().enumerate() {
                        let cur = d.get(i, j);
                        d.set(i, j, cur + g.get(k, 0));
                    }
                    self.acc(&mut adj, *x, d);
                }
                Op::PairDots(x, pairs) => {
                    let xv = self.value(*x);
                    let mut d = Tensor::zeros(xv.rows(), xv.cols());
                    for (k, &(u, v)) in pairs.iter().enumerate() {
                        let gk = g.get(k, 0);
                        for c in 0..xv.cols() {
                            let (xu, xw) = (xv.get(u, c), xv.get(v, c));
                            let du = d.get(u, c) + gk * xw;
                            d.set(u, c, du);
                            let dv = d.get(v, c) + gk * xu;
                            d.set(v, c, dv);
                        }
                    }
                    self.acc(&mut adj, *x, d);
                }
                Op::RowNormalize(x) => {
                    let xv = self.value(*x);
                    let mut d = Tensor::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        let norm = dot(xv.row(r), xv.row(r)).sqrt();
                        if norm < NORM_FLOOR {
                            continue;
                        }
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let proj = dot(yr, gr);
                        for ((o, &gv), &yv) in d.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *o = (gv - yv * proj) / norm;
                        }
                    }
                    self.acc(&mut adj, *x, d);
                }
                Op::Diag(x) => {
                    let (r, c) = self.shape(*x);
                    let mut d = Tensor::zeros(r, c);
                    for i in 0..r {
                        d.set(i, i, g.get(i, 0));
                    }
                    self.acc(&mut adj, *x, d);
                }
                Op::FillDiagonal(x) => {
                    let mut d = g;
                    for i in 0..d.rows() {
                        d.set(i, i, 0.0);
                    }
                    self.acc(&mut adj, *x, d);
                }
                Op::BceSum(x, labels) => {
                    let s = g.item();
                    let xv = self.value(*x);
                    let data: Vec<f64> = xv
                        .data()
                        .iter()
                        .zip(labels)
                        .map(|(&v, &lbl)| {
                            if v.abs() < bce_logit_bound() {
                                s * (sigmoid(v) - lbl)
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    self.acc(&mut adj, *x, Tensor::column(&data));
                }
            }
        }
        Ok(grads)
    }

    fn acc(&self, adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut adj[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

/// Logit at which a sigmoid reaches `1 - BCE_CLIP`.
fn bce_logit_bound() -> f64 {
    ((1.0 - BCE_CLIP) / BCE_CLIP).ln()
}

/// `ln(1 + e^x)` without overflow or cancellation.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Stabilized `log Σ exp(x)`.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `KL(N(q_mu, exp(q_logvar)) || N(p_mu, exp(p_logvar)))`, summed.
pub fn gaussian_kl_value(q_mu: &Tensor, q_logvar: &Tensor, p_mu: &Tensor, p_logvar: &Tensor) -> f64 {
    let mut kl = 0.0;
    for k in 0..q_mu.len() {
        let diff = q_mu.data()[k] - p_mu.data()[k];
        let (qlv, plv) = (q_logvar.data()[k], p_logvar.data()[k]);
        kl += 0.5 * ((qlv.exp() + diff * diff) * (-plv).exp() - 1.0 + plv - qlv);
    }
    kl
}
