//! A small reverse-mode autodiff tape over [`Matrix`] values.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the
//! node list is a valid topological order for backpropagation.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    OneMinus(Var),
    Sigmoid(Var),
    Relu(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Matrix,
    },
    Sum(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; `None` for nodes the seed does not reach.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like it when unreached.
    pub fn get_or_zeros(&self, v: Var, tape: &Tape) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| {
            let (r, c) = tape.value(v).shape();
            Matrix::zeros(r, c)
        })
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
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

    /// Drops every node recorded after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(v, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    /// Multiplies `a` by the `1×1` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.shape() != (1, 1) {
            return Err(CoreError::Shape {
                op: "scale_by",
                lhs: self.value(a).shape(),
                rhs: sv.shape(),
            });
        }
        let v = self.value(a).scale(sv[(0, 0)]);
        Ok(self.push(v, Op::ScaleBy(a, s)))
    }

    /// Adds the `1×cols` node `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let v = self.value(a).add_row(self.value(bias))?;
        Ok(self.push(v, Op::AddRow(a, bias)))
    }

    /// Adds a constant (non-differentiable) matrix, e.g. an attention mask.
    pub fn add_const(&mut self, a: Var, c: &Matrix) -> Result<Var> {
        let v = self.value(a).add(c)?;
        Ok(self.push(v, Op::AddConst(a)))
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 - x);
        self.push(v, Op::OneMinus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(libm::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).softmax_rows();
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Per-row layer normalization with learned `1×cols` scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        if self.value(gamma).shape() != (1, cols) || self.value(beta).shape() != (1, cols) {
            return Err(CoreError::Shape {
                op: "layer_norm",
                lhs: xv.shape(),
                rhs: self.value(gamma).shape(),
            });
        }
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            for (o, v) in xhat.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let g = self.value(gamma).row(0).to_vec();
        let b = self.value(beta).row(0).to_vec();
        let out = Matrix::from_fn(rows, cols, |i, j| xhat[(i, j)] * g[j] + b[j]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(CoreError::Shape {
                op: "gather",
                lhs: t.shape(),
                rhs: (bad, 1),
            });
        }
        let v = t.permute_rows(ids);
        Ok(self.push(
            v,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Summed token cross-entropy of row-wise softmax(logits) against
    /// `targets`; `None` rows are masked out. Returns a `1×1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let l = self.value(logits);
        if targets.len() != l.rows() || targets.iter().flatten().any(|&t| t >= l.cols()) {
            return Err(CoreError::Shape {
                op: "cross_entropy",
                lhs: l.shape(),
                rhs: (targets.len(), 1),
            });
        }
        let probs = l.softmax_rows();
        let mut loss = 0.0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                let row = l.row(i);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>());
                loss += lse - row[*t];
            }
        }
        Ok(self.push(
            Matrix::filled(1, 1, loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Matrix::filled(1, 1, s), Op::Sum(a))
    }

    /// Reverse sweep from `root`, seeded with `seed` (same shape as `root`).
    pub fn backward(&self, root: Var, seed: Matrix) -> Result<Gradients> {
        if seed.shape() != self.value(root).shape() {
            return Err(CoreError::Shape {
                op: "backward",
                lhs: self.value(root).shape(),
                rhs: seed.shape(),
            });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b))?;
                    let gb = self.value(*a).t_matmul(&g)?;
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.matmul(self.value(*b))?;
                    let gb = g.t_matmul(self.value(*a))?;
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[b.0], g.scale(-1.0));
                    accumulate(&mut grads[a.0], g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = g.hadamard(self.value(*b))?;
                    let gb = g.hadamard(self.value(*a))?;
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Scale(a, s) => accumulate(&mut grads[a.0], g.scale(*s)),
                Op::ScaleBy(a, s) => {
                    let sv = self.value(*s)[(0, 0)];
                    let gs = g.dot(self.value(*a));
                    accumulate(&mut grads[a.0], g.scale(sv));
                    accumulate(&mut grads[s.0], Matrix::filled(1, 1, gs));
                }
                Op::AddRow(a, bias) => {
                    accumulate(&mut grads[bias.0], g.sum_rows());
                    accumulate(&mut grads[a.0], g.clone());
                }
                Op::AddConst(a) => accumulate(&mut grads[a.0], g.clone()),
                Op::OneMinus(a) => accumulate(&mut grads[a.0], g.scale(-1.0)),
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(&node.value, "sigmoid", |g, y| g * y * (1.0 - y))?;
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), "relu", |g, x| if x > 0.0 { g } else { 0.0 })?;
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Tanh(a) => {
                    let ga = g.zip_map(&node.value, "tanh", |g, y| g * (1.0 - y * y))?;
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum();
                        for ((o, gi), yi) in ga.row_mut(i).iter_mut().zip(g.row(i)).zip(y.row(i)) {
                            *o = yi * (gi - dot);
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (rows, cols) = xhat.shape();
                    let gam = self.value(*gamma).row(0);
                    let mut gx = Matrix::zeros(rows, cols);
                    let mut ggamma = Matrix::zeros(1, cols);
                    let n = cols as f64;
                    for i in 0..rows {
                        let gr = g.row(i);
                        let xr = xhat.row(i);
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..cols {
                            let d = gr[j] * gam[j];
                            sum_d += d;
                            sum_dx += d * xr[j];
                            ggamma[(0, j)] += gr[j] * xr[j];
                        }
                        for j in 0..cols {
                            let d = gr[j] * gam[j];
                            gx[(i, j)] = inv_std[i] / n * (n * d - sum_d - xr[j] * sum_dx);
                        }
                    }
                    accumulate(&mut grads[beta.0], g.sum_rows());
                    accumulate(&mut grads[gamma.0], ggamma);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Gather { table, ids } => {
                    let t = self.value(*table);
                    let mut gt = Matrix::zeros(t.rows(), t.cols());
                    for (i, &id) in ids.iter().enumerate() {
                        for (o, v) in gt.row_mut(id).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads[table.0], gt);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let scale = g[(0, 0)];
                    let mut gl = Matrix::zeros(probs.rows(), probs.cols());
                    for (i, t) in targets.iter().enumerate() {
                        if let Some(t) = t {
                            for (o, p) in gl.row_mut(i).iter_mut().zip(probs.row(i)) {
                                *o = p * scale;
                            }
                            gl[(i, *t)] -= scale;
                        }
                    }
                    accumulate(&mut grads[logits.0], gl);
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    accumulate(&mut grads[a.0], Matrix::filled(r, c, g[(0, 0)]));
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Which optimizer parameter group a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    /// GCN, fusion, visual projection and mixing weights.
    Head,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Param {
    pub value: Matrix,
    pub group: ParamGroup,
}

/// Named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ParamStore {
    pub params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn insert(&mut self, name: &str, group: ParamGroup, value: Matrix) {
        self.params.insert(name.to_string(), Param { value, group });
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| CoreError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Matrix> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| CoreError::MissingParam(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.as_slice().len()).sum()
    }
}

/// A tape plus lazily bound parameter leaves.
pub struct Session<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: BTreeMap<String, Var>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: BTreeMap::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// Leaf for the named parameter, created on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let v = self.tape.leaf(self.store.get(name)?.clone());
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Binds every parameter in the store.
    pub fn bind_all(&mut self) -> Result<()> {
        let names: Vec<String> = self.store.names().map(String::from).collect();
        for name in names {
            self.param(&name)?;
        }
        Ok(())
    }

    /// Backpropagates a scalar loss and returns gradients per bound parameter.
    pub fn param_gradients(&self, loss: Var) -> Result<BTreeMap<String, Matrix>> {
        let mut grads = self.tape.backward(loss, Matrix::filled(1, 1, 1.0))?;
        Ok(self
            .bound
            .iter()
            .map(|(name, v)| (name.clone(), grads.take(*v).unwrap_or_else(|| {
                let (r, c) = self.tape.value(*v).shape();
                Matrix::zeros(r, c)
            })))
            .collect())
    }
}
