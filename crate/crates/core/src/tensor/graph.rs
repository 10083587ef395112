//! Arena-backed reverse-mode differentiation over [`Matrix`] values.
//!
//! Nodes are appended in creation order, so the arena is already a
//! topological order: a reverse sweep over indices visits every node once,
//! after all of its consumers.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate backward corruptions, used to prove the gradient checker
/// catches them.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Halves the gradient leaving the fused CKA loss.
    CkaBackward,
}

/// Row layout for [`Graph::attention`]: `batch` blocks of `seq` rows each.
#[derive(Clone, Debug)]
pub struct AttentionLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    /// `batch * seq` flags; `false` marks a padding key.
    pub key_mask: Vec<bool>,
}

struct CkaSaved {
    xc: Matrix,
    yc: Matrix,
    cross: Matrix,
    self_x: Matrix,
    hxy: f64,
    hxx: f64,
    hyy: f64,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Hadamard(Var, Var),
    Transpose(Var),
    MeanOverRows(Var),
    MeanOverCols(Var),
    Sum(Var),
    AddN(Vec<Var>),
    FrobeniusSq(Var),
    Log(Var),
    Exp(Var),
    Tanh(Var),
    Gelu(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        src: Var,
        start: usize,
    },
    GatherRows {
        src: Var,
        idx: Rc<[usize]>,
    },
    Dropout {
        src: Var,
        mask: Matrix,
    },
    L2NormalizeRows {
        src: Var,
        norms: Vec<f64>,
    },
    SoftmaxRows {
        src: Var,
        temperature: f64,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: Rc<AttentionLayout>,
        probs: Vec<Matrix>,
    },
    DiagCrossEntropy {
        logits: Var,
        probs: Matrix,
    },
    KlDiv {
        student: Var,
        teacher: Vec<f64>,
    },
    CkaLoss {
        x: Var,
        saved: Box<CkaSaved>,
    },
}

struct Node {
    value: Rc<Matrix>,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only populated on leaves.
    grad: Option<Matrix>,
}

/// Computation graph for one forward/backward pass.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    bound: RefCell<HashMap<ParamId, Var>>,
    fault: Cell<Option<Fault>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;
pub const NORM_EPS: f64 = 1e-12;
pub const KL_CLAMP: f64 = 1e-12;
pub const CKA_EPS: f64 = 1e-12;

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            bound: RefCell::new(HashMap::new()),
            fault: Cell::new(None),
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&self, fault: Fault) {
        self.fault.set(Some(fault));
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            grad: None,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn leaf(&self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Constant copy of `v`'s current value; gradient does not flow back.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            grad: None,
        });
        Var(nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.borrow().get(&id) {
            return v;
        }
        let v = self.leaf(store.value(id).clone());
        self.bound.borrow_mut().insert(id, v);
        v
    }

    /// Gradients of every bound parameter, sorted by id.
    pub fn param_grads(&self) -> Vec<(ParamId, Matrix)> {
        let bound = self.bound.borrow();
        let nodes = self.nodes.borrow();
        let mut out: Vec<_> = bound
            .iter()
            .map(|(&id, v)| {
                let n = &nodes[v.0];
                let g = n
                    .grad
                    .clone()
                    .unwrap_or_else(|| Matrix::zeros(n.value.rows(), n.value.cols()));
                (id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    pub fn value(&self, v: Var) -> Rc<Matrix> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    /// Accumulated gradient of a leaf (zeros if nothing reached it).
    pub fn grad(&self, v: Var) -> Matrix {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        n.grad
            .clone()
            .unwrap_or_else(|| Matrix::zeros(n.value.rows(), n.value.cols()))
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    // ---- elementary ops -------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(&self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), self.needs(&[a, b])))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), self.needs(&[a, b])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), self.needs(&[a, b])))
    }

    /// `a + 1·bias` where `bias` is a single row.
    pub fn add_row(&self, a: Var, bias: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(bias);
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(Error::shape("add_row", av.shape(), bv.shape()));
        }
        let mut out = (*av).clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, bias), self.needs(&[a, bias])))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s), self.needs(&[a]))
    }

    pub fn hadamard(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Hadamard(a, b), self.needs(&[a, b])))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), self.needs(&[a]))
    }

    /// Mean of each column over the rows (`1 × cols`).
    pub fn mean_over_rows(&self, a: Var) -> Var {
        let out = self.value(a).col_means();
        self.push(out, Op::MeanOverRows(a), self.needs(&[a]))
    }

    /// Mean of each row over the columns (`rows × 1`).
    pub fn mean_over_cols(&self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.cols().max(1) as f64;
        let out = Matrix::from_fn(av.rows(), 1, |r, _| av.row(r).iter().sum::<f64>() / n);
        self.push(out, Op::MeanOverCols(a), self.needs(&[a]))
    }

    pub fn sum(&self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), self.needs(&[a]))
    }

    /// Elementwise sum of same-shaped nodes.
    pub fn add_n(&self, vars: &[Var]) -> Result<Var> {
        let first = vars
            .first()
            .ok_or_else(|| Error::Contract("add_n of nothing".into()))?;
        let mut out = (*self.value(*first)).clone();
        for v in &vars[1..] {
            let vv = self.value(*v);
            if vv.shape() != out.shape() {
                return Err(Error::shape("add_n", out.shape(), vv.shape()));
            }
            out.add_assign(&vv);
        }
        Ok(self.push(out, Op::AddN(vars.to_vec()), self.needs(vars)))
    }

    pub fn frobenius_sq(&self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).frobenius_sq());
        self.push(out, Op::FrobeniusSq(a), self.needs(&[a]))
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Degenerate("log of non-positive value".into()));
        }
        let out = av.map(f64::ln);
        Ok(self.push(out, Op::Log(a), self.needs(&[a])))
    }

    pub fn exp(&self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a), self.needs(&[a]))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a), self.needs(&[a]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a), self.needs(&[a]))
    }

    pub fn concat_rows(&self, vars: &[Var]) -> Result<Var> {
        let values: Vec<_> = vars.iter().map(|v| self.value(*v)).collect();
        let cols = values
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?
            .cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for v in &values {
            if v.cols() != cols {
                return Err(Error::shape("concat_rows", values[0].shape(), v.shape()));
            }
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let out = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(vars.to_vec()), self.needs(vars)))
    }

    pub fn concat_cols(&self, vars: &[Var]) -> Result<Var> {
        let values: Vec<_> = vars.iter().map(|v| self.value(*v)).collect();
        let rows = values
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?
            .rows();
        let cols: usize = values.iter().map(|v| v.cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for v in &values {
            if v.rows() != rows {
                return Err(Error::shape("concat_cols", values[0].shape(), v.shape()));
            }
            for r in 0..rows {
                out.row_mut(r)[offset..offset + v.cols()].copy_from_slice(v.row(r));
            }
            offset += v.cols();
        }
        Ok(self.push(out, Op::ConcatCols(vars.to_vec()), self.needs(vars)))
    }

    /// Leading `width` columns (prefix truncation).
    pub fn prefix_cols(&self, a: Var, width: usize) -> Result<Var> {
        self.slice_cols(a, 0, width)
    }

    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if start >= end || end > av.cols() {
            return Err(Error::shape("slice_cols", av.shape(), (start, end)));
        }
        let out = av.slice_cols(start, end);
        Ok(self.push(out, Op::SliceCols { src: a, start }, self.needs(&[a])))
    }

    /// Rows picked by index (repeats allowed); gradient scatters back.
    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= av.rows()) {
            return Err(Error::shape("gather_rows", av.shape(), (bad, 0)));
        }
        let out = av.select_rows(idx);
        Ok(self.push(
            out,
            Op::GatherRows {
                src: a,
                idx: idx.into(),
            },
            self.needs(&[a]),
        ))
    }

    /// Inverted dropout with an explicit mask of `0` or `1/keep` entries.
    pub fn dropout_with_mask(&self, a: Var, mask: Matrix) -> Result<Var> {
        let out = self.value(a).zip_map(&mask, |x, m| x * m)?;
        Ok(self.push(out, Op::Dropout { src: a, mask }, self.needs(&[a])))
    }

    /// Divides each row by its Euclidean norm; rows with norm below
    /// [`NORM_EPS`] are rejected.
    pub fn l2_normalize_rows(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let mut out = (*av).clone();
        let mut norms = Vec::with_capacity(av.rows());
        for r in 0..av.rows() {
            let n = dot(av.row(r), av.row(r)).sqrt();
            if n < NORM_EPS {
                return Err(Error::Degenerate(format!(
                    "row {r} has zero norm; cosine similarity undefined"
                )));
            }
            out.row_mut(r).iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        Ok(self.push(out, Op::L2NormalizeRows { src: a, norms }, self.needs(&[a])))
    }

    /// Row-wise softmax of `a / temperature`. `mask` (one flag per column,
    /// shared by every row) excludes positions: they get probability 0 and no
    /// gradient.
    pub fn softmax_rows(&self, a: Var, temperature: f64, mask: Option<&[bool]>) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::Input(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let av = self.value(a);
        if let Some(m) = mask {
            if m.len() != av.cols() {
                return Err(Error::shape("softmax_rows mask", av.shape(), (1, m.len())));
            }
        }
        let mut out = Matrix::zeros(av.rows(), av.cols());
        for r in 0..av.rows() {
            softmax_into(av.row(r), temperature, mask, out.row_mut(r))
                .map_err(|_| Error::Degenerate(format!("softmax row {r} is fully masked")))?;
        }
        Ok(self.push(
            out,
            Op::SoftmaxRows {
                src: a,
                temperature,
            },
            self.needs(&[a]),
        ))
    }

    /// Per-row layer normalization with affine `gamma`/`beta` rows.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        if gv.shape() != (1, xv.cols()) || bv.shape() != (1, xv.cols()) {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let cols = xv.cols() as f64;
        let mut xhat = Matrix::zeros(xv.rows(), xv.cols());
        let mut out = Matrix::zeros(xv.rows(), xv.cols());
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for c in 0..row.len() {
                let h = (row[c] - mean) * is;
                xhat[(r, c)] = h;
                out[(r, c)] = h * gv.data()[c] + bv.data()[c];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            self.needs(&[x, gamma, beta]),
        ))
    }

    /// Multi-head scaled dot-product self-attention over independent row
    /// blocks. `q`, `k`, `v` are `(batch·seq) × width`; each head owns a
    /// contiguous `width/heads` column band. Padding keys receive exactly
    /// zero probability.
    pub fn attention(&self, q: Var, k: Var, v: Var, layout: Rc<AttentionLayout>) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let rows = layout.batch * layout.seq;
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() || qv.rows() != rows {
            return Err(Error::shape("attention", qv.shape(), kv.shape()));
        }
        if layout.heads == 0 || qv.cols() % layout.heads != 0 || layout.key_mask.len() != rows {
            return Err(Error::Contract(format!(
                "attention layout does not fit {}x{} with {} heads",
                qv.rows(),
                qv.cols(),
                layout.heads
            )));
        }
        let dh = qv.cols() / layout.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let t = layout.seq;
        let mut out = Matrix::zeros(rows, qv.cols());
        let mut probs = Vec::with_capacity(layout.batch * layout.heads);
        let mut scores = vec![0.0; t];
        for b in 0..layout.batch {
            let base = b * t;
            let mask = &layout.key_mask[base..base + t];
            for h in 0..layout.heads {
                let c0 = h * dh;
                let mut p = Matrix::zeros(t, t);
                for i in 0..t {
                    let qi = &qv.row(base + i)[c0..c0 + dh];
                    for j in 0..t {
                        scores[j] = if mask[j] {
                            dot(qi, &kv.row(base + j)[c0..c0 + dh]) * scale
                        } else {
                            0.0
                        };
                    }
                    softmax_into(&scores, 1.0, Some(mask), p.row_mut(i)).map_err(|_| {
                        Error::Degenerate(format!("attention block {b} has no valid keys"))
                    })?;
                    let o = &mut out.row_mut(base + i)[c0..c0 + dh];
                    for j in 0..t {
                        let pij = p[(i, j)];
                        if pij != 0.0 {
                            for (oc, vc) in o.iter_mut().zip(&vv.row(base + j)[c0..c0 + dh]) {
                                *oc += pij * vc;
                            }
                        }
                    }
                }
                probs.push(p);
            }
        }
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
            self.needs(&[q, k, v]),
        ))
    }

    /// Mean over rows of `−log softmax(row)[diagonal]`: in-batch contrastive
    /// cross-entropy where row `b`'s positive is column `b`.
    pub fn diag_cross_entropy(&self, logits: Var) -> Result<Var> {
        let lv = self.value(logits);
        let n = lv.rows();
        if n == 0 || lv.cols() != n {
            return Err(Error::shape("diag_cross_entropy", lv.shape(), (n, n)));
        }
        let mut probs = Matrix::zeros(n, n);
        let mut total = 0.0;
        for r in 0..n {
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[r];
            for (p, v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - max).exp() / z;
            }
        }
        let out = Matrix::scalar(total / n as f64);
        Ok(self.push(
            out,
            Op::DiagCrossEntropy { logits, probs },
            self.needs(&[logits]),
        ))
    }

    /// `KL(student ‖ teacher)` for a `1 × n` student distribution and a fixed
    /// teacher; teacher entries are clamped at [`KL_CLAMP`] and `0·log 0 = 0`.
    pub fn kl_div(&self, student: Var, teacher: &[f64]) -> Result<Var> {
        let sv = self.value(student);
        if sv.rows() != 1 || sv.cols() != teacher.len() {
            return Err(Error::shape(
                "kl_div support",
                sv.shape(),
                (1, teacher.len()),
            ));
        }
        let value: f64 = sv
            .data()
            .iter()
            .zip(teacher)
            .map(|(&p, &q)| if p > 0.0 { p * (p / q.max(KL_CLAMP)).ln() } else { 0.0 })
            .sum();
        Ok(self.push(
            Matrix::scalar(value),
            Op::KlDiv {
                student,
                teacher: teacher.to_vec(),
            },
            self.needs(&[student]),
        ))
    }

    /// `1 − CKA(x, y)` for a differentiable `x` and a fixed `y`, both with
    /// the same row count. Returns `None` when either self-HSIC is below
    /// [`CKA_EPS`]; the caller decides how to represent the degenerate case.
    pub fn cka_loss(&self, x: Var, y: &Matrix) -> Result<Option<Var>> {
        let xv = self.value(x);
        if xv.rows() != y.rows() {
            return Err(Error::shape("cka_loss", xv.shape(), y.shape()));
        }
        let xc = xv.center_columns();
        let yc = y.center_columns();
        let cross = xc.matmul_tn(&yc)?;
        let self_x = xc.matmul_tn(&xc)?;
        let hxy = cross.frobenius_sq();
        let hxx = self_x.frobenius_sq();
        let hyy = yc.matmul_tn(&yc)?.frobenius_sq();
        if hxx < CKA_EPS || hyy < CKA_EPS {
            return Ok(None);
        }
        let cka = hxy / (hxx.sqrt() * hyy.sqrt());
        let saved = Box::new(CkaSaved {
            xc,
            yc,
            cross,
            self_x,
            hxy,
            hxx,
            hyy,
        });
        Ok(Some(self.push(
            Matrix::scalar(1.0 - cka),
            Op::CkaLoss { x, saved },
            self.needs(&[x]),
        )))
    }

    // ---- backward -------------------------------------------------------

    /// Accumulates `∂root/∂leaf` into every differentiable leaf. Repeated
    /// calls add to what is already there; see [`Graph::zero_grad`].
    pub fn backward(&self, root: Var) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        let shape = nodes[root.0].value.shape();
        if shape != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {}x{}",
                shape.0, shape.1
            )));
        }
        let fault = self.fault.get();
        let mut grads: Vec<Option<Matrix>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Matrix::scalar(1.0));
        let mut leaf_grads = Vec::new();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads.push((i, g));
                continue;
            }
            let mut sink = GradSink {
                grads: &mut grads,
                nodes: &nodes,
            };
            backprop(&node.op, &node.value, &g, &mut sink, fault)?;
        }
        for (i, g) in leaf_grads {
            match &mut nodes[i].grad {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

struct GradSink<'a> {
    grads: &'a mut [Option<Matrix>],
    nodes: &'a [Node],
}

impl GradSink<'_> {
    fn entry(&mut self, v: Var) -> Option<&mut Matrix> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let (r, c) = node.value.shape();
        Some(self.grads[v.0].get_or_insert_with(|| Matrix::zeros(r, c)))
    }

    fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn add(&mut self, v: Var, contribution: &Matrix) {
        if let Some(g) = self.entry(v) {
            g.add_assign(contribution);
        }
    }
}

fn backprop(
    op: &Op,
    out: &Matrix,
    g: &Matrix,
    sink: &mut GradSink<'_>,
    fault: Option<Fault>,
) -> Result<()> {
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            if sink.nodes[a.0].requires_grad {
                let ga = g.matmul_nt(sink.value(*b))?;
                sink.add(*a, &ga);
            }
            if sink.nodes[b.0].requires_grad {
                let gb = sink.value(*a).matmul_tn(g)?;
                sink.add(*b, &gb);
            }
        }
        Op::Add(a, b) => {
            sink.add(*a, g);
            sink.add(*b, g);
        }
        Op::Sub(a, b) => {
            sink.add(*a, g);
            if let Some(gb) = sink.entry(*b) {
                gb.add_scaled(g, -1.0);
            }
        }
        Op::AddRow(a, bias) => {
            sink.add(*a, g);
            if let Some(gb) = sink.entry(*bias) {
                for r in 0..g.rows() {
                    for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(ga) = sink.entry(*a) {
                ga.add_scaled(g, *s);
            }
        }
        Op::Hadamard(a, b) => {
            let (av, bv) = (sink.value(*a).clone(), sink.value(*b).clone());
            if let Some(ga) = sink.entry(*a) {
                ga.add_assign(&g.zip_map(&bv, |x, y| x * y)?);
            }
            if let Some(gb) = sink.entry(*b) {
                gb.add_assign(&g.zip_map(&av, |x, y| x * y)?);
            }
        }
        Op::Transpose(a) => sink.add(*a, &g.transpose()),
        Op::MeanOverRows(a) => {
            if let Some(ga) = sink.entry(*a) {
                let n = ga.rows() as f64;
                for r in 0..ga.rows() {
                    for (o, v) in ga.row_mut(r).iter_mut().zip(g.data()) {
                        *o += v / n;
                    }
                }
            }
        }
        Op::MeanOverCols(a) => {
            if let Some(ga) = sink.entry(*a) {
                let n = ga.cols() as f64;
                for r in 0..ga.rows() {
                    let gr = g[(r, 0)] / n;
                    ga.row_mut(r).iter_mut().for_each(|o| *o += gr);
                }
            }
        }
        Op::Sum(a) => {
            let gs = g.item();
            if let Some(ga) = sink.entry(*a) {
                ga.data_mut().iter_mut().for_each(|o| *o += gs);
            }
        }
        Op::AddN(vars) => {
            for v in vars {
                sink.add(*v, g);
            }
        }
        Op::FrobeniusSq(a) => {
            let gs = g.item();
            let av = sink.value(*a).clone();
            if let Some(ga) = sink.entry(*a) {
                ga.add_scaled(&av, 2.0 * gs);
            }
        }
        Op::Log(a) => {
            let contrib = g.zip_map(sink.value(*a), |gv, x| gv / x)?;
            sink.add(*a, &contrib);
        }
        Op::Exp(a) => {
            let contrib = g.zip_map(out, |gv, y| gv * y)?;
            sink.add(*a, &contrib);
        }
        Op::Tanh(a) => {
            let contrib = g.zip_map(out, |gv, y| gv * (1.0 - y * y))?;
            sink.add(*a, &contrib);
        }
        Op::Gelu(a) => {
            let contrib = g.zip_map(sink.value(*a), |gv, x| gv * gelu_grad(x))?;
            sink.add(*a, &contrib);
        }
        Op::ConcatRows(vars) => {
            let mut offset = 0;
            for v in vars {
                let rows = sink.value(*v).rows();
                if let Some(gv) = sink.entry(*v) {
                    for r in 0..rows {
                        for (o, x) in gv.row_mut(r).iter_mut().zip(g.row(offset + r)) {
                            *o += x;
                        }
                    }
                }
                offset += rows;
            }
        }
        Op::ConcatCols(vars) => {
            let mut offset = 0;
            for v in vars {
                let cols = sink.value(*v).cols();
                if let Some(gv) = sink.entry(*v) {
                    for r in 0..g.rows() {
                        for (o, x) in gv
                            .row_mut(r)
                            .iter_mut()
                            .zip(&g.row(r)[offset..offset + cols])
                        {
                            *o += x;
                        }
                    }
                }
                offset += cols;
            }
        }
        Op::SliceCols { src, start } => {
            if let Some(gs) = sink.entry(*src) {
                for r in 0..g.rows() {
                    for (o, x) in gs.row_mut(r)[*start..*start + g.cols()]
                        .iter_mut()
                        .zip(g.row(r))
                    {
                        *o += x;
                    }
                }
            }
        }
        Op::GatherRows { src, idx } => {
            if let Some(gs) = sink.entry(*src) {
                for (r, &i) in idx.iter().enumerate() {
                    for (o, x) in gs.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
            }
        }
        Op::Dropout { src, mask } => {
            let contrib = g.zip_map(mask, |gv, m| gv * m)?;
            sink.add(*src, &contrib);
        }
        Op::L2NormalizeRows { src, norms } => {
            if let Some(gs) = sink.entry(*src) {
                for r in 0..g.rows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let proj = dot(y, gr);
                    for ((o, &gy), &yy) in gs.row_mut(r).iter_mut().zip(gr).zip(y) {
                        *o += (gy - yy * proj) / norms[r];
                    }
                }
            }
        }
        Op::SoftmaxRows { src, temperature } => {
            if let Some(gs) = sink.entry(*src) {
                for r in 0..g.rows() {
                    let p = out.row(r);
                    let gr = g.row(r);
                    let inner = dot(p, gr);
                    for ((o, &pp), &gg) in gs.row_mut(r).iter_mut().zip(p).zip(gr) {
                        *o += pp * (gg - inner) / temperature;
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let gamma_v = sink.value(*gamma).clone();
            if let Some(gg) = sink.entry(*gamma) {
                for r in 0..g.rows() {
                    for ((o, &gv), &h) in gg.data_mut().iter_mut().zip(g.row(r)).zip(xhat.row(r))
                    {
                        *o += gv * h;
                    }
                }
            }
            if let Some(gb) = sink.entry(*beta) {
                for r in 0..g.rows() {
                    for (o, &gv) in gb.data_mut().iter_mut().zip(g.row(r)) {
                        *o += gv;
                    }
                }
            }
            if let Some(gx) = sink.entry(*x) {
                let n = g.cols() as f64;
                for r in 0..g.rows() {
                    let h = xhat.row(r);
                    let dh: Vec<f64> = g
                        .row(r)
                        .iter()
                        .zip(gamma_v.data())
                        .map(|(a, b)| a * b)
                        .collect();
                    let mean_dh = dh.iter().sum::<f64>() / n;
                    let mean_dh_h = dot(&dh, h) / n;
                    for ((o, &d), &hh) in gx.row_mut(r).iter_mut().zip(&dh).zip(h) {
                        *o += inv_std[r] * (d - mean_dh - hh * mean_dh_h);
                    }
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            layout,
            probs,
        } => attention_backward(*q, *k, *v, layout, probs, g, sink)?,
        Op::DiagCrossEntropy { logits, probs } => {
            if let Some(gl) = sink.entry(*logits) {
                let n = probs.rows();
                let s = g.item() / n as f64;
                for r in 0..n {
                    for (c, (o, &p)) in gl.row_mut(r).iter_mut().zip(probs.row(r)).enumerate() {
                        let target = if c == r { 1.0 } else { 0.0 };
                        *o += s * (p - target);
                    }
                }
            }
        }
        Op::KlDiv { student, teacher } => {
            let gs = g.item();
            let sv = sink.value(*student).clone();
            if let Some(gst) = sink.entry(*student) {
                for ((o, &p), &q) in gst.data_mut().iter_mut().zip(sv.data()).zip(teacher) {
                    if p > 0.0 {
                        *o += gs * ((p / q.max(KL_CLAMP)).ln() + 1.0);
                    }
                }
            }
        }
        Op::CkaLoss { x, saved } => {
            let s = saved;
            let sx = s.hxx.sqrt();
            let sy = s.hyy.sqrt();
            // d hxy / d xc = 2 yc crossᵀ ; d hxx / d xc = 4 xc self_x
            let d_hxy = s.yc.matmul_nt(&s.cross)?.scale(2.0);
            let d_hxx = s.xc.matmul(&s.self_x)?.scale(4.0);
            let mut d_cka = d_hxy.scale(1.0 / (sx * sy));
            d_cka.add_scaled(&d_hxx, -0.5 * s.hxy / (s.hxx * sx * sy));
            // loss = 1 - cka
            let mut scale = -g.item();
            if fault == Some(Fault::CkaBackward) {
                scale *= 0.5;
            }
            let d_xc = d_cka.scale(scale);
            // centering is a projection: remove the column mean of the gradient
            let d_x = d_xc.center_columns();
            sink.add(*x, &d_x);
        }
    }
    Ok(())
}

fn attention_backward(
    q: Var,
    k: Var,
    v: Var,
    layout: &AttentionLayout,
    probs: &[Matrix],
    g: &Matrix,
    sink: &mut GradSink<'_>,
) -> Result<()> {
    let qv = sink.value(q).clone();
    let kv = sink.value(k).clone();
    let vv = sink.value(v).clone();
    let width = qv.cols();
    let dh = width / layout.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let t = layout.seq;
    let mut dq = Matrix::zeros(qv.rows(), width);
    let mut dk = Matrix::zeros(qv.rows(), width);
    let mut dv = Matrix::zeros(qv.rows(), width);
    let mut dp = vec![0.0; t];
    for b in 0..layout.batch {
        let base = b * t;
        for h in 0..layout.heads {
            let p = &probs[b * layout.heads + h];
            let c0 = h * dh;
            for i in 0..t {
                let go = &g.row(base + i)[c0..c0 + dh];
                for j in 0..t {
                    dp[j] = if p[(i, j)] != 0.0 {
                        dot(go, &vv.row(base + j)[c0..c0 + dh])
                    } else {
                        0.0
                    };
                }
                let inner: f64 = (0..t).map(|j| p[(i, j)] * dp[j]).sum();
                for j in 0..t {
                    let pij = p[(i, j)];
                    if pij == 0.0 {
                        continue;
                    }
                    let ds = pij * (dp[j] - inner) * scale;
                    for c in 0..dh {
                        dq[(base + i, c0 + c)] += ds * kv[(base + j, c0 + c)];
                        dk[(base + j, c0 + c)] += ds * qv[(base + i, c0 + c)];
                        dv[(base + j, c0 + c)] += pij * go[c];
                    }
                }
            }
        }
    }
    sink.add(q, &dq);
    sink.add(k, &dk);
    sink.add(v, &dv);
    Ok(())
}

/// Softmax of `scores / temperature` restricted to `mask`, written into `out`.
/// Errors when every position is masked. NaN scores propagate to every
/// kept output.
pub(crate) fn softmax_into(
    scores: &[f64],
    temperature: f64,
    mask: Option<&[bool]>,
    out: &mut [f64],
) -> std::result::Result<(), ()> {
    let keep = |j: usize| mask.is_none_or(|m| m[j]);
    if (0..scores.len()).any(|j| keep(j) && scores[j].is_nan()) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = if keep(j) { f64::NAN } else { 0.0 };
        }
        return Ok(());
    }
    let max = (0..scores.len())
        .filter(|&j| keep(j))
        .map(|j| scores[j] / temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(());
    }
    let mut z = 0.0;
    for j in 0..scores.len() {
        out[j] = if keep(j) {
            let e = (scores[j] / temperature - max).exp();
            z += e;
            e
        } else {
            0.0
        };
    }
    out.iter_mut().for_each(|v| *v /= z);
    Ok(())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
