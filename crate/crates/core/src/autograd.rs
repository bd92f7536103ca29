//! A small tape-based reverse-mode autodiff over [`Mat`] values.
//!
//! Every operation appends a node; [`Graph::backward`] walks the tape in reverse.
//! Parameters are referenced from a [`ParamStore`] instead of being copied onto the
//! tape, and gradients are only propagated into nodes that (transitively) depend on a
//! leaf created with `requires_grad`.

use std::collections::HashMap;

use crate::tensor::{gemm, Mat};

/// Handle to a named parameter tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
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

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }
}

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Log,
    Sigmoid,
    Softplus,
    Gelu,
    Sqrt,
    Square,
    Recip,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Clamp(Var, f64, f64),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Unary(Unary, Var),
    SumAll(Var),
    SumRows(Var),
    SumGroups(Var, usize),
    RepeatRows(Var, usize),
    TileRows(Var, usize),
    ConcatCols(Var, Var),
    GatherRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    RmsNorm(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    Attention(Box<AttentionCache>),
}

struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    batch: usize,
    seq: usize,
    heads: usize,
    probs: Vec<f64>,
}

enum Value {
    Owned(Mat),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Borrows the parameter store for its lifetime.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
    params_require_grad: bool,
}

impl<'p> Graph<'p> {
    /// A tape whose parameter leaves are differentiable iff `params_require_grad`.
    pub fn new(store: &'p ParamStore, params_require_grad: bool) -> Self {
        Self { store, nodes: Vec::new(), bound: HashMap::new(), params_require_grad }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(id) => self.store.get(*id),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Binds a stored parameter (once per tape).
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        self.nodes.push(Node { value: Value::Param(id), op: Op::Leaf, requires_grad: self.params_require_grad });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable input leaf (its gradient is available after backward).
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (ra, ca) = av.shape();
        let (rb, cb) = bv.shape();
        let rows = broadcast_dim(ra, rb);
        let cols = broadcast_dim(ca, cb);
        let mut out = Mat::zeros(rows, cols);
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
            Binary::Div => |x: f64, y: f64| x / y,
        };
        if (ra, ca) == (rb, cb) {
            for ((o, x), y) in out.data.iter_mut().zip(&av.data).zip(&bv.data) {
                *o = f(*x, *y);
            }
        } else {
            for r in 0..rows {
                let (rai, rbi) = (if ra == 1 { 0 } else { r }, if rb == 1 { 0 } else { r });
                for c in 0..cols {
                    let x = av.data[rai * ca + if ca == 1 { 0 } else { c }];
                    let y = bv.data[rbi * cb + if cb == 1 { 0 } else { c }];
                    out.data[r * cols + c] = f(x, y);
                }
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Binary(kind, a, b), rg)
    }

    /// Elementwise sum with row/column broadcasting of size-1 dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(out, Op::AddScalar(a), rg)
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(&[a]);
        self.push(out, Op::Clamp(a, lo, hi), rg)
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let out = matmul_raw(self.value(a), self.value(b), ta, tb);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul { a, b, ta, tb }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let out = self.value(a).map(|x| unary_fwd(kind, x));
        let rg = self.rg(&[a]);
        self.push(out, Op::Unary(kind, a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Mat::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::SumAll(a), rg)
    }

    /// Sums each row, giving an `r x 1` column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Mat::column((0..av.rows).map(|r| av.row(r).iter().sum()).collect());
        let rg = self.rg(&[a]);
        self.push(out, Op::SumRows(a), rg)
    }

    /// Sums consecutive groups of `group` rows: `(g*n) x c -> n x c`.
    pub fn sum_groups(&mut self, a: Var, group: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows % group, 0, "sum_groups: {} rows not divisible by {group}", av.rows);
        let n = av.rows / group;
        let mut out = Mat::zeros(n, av.cols);
        for r in 0..av.rows {
            let dst = r / group;
            for c in 0..av.cols {
                out.data[dst * av.cols + c] += av.data[r * av.cols + c];
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::SumGroups(a, group), rg)
    }

    /// Repeats every row `times` times consecutively: `n x c -> (n*times) x c`.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Var {
        let av = self.value(a);
        let mut out = Mat::zeros(av.rows * times, av.cols);
        for r in 0..av.rows {
            for t in 0..times {
                out.row_mut(r * times + t).copy_from_slice(av.row(r));
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::RepeatRows(a, times), rg)
    }

    /// Stacks the first `block` rows of `a` `times` times: `-> (block*times) x c`.
    pub fn tile_rows(&mut self, a: Var, block: usize, times: usize) -> Var {
        let av = self.value(a);
        assert!(block <= av.rows, "tile_rows: block {block} > rows {}", av.rows);
        let c = av.cols;
        let mut out = Mat::zeros(block * times, c);
        for t in 0..times {
            out.data[t * block * c..(t + 1) * block * c].copy_from_slice(&av.data[..block * c]);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::TileRows(a, block), rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows, bv.rows, "concat_cols row mismatch");
        let mut out = Mat::zeros(av.rows, av.cols + bv.cols);
        for r in 0..av.rows {
            let row = out.row_mut(r);
            row[..av.cols].copy_from_slice(av.row(r));
            row[av.cols..].copy_from_slice(bv.row(r));
        }
        let rg = self.rg(&[a, b]);
        self.push(out, Op::ConcatCols(a, b), rg)
    }

    /// Row lookup: output row `i` is `a[idx[i]]`.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let av = self.value(a);
        let mut out = Mat::zeros(idx.len(), av.cols);
        for (i, &j) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(av.row(j));
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::GatherRows(a, idx), rg)
    }

    /// Picks one column per row: output `r x 1` with entry `a[r, idx[r]]`.
    pub fn gather_cols(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let av = self.value(a);
        assert_eq!(idx.len(), av.rows);
        let out = Mat::column(idx.iter().enumerate().map(|(r, &c)| av.get(r, c)).collect());
        let rg = self.rg(&[a]);
        self.push(out, Op::GatherCols(a, idx), rg)
    }

    /// Row-wise root-mean-square normalization (no gain).
    pub fn rms_norm(&mut self, a: Var, eps: f64) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        for r in 0..av.rows {
            let row = out.row_mut(r);
            let ms = row.iter().map(|x| x * x).sum::<f64>() / row.len() as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            row.iter_mut().for_each(|x| *x *= inv);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::RmsNorm(a, eps), rg)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows {
            softmax_in_place(out.row_mut(r));
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::LogSoftmax(a), rg)
    }

    /// Bidirectional multi-head attention over `batch` sequences of `seq` rows.
    ///
    /// `q`, `k`, `v` are `(batch*seq) x width`. Keys at positions `>= lengths[b]` are
    /// masked out for sequence `b`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize, lengths: &[usize]) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let width = qv.cols;
        assert_eq!(qv.rows, batch * seq);
        assert_eq!(width % heads, 0);
        assert_eq!(lengths.len(), batch);
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let ll = seq * seq;
        let mut probs = vec![0.0; batch * heads * ll];
        let mut out = Mat::zeros(batch * seq, width);
        let ws = width as isize;
        for b in 0..batch {
            let len = lengths[b].clamp(1, seq);
            for h in 0..heads {
                let off = b * seq * width + h * dh;
                let p = &mut probs[(b * heads + h) * ll..(b * heads + h + 1) * ll];
                gemm(seq, dh, seq, scale, &qv.data[off..], ws, 1, &kv.data[off..], 1, ws, 0.0, p, seq as isize, 1);
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    row[len..].iter_mut().for_each(|x| *x = f64::NEG_INFINITY);
                    softmax_in_place(row);
                }
                gemm(seq, seq, dh, 1.0, p, seq as isize, 1, &vv.data[off..], ws, 1, 0.0, &mut out.data[off..], ws, 1);
            }
        }
        let rg = self.rg(&[q, k, v]);
        let cache = AttentionCache { q, k, v, batch, seq, heads, probs };
        self.push(out, Op::Attention(Box::new(cache)), rg)
    }

    /// Reverse pass seeded with `d loss / d loss = 1` for a 1x1 `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        let shape = self.value(loss).shape();
        assert_eq!(shape, (1, 1), "backward() needs a scalar loss, got {shape:?}");
        self.backward_with_seed(loss, Mat::scalar(1.0))
    }

    /// Reverse pass with an explicit cotangent for `root`.
    pub fn backward_with_seed(&self, root: Var, seed: Mat) -> Grads {
        assert_eq!(seed.shape(), self.value(root).shape());
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(seed);
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads, bound: self.bound.clone() }
    }

    fn backprop_node(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        let out = match &node.value {
            Value::Owned(m) => m,
            Value::Param(_) => return,
        };
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (a, b) = (*a, *b);
                let (av, bv) = (self.value(a), self.value(b));
                if self.requires_grad(a) {
                    let ga = match kind {
                        Binary::Add | Binary::Sub => g.clone(),
                        Binary::Mul => ew_broadcast(g, bv, |g, y| g * y),
                        Binary::Div => ew_broadcast(g, bv, |g, y| g / y),
                    };
                    accumulate(grads, a, reduce_to(&ga, av.shape()));
                }
                if self.requires_grad(b) {
                    let gb = match kind {
                        Binary::Add => g.clone(),
                        Binary::Sub => g.map(|x| -x),
                        Binary::Mul => ew_broadcast(g, av, |g, x| g * x),
                        Binary::Div => {
                            // d(a/b)/db = -out / b
                            let mut t = ew_broadcast(g, out, |g, o| -g * o);
                            t = ew_broadcast(&t, bv, |t, y| t / y);
                            t
                        }
                    };
                    accumulate(grads, b, reduce_to(&gb, bv.shape()));
                }
            }
            Op::Scale(a, s) => {
                if self.requires_grad(*a) {
                    accumulate(grads, *a, g.map(|x| x * s));
                }
            }
            Op::AddScalar(a) => {
                if self.requires_grad(*a) {
                    accumulate(grads, *a, g.clone());
                }
            }
            Op::Clamp(a, lo, hi) => {
                if self.requires_grad(*a) {
                    let av = self.value(*a);
                    let data = g.data.iter().zip(&av.data).map(|(g, x)| if x < lo || x > hi { 0.0 } else { *g }).collect();
                    accumulate(grads, *a, Mat::from_vec(g.rows, g.cols, data));
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let (av, bv) = (self.value(a), self.value(b));
                if self.requires_grad(a) {
                    // C = A B: dA = G B^T ; with A^T stored: dA^T = G B^T -> dA = B G^T
                    let ga = if !ta { matmul_raw(g, bv, false, !tb) } else { matmul_raw(bv, g, tb, true) };
                    accumulate(grads, a, ga);
                }
                if self.requires_grad(b) {
                    let gb = if !tb { matmul_raw(av, g, !ta, false) } else { matmul_raw(g, av, true, ta) };
                    accumulate(grads, b, gb);
                }
            }
            Op::Unary(kind, a) => {
                if self.requires_grad(*a) {
                    let x = self.value(*a);
                    let mut ga = g.clone();
                    for ((d, &xi), &yi) in ga.data.iter_mut().zip(&x.data).zip(&out.data) {
                        *d *= unary_grad(*kind, xi, yi);
                    }
                    accumulate(grads, *a, ga);
                }
            }
            Op::SumAll(a) => {
                if self.requires_grad(*a) {
                    let (r, c) = self.value(*a).shape();
                    accumulate(grads, *a, Mat::filled(r, c, g.item()));
                }
            }
            Op::SumRows(a) => {
                if self.requires_grad(*a) {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Mat::zeros(r, c);
                    for i in 0..r {
                        ga.row_mut(i).iter_mut().for_each(|x| *x = g.data[i]);
                    }
                    accumulate(grads, *a, ga);
                }
            }
            Op::SumGroups(a, group) => {
                if self.requires_grad(*a) {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Mat::zeros(r, c);
                    for i in 0..r {
                        ga.row_mut(i).copy_from_slice(g.row(i / group));
                    }
                    accumulate(grads, *a, ga);
                }
            }
            Op::RepeatRows(a, times) => {
                if self.requires_grad(*a) {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Mat::zeros(r, c);
                    for i in 0..g.rows {
                        let dst = ga.row_mut(i / times);
                        for (d, s) in dst.iter_mut().zip(g.row(i)) {
                            *d += s;
                        }
                    }
                    accumulate(grads, *a, ga);
                }
            }
            Op::TileRows(a, block) => {
                if self.requires_grad(*a) {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Mat::zeros(r, c);
                    for i in 0..g.rows {
                        let dst = ga.row_mut(i % block);
                        for (d, s) in dst.iter_mut().zip(g.row(i)) {
                            *d += s;
                        }
                    }
                    accumulate(grads, *a, ga);
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols;
                if self.requires_grad(*a) {
                    let mut ga = Mat::zeros(g.rows, ca);
                    for r in 0..g.rows {
                        ga.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                    }
                    accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let cb = self.value(*b).cols;
                    let mut gb = Mat::zeros(g.rows, cb);
                    for r in 0..g.rows {
                        gb.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::GatherRows(a, idx) => {
                if self.requires_grad(*a) {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Mat::zeros(r, c);
                    for (i, &j) in idx.iter().enumerate() {
                        for (d, s) in ga.row_mut(j).iter_mut().zip(g.row(i)) {
                            *d += s;
                        }
                    }
                    accumulate(grads, *a, ga);
                }
            }
            Op::GatherCols(a, idx) => {
                if self.requires_grad(*a) {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Mat::zeros(r, c);
                    for (i, &j) in idx.iter().enumerate() {
                        ga.data[i * c + j] = g.data[i];
                    }
                    accumulate(grads, *a, ga);
                }
            }
            Op::RmsNorm(a, eps) => {
                if self.requires_grad(*a) {
                    let x = self.value(*a);
                    let mut ga = Mat::zeros(x.rows, x.cols);
                    let n = x.cols as f64;
                    for r in 0..x.rows {
                        let (xr, yr, gr) = (x.row(r), out.row(r), g.row(r));
                        let ms = xr.iter().map(|v| v * v).sum::<f64>() / n;
                        let inv = 1.0 / (ms + eps).sqrt();
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for ((d, &gi), &yi) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *d = inv * (gi - yi * dot);
                        }
                    }
                    accumulate(grads, *a, ga);
                }
            }
            Op::Softmax(a) => {
                if self.requires_grad(*a) {
                    let mut ga = Mat::zeros(out.rows, out.cols);
                    for r in 0..out.rows {
                        let (yr, gr) = (out.row(r), g.row(r));
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, &gi), &yi) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *d = yi * (gi - dot);
                        }
                    }
                    accumulate(grads, *a, ga);
                }
            }
            Op::LogSoftmax(a) => {
                if self.requires_grad(*a) {
                    let mut ga = Mat::zeros(out.rows, out.cols);
                    for r in 0..out.rows {
                        let (yr, gr) = (out.row(r), g.row(r));
                        let total: f64 = gr.iter().sum();
                        for ((d, &gi), &yi) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *d = gi - yi.exp() * total;
                        }
                    }
                    accumulate(grads, *a, ga);
                }
            }
            Op::Attention(cache) => self.attention_backward(cache, g, grads),
        }
    }

    fn attention_backward(&self, c: &AttentionCache, g: &Mat, grads: &mut [Option<Mat>]) {
        let (qv, kv, vv) = (self.value(c.q), self.value(c.k), self.value(c.v));
        let (need_q, need_k, need_v) = (self.requires_grad(c.q), self.requires_grad(c.k), self.requires_grad(c.v));
        let width = qv.cols;
        let (seq, heads) = (c.seq, c.heads);
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let ll = seq * seq;
        let ws = width as isize;
        let ss = seq as isize;
        let mut gq = Mat::zeros(qv.rows, width);
        let mut gk = Mat::zeros(qv.rows, width);
        let mut gv = Mat::zeros(qv.rows, width);
        let mut dp = vec![0.0; ll];
        for b in 0..c.batch {
            for h in 0..heads {
                let off = b * seq * width + h * dh;
                let p = &c.probs[(b * heads + h) * ll..(b * heads + h + 1) * ll];
                if need_v {
                    // dV = P^T dO
                    gemm(seq, seq, dh, 1.0, p, 1, ss, &g.data[off..], ws, 1, 0.0, &mut gv.data[off..], ws, 1);
                }
                if need_q || need_k {
                    // dP = dO V^T
                    gemm(seq, dh, seq, 1.0, &g.data[off..], ws, 1, &vv.data[off..], 1, ws, 0.0, &mut dp, ss, 1);
                    for i in 0..seq {
                        let (pr, dr) = (&p[i * seq..(i + 1) * seq], &mut dp[i * seq..(i + 1) * seq]);
                        let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                        for (d, &pi) in dr.iter_mut().zip(pr) {
                            *d = pi * (*d - dot);
                        }
                    }
                    if need_q {
                        gemm(seq, seq, dh, scale, &dp, ss, 1, &kv.data[off..], ws, 1, 0.0, &mut gq.data[off..], ws, 1);
                    }
                    if need_k {
                        gemm(seq, seq, dh, scale, &dp, 1, ss, &qv.data[off..], ws, 1, 0.0, &mut gk.data[off..], ws, 1);
                    }
                }
            }
        }
        if need_q {
            accumulate(grads, c.q, gq);
        }
        if need_k {
            accumulate(grads, c.k, gk);
        }
        if need_v {
            accumulate(grads, c.v, gv);
        }
    }
}

/// Gradients produced by one reverse pass.
pub struct Grads {
    grads: Vec<Option<Mat>>,
    bound: HashMap<ParamId, Var>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    pub fn wrt_param(&self, id: ParamId) -> Option<&Mat> {
        self.bound.get(&id).and_then(|v| self.wrt(*v))
    }

    /// One gradient per stored parameter (zeros where the parameter was unused).
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Mat> {
        store.iter().map(|(id, _, m)| self.wrt_param(id).cloned().unwrap_or_else(|| Mat::zeros(m.rows, m.cols))).collect()
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn broadcast_dim(a: usize, b: usize) -> usize {
    match (a, b) {
        _ if a == b => a,
        (1, n) | (n, 1) => n,
        _ => panic!("cannot broadcast dimensions {a} and {b}"),
    }
}

/// `f(g, y)` where `y` is broadcast up to `g`'s shape.
fn ew_broadcast(g: &Mat, y: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    let mut out = g.clone();
    if g.shape() == y.shape() {
        for (o, &yi) in out.data.iter_mut().zip(&y.data) {
            *o = f(*o, yi);
        }
        return out;
    }
    let (ry, cy) = y.shape();
    for r in 0..g.rows {
        for c in 0..g.cols {
            let yi = y.data[(if ry == 1 { 0 } else { r }) * cy + if cy == 1 { 0 } else { c }];
            let o = &mut out.data[r * g.cols + c];
            *o = f(*o, yi);
        }
    }
    out
}

/// Sums `g` down to `shape` along broadcast dimensions.
fn reduce_to(g: &Mat, shape: (usize, usize)) -> Mat {
    if g.shape() == shape {
        return g.clone();
    }
    let (r, c) = shape;
    let mut out = Mat::zeros(r, c);
    for i in 0..g.rows {
        for j in 0..g.cols {
            out.data[(if r == 1 { 0 } else { i }) * c + if c == 1 { 0 } else { j }] += g.data[i * g.cols + j];
        }
    }
    out
}

pub(crate) fn matmul_raw(a: &Mat, b: &Mat, ta: bool, tb: bool) -> Mat {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "matmul inner dimension mismatch: {k} vs {k2}");
    let mut out = Mat::zeros(m, n);
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    gemm(m, k, n, 1.0, &a.data, rsa, csa, &b.data, rsb, csb, 0.0, &mut out.data, n as isize, 1);
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn unary_fwd(kind: Unary, x: f64) -> f64 {
    match kind {
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Sigmoid => sigmoid(x),
        Unary::Softplus => softplus(x),
        Unary::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
        Unary::Sqrt => x.sqrt(),
        Unary::Square => x * x,
        Unary::Recip => 1.0 / x,
    }
}

fn unary_grad(kind: Unary, x: f64, y: f64) -> f64 {
    match kind {
        Unary::Exp => y,
        Unary::Log => 1.0 / x,
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Softplus => sigmoid(x),
        Unary::Gelu => {
            let th = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
            0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        }
        Unary::Sqrt => 0.5 / y,
        Unary::Square => 2.0 * x,
        Unary::Recip => -y * y,
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}
