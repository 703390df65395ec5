//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records operations during the forward pass; [`Tape::backward`]
//! replays them in reverse, accumulating gradients per node in a fixed order
//! so two runs over the same graph produce bit-identical gradients.
//!
//! The op set is fixed: matmul, elementwise add/mul/scale, transpose,
//! reshape, row concat/slice/gather/scatter, softmax and log-softmax over the
//! last axis, layer norm, GELU, sum/mean reductions, plus three gradient
//! manipulation primitives: [`Var::stop_gradient`], [`Var::scale_gradient`]
//! and [`Var::straight_through_onehot`]. Broadcasting is limited to
//! scalar-with-tensor and trailing-axis bias adds; all other shapes must
//! match exactly.
//!
//! Tapes are single-threaded. Tensors without tapes are immutable values and
//! safe to share across threads; parallel training gives each record its own
//! tape over shared parameter tensors.

use std::cell::RefCell;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Raw kernels, shared by forward passes and backward closures.

/// Row-major matmul: a is m×k, b is k×n.
pub fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == S::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
    out
}

pub fn transpose_raw<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Softmax over each row of an n×v matrix, max-subtracted for stability.
pub fn softmax_rows_raw<S: Scalar>(x: &[S], v: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for (row, orow) in x.chunks_exact(v).zip(out.chunks_exact_mut(v)) {
        let mx = row.iter().cloned().fold(S::neg_infinity(), S::max);
        let mut z = S::zero();
        for (o, &r) in orow.iter_mut().zip(row) {
            *o = (r - mx).exp();
            z += *o;
        }
        for o in orow.iter_mut() {
            *o = *o / z;
        }
    }
    out
}

/// Index of the row maximum; ties break to the lowest index.
pub fn argmax_row<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Standard Gumbel draw: -ln(-ln(u)) with u clamped to [1e-12, 1-1e-12].
pub fn gumbel_draw(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.gen::<f64>().clamp(1e-12, 1.0 - 1e-12);
    -(-u.ln()).ln()
}

// ---------------------------------------------------------------------------
// Tape and variables.

struct Node<S> {
    data: Arc<Vec<S>>,
    shape: Vec<usize>,
    requires_grad: bool,
}

type BackwardFn<S> = Box<dyn Fn(&mut Gradients<S>)>;

struct Inner<S: Scalar> {
    nodes: Vec<Node<S>>,
    ops: Vec<BackwardFn<S>>,
}

pub struct Tape<S: Scalar> {
    inner: RefCell<Inner<S>>,
}

pub struct Var<'t, S: Scalar> {
    tape: &'t Tape<S>,
    id: usize,
}

impl<'t, S: Scalar> Clone for Var<'t, S> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<'t, S: Scalar> Copy for Var<'t, S> {}

/// Per-node gradient buffers produced by [`Tape::backward`].
pub struct Gradients<S> {
    slots: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var<'_, S>) -> Option<&[S]> {
        self.slots[v.id].as_deref()
    }

    fn out(&self, id: usize) -> Option<Vec<S>> {
        self.slots[id].clone()
    }

    fn accum(&mut self, id: usize, g: Vec<S>) {
        match &mut self.slots[id] {
            Some(cur) => {
                for (c, x) in cur.iter_mut().zip(g) {
                    *c += x;
                }
            }
            slot => *slot = Some(g),
        }
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { inner: RefCell::new(Inner { nodes: Vec::new(), ops: Vec::new() }) }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Register a tensor as a leaf node.
    pub fn input(&self, t: &Tensor<S>, requires_grad: bool) -> Var<'_, S> {
        self.push(t.arc(), t.shape().to_vec(), requires_grad)
    }

    /// Register a non-differentiable constant.
    pub fn constant(&self, t: &Tensor<S>) -> Var<'_, S> {
        self.input(t, false)
    }

    pub fn scalar(&self, v: S) -> Var<'_, S> {
        self.push(Arc::new(vec![v]), vec![], false)
    }

    fn push(&self, data: Arc<Vec<S>>, shape: Vec<usize>, requires_grad: bool) -> Var<'_, S> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { data, shape, requires_grad });
        Var { tape: self, id }
    }

    fn push_op(&self, f: BackwardFn<S>) {
        self.inner.borrow_mut().ops.push(f);
    }

    /// Reverse pass from a scalar loss. Visits every recorded op exactly once
    /// in reverse order; accumulation order is fixed, so results are
    /// deterministic.
    pub fn backward(&self, loss: Var<'_, S>) -> Gradients<S> {
        let inner = self.inner.borrow();
        assert_eq!(
            inner.nodes[loss.id].shape,
            Vec::<usize>::new(),
            "backward: loss must be a scalar, got shape {:?}",
            inner.nodes[loss.id].shape
        );
        let mut g = Gradients { slots: vec![None; inner.nodes.len()] };
        g.slots[loss.id] = Some(vec![S::one()]);
        for op in inner.ops.iter().rev() {
            op(&mut g);
        }
        g
    }
}

fn same_tape<S: Scalar>(a: Var<'_, S>, b: Var<'_, S>, op: &str) {
    assert!(std::ptr::eq(a.tape, b.tape), "{op}: variables from different tapes");
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn value(self) -> Arc<Vec<S>> {
        Arc::clone(&self.tape.inner.borrow().nodes[self.id].data)
    }

    pub fn shape(self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn numel(self) -> usize {
        self.tape.inner.borrow().nodes[self.id].data.len()
    }

    pub fn requires_grad(self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    pub fn item(self) -> S {
        let v = self.value();
        assert_eq!(v.len(), 1, "item: not a scalar");
        v[0]
    }

    pub fn to_tensor(self) -> Tensor<S> {
        Tensor::new(self.shape(), self.value().to_vec())
    }

    fn rows_cols(self, op: &str) -> (usize, usize) {
        let sh = self.shape();
        assert_eq!(sh.len(), 2, "{op}: expected a 2-d tensor, got shape {sh:?}");
        (sh[0], sh[1])
    }

    // -- linear algebra ----------------------------------------------------

    pub fn matmul(self, rhs: Var<'t, S>) -> Var<'t, S> {
        same_tape(self, rhs, "matmul");
        let (m, k) = self.rows_cols("matmul");
        let (k2, n) = rhs.rows_cols("matmul");
        assert_eq!(k, k2, "matmul: inner dims differ, {:?} vs {:?}", self.shape(), rhs.shape());
        let a = self.value();
        let b = rhs.value();
        let out = matmul_raw(&a, &b, m, k, n);
        let (ga, gb) = (self.requires_grad(), rhs.requires_grad());
        let o = self.tape.push(Arc::new(out), vec![m, n], ga || gb);
        if ga || gb {
            let (aid, bid, oid) = (self.id, rhs.id, o.id);
            self.tape.push_op(Box::new(move |g| {
                let Some(go) = g.out(oid) else { return };
                if ga {
                    let bt = transpose_raw(&b, k, n);
                    g.accum(aid, matmul_raw(&go, &bt, m, n, k));
                }
                if gb {
                    let at = transpose_raw(&a, m, k);
                    g.accum(bid, matmul_raw(&at, &go, k, m, n));
                }
            }));
        }
        o
    }

    pub fn transpose(self) -> Var<'t, S> {
        let (r, c) = self.rows_cols("transpose");
        let a = self.value();
        let out = transpose_raw(&a, r, c);
        let rg = self.requires_grad();
        let o = self.tape.push(Arc::new(out), vec![c, r], rg);
        if rg {
            let (aid, oid) = (self.id, o.id);
            self.tape.push_op(Box::new(move |g| {
                let Some(go) = g.out(oid) else { return };
                g.accum(aid, transpose_raw(&go, c, r));
            }));
        }
        o
    }

    pub fn reshape(self, shape: Vec<usize>) -> Var<'t, S> {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.numel(), "reshape: {:?} -> {:?} changes element count", self.shape(), shape);
        let rg = self.requires_grad();
        let o = self.tape.push(self.value(), shape, rg);
        if rg {
            let (aid, oid) = (self.id, o.id);
            self.tape.push_op(Box::new(move |g| {
                let Some(go) = g.out(oid) else { return };
                g.accum(aid, go);
            }));
        }
        o
    }

    // -- elementwise -------------------------------------------------------

    pub fn add(self, rhs: Var<'t, S>) -> Var<'t, S> {
        same_tape(self, rhs, "add");
        assert_eq!(self.shape(), rhs.shape(), "add: shapes {:?} vs {:?}", self.shape(), rhs.shape());
        let a = self.value();
        let b = rhs.value();
        let out: Vec<S> = a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect();
        let (ga, gb) = (self.requires_grad(), rhs.requires_grad());
        let o = self.tape.push(Arc::new(out), self.shape(), ga || gb);
        if ga || gb {
            let (aid, bid, oid) = (self.id, rhs.id, o.id);
            self.tape.push_op(Box::new(move |g| {
                let Some(go) = g.out(oid) else { return };
                if ga {
                    g.accum(aid, go.clone());
                }
                if gb {
                    g.accum(bid, go);
                }
            }));
        }
        o
    }

    pub fn sub(self, rhs: Var<'t, S>) -> Var<'t, S> {
        same_tape(self, rhs, "sub");
        assert_eq!(self.shape(), rhs.shape(), "sub: shapes {:?} vs {:?}", self.shape(), rhs.shape());
        let a = self.value();
        let b = rhs.value();
        let out: Vec<S> = a.iter().zip(b.iter()).map(|(&x, &y)| x - y).collect();
        let (ga, gb) = (self.requires_grad(), rhs.requires_grad());
        let o = self.tape.push(Arc::new(out), self.shape(), ga || gb);
        if ga || gb {
            let (aid, bid, oid) = (self.id, rhs.id, o.id);
            self.tape.push_op(Box::new(move |g| {
                let Some(go) = g.out(oid) else { return };
                if ga {
                    g.accum(aid, go.clone());
                }
                if gb {
                    g.accum(bid, go.iter().map(|&x| -x).collect());
                }
            }));
        }
        o
    }

    /// Trailing-axis bias broadcast: x[..., d] + b[d].
    pub fn add_bias(self, bias: Var<'t, S>) -> Var<'t, S> {
        same_tape(self, bias, "add_bias");
        let bsh = bias.shape();
        let xsh = self.shape();
        assert!(
            bsh.len() == 1 && !xsh.is_empty() && *xsh.last().unwrap() == bsh[0],
            "add_bias: shapes {xsh:?} vs {bsh:?}"
        );
        let d = bsh[0];
        let a = self.value();
        let b = bias.value();
        let out: Vec<S> = a.chunks_exact(d).flat_map(|row| row.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect::<Vec<_>>()).collect();
        let (ga, gb) = (self.requires_grad(), bias.requires_grad());
        let o = self.tape.push(Arc::new(out), xsh, ga || gb);
        if ga || gb {
            let (aid, bid, oid) = (self.id, bias.id, o.id);
            self.tape.push_op(Box::new(move |g| {
                let Some(go) = g.out(oid) else { return };
                if gb {
                    let mut db = vec![S::zero(); d];
                    for row in go.chunks_exact(d) {
                        for (s, &x) in db.iter_mut().zip(row) {
                            *s += x;
                        }
                    }
                    g.accum(bid, db);
                }
                if ga {
                    g.accum(aid, go);
                }
            }));
        }
        o
    }

    pub fn add_scalar(self, c: S) -> Var<'t, S> {
        let a = self.value();
        let out: Vec<S> = a.iter().map(|&x| x + c).collect();
        let rg = self.requires_grad();
        let o = self.tape.push(Arc::new(out), self.shape(), rg);
        if rg {
            let (aid, oid) = (self.id, o.id);
            self.tape.push_op(Box::new(move |g| {
                let Some(go) = g.out(oid) else { return };
                g.accum(aid, go);
            }));
        }
        o
    }

    /// Add a same-shape constant (attention masks, sampled noise).
    pub fn add_const(self, c: &Tensor<S>) -> Var<'t, S> {
        assert_eq!(self.shape(), c.shape(), "add_const: shapes {:?} vs {:?}", self.shape(), c.shape());
        let a = self.value();
        let out: Vec<S> = a.iter().zip(c.data()).map(|(&x, &y)| x + y).collect();
        let rg = self.requires_grad();
        let o = self.tape.push(Arc::new(out), self.shape(), rg);
        if rg {
            let (aid, oid) = (self.id, o.id);
            self.tape.push_op(Box::new(move |g| {
                let Some(go) = g.out(oid) else { return };
                g.accum(aid, go);
            }));
        }
        o
    }

    pub fn mul(self, rhs: Var<'t, S>) -> Var<'t, S> {
        same_tape(self, rhs, "mul");
        assert_eq!(self.shape(), rhs.shape(), "mul: shapes {:?} vs {:?}", self.shape(), rhs.shape());
        let a = self.value();
        let b = rhs.value();
        let out: Vec<S> = a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect();
        let (ga, gb) = (self.requires_grad(), rhs.requires_grad());
        let o = self.tape.push(Arc::new(out), self.shape(), ga || gb);
        if ga || gb {
            let (aid, bid, oid) = (self.id, rhs.id, o.id);
            self.tape.push_op(Box::new(move |g| {
                let Some(go) = g.out(oid) else { return };
                if ga {
                    g.accum(aid, go.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect());
                }
                if gb {
                    g.accum(bid, go.iter().zip(a.iter()).map(|(&x, &y)| x * y).collect());
                }
            }));
        }
        o
    }

    /// Elementwise multiply by a same-shape constant (dropout masks).
    pub fn mul_const(self, c: &Tensor<S>) -> Var<'t, S> {
        assert_eq!(self.shape(), c.shape(), "mul_const: shapes {:?} vs {:?}", self.shape(), c.shape());
        let a = self.value();
        let cc = c.arc();
        let out: Vec<S> = a.iter().zip(cc.iter()).map(|(&x, &y)| x * y).collect();
        let rg = self.requires_grad();
        let o = self.tape.push(Arc::new(out), self.shape(), rg);
        if rg {
            let (aid, oid) = (self.id, o.id);
            self.tape.push_op(Box::new(move |g| {
                let Some(go) = g.out(oid) else { return };
                g.accum(aid, go.iter().zip(cc.iter()).map(|(&x, &y)| x * y).collect());
            }));
        }
        o
    }

    pub fn mul_scalar(self, c: S) -> Var<'t, S> {
        let a = self.value();
        let out: Vec<S> = a.iter().map(|&x| x * c).collect();
        let rg = self.requires_grad();
        let o = self.tape.push(Arc::new(out), self.shape(), rg);
        if rg {
            let (aid, oid) = (self.id, o.id);
            self.tape.push_op(Box::new(move |g| {
                let Some(go) = g.out(oid) else { return };
                g.accum(aid, go.iter().map(|&x| x * c).collect());
            }));
        }
        o
    }

    /// Multiply row i of a 2-d tensor by the constant `w[i]`.
    pub fn scale_rows(self, w: &[S]) -> Var<'t, S> {
        let (r, c) = self.rows_cols("scale_rows");
        assert_eq!(r, w.len(), "scale_rows: {r} rows vs {} weights", w.len());
        let a = self.value();
        let w = w.to_vec();
        let mut out = Vec::with_capacity(a.len());
        for (i, row) in a.chunks_exact(c).enumerate() {
            out.extend(row.iter().map(|&x| x * w[i]));
        }
        let rg = self.requires_grad();
        let o = self.tape.push(Arc::new(out), vec![r, c], rg);
        if rg {
            let (aid, oid) = (self.id, o.id);
            self.tape.push_op(Box::new(move |g| {
                let Some(go) = g.out(oid) else { return };
                let mut da = Vec::with_capacity(go.len());
                for (i, row) in go.chunks_exact(c).enumerate() {
                    da.extend(row.iter().map(|&x| x * w[i]));
                }
                g.accum(aid, da);
            }));
        }
        o
    }

    // -- structure ---------------------------------------------------------

    /// Stack 2-d tensors with equal column counts along axis 0.
    pub fn concat_rows(tape: &'t Tape<S>, parts: &[Var<'t, S>]) -> Var<'t, S> {
        assert!(!parts.is_empty(), "concat_rows: empty input");
        let c = parts[0].rows_cols("concat_rows").1;
        let mut data = Vec::new();
        let mut row_ranges = Vec::with_capacity(parts.len());
        let mut at = 0usize;
        let mut any_grad = false;
        for p in parts {
            same_tape(parts[0], *p, "concat_rows");
            let (r, pc) = p.rows_cols("concat_rows");
            assert_eq!(pc, c, "concat_rows: column mismatch {pc} vs {c}");
            data.extend_from_slice(&p.value());
            row_ranges.push((p.id, p.requires_grad(), at, r));
            at += r;
            any_grad |= p.requires_grad();
        }
        let o = tape.push(Arc::new(data), vec![at, c], any_grad);
        if any_grad {
            let oid = o.id;
            tape.push_op(Box::new(move |g| {
                let Some(go) = g.out(oid) else { return };
                for &(pid, pg, start, rows) in &row_ranges {
                    if pg {
                        g.accum(pid, go[start * c..(start + rows) * c].to_vec());
                    }
                }
            }));
        }
        o
    }

    /// Contiguous row slice of a 2-d tensor.
    pub fn slice_rows(self, range: std::ops::Range<usize>) -> Var<'t, S> {
        let (r, c) = self.rows_cols("slice_rows");
        assert!(range.end <= r, "slice_rows: {range:?} out of {r} rows");
        let a = self.value();
        let out = a[range.start * c..range.end * c].to_vec();
        let rows = range.len();
        let rg = self.requires_grad();
        let o = self.tape.push(Arc::new(out), vec![rows, c], rg);
        if rg {
            let (aid, oid, start) = (self.id, o.id, range.start);
            self.tape.push_op(Box::new(move |g| {
                let Some(go) = g.out(oid) else { return };
                let mut da = vec![S::zero(); r * c];
                da[start * c..(start + rows) * c].copy_from_slice(&go);
                g.accum(aid, da);
            }));
        }
        o
    }

    /// Contiguous column slice of a 2-d tensor.
    pub fn slice_cols(self, range: std::ops::Range<usize>) -> Var<'t, S> {
        let (r, c) = self.rows_cols("slice_cols");
        assert!(range.end <= c, "slice_cols: {range:?} out of {c} cols");
        let a = self.value();
        let w = range.len();
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&a[i * c + range.start..i * c + range.end]);
        }
        let rg = self.requires_grad();
        let o = self.tape.push(Arc::new(out), vec![r, w], rg);
        if rg {
            let (aid, oid, start) = (self.id, o.id, range.start);
            self.tape.push_op(Box::new(move |g| {
                let Some(go) = g.out(oid) else { return };
                let mut da = vec![S::zero(); r * c];
                for i in 0..r {
                    da[i * c + start..i * c + start + w].copy_from_slice(&go[i * w..(i + 1) * w]);
                }
                g.accum(aid, da);
            }));
        }
        o
    }

    /// Row gather (embedding lookup): out[i] = self[ids[i]].
    pub fn gather_rows(self, ids: &[usize]) -> Var<'t, S> {
        let (r, c) = self.rows_cols("gather_rows");
        let ids = ids.to_vec();
        for &i in &ids {
            assert!(i < r, "gather_rows: index {i} out of {r} rows");
        }
        let a = self.value();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in &ids {
            out.extend_from_slice(&a[i * c..(i + 1) * c]);
        }
        let rg = self.requires_grad();
        let n = ids.len();
        let o = self.tape.push(Arc::new(out), vec![n, c], rg);
        if rg {
            let (aid, oid) = (self.id, o.id);
            self.tape.push_op(Box::new(move |g| {
                let Some(go) = g.out(oid) else { return };
                let mut da = vec![S::zero(); r * c];
                for (j, &i) in ids.iter().enumerate() {
                    for (d, &x) in da[i * c..(i + 1) * c].iter_mut().zip(&go[j * c..(j + 1) * c]) {
                        *d += x;
                    }
                }
                g.accum(aid, da);
            }));
        }
        o
    }

    /// Place rows at the given indices of an otherwise-zero `out_rows`×c
    /// tensor. Indices must be distinct.
    pub fn scatter_rows(self, ids: &[usize], out_rows: usize) -> Var<'t, S> {
        let (r, c) = self.rows_cols("scatter_rows");
        assert_eq!(r, ids.len(), "scatter_rows: {r} rows vs {} indices", ids.len());
        let ids = ids.to_vec();
        let a = self.value();
        let mut out = vec![S::zero(); out_rows * c];
        for (j, &i) in ids.iter().enumerate() {
            assert!(i < out_rows, "scatter_rows: index {i} out of {out_rows} rows");
            out[i * c..(i + 1) * c].copy_from_slice(&a[j * c..(j + 1) * c]);
        }
        let rg = self.requires_grad();
        let o = self.tape.push(Arc::new(out), vec![out_rows, c], rg);
        if rg {
            let (aid, oid) = (self.id, o.id);
            self.tape.push_op(Box::new(move |g| {
                let Some(go) = g.out(oid) else { return };
                let mut da = vec![S::zero(); r * c];
                for (j, &i) in ids.iter().enumerate() {
                    da[j * c..(j + 1) * c].copy_from_slice(&go[i * c..(i + 1) * c]);
                }
                g.accum(aid, da);
            }));
        }
        o
    }

    // -- nonlinearities ----------------------------------------------------

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t, S> {
        let sh = self.shape();
        let v = *sh.last().expect("softmax: scalar input");
        let a = self.value();
        let out = softmax_rows_raw(&a, v);
        let y = Arc::new(out);
        let rg = self.requires_grad();
        let o = self.tape.push(Arc::clone(&y), sh, rg);
        if rg {
            let (aid, oid) = (self.id, o.id);
            self.tape.push_op(Box::new(move |g| {
                let Some(go) = g.out(oid) else { return };
                let mut da = vec![S::zero(); go.len()];
                for ((drow, grow), yrow) in
                    da.chunks_exact_mut(v).zip(go.chunks_exact(v)).zip(y.chunks_exact(v))
                {
                    let mut dot = S::zero();
                    for (&gg, &yy) in grow.iter().zip(yrow) {
                        dot += gg * yy;
                    }
                    for ((d, &gg), &yy) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d = yy * (gg - dot);
                    }
                }
                g.accum(aid, da);
            }));
        }
        o
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Var<'t, S> {
        let sh = self.shape();
        let v = *sh.last().expect("log_softmax: scalar input");
        let a = self.value();
        let mut out = vec![S::zero(); a.len()];
        for (row, orow) in a.chunks_exact(v).zip(out.chunks_exact_mut(v)) {
            let mx = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut z = S::zero();
            for &r in row {
                z += (r - mx).exp();
            }
            let lz = z.ln() + mx;
            for (o, &r) in orow.iter_mut().zip(row) {
                *o = r - lz;
            }
        }
        let y = Arc::new(out);
        let rg = self.requires_grad();
        let o = self.tape.push(Arc::clone(&y), sh, rg);
        if rg {
            let (aid, oid) = (self.id, o.id);
            self.tape.push_op(Box::new(move |g| {
                let Some(go) = g.out(oid) else { return };
                let mut da = vec![S::zero(); go.len()];
                for ((drow, grow), yrow) in
                    da.chunks_exact_mut(v).zip(go.chunks_exact(v)).zip(y.chunks_exact(v))
                {
                    let mut gsum = S::zero();
                    for &gg in grow {
                        gsum += gg;
                    }
                    for ((d, &gg), &yy) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d = gg - yy.exp() * gsum;
                    }
                }
                g.accum(aid, da);
            }));
        }
        o
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(self, gain: Var<'t, S>, bias: Var<'t, S>) -> Var<'t, S> {
        same_tape(self, gain, "layer_norm");
        same_tape(self, bias, "layer_norm");
        let sh = self.shape();
        let d = *sh.last().expect("layer_norm: scalar input");
        assert_eq!(gain.shape(), vec![d], "layer_norm: gain shape {:?} vs width {d}", gain.shape());
        assert_eq!(bias.shape(), vec![d], "layer_norm: bias shape {:?} vs width {d}", bias.shape());
        let eps = S::from_f64(1e-5);
        let a = self.value();
        let gv = gain.value();
        let bv = bias.value();
        let rows = a.len() / d;
        let mut xhat = vec![S::zero(); a.len()];
        let mut inv_std = vec![S::zero(); rows];
        let mut out = vec![S::zero(); a.len()];
        let nd = S::from_f64(d as f64);
        for i in 0..rows {
            let row = &a[i * d..(i + 1) * d];
            let mut mu = S::zero();
            for &x in row {
                mu += x;
            }
            mu = mu / nd;
            let mut var = S::zero();
            for &x in row {
                var += (x - mu) * (x - mu);
            }
            var = var / nd;
            let istd = (var + eps).sqrt().recip();
            inv_std[i] = istd;
            for j in 0..d {
                let xh = (row[j] - mu) * istd;
                xhat[i * d + j] = xh;
                out[i * d + j] = gv[j] * xh + bv[j];
            }
        }
        let xhat = Arc::new(xhat);
        let inv_std = Arc::new(inv_std);
        let rg = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        let o = self.tape.push(Arc::new(out), sh, rg);
        if rg {
            let (aid, gid, bid, oid) = (self.id, gain.id, bias.id, o.id);
            let (ga, gg, gb) = (self.requires_grad(), gain.requires_grad(), bias.requires_grad());
            self.tape.push_op(Box::new(move |g| {
                let Some(go) = g.out(oid) else { return };
                if gb {
                    let mut db = vec![S::zero(); d];
                    for row in go.chunks_exact(d) {
                        for (s, &x) in db.iter_mut().zip(row) {
                            *s += x;
                        }
                    }
                    g.accum(bid, db);
                }
                if gg {
                    let mut dg = vec![S::zero(); d];
                    for (row, xrow) in go.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for ((s, &x), &xh) in dg.iter_mut().zip(row).zip(xrow) {
                            *s += x * xh;
                        }
                    }
                    g.accum(gid, dg);
                }
                if ga {
                    let mut da = vec![S::zero(); go.len()];
                    for i in 0..go.len() / d {
                        let grow = &go[i * d..(i + 1) * d];
                        let xrow = &xhat[i * d..(i + 1) * d];
                        let mut m1 = S::zero();
                        let mut m2 = S::zero();
                        let mut dxh = vec![S::zero(); d];
                        for j in 0..d {
                            dxh[j] = grow[j] * gv[j];
                            m1 += dxh[j];
                            m2 += dxh[j] * xrow[j];
                        }
                        m1 = m1 / nd;
                        m2 = m2 / nd;
                        for j in 0..d {
                            da[i * d + j] = (dxh[j] - m1 - xrow[j] * m2) * inv_std[i];
                        }
                    }
                    g.accum(aid, da);
                }
            }));
        }
        o
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t, S> {
        let a = self.value();
        let c = S::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
        let k = S::from_f64(0.044715);
        let half = S::from_f64(0.5);
        let three = S::from_f64(3.0);
        let out: Vec<S> = a
            .iter()
            .map(|&x| {
                let u = c * (x + k * x * x * x);
                half * x * (S::one() + u.tanh())
            })
            .collect();
        let rg = self.requires_grad();
        let o = self.tape.push(Arc::new(out), self.shape(), rg);
        if rg {
            let (aid, oid) = (self.id, o.id);
            self.tape.push_op(Box::new(move |g| {
                let Some(go) = g.out(oid) else { return };
                let da: Vec<S> = go
                    .iter()
                    .zip(a.iter())
                    .map(|(&gg, &x)| {
                        let u = c * (x + k * x * x * x);
                        let t = u.tanh();
                        let sech2 = S::one() - t * t;
                        let du = c * (S::one() + three * k * x * x);
                        gg * (half * (S::one() + t) + half * x * sech2 * du)
                    })
                    .collect();
                g.accum(aid, da);
            }));
        }
        o
    }

    // -- reductions ----------------------------------------------------------

    pub fn sum(self) -> Var<'t, S> {
        let a = self.value();
        let mut s = S::zero();
        for &x in a.iter() {
            s += x;
        }
        let rg = self.requires_grad();
        let n = a.len();
        let o = self.tape.push(Arc::new(vec![s]), vec![], rg);
        if rg {
            let (aid, oid) = (self.id, o.id);
            self.tape.push_op(Box::new(move |g| {
                let Some(go) = g.out(oid) else { return };
                g.accum(aid, vec![go[0]; n]);
            }));
        }
        o
    }

    pub fn mean(self) -> Var<'t, S> {
        let n = self.numel();
        self.sum().mul_scalar(S::from_f64(1.0 / n as f64))
    }

    // -- gradient manipulation ----------------------------------------------

    /// Identity forward; contributes zero gradient to the input.
    pub fn stop_gradient(self) -> Var<'t, S> {
        self.tape.push(self.value(), self.shape(), false)
    }

    /// Identity forward (bit-identical); upstream gradient multiplied by
    /// `alpha` on the way down, i.e. the effect of
    /// `alpha * x + stop_gradient((1 - alpha) * x)` without the roundoff.
    pub fn scale_gradient(self, alpha: S) -> Var<'t, S> {
        let rg = self.requires_grad();
        let o = self.tape.push(self.value(), self.shape(), rg);
        if rg {
            let (aid, oid) = (self.id, o.id);
            self.tape.push_op(Box::new(move |g| {
                let Some(go) = g.out(oid) else { return };
                g.accum(aid, go.iter().map(|&x| x * alpha).collect());
            }));
        }
        o
    }

    /// Row-wise hard argmax one-hot forward with an identity Jacobian:
    /// `out = p + stop_gradient(onehot(argmax p) - p)`. Ties break to the
    /// lowest index.
    pub fn straight_through_onehot(self) -> Var<'t, S> {
        let (r, v) = self.rows_cols("straight_through_onehot");
        let a = self.value();
        let mut out = vec![S::zero(); a.len()];
        for (row, orow) in a.chunks_exact(v).zip(out.chunks_exact_mut(v)) {
            orow[argmax_row(row)] = S::one();
        }
        let rg = self.requires_grad();
        let o = self.tape.push(Arc::new(out), vec![r, v], rg);
        if rg {
            let (aid, oid) = (self.id, o.id);
            self.tape.push_op(Box::new(move |g| {
                let Some(go) = g.out(oid) else { return };
                g.accum(aid, go);
            }));
        }
        o
    }
}

// ---------------------------------------------------------------------------
// Composite helpers.

/// Mean label-smoothed cross entropy over rows of an n×v logits matrix:
/// per row, the target distribution is `(1-eps)*onehot(target) + eps/v`.
pub fn cross_entropy_smoothed<'t, S: Scalar>(
    logits: Var<'t, S>,
    targets: &[usize],
    eps: f64,
) -> Var<'t, S> {
    let sh = logits.shape();
    assert_eq!(sh.len(), 2, "cross_entropy: logits must be 2-d, got {sh:?}");
    let (n, v) = (sh[0], sh[1]);
    assert_eq!(n, targets.len(), "cross_entropy: {n} rows vs {} targets", targets.len());
    for &t in targets {
        assert!(t < v, "cross_entropy: target {t} out of range for {v} classes");
    }
    let lsm = logits.log_softmax();
    let mut onehot = vec![S::zero(); n * v];
    for (i, &t) in targets.iter().enumerate() {
        onehot[i * v + t] = S::one();
    }
    let oh = Tensor::new(vec![n, v], onehot);
    let picked = lsm.mul_const(&oh).sum();
    let main = picked.mul_scalar(S::from_f64(-(1.0 - eps) / n as f64));
    if eps == 0.0 {
        main
    } else {
        let smooth = lsm.sum().mul_scalar(S::from_f64(-eps / (v as f64 * n as f64)));
        main.add(smooth)
    }
}

/// Plain mean cross entropy (no smoothing).
pub fn cross_entropy<'t, S: Scalar>(logits: Var<'t, S>, targets: &[usize]) -> Var<'t, S> {
    cross_entropy_smoothed(logits, targets, 0.0)
}

/// Hard one-hot forward from noisy logits with a straight-through softmax
/// backward: `straight_through_onehot(softmax(logits + strength * G))` with
/// i.i.d. standard Gumbel noise G.
pub fn gumbel_softmax<'t, S: Scalar>(
    logits: Var<'t, S>,
    strength: f64,
    rng: &mut ChaCha8Rng,
) -> Var<'t, S> {
    assert!(strength > 0.0, "gumbel_softmax: strength must be positive");
    let sh = logits.shape();
    let noise = Tensor::from_fn(sh, |_| S::from_f64(strength * gumbel_draw(rng)));
    logits.add_const(&noise).softmax().straight_through_onehot()
}

/// Inverted dropout as a constant mask; `None` rng or p == 0 is identity.
pub fn dropout<'t, S: Scalar>(
    x: Var<'t, S>,
    p: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Var<'t, S> {
    match rng {
        Some(r) if p > 0.0 => {
            let keep = S::from_f64(1.0 / (1.0 - p));
            let mask = Tensor::from_fn(x.shape(), |_| {
                if r.gen::<f64>() < p {
                    S::zero()
                } else {
                    keep
                }
            });
            x.mul_const(&mask)
        }
        _ => x,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    type T64 = Tape<f64>;

    fn tensor64(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data)
    }

    /// Central finite differences for a scalar-valued function of one tensor.
    fn fd_grad(
        x: &Tensor<f64>,
        f: impl Fn(&Tensor<f64>) -> f64,
        h: f64,
    ) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.numel());
        for i in 0..x.numel() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            out.push((f(&xp) - f(&xm)) / (2.0 * h));
        }
        out
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
            let denom = x.abs().max(y.abs()).max(1.0);
            assert!(
                (x - y).abs() / denom <= tol,
                "element {i}: {x} vs {y} (rel {})",
                (x - y).abs() / denom
            );
        }
    }

    #[test]
    fn matmul_identity() {
        let t = T64::new();
        let eye = t.constant(&tensor64(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let x = t.constant(&tensor64(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]));
        let y = eye.matmul(x);
        assert_eq!(&*y.value(), x.value().as_slice());
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let t = T64::new();
        let x = t.constant(&tensor64(vec![1, 3], vec![0.0, 0.0, 0.0]));
        let y = x.softmax();
        for &v in y.value().iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_log_matches() {
        let mut r = rng::stream(3, &[1]);
        let t = T64::new();
        let x = t.constant(&Tensor::uniform(vec![5, 7], -4.0, 4.0, &mut r));
        let sm = x.softmax().value();
        let lsm = x.log_softmax().value();
        for row in sm.chunks_exact(7) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        for (&a, &b) in sm.iter().zip(lsm.iter()) {
            assert!((a.ln() - b).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let mut r = rng::stream(11, &[2]);
        let x = Tensor::uniform(vec![4, 8], -2.0, 2.0, &mut r);
        let gv = Tensor::uniform(vec![8], 0.5, 1.5, &mut r);
        let bv = Tensor::uniform(vec![8], -0.5, 0.5, &mut r);
        let wv = Tensor::uniform(vec![4, 8], -1.0, 1.0, &mut r);

        let run = |xt: &Tensor<f64>, gt: &Tensor<f64>, bt: &Tensor<f64>| -> f64 {
            let t = T64::new();
            let xi = t.input(xt, true);
            let gi = t.input(gt, true);
            let bi = t.input(bt, true);
            let w = t.constant(&wv);
            xi.layer_norm(gi, bi).mul(w).sum().item()
        };

        let t = T64::new();
        let xi = t.input(&x, true);
        let gi = t.input(&gv, true);
        let bi = t.input(&bv, true);
        let w = t.constant(&wv);
        let loss = xi.layer_norm(gi, bi).mul(w).sum();
        let g = t.backward(loss);

        assert_close(g.get(xi).unwrap(), &fd_grad(&x, |p| run(p, &gv, &bv), 1e-5), 1e-4);
        assert_close(g.get(gi).unwrap(), &fd_grad(&gv, |p| run(&x, p, &bv), 1e-5), 1e-4);
        assert_close(g.get(bi).unwrap(), &fd_grad(&bv, |p| run(&x, &gv, p), 1e-5), 1e-4);
    }

    #[test]
    fn composite_ops_gradient_matches_finite_differences() {
        // matmul -> gelu -> softmax path plus gather/scatter/slice/concat.
        let mut r = rng::stream(17, &[4]);
        let a = Tensor::uniform(vec![3, 4], -1.0, 1.0, &mut r);
        let b = Tensor::uniform(vec![4, 5], -1.0, 1.0, &mut r);
        let run = |at: &Tensor<f64>, bt: &Tensor<f64>| -> f64 {
            let t = T64::new();
            let ai = t.input(at, true);
            let bi = t.input(bt, true);
            let h = ai.matmul(bi).gelu();
            let g = h.gather_rows(&[2, 0]);
            let s = g.scatter_rows(&[1, 3], 4);
            let c = Var::concat_rows(&t, &[s.slice_rows(0..2), s.slice_rows(2..4)]);
            c.transpose().log_softmax().mean().item()
        };
        let t = T64::new();
        let ai = t.input(&a, true);
        let bi = t.input(&b, true);
        let h = ai.matmul(bi).gelu();
        let gth = h.gather_rows(&[2, 0]);
        let s = gth.scatter_rows(&[1, 3], 4);
        let c = Var::concat_rows(&t, &[s.slice_rows(0..2), s.slice_rows(2..4)]);
        let loss = c.transpose().log_softmax().mean();
        let g = t.backward(loss);
        assert_close(g.get(ai).unwrap(), &fd_grad(&a, |p| run(p, &b), 1e-5), 1e-4);
        assert_close(g.get(bi).unwrap(), &fd_grad(&b, |p| run(&a, p), 1e-5), 1e-4);
    }

    #[test]
    fn cross_entropy_smoothed_values_and_gradient() {
        // V=2, eps=0.1: smoothed target per row is [0.95, 0.05].
        let t = T64::new();
        let logits = t.constant(&tensor64(vec![1, 2], vec![1.3, -0.7]));
        let loss = cross_entropy_smoothed(logits, &[0], 0.1).item();
        let p = softmax_rows_raw(&[1.3f64, -0.7], 2);
        let expect = -(0.95 * p[0].ln() + 0.05 * p[1].ln());
        assert!((loss - expect).abs() < 1e-12);

        // Perfect prediction with eps = 0 drives the loss to zero.
        let t = T64::new();
        let logits = t.constant(&tensor64(vec![2, 3], vec![40.0, 0.0, 0.0, 0.0, 40.0, 0.0]));
        assert!(cross_entropy(logits, &[0, 1]).item() < 1e-12);

        // Gradient check at eps=0.1.
        let mut r = rng::stream(23, &[5]);
        let x = Tensor::uniform(vec![3, 5], -2.0, 2.0, &mut r);
        let targets = [4usize, 0, 2];
        let run = |xt: &Tensor<f64>| {
            let t = T64::new();
            cross_entropy_smoothed(t.input(xt, true), &targets, 0.1).item()
        };
        let t = T64::new();
        let xi = t.input(&x, true);
        let loss = cross_entropy_smoothed(xi, &targets, 0.1);
        let g = t.backward(loss);
        assert_close(g.get(xi).unwrap(), &fd_grad(&x, run, 1e-5), 1e-4);
    }

    #[test]
    fn cross_entropy_smoothing_floor_at_matching_logits() {
        // Loss is minimized when softmax(logits) equals the smoothed target;
        // the minimum is the entropy of that target.
        let (v, eps) = (6usize, 0.1f64);
        let qc = 1.0 - eps + eps / v as f64;
        let qo = eps / v as f64;
        let mut row = vec![qo.ln(); v];
        row[2] = qc.ln();
        let t = T64::new();
        let logits = t.input(&tensor64(vec![1, v], row), true);
        let loss = cross_entropy_smoothed(logits, &[2], eps);
        let floor = -(qc * qc.ln() + (v as f64 - 1.0) * qo * qo.ln());
        assert!((loss.item() - floor).abs() < 1e-9);
        let g = t.backward(loss);
        for &d in g.get(logits).unwrap() {
            assert!(d.abs() < 1e-9, "gradient at the floor should vanish, got {d}");
        }
    }

    #[test]
    #[should_panic(expected = "cross_entropy: target 7 out of range")]
    fn cross_entropy_rejects_bad_target() {
        let t = T64::new();
        let logits = t.constant(&tensor64(vec![1, 3], vec![0.0; 3]));
        cross_entropy(logits, &[7]);
    }

    #[test]
    #[should_panic(expected = "matmul: inner dims differ")]
    fn matmul_rejects_shape_mismatch() {
        let t = T64::new();
        let a = t.constant(&tensor64(vec![2, 3], vec![0.0; 6]));
        let b = t.constant(&tensor64(vec![2, 3], vec![0.0; 6]));
        a.matmul(b);
    }

    #[test]
    fn stop_gradient_is_identity_with_zero_grad() {
        let x = tensor64(vec![3], vec![1.0, 2.0, 3.0]);
        let t = T64::new();
        let xi = t.input(&x, true);
        let s = xi.stop_gradient();
        assert_eq!(&*s.value(), x.data());
        let loss = s.sum();
        let g = t.backward(loss);
        assert!(g.get(xi).is_none(), "stop_gradient must contribute nothing");

        // d/dx sum(x * stop(x)) = stop(x) = x by the product rule.
        let t = T64::new();
        let xi = t.input(&x, true);
        let loss = xi.mul(xi.stop_gradient()).sum();
        let g = t.backward(loss);
        assert_close(g.get(xi).unwrap(), x.data(), 1e-12);
        // Matches finite differences with the frozen factor held at the
        // base point (perturbing only the live branch).
        let frozen = x.clone();
        let fd = fd_grad(&x, |p| {
            let t = T64::new();
            let xi = t.input(p, true);
            xi.mul(t.constant(&frozen)).sum().item()
        }, 1e-6);
        assert_close(g.get(xi).unwrap(), &fd, 1e-4);
    }

    #[test]
    fn scale_gradient_forward_bit_identical_backward_scaled() {
        let x = tensor64(vec![4], vec![0.1, -7.25, 3.5, 0.0]);
        let t = T64::new();
        let xi = t.input(&x, true);
        let s = xi.scale_gradient(0.1);
        assert!(Arc::ptr_eq(&s.value(), &xi.value()), "forward must share the buffer");
        let coeffs = tensor64(vec![4], vec![2.0, -1.0, 0.5, 3.0]);
        let loss = s.mul_const(&coeffs).sum();
        let g = t.backward(loss);
        let expect: Vec<f64> = coeffs.data().iter().map(|&c| 0.1 * c).collect();
        assert_eq!(g.get(xi).unwrap(), expect.as_slice(), "exactly 0.1 x upstream");

        // alpha = 1 leaves gradients unchanged; alpha = 0 behaves as stop.
        let t = T64::new();
        let xi = t.input(&x, true);
        let loss = xi.scale_gradient(1.0).sum();
        let g = t.backward(loss);
        assert_eq!(g.get(xi).unwrap(), vec![1.0; 4].as_slice());
        let t = T64::new();
        let xi = t.input(&x, true);
        let loss = xi.scale_gradient(0.0).sum();
        let g = t.backward(loss);
        assert_eq!(g.get(xi).unwrap(), vec![0.0; 4].as_slice());
    }

    #[test]
    fn straight_through_onehot_contract() {
        let t = T64::new();
        let p = t.input(&tensor64(vec![1, 3], vec![0.1, 0.7, 0.2]), true);
        let y = p.straight_through_onehot();
        assert_eq!(&*y.value(), &[0.0, 1.0, 0.0]);
        // Backward of a linear functional returns its coefficients.
        let coeffs = tensor64(vec![1, 3], vec![5.0, -2.0, 1.5]);
        let loss = y.mul_const(&coeffs).sum();
        let g = t.backward(loss);
        assert_eq!(g.get(p).unwrap(), coeffs.data());

        // One-hot input is a fixed point.
        let t = T64::new();
        let p = t.constant(&tensor64(vec![2, 3], vec![0., 0., 1., 1., 0., 0.]));
        let y = p.straight_through_onehot();
        assert_eq!(&*y.value(), p.value().as_slice());
    }

    #[test]
    fn gumbel_softmax_is_onehot_and_balanced() {
        let mut r = rng::stream(5, &[77]);
        let mut counts = [0usize; 2];
        for _ in 0..10_000 {
            let t = Tape::<f32>::new();
            let logits = t.constant(&Tensor::new(vec![1, 2], vec![0.0f32, 0.0]));
            let y = gumbel_softmax(logits, 1.0, &mut r);
            let v = y.value();
            let s: f32 = v.iter().sum();
            assert_eq!(s, 1.0, "rows must be exact one-hot");
            counts[argmax_row(&v)] += 1;
        }
        let f = counts[0] as f64 / 10_000.0;
        assert!((f - 0.5).abs() <= 0.02, "class balance off: {f}");
    }

    #[test]
    fn gumbel_strength_limit_matches_plain_straight_through() {
        let mut r = rng::stream(9, &[13]);
        let x = Tensor::uniform(vec![4, 6], -3.0, 3.0, &mut r);
        let t = T64::new();
        let a = t.constant(&x);
        let mut rg = rng::stream(1, &[1]);
        let tiny = gumbel_softmax(a, 1e-12, &mut rg);
        let plain = a.softmax().straight_through_onehot();
        assert_eq!(&*tiny.value(), &*plain.value());
    }

    #[test]
    fn backward_is_deterministic() {
        let mut r = rng::stream(2, &[3]);
        let a = Tensor::<f32>::uniform(vec![6, 6], -1.0, 1.0, &mut r);
        let b = Tensor::<f32>::uniform(vec![6, 6], -1.0, 1.0, &mut r);
        let run = || {
            let t = Tape::<f32>::new();
            let ai = t.input(&a, true);
            let bi = t.input(&b, true);
            let loss = ai.matmul(bi).gelu().softmax().mean();
            let g = t.backward(loss);
            (g.get(ai).unwrap().to_vec(), g.get(bi).unwrap().to_vec())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn bias_broadcast_and_scale_rows_gradients() {
        let mut r = rng::stream(31, &[8]);
        let x = Tensor::uniform(vec![3, 4], -1.0, 1.0, &mut r);
        let b = Tensor::uniform(vec![4], -1.0, 1.0, &mut r);
        let w = [0.5f64, -2.0, 1.0];
        let run = |xt: &Tensor<f64>, bt: &Tensor<f64>| {
            let t = T64::new();
            let xi = t.input(xt, true);
            let bi = t.input(bt, true);
            xi.add_bias(bi).scale_rows(&w).gelu().sum().item()
        };
        let t = T64::new();
        let xi = t.input(&x, true);
        let bi = t.input(&b, true);
        let loss = xi.add_bias(bi).scale_rows(&w).gelu().sum();
        let g = t.backward(loss);
        assert_close(g.get(xi).unwrap(), &fd_grad(&x, |p| run(p, &b), 1e-5), 1e-4);
        assert_close(g.get(bi).unwrap(), &fd_grad(&b, |p| run(&x, p), 1e-5), 1e-4);
    }
}
