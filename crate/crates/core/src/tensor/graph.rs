//! Operation graph and reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only arena of nodes; a [`Var`] is a handle to one
//! node. Every operation validates shapes, computes its value eagerly, and
//! records how it was produced. [`Var::grad`] walks the record in reverse,
//! building each local gradient *out of the same primitive operations*, so a
//! gradient produced with `create_graph = true` is itself differentiable.
//! Differentiating that gradient again replays the recorded backward pass —
//! this is how second-order terms (Hessian-vector products through an inner
//! optimization step) are obtained without any symbolic work.
//!
//! Single-threaded by design: a graph belongs to one training step.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::{bc_zip, broadcast_plan, BcPlan, Scalar, Tensor, TensorError};

/// Denominator floor for the sqrt backward rule: d/dx sqrt(x) = 1/(2 sqrt(x))
/// is clamped so coincident points (x = 0) yield a large finite value instead
/// of an infinity.
pub const SQRT_GRAD_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op<F> {
    /// Differentiable input (parameters).
    Leaf,
    /// Non-differentiable input; gradients stop here.
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// Multiply by a compile-time-known scalar.
    Scale(usize, F),
    AddScalar(usize, F),
    Matmul(usize, usize),
    Transpose(usize),
    Relu(usize),
    Square(usize),
    Sqrt(usize),
    Exp(usize),
    /// Elementwise max(x, c).
    ClampMin(usize, F),
    /// Sum of all elements, to a scalar.
    Sum(usize),
    /// Mean of all elements, to a scalar.
    Mean(usize),
    /// Sum over the leading axis: [B, ...] -> [...].
    SumAxis0(usize),
    /// Row sums of a matrix: [B, M] -> [B].
    SumRows(usize),
    /// Scale row i of a matrix by v[i]: ([B, M], [B]) -> [B, M].
    MulRows(usize, usize),
    /// Row-wise log(sum(exp(x))): [B, M] -> [B].
    LogSumExpRows(usize),
    /// Squared Euclidean distance between every pair of rows: [B, E] -> [B, B].
    PairwiseSqDist(usize),
    /// Stack two row blocks: ([A, D], [B, D]) -> [A + B, D].
    ConcatRows(usize, usize),
    /// Contiguous row slice [start, start + len).
    SliceRows { src: usize, start: usize, len: usize },
}

impl<F> Op<F> {
    fn parents(&self) -> (Option<usize>, Option<usize>) {
        use Op::*;
        match *self {
            Leaf | Constant => (None, None),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Matmul(a, b) | MulRows(a, b)
            | ConcatRows(a, b) => (Some(a), Some(b)),
            Scale(a, _) | AddScalar(a, _) | ClampMin(a, _) | Transpose(a) | Relu(a)
            | Square(a) | Sqrt(a) | Exp(a) | Sum(a) | Mean(a) | SumAxis0(a) | SumRows(a)
            | LogSumExpRows(a) | PairwiseSqDist(a) | SliceRows { src: a, .. } => (Some(a), None),
        }
    }
}

struct NodeData<F> {
    value: Tensor<F>,
    op: Op<F>,
}

type Nodes<F> = Rc<RefCell<Vec<NodeData<F>>>>;

/// Append-only arena of operation records. Cloning is shallow (same graph).
#[derive(Clone)]
pub struct Graph<F> {
    nodes: Nodes<F>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Rc::new(RefCell::new(Vec::new())) }
    }

    /// Differentiable input node.
    pub fn leaf(&self, value: Tensor<F>) -> Var<F> {
        self.push(value, Op::Leaf)
    }

    /// Non-differentiable input node; backward passes treat it as fixed.
    pub fn constant(&self, value: Tensor<F>) -> Var<F> {
        self.push(value, Op::Constant)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<F>, op: Op<F>) -> Var<F> {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        nodes.push(NodeData { value, op });
        Var { nodes: Rc::clone(&self.nodes), index }
    }
}

/// Handle to one graph node. Cheap to clone; all ops go through `&self`.
#[derive(Clone)]
pub struct Var<F> {
    nodes: Nodes<F>,
    index: usize,
}

impl<F: Scalar> fmt::Debug for Var<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var").field("index", &self.index).field("shape", &self.shape()).finish()
    }
}

impl<F: Scalar> Var<F> {
    fn graph(&self) -> Graph<F> {
        Graph { nodes: Rc::clone(&self.nodes) }
    }

    /// The graph this node lives in, for minting further inputs.
    pub fn graph_handle(&self) -> Graph<F> {
        self.graph()
    }

    fn same_graph(&self, other: &Var<F>) {
        assert!(
            Rc::ptr_eq(&self.nodes, &other.nodes),
            "vars belong to different graphs"
        );
    }

    fn val(&self) -> Tensor<F> {
        self.nodes.borrow()[self.index].value.clone()
    }

    /// Copy of this node's value.
    pub fn value(&self) -> Tensor<F> {
        self.val()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.nodes.borrow()[self.index].value.shape().to_vec()
    }

    /// Scalar value of a rank-0 node.
    pub fn item(&self) -> F {
        self.value().item()
    }

    /// Constant copy of this node's value: same number, no gradient history.
    pub fn detach(&self) -> Var<F> {
        self.graph().constant(self.val())
    }

    fn push(&self, value: Tensor<F>, op: Op<F>) -> Var<F> {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        nodes.push(NodeData { value, op });
        Var { nodes: Rc::clone(&self.nodes), index }
    }

    // ── elementwise binary ops (broadcast: equal / scalar / leading axis) ──

    pub fn add(&self, other: &Var<F>) -> Var<F> {
        self.same_graph(other);
        let v = bc_zip("add", &self.val(), &other.val(), |a, b| a + b);
        self.push(v, Op::Add(self.index, other.index))
    }

    pub fn sub(&self, other: &Var<F>) -> Var<F> {
        self.same_graph(other);
        let v = bc_zip("sub", &self.val(), &other.val(), |a, b| a - b);
        self.push(v, Op::Sub(self.index, other.index))
    }

    pub fn mul(&self, other: &Var<F>) -> Var<F> {
        self.same_graph(other);
        let v = bc_zip("mul", &self.val(), &other.val(), |a, b| a * b);
        self.push(v, Op::Mul(self.index, other.index))
    }

    pub fn div(&self, other: &Var<F>) -> Var<F> {
        self.same_graph(other);
        let v = bc_zip("div", &self.val(), &other.val(), |a, b| a / b);
        self.push(v, Op::Div(self.index, other.index))
    }

    // ── scalar-parameter ops ──

    pub fn scale(&self, c: f64) -> Var<F> {
        let c = F::from_f64(c);
        let v = self.val().map(|x| x * c);
        self.push(v, Op::Scale(self.index, c))
    }

    pub fn neg(&self) -> Var<F> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var<F> {
        let c = F::from_f64(c);
        let v = self.val().map(|x| x + c);
        self.push(v, Op::AddScalar(self.index, c))
    }

    pub fn clamp_min(&self, c: f64) -> Var<F> {
        let c = F::from_f64(c);
        let v = self.val().map(|x| if x > c { x } else { c });
        self.push(v, Op::ClampMin(self.index, c))
    }

    // ── elementwise unary ops ──

    pub fn relu(&self) -> Var<F> {
        let v = self.val().map(|x| if x > F::zero() { x } else { F::zero() });
        self.push(v, Op::Relu(self.index))
    }

    pub fn square(&self) -> Var<F> {
        let v = self.val().map(|x| x * x);
        self.push(v, Op::Square(self.index))
    }

    pub fn sqrt(&self) -> Var<F> {
        let v = self.val().map(|x| x.sqrt());
        self.push(v, Op::Sqrt(self.index))
    }

    pub fn exp(&self) -> Var<F> {
        let v = self.val().map(|x| x.exp());
        self.push(v, Op::Exp(self.index))
    }

    // ── linear algebra ──

    pub fn matmul(&self, other: &Var<F>) -> Var<F> {
        self.same_graph(other);
        let a = self.val();
        let b = other.val();
        assert!(
            a.rank() == 2 && b.rank() == 2 && a.shape()[1] == b.shape()[0],
            "matmul: incompatible shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        );
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = a.data()[i * k + p];
                let brow = &b.data()[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] = orow[j] + aip * brow[j];
                }
            }
        }
        self.push(Tensor::new(vec![m, n], out), Op::Matmul(self.index, other.index))
    }

    pub fn transpose(&self) -> Var<F> {
        let a = self.val();
        assert_eq!(a.rank(), 2, "transpose: rank-2 required, got {:?}", a.shape());
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a.data()[i * c + j];
            }
        }
        self.push(Tensor::new(vec![c, r], out), Op::Transpose(self.index))
    }

    // ── reductions ──

    pub fn sum(&self) -> Var<F> {
        let mut acc = F::zero();
        for &x in self.val().data() {
            acc = acc + x;
        }
        self.push(Tensor::scalar(acc), Op::Sum(self.index))
    }

    pub fn mean(&self) -> Var<F> {
        let v = self.val();
        let n = F::from_f64(v.numel() as f64);
        let mut acc = F::zero();
        for &x in v.data() {
            acc = acc + x;
        }
        self.push(Tensor::scalar(acc / n), Op::Mean(self.index))
    }

    /// Sum over the leading axis: `[B, ...] -> [...]`.
    pub fn sum_axis0(&self) -> Var<F> {
        let a = self.val();
        assert!(a.rank() >= 1, "sum_axis0: rank >= 1 required");
        let b = a.shape()[0];
        let inner: usize = a.shape()[1..].iter().product();
        let mut out = vec![F::zero(); inner];
        for i in 0..b {
            for j in 0..inner {
                out[j] = out[j] + a.data()[i * inner + j];
            }
        }
        self.push(Tensor::new(a.shape()[1..].to_vec(), out), Op::SumAxis0(self.index))
    }

    /// Mean over the leading axis (composed; not a primitive).
    pub fn mean_axis0(&self) -> Var<F> {
        let b = self.shape()[0] as f64;
        self.sum_axis0().scale(1.0 / b)
    }

    /// Row sums: `[B, M] -> [B]`.
    pub fn sum_rows(&self) -> Var<F> {
        let a = self.val();
        assert_eq!(a.rank(), 2, "sum_rows: rank-2 required, got {:?}", a.shape());
        let (b, m) = (a.shape()[0], a.shape()[1]);
        let mut out = vec![F::zero(); b];
        for i in 0..b {
            let mut acc = F::zero();
            for j in 0..m {
                acc = acc + a.data()[i * m + j];
            }
            out[i] = acc;
        }
        self.push(Tensor::new(vec![b], out), Op::SumRows(self.index))
    }

    /// Scale row `i` by `v[i]`: `([B, M], [B]) -> [B, M]`.
    pub fn mul_rows(&self, v: &Var<F>) -> Var<F> {
        self.same_graph(v);
        let a = self.val();
        let s = v.val();
        assert!(
            a.rank() == 2 && s.rank() == 1 && a.shape()[0] == s.shape()[0],
            "mul_rows: incompatible shapes {:?} and {:?}",
            a.shape(),
            s.shape()
        );
        let (b, m) = (a.shape()[0], a.shape()[1]);
        let mut out = vec![F::zero(); b * m];
        for i in 0..b {
            let si = s.data()[i];
            for j in 0..m {
                out[i * m + j] = a.data()[i * m + j] * si;
            }
        }
        self.push(Tensor::new(vec![b, m], out), Op::MulRows(self.index, v.index))
    }

    /// Row-wise log(sum(exp(x))), max-shifted for stability: `[B, M] -> [B]`.
    pub fn logsumexp_rows(&self) -> Var<F> {
        let a = self.val();
        assert_eq!(a.rank(), 2, "logsumexp_rows: rank-2 required, got {:?}", a.shape());
        let (b, m) = (a.shape()[0], a.shape()[1]);
        assert!(m > 0, "logsumexp_rows: empty rows");
        let mut out = vec![F::zero(); b];
        for i in 0..b {
            let row = &a.data()[i * m..(i + 1) * m];
            let mut hi = row[0];
            for &x in &row[1..] {
                if x > hi {
                    hi = x;
                }
            }
            let mut acc = F::zero();
            for &x in row {
                acc = acc + (x - hi).exp();
            }
            out[i] = hi + acc.ln();
        }
        self.push(Tensor::new(vec![b], out), Op::LogSumExpRows(self.index))
    }

    /// Squared Euclidean distance between every pair of rows:
    /// `[B, E] -> [B, B]`. Computed pair-by-pair as a direct sum of squared
    /// coordinate differences (no norm decomposition), so the result is
    /// exactly symmetric with an exactly zero diagonal.
    pub fn pairwise_sq_dist(&self) -> Var<F> {
        let a = self.val();
        assert_eq!(a.rank(), 2, "pairwise_sq_dist: rank-2 required, got {:?}", a.shape());
        let (b, e) = (a.shape()[0], a.shape()[1]);
        let mut out = vec![F::zero(); b * b];
        for i in 0..b {
            for j in (i + 1)..b {
                let ri = &a.data()[i * e..(i + 1) * e];
                let rj = &a.data()[j * e..(j + 1) * e];
                let mut acc = F::zero();
                for p in 0..e {
                    let d = ri[p] - rj[p];
                    acc = acc + d * d;
                }
                out[i * b + j] = acc;
                out[j * b + i] = acc;
            }
        }
        self.push(Tensor::new(vec![b, b], out), Op::PairwiseSqDist(self.index))
    }

    // ── shape ops ──

    /// Stack rows of `self` above rows of `other` (trailing dims must match).
    pub fn concat_rows(&self, other: &Var<F>) -> Var<F> {
        self.same_graph(other);
        let a = self.val();
        let b = other.val();
        assert!(
            a.rank() >= 1 && a.rank() == b.rank() && a.shape()[1..] == b.shape()[1..],
            "concat_rows: incompatible shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        );
        let mut shape = a.shape().to_vec();
        shape[0] += b.shape()[0];
        let mut data = Vec::with_capacity(a.numel() + b.numel());
        data.extend_from_slice(a.data());
        data.extend_from_slice(b.data());
        self.push(Tensor::new(shape, data), Op::ConcatRows(self.index, other.index))
    }

    /// Contiguous row slice `[start, start + len)`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Var<F> {
        let a = self.val();
        assert!(a.rank() >= 1, "slice_rows: rank >= 1 required");
        let rows = a.shape()[0];
        assert!(
            start + len <= rows,
            "slice_rows: [{start}, {}) out of range for {rows} rows",
            start + len
        );
        let inner: usize = a.shape()[1..].iter().product();
        let mut shape = a.shape().to_vec();
        shape[0] = len;
        let data = a.data()[start * inner..(start + len) * inner].to_vec();
        self.push(Tensor::new(shape, data), Op::SliceRows { src: self.index, start, len })
    }

    // ── differentiation ──

    /// Reverse-mode gradient of this scalar node with respect to `wrt`.
    ///
    /// The backward pass is recorded with the same primitive ops, so with
    /// `create_graph = true` the returned nodes are differentiable and a
    /// second call to `grad` on anything computed from them yields exact
    /// second-order derivatives. With `create_graph = false` the results are
    /// detached constants (values only).
    ///
    /// Errors: non-scalar output, or a `wrt` node the output does not depend
    /// on.
    pub fn grad(&self, wrt: &[&Var<F>], create_graph: bool) -> Result<Vec<Var<F>>, TensorError> {
        for w in wrt {
            self.same_graph(w);
        }
        {
            let nodes = self.nodes.borrow();
            let out_shape = nodes[self.index].value.shape();
            if !out_shape.is_empty() {
                return Err(TensorError::NonScalarOutput { shape: out_shape.to_vec() });
            }
        }
        let out_idx = self.index;

        // Ancestors of the output, found through parent links.
        let mut reachable = vec![false; out_idx + 1];
        let mut stack = vec![out_idx];
        while let Some(i) = stack.pop() {
            if reachable[i] {
                continue;
            }
            reachable[i] = true;
            let (p, q) = self.nodes.borrow()[i].op.parents();
            if let Some(p) = p {
                stack.push(p);
            }
            if let Some(q) = q {
                stack.push(q);
            }
        }
        for w in wrt {
            if w.index > out_idx || !reachable[w.index] {
                return Err(TensorError::UnreachableWrt { index: w.index });
            }
        }

        // Adjoints are graph nodes themselves; indices parallel the arena.
        let mut adjoint: Vec<Option<Var<F>>> = vec![None; out_idx + 1];
        adjoint[out_idx] = Some(self.graph().constant(Tensor::scalar(F::one())));

        for i in (0..=out_idx).rev() {
            let Some(g) = adjoint[i].clone() else { continue };
            let op = self.nodes.borrow()[i].op.clone();
            let node_var = Var { nodes: Rc::clone(&self.nodes), index: i };
            match op {
                Op::Leaf | Op::Constant => {}
                Op::Add(a, b) => {
                    self.accth(&mut adjoint, a, self.reduce_to(&g, a));
                    self.accth(&mut adjoint, b, self.reduce_to(&g, b));
                }
                Op::Sub(a, b) => {
                    self.accth(&mut adjoint, a, self.reduce_to(&g, a));
                    self.accth(&mut adjoint, b, self.reduce_to(&g, b).neg());
                }
                Op::Mul(a, b) => {
                    let av = self.handle(a);
                    let bv = self.handle(b);
                    self.accth(&mut adjoint, a, self.reduce_to(&g.mul(&bv), a));
                    self.accth(&mut adjoint, b, self.reduce_to(&g.mul(&av), b));
                }
                Op::Div(a, b) => {
                    let bv = self.handle(b);
                    // d/da (a/b) = 1/b; d/db (a/b) = -(a/b)/b.
                    self.accth(&mut adjoint, a, self.reduce_to(&g.div(&bv), a));
                    let db = g.mul(&node_var).div(&bv).neg();
                    self.accth(&mut adjoint, b, self.reduce_to(&db, b));
                }
                Op::Scale(a, c) => {
                    self.accth(&mut adjoint, a, g.scale(c.into_f64()));
                }
                Op::AddScalar(a, _) => {
                    self.accth(&mut adjoint, a, g.clone());
                }
                Op::Matmul(a, b) => {
                    let av = self.handle(a);
                    let bv = self.handle(b);
                    self.accth(&mut adjoint, a, g.matmul(&bv.transpose()));
                    self.accth(&mut adjoint, b, av.transpose().matmul(&g));
                }
                Op::Transpose(a) => {
                    self.accth(&mut adjoint, a, g.transpose());
                }
                Op::Relu(a) => {
                    // 0/1 mask is locally constant; its derivative is zero
                    // almost everywhere, so a constant is exact for higher
                    // orders too. Subgradient at 0 is taken as 0.
                    let mask = self.value_of(a).map(|x| if x > F::zero() { F::one() } else { F::zero() });
                    let mask = self.graph().constant(mask);
                    self.accth(&mut adjoint, a, g.mul(&mask));
                }
                Op::Square(a) => {
                    let av = self.handle(a);
                    self.accth(&mut adjoint, a, g.mul(&av).scale(2.0));
                }
                Op::Sqrt(a) => {
                    // 1/(2 sqrt(x)); denominator clamped away from zero.
                    let denom = node_var.scale(2.0).clamp_min(SQRT_GRAD_EPS);
                    self.accth(&mut adjoint, a, g.div(&denom));
                }
                Op::Exp(a) => {
                    self.accth(&mut adjoint, a, g.mul(&node_var));
                }
                Op::ClampMin(a, c) => {
                    let mask = self
                        .value_of(a)
                        .map(|x| if x >= c { F::one() } else { F::zero() });
                    let mask = self.graph().constant(mask);
                    self.accth(&mut adjoint, a, g.mul(&mask));
                }
                Op::Sum(a) => {
                    let ones = self.graph().constant(Tensor::ones(&self.shape_of(a)));
                    self.accth(&mut adjoint, a, ones.mul(&g));
                }
                Op::Mean(a) => {
                    let sh = self.shape_of(a);
                    let n: usize = sh.iter().product();
                    let ones = self.graph().constant(Tensor::ones(&sh));
                    self.accth(&mut adjoint, a, ones.mul(&g).scale(1.0 / n as f64));
                }
                Op::SumAxis0(a) => {
                    // Broadcast the reduced gradient back over the leading axis.
                    let ones = self.graph().constant(Tensor::ones(&self.shape_of(a)));
                    self.accth(&mut adjoint, a, ones.mul(&g));
                }
                Op::SumRows(a) => {
                    let ones = self.graph().constant(Tensor::ones(&self.shape_of(a)));
                    self.accth(&mut adjoint, a, ones.mul_rows(&g));
                }
                Op::MulRows(a, v) => {
                    let av = self.handle(a);
                    let vv = self.handle(v);
                    self.accth(&mut adjoint, a, g.mul_rows(&vv));
                    self.accth(&mut adjoint, v, g.mul(&av).sum_rows());
                }
                Op::LogSumExpRows(a) => {
                    // d lse / dx = softmax(x) = exp(x - lse(x)).
                    let av = self.handle(a);
                    let ones = self.graph().constant(Tensor::ones(&self.shape_of(a)));
                    let softmax = av.sub(&ones.mul_rows(&node_var)).exp();
                    self.accth(&mut adjoint, a, softmax.mul_rows(&g));
                }
                Op::PairwiseSqDist(a) => {
                    // With S = g + g^T: dX = 2 (rowsum(S) ⊙_rows X - S X).
                    let av = self.handle(a);
                    let s = g.add(&g.transpose());
                    let term1 = av.mul_rows(&s.sum_rows());
                    let term2 = s.matmul(&av);
                    self.accth(&mut adjoint, a, term1.sub(&term2).scale(2.0));
                }
                Op::ConcatRows(a, b) => {
                    let ra = self.shape_of(a)[0];
                    let rb = self.shape_of(b)[0];
                    self.accth(&mut adjoint, a, g.slice_rows(0, ra));
                    self.accth(&mut adjoint, b, g.slice_rows(ra, rb));
                }
                Op::SliceRows { src, start, len } => {
                    let sh = self.shape_of(src);
                    let rows = sh[0];
                    let mut pad = g.clone();
                    if start > 0 {
                        let mut zsh = sh.clone();
                        zsh[0] = start;
                        let z = self.graph().constant(Tensor::zeros(&zsh));
                        pad = z.concat_rows(&pad);
                    }
                    if start + len < rows {
                        let mut zsh = sh.clone();
                        zsh[0] = rows - start - len;
                        let z = self.graph().constant(Tensor::zeros(&zsh));
                        pad = pad.concat_rows(&z);
                    }
                    self.accth(&mut adjoint, src, pad);
                }
            }
        }

        let mut out = Vec::with_capacity(wrt.len());
        for w in wrt {
            let adj = adjoint[w.index]
                .clone()
                .expect("reachable wrt node must have an adjoint");
            out.push(if create_graph { adj } else { adj.detach() });
        }
        Ok(out)
    }

    /// Gradient values only (no graph retained on the results).
    pub fn grad_values(&self, wrt: &[&Var<F>]) -> Result<Vec<Tensor<F>>, TensorError> {
        Ok(self.grad(wrt, false)?.iter().map(|v| v.value()).collect())
    }

    fn handle(&self, index: usize) -> Var<F> {
        Var { nodes: Rc::clone(&self.nodes), index }
    }

    fn value_of(&self, index: usize) -> Tensor<F> {
        self.nodes.borrow()[index].value.clone()
    }

    fn shape_of(&self, index: usize) -> Vec<usize> {
        self.nodes.borrow()[index].value.shape().to_vec()
    }

    /// Add `contrib` into the running adjoint of node `target`.
    fn accth(&self, adjoint: &mut [Option<Var<F>>], target: usize, contrib: Var<F>) {
        adjoint[target] = Some(match &adjoint[target] {
            None => contrib,
            Some(existing) => existing.add(&contrib),
        });
    }

    /// Reduce a broadcast-shaped gradient back to the shape of node `target`.
    fn reduce_to(&self, g: &Var<F>, target: usize) -> Var<F> {
        let tsh = self.shape_of(target);
        let gsh = g.shape();
        if gsh == tsh {
            return g.clone();
        }
        match broadcast_plan(&gsh, &tsh) {
            Some((_, BcPlan::ScalarRhs)) => g.sum(),
            Some((_, BcPlan::LeadingRhs)) => g.sum_axis0(),
            _ => panic!(
                "internal: cannot reduce gradient of shape {gsh:?} to {tsh:?}"
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g64() -> Graph<f64> {
        Graph::new()
    }

    #[test]
    fn add_mul_values() {
        let g = g64();
        let a = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]));
        let b = g.leaf(Tensor::new(vec![2], vec![3.0, 4.0]));
        let c = a.add(&b).mul(&a);
        assert_eq!(c.value().data(), &[4.0, 12.0]);
    }

    #[test]
    fn matmul_value_and_grad() {
        let g = g64();
        let a = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = g.leaf(Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]));
        let c = a.matmul(&b);
        assert_eq!(c.value().data(), &[19.0, 22.0, 43.0, 50.0]);
        let s = c.sum();
        let grads = s.grad_values(&[&a, &b]).unwrap();
        // d sum(AB) / dA = 1 B^T (row sums of B), each column constant.
        assert_eq!(grads[0].data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(grads[1].data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn simple_chain_gradient() {
        // f = sum((2x + 1)^2), df/dx = 4(2x + 1).
        let g = g64();
        let x = g.leaf(Tensor::new(vec![3], vec![0.5, -1.0, 2.0]));
        let f = x.scale(2.0).add_scalar(1.0).square().sum();
        let gr = f.grad_values(&[&x]).unwrap();
        assert_eq!(gr[0].data(), &[8.0, -4.0, 20.0]);
    }

    #[test]
    fn pairwise_sq_dist_example() {
        let g = g64();
        let x = g.leaf(Tensor::new(vec![2, 2], vec![0.0, 0.0, 3.0, 4.0]));
        let d = x.pairwise_sq_dist();
        assert_eq!(d.value().data(), &[0.0, 25.0, 25.0, 0.0]);
        let root = d.sqrt();
        assert_eq!(root.value().get2(0, 1), 5.0);
    }

    #[test]
    fn logsumexp_matches_naive() {
        let g = g64();
        let x = g.leaf(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]));
        let l = x.logsumexp_rows().value();
        for i in 0..2 {
            let row: Vec<f64> = (0..3).map(|j| x.value().get2(i, j)).collect();
            let naive = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            assert!((l.data()[i] - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn logsumexp_is_shift_stable() {
        let g = g64();
        let x = g.leaf(Tensor::new(vec![1, 2], vec![1000.0, 1001.0]));
        let l = x.logsumexp_rows().value();
        assert!((l.data()[0] - (1001.0 + (1.0 + (-1.0f64).exp()).ln())).abs() < 1e-9);
    }

    #[test]
    fn second_order_square() {
        // f = sum(x^2); g = 2x; h = d(sum(g * v))/dx = 2v.
        let g = g64();
        let x = g.leaf(Tensor::new(vec![2], vec![3.0, -1.0]));
        let f = x.square().sum();
        let gx = &f.grad(&[&x], true).unwrap()[0];
        let v = g.constant(Tensor::new(vec![2], vec![10.0, 20.0]));
        let contracted = gx.mul(&v).sum();
        let h = contracted.grad_values(&[&x]).unwrap();
        assert_eq!(h[0].data(), &[20.0, 40.0]);
    }

    #[test]
    fn grad_rejects_non_scalar() {
        let g = g64();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]));
        let y = x.square();
        assert!(matches!(
            y.grad(&[&x], false),
            Err(TensorError::NonScalarOutput { .. })
        ));
    }

    #[test]
    fn grad_rejects_unreachable() {
        let g = g64();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]));
        let z = g.leaf(Tensor::new(vec![2], vec![5.0, 6.0]));
        let f = x.sum();
        assert!(matches!(
            f.grad(&[&z], false),
            Err(TensorError::UnreachableWrt { .. })
        ));
    }

    #[test]
    fn constants_block_gradients() {
        let g = g64();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]));
        let frozen = x.detach();
        let f = x.mul(&frozen).sum(); // behaves like x * c, not x^2
        let gr = f.grad_values(&[&x]).unwrap();
        assert_eq!(gr[0].data(), &[1.0, 2.0]);
    }

    #[test]
    fn sqrt_grad_clamped_at_zero() {
        let g = g64();
        let x = g.leaf(Tensor::new(vec![2], vec![0.0, 4.0]));
        let f = x.sqrt().sum();
        let gr = f.grad_values(&[&x]).unwrap();
        assert_eq!(gr[0].data()[0], 1.0 / SQRT_GRAD_EPS);
        assert_eq!(gr[0].data()[1], 0.25);
    }

    #[test]
    fn concat_slice_roundtrip_grad() {
        let g = g64();
        let a = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = g.leaf(Tensor::new(vec![1, 2], vec![5.0, 6.0]));
        let c = a.concat_rows(&b);
        assert_eq!(c.shape(), vec![3, 2]);
        // Weight the middle slice only; a's second row and b get zero grad.
        let f = c.slice_rows(1, 1).sum();
        let gr = f.grad_values(&[&a, &b]).unwrap();
        assert_eq!(gr[0].data(), &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(gr[1].data(), &[0.0, 0.0]);
    }

    #[test]
    fn mul_rows_and_sum_rows_grads() {
        let g = g64();
        let a = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let v = g.leaf(Tensor::new(vec![2], vec![10.0, 100.0]));
        let f = a.mul_rows(&v).sum();
        let gr = f.grad_values(&[&a, &v]).unwrap();
        assert_eq!(gr[0].data(), &[10.0, 10.0, 100.0, 100.0]);
        assert_eq!(gr[1].data(), &[3.0, 7.0]);
    }

    #[test]
    fn broadcast_add_grad_reduces() {
        let g = g64();
        let a = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = g.leaf(Tensor::new(vec![2], vec![10.0, 20.0]));
        let f = a.add(&b).sum();
        let gr = f.grad_values(&[&a, &b]).unwrap();
        assert_eq!(gr[0].data(), &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(gr[1].data(), &[2.0, 2.0]); // summed over the leading axis
    }

    #[test]
    fn grad_wrt_output_is_one() {
        let g = g64();
        let x = g.leaf(Tensor::scalar(2.0));
        let f = x.square().sum();
        let gr = f.grad_values(&[&f]).unwrap();
        assert_eq!(gr[0].item(), 1.0);
    }
}
