//! Reverse-mode automatic differentiation over `ndarray` storage.
//!
//! Every value is a [`Tensor`]: an immutable f64 array plus an optional
//! backward rule linking it to its parent tensors. Calling
//! [`Tensor::backward`] on a scalar walks the graph in reverse topological
//! order and accumulates gradients into each node, and finally into any
//! bound [`Parameter`]s.
//!
//! Double precision is used throughout so that analytic gradients can be
//! validated against central finite differences at tight tolerances.

mod conv;
pub mod check;
pub mod nn;
pub mod optim;
pub mod params;

pub use conv::{conv1d, conv2d, conv3d};
pub use params::{ParamStore, Parameter};

use ndarray::{ArrayD, Axis, IxDyn};
use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

trait Backward {
    /// Accumulates gradients into `parents` given the output value and the
    /// gradient flowing into the output.
    fn backward(&self, parents: &[Tensor], out: &ArrayD<f64>, grad: &ArrayD<f64>);
}

struct Node {
    id: u64,
    data: ArrayD<f64>,
    grad: RefCell<Option<ArrayD<f64>>>,
    parents: Vec<Tensor>,
    op: Option<Box<dyn Backward>>,
    requires_grad: bool,
    param: Option<Rc<Parameter>>,
}

impl Drop for Node {
    // Iterative teardown: long op chains (autoregressive rollouts build tens
    // of thousands of nodes) must not recurse through Rc drops.
    fn drop(&mut self) {
        let mut work = std::mem::take(&mut self.parents);
        while let Some(t) = work.pop() {
            if let Ok(mut n) = Rc::try_unwrap(t.0) {
                work.append(&mut n.parents);
            }
        }
    }
}

/// A node in the autodiff graph. Cloning is cheap (shared reference).
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn new(
        data: ArrayD<f64>,
        parents: Vec<Tensor>,
        op: Option<Box<dyn Backward>>,
        requires_grad: bool,
    ) -> Tensor {
        Tensor(Rc::new(Node {
            id: fresh_id(),
            data,
            grad: RefCell::new(None),
            parents,
            op,
            requires_grad,
            param: None,
        }))
    }

    fn from_op(data: ArrayD<f64>, parents: Vec<Tensor>, op: impl Backward + 'static) -> Tensor {
        let rg = parents.iter().any(|p| p.requires_grad());
        if rg {
            Tensor::new(data, parents, Some(Box::new(op)), true)
        } else {
            Tensor::new(data, Vec::new(), None, false)
        }
    }

    /// A constant: gradients never flow into it.
    pub fn constant<D: ndarray::Dimension>(data: ndarray::Array<f64, D>) -> Tensor {
        Tensor::new(data.into_dyn(), Vec::new(), None, false)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(ndarray::arr0(v))
    }

    /// A differentiable leaf (used for inputs under gradient test).
    pub fn leaf<D: ndarray::Dimension>(data: ndarray::Array<D::Pattern, D>) -> Tensor
    where
        ndarray::Array<D::Pattern, D>: Into<ArrayD<f64>>,
    {
        unreachable!("see leaf_dyn")
    }

    pub fn leaf_dyn(data: ArrayD<f64>) -> Tensor {
        Tensor::new(data, Vec::new(), None, true)
    }

    /// A leaf bound to a parameter: after `backward`, the gradient is
    /// accumulated into the parameter's grad buffer when it is trainable.
    pub fn from_param(p: &Rc<Parameter>) -> Tensor {
        let trainable = p.trainable();
        Tensor(Rc::new(Node {
            id: fresh_id(),
            data: p.value().clone(),
            grad: RefCell::new(None),
            parents: Vec::new(),
            op: None,
            requires_grad: trainable,
            param: Some(Rc::clone(p)),
        }))
    }

    pub fn data(&self) -> &ArrayD<f64> {
        &self.0.data
    }

    pub fn shape(&self) -> &[usize] {
        self.0.data.shape()
    }

    pub fn len(&self) -> usize {
        self.0.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert_eq!(self.len(), 1, "scalar_value on non-scalar tensor");
        *self.0.data.iter().next().expect("empty tensor")
    }

    /// Gradient accumulated on this node by the last `backward` call.
    pub fn grad(&self) -> Option<ArrayD<f64>> {
        self.0.grad.borrow().clone()
    }

    /// Cuts the graph: same values, no history.
    pub fn detach(&self) -> Tensor {
        Tensor::new(self.0.data.clone(), Vec::new(), None, false)
    }

    fn accumulate(&self, g: ArrayD<f64>) {
        if !self.0.requires_grad {
            return;
        }
        debug_assert_eq!(
            g.shape(),
            self.shape(),
            "gradient shape mismatch during accumulation"
        );
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => *acc += &g,
            None => *slot = Some(g),
        }
    }

    /// Runs reverse-mode accumulation from this scalar node.
    pub fn backward(&self) {
        assert_eq!(self.len(), 1, "backward requires a scalar loss");
        let order = topo_order(self);
        self.accumulate(ArrayD::ones(IxDyn(self.shape())));
        for node in order.iter().rev() {
            let grad = node.0.grad.borrow().clone();
            let Some(grad) = grad else { continue };
            if let Some(op) = &node.0.op {
                op.backward(&node.0.parents, &node.0.data, &grad);
            }
            if let Some(p) = &node.0.param {
                if p.trainable() {
                    p.accumulate_grad(&grad);
                }
            }
        }
        // Free intermediate gradients so repeated backward calls start clean.
        for node in order {
            if node.0.op.is_some() {
                node.0.grad.replace(None);
            }
        }
    }
}

/// Iterative DFS post-order over the graph rooted at `root`, restricted to
/// nodes that require gradients.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor, usize)> = Vec::new();
    if root.0.requires_grad {
        visited.insert(root.0.id);
        stack.push((root.clone(), 0));
    }
    while let Some((t, cursor)) = stack.pop() {
        if cursor < t.0.parents.len() {
            let p = t.0.parents[cursor].clone();
            stack.push((t, cursor + 1));
            if p.0.requires_grad && visited.insert(p.0.id) {
                stack.push((p, 0));
            }
        } else {
            order.push(t);
        }
    }
    order
}

// ---------------------------------------------------------------------------
// Broadcasting helpers
// ---------------------------------------------------------------------------

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast shapes {:?} vs {:?}",
            a,
            b
        );
        out[i] = da.max(db);
    }
    out
}

/// Sums `grad` down to `shape` by collapsing broadcast axes.
fn reduce_grad(grad: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let mut g = grad.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for ax in 0..shape.len() {
        if shape[ax] == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

fn broadcast_apply(
    a: &ArrayD<f64>,
    b: &ArrayD<f64>,
    f: impl Fn(f64, f64) -> f64,
) -> ArrayD<f64> {
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).expect("broadcast lhs");
    let bv = b.broadcast(IxDyn(&shape)).expect("broadcast rhs");
    let mut out = ArrayD::zeros(IxDyn(&shape));
    ndarray::Zip::from(&mut out).and(&av).and(&bv).for_each(|o, &x, &y| *o = f(x, y));
    out
}

// ---------------------------------------------------------------------------
// Elementwise binary ops
// ---------------------------------------------------------------------------

type BinaryGrad = fn(a: &ArrayD<f64>, b: &ArrayD<f64>, g: &ArrayD<f64>) -> (ArrayD<f64>, ArrayD<f64>);

struct BinaryOp {
    df: BinaryGrad,
}

impl Backward for BinaryOp {
    fn backward(&self, parents: &[Tensor], _out: &ArrayD<f64>, grad: &ArrayD<f64>) {
        let (a, b) = (&parents[0], &parents[1]);
        let (ga, gb) = (self.df)(a.data(), b.data(), grad);
        a.accumulate(reduce_grad(&ga, a.shape()));
        b.accumulate(reduce_grad(&gb, b.shape()));
    }
}

fn binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64, df: BinaryGrad) -> Tensor {
    let data = broadcast_apply(a.data(), b.data(), f);
    Tensor::from_op(data, vec![a.clone(), b.clone()], BinaryOp { df })
}

impl Tensor {
    pub fn add(&self, rhs: &Tensor) -> Tensor {
        binary(self, rhs, |x, y| x + y, |_a, _b, g| (g.clone(), g.clone()))
    }

    pub fn sub(&self, rhs: &Tensor) -> Tensor {
        binary(self, rhs, |x, y| x - y, |_a, _b, g| (g.clone(), -g.clone()))
    }

    pub fn mul(&self, rhs: &Tensor) -> Tensor {
        binary(
            self,
            rhs,
            |x, y| x * y,
            |a, b, g| {
                (broadcast_apply(g, b, |g, y| g * y), broadcast_apply(g, a, |g, x| g * x))
            },
        )
    }

    pub fn div(&self, rhs: &Tensor) -> Tensor {
        binary(
            self,
            rhs,
            |x, y| x / y,
            |a, b, g| {
                let ga = broadcast_apply(g, b, |g, y| g / y);
                let gb_num = broadcast_apply(a, b, |x, y| -x / (y * y));
                (ga, broadcast_apply(g, &gb_num, |g, d| g * d))
            },
        )
    }
}

// ---------------------------------------------------------------------------
// Elementwise unary ops
// ---------------------------------------------------------------------------

type UnaryGrad = fn(x: &ArrayD<f64>, y: &ArrayD<f64>, g: &ArrayD<f64>) -> ArrayD<f64>;

struct UnaryOp {
    df: UnaryGrad,
}

impl Backward for UnaryOp {
    fn backward(&self, parents: &[Tensor], out: &ArrayD<f64>, grad: &ArrayD<f64>) {
        parents[0].accumulate((self.df)(parents[0].data(), out, grad));
    }
}

fn unary(x: &Tensor, f: impl Fn(f64) -> f64, df: UnaryGrad) -> Tensor {
    let data = x.data().mapv(f);
    Tensor::from_op(data, vec![x.clone()], UnaryOp { df })
}

impl Tensor {
    pub fn neg(&self) -> Tensor {
        unary(self, |v| -v, |_x, _y, g| -g.clone())
    }

    pub fn exp(&self) -> Tensor {
        unary(self, f64::exp, |_x, y, g| g * y)
    }

    pub fn ln(&self) -> Tensor {
        unary(self, f64::ln, |x, _y, g| {
            ndarray::Zip::from(g).and(x).map_collect(|&g, &x| g / x)
        })
    }

    pub fn sqrt(&self) -> Tensor {
        unary(self, f64::sqrt, |_x, y, g| {
            ndarray::Zip::from(g).and(y).map_collect(|&g, &y| g * 0.5 / y.max(1e-300))
        })
    }

    pub fn tanh(&self) -> Tensor {
        unary(self, f64::tanh, |_x, y, g| {
            ndarray::Zip::from(g).and(y).map_collect(|&g, &y| g * (1.0 - y * y))
        })
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(
            self,
            |v| 1.0 / (1.0 + (-v).exp()),
            |_x, y, g| ndarray::Zip::from(g).and(y).map_collect(|&g, &y| g * y * (1.0 - y)),
        )
    }

    pub fn relu(&self) -> Tensor {
        unary(self, |v| v.max(0.0), |x, _y, g| {
            ndarray::Zip::from(g).and(x).map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 })
        })
    }

    pub fn square(&self) -> Tensor {
        unary(self, |v| v * v, |x, _y, g| {
            ndarray::Zip::from(g).and(x).map_collect(|&g, &x| 2.0 * x * g)
        })
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.mul(&Tensor::scalar(c))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.add(&Tensor::scalar(c))
    }
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

struct SumAllOp;

impl Backward for SumAllOp {
    fn backward(&self, parents: &[Tensor], _out: &ArrayD<f64>, grad: &ArrayD<f64>) {
        let g = grad.iter().next().copied().unwrap_or(0.0);
        let x = &parents[0];
        x.accumulate(ArrayD::from_elem(IxDyn(x.shape()), g));
    }
}

struct SumAxisOp;

impl Backward for SumAxisOp {
    fn backward(&self, parents: &[Tensor], _out: &ArrayD<f64>, grad: &ArrayD<f64>) {
        // grad keeps the reduced axis at length 1; broadcast restores it.
        let x = &parents[0];
        let g = grad
            .broadcast(IxDyn(x.shape()))
            .expect("sum_axis grad broadcast")
            .to_owned();
        x.accumulate(g);
    }
}

impl Tensor {
    pub fn sum(&self) -> Tensor {
        let data = ndarray::arr0(self.data().sum()).into_dyn();
        Tensor::from_op(data, vec![self.clone()], SumAllOp)
    }

    pub fn mean(&self) -> Tensor {
        let n = self.len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums along `axis`, keeping it as a length-1 dimension.
    pub fn sum_axis_keep(&self, axis: usize) -> Tensor {
        let data = self.data().sum_axis(Axis(axis)).insert_axis(Axis(axis));
        Tensor::from_op(data, vec![self.clone()], SumAxisOp)
    }

    pub fn mean_axis_keep(&self, axis: usize) -> Tensor {
        let n = self.shape()[axis] as f64;
        self.sum_axis_keep(axis).scale(1.0 / n)
    }

    /// Numerically stable softmax along `axis` (max handled as a constant).
    pub fn softmax(&self, axis: usize) -> Tensor {
        let maxes = self
            .data()
            .map_axis(Axis(axis), |lane| lane.fold(f64::NEG_INFINITY, |a, &b| a.max(b)))
            .insert_axis(Axis(axis));
        let shifted = self.sub(&Tensor::constant(maxes));
        let e = shifted.exp();
        let denom = e.sum_axis_keep(axis);
        e.div(&denom)
    }
}

// ---------------------------------------------------------------------------
// Matrix multiply (2-D)
// ---------------------------------------------------------------------------

struct MatmulOp;

fn as2(x: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    x.view().into_dimensionality::<ndarray::Ix2>().expect("matmul expects 2-D")
}

impl Backward for MatmulOp {
    fn backward(&self, parents: &[Tensor], _out: &ArrayD<f64>, grad: &ArrayD<f64>) {
        let g = as2(grad);
        let a = as2(parents[0].data());
        let b = as2(parents[1].data());
        parents[0].accumulate(g.dot(&b.t()).into_dyn());
        parents[1].accumulate(a.t().dot(&g).into_dyn());
    }
}

impl Tensor {
    /// 2-D matrix product `[n,m] x [m,k] -> [n,k]`.
    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        let a = as2(self.data());
        let b = as2(rhs.data());
        assert_eq!(a.ncols(), b.nrows(), "matmul inner dimension mismatch");
        let data = a.dot(&b).into_dyn();
        Tensor::from_op(data, vec![self.clone(), rhs.clone()], MatmulOp)
    }
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

struct ReshapeOp;

impl Backward for ReshapeOp {
    fn backward(&self, parents: &[Tensor], _out: &ArrayD<f64>, grad: &ArrayD<f64>) {
        let x = &parents[0];
        let g = grad
            .to_owned()
            .into_shape_with_order(IxDyn(x.shape()))
            .expect("reshape grad");
        x.accumulate(g);
    }
}

struct TransposeOp;

impl Backward for TransposeOp {
    fn backward(&self, parents: &[Tensor], _out: &ArrayD<f64>, grad: &ArrayD<f64>) {
        parents[0].accumulate(grad.t().to_owned());
    }
}

struct NarrowOp {
    axis: usize,
    start: usize,
}

impl Backward for NarrowOp {
    fn backward(&self, parents: &[Tensor], out: &ArrayD<f64>, grad: &ArrayD<f64>) {
        let x = &parents[0];
        let mut g = ArrayD::zeros(IxDyn(x.shape()));
        let len = out.shape()[self.axis];
        g.slice_axis_mut(
            Axis(self.axis),
            ndarray::Slice::from(self.start..self.start + len),
        )
        .assign(grad);
        x.accumulate(g);
    }
}

struct ConcatOp {
    axis: usize,
}

impl Backward for ConcatOp {
    fn backward(&self, parents: &[Tensor], _out: &ArrayD<f64>, grad: &ArrayD<f64>) {
        let mut start = 0;
        for x in parents {
            let len = x.shape()[self.axis];
            let g = grad
                .slice_axis(Axis(self.axis), ndarray::Slice::from(start..start + len))
                .to_owned();
            x.accumulate(g);
            start += len;
        }
    }
}

struct SelectColsOp {
    cols: Vec<usize>,
}

impl Backward for SelectColsOp {
    fn backward(&self, parents: &[Tensor], _out: &ArrayD<f64>, grad: &ArrayD<f64>) {
        let x = &parents[0];
        let g2 = as2(grad);
        let mut gx = ndarray::Array2::<f64>::zeros((x.shape()[0], x.shape()[1]));
        for (j, &c) in self.cols.iter().enumerate() {
            for i in 0..g2.nrows() {
                gx[[i, c]] += g2[[i, j]];
            }
        }
        x.accumulate(gx.into_dyn());
    }
}

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let data = self
            .data()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        Tensor::from_op(data, vec![self.clone()], ReshapeOp)
    }

    /// 2-D transpose.
    pub fn t(&self) -> Tensor {
        assert_eq!(self.shape().len(), 2, "t() expects 2-D");
        let data = self.data().t().to_owned();
        Tensor::from_op(data, vec![self.clone()], TransposeOp)
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let data = self
            .data()
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .to_owned();
        Tensor::from_op(data, vec![self.clone()], NarrowOp { axis, start })
    }

    pub fn concat(xs: &[Tensor], axis: usize) -> Tensor {
        assert!(!xs.is_empty(), "concat of zero tensors");
        let views: Vec<_> = xs.iter().map(|t| t.data().view()).collect();
        let data = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        Tensor::from_op(data, xs.to_vec(), ConcatOp { axis })
    }

    /// Column gather on a 2-D tensor; backward scatter-adds.
    pub fn select_cols(&self, cols: &[usize]) -> Tensor {
        let x = as2(self.data());
        let mut out = ndarray::Array2::<f64>::zeros((x.nrows(), cols.len()));
        for (j, &c) in cols.iter().enumerate() {
            out.column_mut(j).assign(&x.column(c));
        }
        Tensor::from_op(out.into_dyn(), vec![self.clone()], SelectColsOp { cols: cols.to_vec() })
    }
}

// Exposed so sibling modules (renderer) can define custom ops.
pub(crate) use self::custom::custom_op;

mod custom {
    use super::*;

    /// A custom differentiable op: `backward_fn(parents, out, grad)` must
    /// accumulate into each parent via [`Tensor::accumulate_external`].
    pub(crate) fn custom_op(
        data: ArrayD<f64>,
        parents: Vec<Tensor>,
        backward_fn: Box<dyn Fn(&[Tensor], &ArrayD<f64>, &ArrayD<f64>)>,
    ) -> Tensor {
        struct CustomOp {
            f: Box<dyn Fn(&[Tensor], &ArrayD<f64>, &ArrayD<f64>)>,
        }
        impl Backward for CustomOp {
            fn backward(&self, parents: &[Tensor], out: &ArrayD<f64>, grad: &ArrayD<f64>) {
                (self.f)(parents, out, grad);
            }
        }
        Tensor::from_op(data, parents, CustomOp { f: backward_fn })
    }
}

impl Tensor {
    /// Accumulation hook for custom ops defined outside this module.
    pub(crate) fn accumulate_external(&self, g: ArrayD<f64>) {
        self.accumulate(g);
    }
}

// ---------------------------------------------------------------------------
// Composite helpers used across the models
// ---------------------------------------------------------------------------

impl Tensor {
    /// Euclidean norm of the flattened tensor, guarded near zero.
    pub fn l2_norm(&self) -> Tensor {
        self.square().sum().add_scalar(1e-24).sqrt()
    }

    /// Cosine similarity between two flattened tensors.
    pub fn cosine_similarity(&self, rhs: &Tensor) -> Tensor {
        let dot = self.mul(rhs).sum();
        dot.div(&self.l2_norm().mul(&rhs.l2_norm()))
    }

    /// Layer normalization over the last axis with learnable gain/bias.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Tensor {
        let axis = self.shape().len() - 1;
        let mu = self.mean_axis_keep(axis);
        let centered = self.sub(&mu);
        let var = centered.square().mean_axis_keep(axis);
        let normed = centered.div(&var.add_scalar(eps).sqrt());
        normed.mul(gain).add(bias)
    }
}

#[cfg(test)]
mod tests {
    use super::check::numeric_gradient;
    use super::*;
    use ndarray::{arr1, arr2, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol * (1.0 + a.abs().max(b.abs())), "{a} vs {b}");
    }

    /// Finite-difference check of a scalar-valued graph w.r.t. one leaf.
    fn gradcheck(f: impl Fn(&Tensor) -> Tensor, x0: ArrayD<f64>, tol: f64) {
        let leaf = Tensor::leaf_dyn(x0.clone());
        let loss = f(&leaf);
        loss.backward();
        let analytic = leaf.grad().expect("no gradient reached leaf");
        let numeric = numeric_gradient(
            |arr| {
                let t = Tensor::leaf_dyn(arr.clone());
                f(&t).scalar_value()
            },
            &x0,
            1e-6,
        );
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            let denom = a.abs().max(n.abs()).max(1e-8);
            assert!(
                (a - n).abs() / denom < tol,
                "gradient mismatch: analytic {a}, numeric {n}"
            );
        }
    }

    fn random_array(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.5..1.5))
    }

    #[test]
    fn add_mul_values() {
        let a = Tensor::constant(arr1(&[1.0, 2.0]));
        let b = Tensor::constant(arr1(&[3.0, 4.0]));
        let c = a.add(&b).mul(&b);
        assert_eq!(c.data().as_slice().unwrap(), &[12.0, 24.0]);
    }

    #[test]
    fn broadcasting_matches_numpy_rules() {
        let a = Tensor::constant(arr2(&[[1.0, 2.0], [3.0, 4.0]]));
        let b = Tensor::constant(arr1(&[10.0, 20.0]));
        let c = a.add(&b);
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data()[[0, 1]], 22.0);
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let x0 = random_array(&[3, 4], 7);
        gradcheck(|x| x.exp().sum(), x0.clone(), 1e-6);
        gradcheck(|x| x.tanh().mean(), x0.clone(), 1e-6);
        gradcheck(|x| x.sigmoid().sum(), x0.clone(), 1e-6);
        gradcheck(|x| x.square().sum(), x0.clone(), 1e-6);
        gradcheck(|x| x.add_scalar(3.0).ln().sum(), x0.clone(), 1e-5);
        gradcheck(|x| x.mul(x).div(&x.add_scalar(9.0)).sum(), x0, 1e-6);
    }

    #[test]
    fn broadcast_gradients_reduce_correctly() {
        let x0 = random_array(&[4], 3);
        gradcheck(
            |x| {
                let m = Tensor::constant(arr2(&[[1.0, 2.0, 3.0, 4.0], [5.0, 6.0, 7.0, 8.0]]));
                m.mul(x).sum()
            },
            x0,
            1e-6,
        );
    }

    #[test]
    fn matmul_gradient() {
        let x0 = random_array(&[3, 5], 11);
        gradcheck(
            |x| {
                let w = Tensor::constant(Array2::from_shape_fn((5, 2), |(i, j)| {
                    (i as f64) - (j as f64) * 0.5
                }));
                x.matmul(&w).square().sum()
            },
            x0,
            1e-6,
        );
    }

    #[test]
    fn softmax_rows_sum_to_one_and_grads_check() {
        let x0 = random_array(&[2, 6], 13);
        let t = Tensor::leaf_dyn(x0.clone());
        let s = t.softmax(1);
        for i in 0..2 {
            let row: f64 = (0..6).map(|j| s.data()[[i, j]]).sum();
            assert_close(row, 1.0, 1e-12);
        }
        let w = Tensor::constant(random_array(&[2, 6], 14));
        gradcheck(|x| x.softmax(1).mul(&w).sum(), x0, 1e-5);
    }

    #[test]
    fn shape_op_gradients() {
        let x0 = random_array(&[4, 6], 17);
        gradcheck(|x| x.reshape(&[2, 12]).square().sum(), x0.clone(), 1e-6);
        gradcheck(|x| x.t().square().sum(), x0.clone(), 1e-6);
        gradcheck(|x| x.narrow(1, 2, 3).square().sum(), x0.clone(), 1e-6);
        gradcheck(|x| x.select_cols(&[5, 0, 0, 3]).square().sum(), x0.clone(), 1e-6);
        gradcheck(
            |x| Tensor::concat(&[x.narrow(0, 0, 2), x.narrow(0, 2, 2)], 0).square().sum(),
            x0,
            1e-6,
        );
    }

    #[test]
    fn reduction_gradients() {
        let x0 = random_array(&[3, 5], 19);
        gradcheck(|x| x.sum_axis_keep(0).square().sum(), x0.clone(), 1e-6);
        gradcheck(|x| x.mean_axis_keep(1).square().sum(), x0.clone(), 1e-6);
        gradcheck(|x| x.l2_norm(), x0, 1e-6);
    }

    #[test]
    fn cosine_similarity_is_scale_invariant() {
        let a = random_array(&[8], 23);
        let b = random_array(&[8], 29);
        let ta = Tensor::constant(a.clone());
        let tb = Tensor::constant(b.clone());
        let c1 = ta.cosine_similarity(&tb).scalar_value();
        let c2 = ta.scale(10.0).cosine_similarity(&tb.scale(0.3)).scalar_value();
        assert_close(c1, c2, 1e-12);
    }

    #[test]
    fn layer_norm_gradcheck() {
        let x0 = random_array(&[3, 8], 31);
        let gain = Tensor::constant(random_array(&[8], 37));
        let bias = Tensor::constant(random_array(&[8], 41));
        gradcheck(|x| x.layer_norm(&gain, &bias, 1e-5).square().sum(), x0, 1e-5);
    }

    #[test]
    fn fanout_accumulates_gradient_once_per_use() {
        // y = x*x + x => dy/dx = 2x + 1
        let x = Tensor::leaf_dyn(arr1(&[3.0]).into_dyn());
        let y = x.mul(&x).add(&x).sum();
        y.backward();
        assert_close(x.grad().unwrap()[[0]], 7.0, 1e-12);
    }

    #[test]
    fn detach_blocks_gradient() {
        let x = Tensor::leaf_dyn(arr1(&[2.0]).into_dyn());
        let y = x.detach().mul(&x).sum();
        y.backward();
        assert_close(x.grad().unwrap()[[0]], 2.0, 1e-12);
    }

    #[test]
    fn deep_graph_backward_and_drop_do_not_overflow_stack() {
        let mut t = Tensor::leaf_dyn(arr1(&[1.0]).into_dyn());
        let x = t.clone();
        for _ in 0..50_000 {
            t = t.add_scalar(0.0);
        }
        t.sum().backward();
        assert_close(x.grad().unwrap()[[0]], 1.0, 1e-12);
        drop(t); // must tear down iteratively
    }

    #[test]
    fn random_composite_graph_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..5 {
            let x0 = random_array(&[2, 3], 100 + trial);
            let w = Tensor::constant(random_array(&[3, 3], 200 + trial));
            let noise = rng.gen_range(0.5..1.5);
            gradcheck(
                |x| {
                    x.matmul(&w)
                        .tanh()
                        .scale(noise)
                        .softmax(1)
                        .add_scalar(0.1)
                        .ln()
                        .mean()
                },
                x0,
                1e-5,
            );
        }
    }
}
