//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Tensors are immutable row-major arrays; every differentiable op records a
//! node holding its inputs and a backward closure, and [`Tensor::backward`]
//! walks the graph in reverse topological order. The element type is generic
//! over [`Real`] (f32 for speed, f64 for gradient checks).

pub mod macs;
pub mod ops;
pub mod rng;

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

pub use rng::Rng;

pub trait Real: num_traits::Float + fmt::Debug + fmt::Display + Default + 'static {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch: {context}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { context: String, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: std::cell::Cell<bool> = const { std::cell::Cell::new(true) };
}

/// Run `f` without recording any autodiff nodes.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Backward closure: maps the output gradient to per-input gradients
/// (flat buffers matching each input's shape; `None` skips an input).
type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>>>;

struct Node<T: Real> {
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Inner<T: Real> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    node: Option<Node<T>>,
}

#[derive(Clone)]
pub struct Tensor<T: Real>(Rc<Inner<T>>);

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor(id={}, shape={:?})", self.0.id, self.0.shape)
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Self::raw(shape.to_vec(), data, false, None))
    }

    fn raw(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, node: Option<Node<T>>) -> Self {
        Tensor(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            node,
        }))
    }

    /// Create an op output. The node is recorded only when gradients are
    /// enabled and at least one input participates in the graph.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<T>, inputs: Vec<Tensor<T>>, backward: BackwardFn<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let traced = grad_enabled() && inputs.iter().any(|t| t.traced());
        let node = if traced { Some(Node { inputs, backward }) } else { None };
        Self::raw(shape, data, false, node)
    }

    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        Ok(Tensor(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape: t.0.shape.clone(),
            data: RefCell::new(t.to_vec()),
            grad: RefCell::new(None),
            requires_grad: true,
            node: None,
        })))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::raw(shape.to_vec(), vec![T::zero(); shape.iter().product()], false, None)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::raw(shape.to_vec(), vec![T::from_f64(v); shape.iter().product()], false, None)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(v: f64) -> Self {
        Self::raw(vec![], vec![T::from_f64(v)], false, None)
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let data = (0..shape.iter().product()).map(|_| T::from_f64(rng.uniform(lo, hi))).collect();
        Self::raw(shape.to_vec(), data, false, None)
    }

    pub fn trunc_normal(shape: &[usize], sigma: f64, rng: &mut Rng) -> Self {
        let data = (0..shape.iter().product()).map(|_| T::from_f64(rng.trunc_normal(sigma))).collect();
        Self::raw(shape.to_vec(), data, false, None)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn traced(&self) -> bool {
        self.0.requires_grad || self.0.node.is_some()
    }

    pub fn data(&self) -> std::cell::Ref<'_, Vec<T>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.borrow().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.borrow().iter().map(|&v| Real::to_f64(v)).collect()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar");
        self.0.data.borrow()[0].to_f64()
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// In-place update for leaf parameters (optimizer step). Any recorded
    /// graph referencing this tensor must be dropped first.
    pub fn update_data(&self, f: impl FnMut(&mut T)) {
        assert!(self.0.requires_grad, "update_data on non-parameter");
        self.0.data.borrow_mut().iter_mut().for_each(f);
    }

    pub fn set_data(&self, data: Vec<T>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(TensorError::ShapeMismatch {
                context: "set_data".into(),
                lhs: self.0.shape.clone(),
                rhs: vec![data.len()],
            });
        }
        *self.0.data.borrow_mut() = data;
        Ok(())
    }

    /// Same values, detached from the graph.
    pub fn detach(&self) -> Tensor<T> {
        Self::raw(self.0.shape.clone(), self.to_vec(), false, None)
    }

    pub fn is_finite(&self) -> bool {
        self.0.data.borrow().iter().all(|v| v.is_finite())
    }

    fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + *b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
    /// reachable `requires_grad` tensor; repeated calls keep accumulating.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.0.shape
            )));
        }
        // Post-order DFS (iterative) for topological order.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashMap<u64, ()> = HashMap::new();
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.0.id, ());
        while let Some((t, child)) = stack.pop() {
            let n_inputs = t.0.node.as_ref().map_or(0, |n| n.inputs.len());
            if child < n_inputs {
                stack.push((t.clone(), child + 1));
                let input = t.0.node.as_ref().unwrap().inputs[child].clone();
                if input.0.node.is_some() || input.0.requires_grad {
                    if visited.insert(input.0.id, ()).is_none() {
                        stack.push((input, 0));
                    }
                }
            } else {
                order.push(t);
            }
        }
        // Flow gradients in a scratch map so repeated backward calls do not
        // re-read previously accumulated grads.
        let mut flow: HashMap<u64, Vec<T>> = HashMap::new();
        flow.insert(self.0.id, vec![T::one()]);
        for t in order.iter().rev() {
            let Some(node) = t.0.node.as_ref() else { continue };
            let Some(grad_out) = flow.get(&t.0.id).cloned() else { continue };
            let input_grads = (node.backward)(&grad_out);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                debug_assert_eq!(g.len(), input.numel());
                if input.0.node.is_some() || input.0.requires_grad {
                    flow.entry(input.0.id)
                        .and_modify(|acc| acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b))
                        .or_insert(g);
                }
            }
        }
        for t in &order {
            if t.0.requires_grad {
                if let Some(g) = flow.get(&t.0.id) {
                    t.accumulate_grad(g);
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Broadcasting elementwise ops
// ---------------------------------------------------------------------------

/// Right-aligned broadcast shape, numpy rules.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(TensorError::ShapeMismatch {
                context: "broadcast".into(),
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
    }
    Ok(out)
}

/// Strides of `shape` padded to `rank`, with 0 on broadcast (size-1) dims.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1usize;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { s };
        s *= shape[i];
    }
    strides
}

/// Apply `f` elementwise over the broadcast of `a` and `b`.
fn broadcast_apply<T: Real>(
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Result<(Vec<usize>, Vec<T>)> {
    let out_shape = broadcast_shape(a_shape, b_shape)?;
    let numel: usize = out_shape.iter().product();
    let mut out = vec![T::zero(); numel];
    if a_shape == b_shape {
        for i in 0..numel {
            out[i] = f(a[i], b[i]);
        }
        return Ok((out_shape, out));
    }
    let sa = broadcast_strides(a_shape, &out_shape);
    let sb = broadcast_strides(b_shape, &out_shape);
    let rank = out_shape.len();
    let last = if rank == 0 { 1 } else { out_shape[rank - 1] };
    let outer: usize = numel / last.max(1);
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    let mut off = 0usize;
    for _ in 0..outer {
        let (mut oa, mut ob) = (0usize, 0usize);
        for d in 0..rank.saturating_sub(1) {
            oa += idx[d] * sa[d];
            ob += idx[d] * sb[d];
        }
        let (la, lb) = if rank == 0 { (0, 0) } else { (sa[rank - 1], sb[rank - 1]) };
        for j in 0..last {
            out[off + j] = f(a[oa + j * la], b[ob + j * lb]);
        }
        off += last;
        for d in (0..rank.saturating_sub(1)).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok((out_shape, out))
}

/// Reduce `buf` (shaped `from`) back to `to` by summing broadcast dims.
pub(crate) fn sum_to_shape<T: Real>(buf: &[T], from: &[usize], to: &[usize]) -> Vec<T> {
    if from == to {
        return buf.to_vec();
    }
    let numel_to: usize = to.iter().product();
    let mut out = vec![T::zero(); numel_to];
    let strides_to = broadcast_strides(to, from);
    let rank = from.len();
    let mut idx = vec![0usize; rank];
    for (i, v) in buf.iter().enumerate() {
        let mut off = 0usize;
        for d in 0..rank {
            off += idx[d] * strides_to[d];
        }
        out[off] = out[off] + *v;
        let _ = i;
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < from[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

macro_rules! binary_op {
    ($name:ident, $fwd:expr, $bwd:expr) => {
        pub fn $name(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
            let a = self.data();
            let b = rhs.data();
            let (shape, data) = broadcast_apply(&a, self.shape(), &b, rhs.shape(), $fwd)?;
            drop(a);
            drop(b);
            let lhs_t = self.clone();
            let rhs_t = rhs.clone();
            let out_shape = shape.clone();
            Ok(Tensor::from_op(
                shape,
                data,
                vec![self.clone(), rhs.clone()],
                Box::new(move |g: &[T]| {
                    let bwd = $bwd;
                    let (ga, gb) = bwd(g, &lhs_t, &rhs_t, &out_shape);
                    vec![ga, gb]
                }),
            ))
        }
    };
}

impl<T: Real> Tensor<T> {
    binary_op!(add, |x: T, y: T| x + y, |g: &[T], a: &Tensor<T>, b: &Tensor<T>, out: &[usize]| {
        (
            Some(sum_to_shape(g, out, a.shape())),
            Some(sum_to_shape(g, out, b.shape())),
        )
    });

    binary_op!(sub, |x: T, y: T| x - y, |g: &[T], a: &Tensor<T>, b: &Tensor<T>, out: &[usize]| {
        let neg: Vec<T> = g.iter().map(|&v| -v).collect();
        (
            Some(sum_to_shape(g, out, a.shape())),
            Some(sum_to_shape(&neg, out, b.shape())),
        )
    });

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let a = self.data();
        let b = rhs.data();
        let (shape, data) = broadcast_apply(&a, self.shape(), &b, rhs.shape(), |x, y| x * y)?;
        drop(a);
        drop(b);
        macs::add_elementwise(data.len() as u64);
        let lhs_t = self.clone();
        let rhs_t = rhs.clone();
        let out_shape = shape.clone();
        Ok(Tensor::from_op(
            shape,
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g: &[T]| {
                let (_, gb_full) =
                    broadcast_apply(g, &out_shape, &lhs_t.data(), lhs_t.shape(), |x, y| x * y).unwrap();
                let (_, ga_full) =
                    broadcast_apply(g, &out_shape, &rhs_t.data(), rhs_t.shape(), |x, y| x * y).unwrap();
                vec![
                    Some(sum_to_shape(&ga_full, &out_shape, lhs_t.shape())),
                    Some(sum_to_shape(&gb_full, &out_shape, rhs_t.shape())),
                ]
            }),
        ))
    }

    pub fn div(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let a = self.data();
        let b = rhs.data();
        let (shape, data) = broadcast_apply(&a, self.shape(), &b, rhs.shape(), |x, y| x / y)?;
        drop(a);
        drop(b);
        macs::add_elementwise(data.len() as u64);
        let lhs_t = self.clone();
        let rhs_t = rhs.clone();
        let out_shape = shape.clone();
        Ok(Tensor::from_op(
            shape,
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g: &[T]| {
                let b = rhs_t.data();
                let (_, ga_full) = broadcast_apply(g, &out_shape, &b, rhs_t.shape(), |x, y| x / y).unwrap();
                let a = lhs_t.data();
                // d/db (a/b) = -a / b^2
                let (_, ab2) = broadcast_apply(&a, lhs_t.shape(), &b, rhs_t.shape(), |x, y| -x / (y * y)).unwrap();
                drop(a);
                drop(b);
                let (_, gb_full) = broadcast_apply(g, &out_shape, &ab2, &out_shape, |x, y| x * y).unwrap();
                vec![
                    Some(sum_to_shape(&ga_full, &out_shape, lhs_t.shape())),
                    Some(sum_to_shape(&gb_full, &out_shape, rhs_t.shape())),
                ]
            }),
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor<T> {
        let cc = T::from_f64(c);
        let data: Vec<T> = self.data().iter().map(|&v| v * cc).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g: &[T]| vec![Some(g.iter().map(|&v| v * cc).collect())]),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<T> {
        let cc = T::from_f64(c);
        let data: Vec<T> = self.data().iter().map(|&v| v + cc).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g: &[T]| vec![Some(g.to_vec())]),
        )
    }

    fn unary(&self, f: impl Fn(T) -> T, dfdx_from_in_out: impl Fn(T, T) -> T + 'static) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&v| f(v)).collect();
        let input = self.clone();
        let saved_out = data.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g: &[T]| {
                let x = input.data();
                let gx = g
                    .iter()
                    .zip(x.iter().zip(saved_out.iter()))
                    .map(|(&gv, (&xv, &yv))| gv * dfdx_from_in_out(xv, yv))
                    .collect();
                vec![Some(gx)]
            }),
        )
    }

    pub fn abs(&self) -> Tensor<T> {
        self.unary(
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn tanh_act(&self) -> Tensor<T> {
        self.unary(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(
            |x| T::one() / (T::one() + (-x).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&self) -> Tensor<T> {
        let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let k = T::from_f64(0.044715);
        let half = T::from_f64(0.5);
        self.unary(
            move |x| {
                let inner = c * (x + k * x * x * x);
                half * x * (T::one() + inner.tanh())
            },
            move |x, _| {
                let inner = c * (x + k * x * x * x);
                let t = inner.tanh();
                let sech2 = T::one() - t * t;
                half * (T::one() + t) + half * x * sech2 * c * (T::one() + T::from_f64(3.0) * k * x * x)
            },
        )
    }
}

pub mod check;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_add_and_grad_reduction() {
        let a = Tensor::<f64>::param(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::<f64>::param(&[3], vec![10., 20., 30.]).unwrap();
        let c = a.add(&b).unwrap();
        assert_eq!(c.to_f64_vec(), vec![11., 22., 33., 14., 25., 36.]);
        let loss = c.sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.; 6]);
        assert_eq!(b.grad().unwrap(), vec![2., 2., 2.]);
    }

    #[test]
    fn backward_accumulates_and_clears() {
        let x = Tensor::<f64>::param(&[3], vec![1., 2., 3.]).unwrap();
        let loss = x.mul(&x).unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2., 4., 6.]);
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4., 8., 12.]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::<f64>::param(&[2], vec![1., 2.]).unwrap();
        let y = x.scale(2.0);
        assert!(matches!(y.backward(), Err(TensorError::Contract(_))));
    }

    #[test]
    fn sum_of_x_grad_all_ones() {
        let x = Tensor::<f64>::param(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
        x.sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.; 4]);
    }

    #[test]
    fn no_grad_suppresses_graph() {
        let x = Tensor::<f64>::param(&[2], vec![1., 2.]).unwrap();
        let y = no_grad(|| x.scale(3.0));
        assert!(!y.traced());
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4, 5]);
        let err = a.add(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"));
    }
}
