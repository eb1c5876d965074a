//! Dynamic reverse-mode graph.
//!
//! Every differentiable operation returns a new [`Var`]. When gradient
//! recording is enabled and at least one input requires a gradient, the
//! result remembers its inputs and a backward rule. Backward rules are
//! themselves written with `Var` operations, so calling [`grad`] with
//! `create_graph = true` records the backward pass and makes the resulting
//! gradients differentiable again.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::{Scalar, Tensor};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

struct ModeGuard(bool);

impl Drop for ModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.0));
    }
}

/// Runs `f` with gradient recording switched to `enabled`.
pub fn with_grad_mode<R>(enabled: bool, f: impl FnOnce() -> R) -> R {
    let _guard = ModeGuard(GRAD_ENABLED.with(|c| c.replace(enabled)));
    f()
}

/// Runs `f` without recording any graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    with_grad_mode(false, f)
}

/// Backward rule of a recorded operation.
pub(crate) trait Backward<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Vector-Jacobian products for each input; `needs[i]` is false when the
    /// gradient of input `i` will be discarded.
    fn backward(
        &self,
        inputs: &[Var<T>],
        output: &Var<T>,
        grad: &Var<T>,
        needs: &[bool],
    ) -> Vec<Option<Var<T>>>;
}

struct GradFn<T: Scalar> {
    op: Box<dyn Backward<T>>,
    inputs: Vec<Var<T>>,
}

struct Node<T: Scalar> {
    id: u64,
    value: Tensor<T>,
    requires_grad: bool,
    grad_fn: Option<GradFn<T>>,
}

/// Differentiable handle to a tensor value.
pub struct Var<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = self.0.grad_fn.as_ref().map_or("leaf", |g| g.op.name());
        write!(f, "Var#{}({op}, {:?})", self.0.id, self.0.value)
    }
}

impl<T: Scalar> Var<T> {
    fn build(value: Tensor<T>, requires_grad: bool, grad_fn: Option<GradFn<T>>) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad,
            grad_fn,
        }))
    }

    /// A value that never receives gradients.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::build(value, false, None)
    }

    /// A graph leaf; parameters and inputs we differentiate against.
    pub fn leaf(value: Tensor<T>, requires_grad: bool) -> Self {
        Self::build(value, requires_grad, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::constant(Tensor::scalar(value))
    }

    pub(crate) fn from_op(
        value: Tensor<T>,
        op: impl Backward<T> + 'static,
        inputs: Vec<Var<T>>,
    ) -> Self {
        if grad_enabled() && inputs.iter().any(Var::requires_grad) {
            Self::build(
                value,
                true,
                Some(GradFn {
                    op: Box::new(op),
                    inputs,
                }),
            )
        } else {
            Self::constant(value)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.0.value.numel()
    }

    pub fn item(&self) -> T {
        self.0.value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    fn inputs(&self) -> &[Var<T>] {
        self.0.grad_fn.as_ref().map_or(&[], |g| &g.inputs)
    }
}

/// Gradients of `output` (seeded with ones) with respect to each of `wrt`.
///
/// `None` marks inputs that `output` does not depend on. With
/// `create_graph`, the returned gradients are themselves recorded and can be
/// differentiated again.
pub fn grad<T: Scalar>(output: &Var<T>, wrt: &[&Var<T>], create_graph: bool) -> Vec<Option<Var<T>>> {
    if !output.requires_grad() {
        return vec![None; wrt.len()];
    }

    // Ids are allocated in creation order, so sorting by id is a topological order.
    let mut nodes: HashMap<u64, Var<T>> = HashMap::new();
    let mut stack = vec![output.clone()];
    while let Some(v) = stack.pop() {
        if !v.requires_grad() || nodes.contains_key(&v.id()) {
            continue;
        }
        stack.extend(v.inputs().iter().cloned());
        nodes.insert(v.id(), v);
    }
    let mut order: Vec<Var<T>> = nodes.into_values().collect();
    order.sort_by_key(Var::id);

    let targets: HashSet<u64> = wrt.iter().map(|v| v.id()).collect();
    let mut needed: HashSet<u64> = HashSet::new();
    for v in &order {
        if targets.contains(&v.id()) || v.inputs().iter().any(|i| needed.contains(&i.id())) {
            needed.insert(v.id());
        }
    }

    let mut grads: HashMap<u64, Var<T>> = HashMap::new();
    grads.insert(output.id(), Var::constant(Tensor::ones(output.shape().to_vec())));

    with_grad_mode(create_graph, || {
        for v in order.iter().rev() {
            if !needed.contains(&v.id()) {
                continue;
            }
            let g = if targets.contains(&v.id()) {
                grads.get(&v.id()).cloned()
            } else {
                grads.remove(&v.id())
            };
            let (Some(g), Some(gf)) = (g, v.0.grad_fn.as_ref()) else {
                continue;
            };
            let needs: Vec<bool> = gf.inputs.iter().map(|i| needed.contains(&i.id())).collect();
            if !needs.iter().any(|&n| n) {
                continue;
            }
            let input_grads = gf.op.backward(&gf.inputs, v, &g, &needs);
            debug_assert_eq!(input_grads.len(), gf.inputs.len(), "{}", gf.op.name());
            for ((input, ig), need) in gf.inputs.iter().zip(input_grads).zip(&needs) {
                let (Some(ig), true) = (ig, *need) else {
                    continue;
                };
                debug_assert_eq!(ig.shape(), input.shape(), "{} grad shape", gf.op.name());
                let acc = match grads.remove(&input.id()) {
                    Some(prev) => prev.add(&ig),
                    None => ig,
                };
                grads.insert(input.id(), acc);
            }
        }
    });

    wrt.iter().map(|v| grads.get(&v.id()).cloned()).collect()
}

/// Like [`grad`] but substitutes zeros for unreachable inputs.
pub fn grad_or_zeros<T: Scalar>(output: &Var<T>, wrt: &[&Var<T>], create_graph: bool) -> Vec<Var<T>> {
    grad(output, wrt, create_graph)
        .into_iter()
        .zip(wrt)
        .map(|(g, w)| g.unwrap_or_else(|| Var::constant(Tensor::zeros(w.shape().to_vec()))))
        .collect()
}
