//! Minimal reverse-mode autodiff over f64 ndarrays.
//!
//! Every op eagerly computes its result and records a backward closure on a
//! tape node. Nodes are only recorded when at least one input is tracked, so
//! forward passes over frozen parameters and plain inputs build no graph and
//! backprop stops exactly at the trainable frontier. Node ids are monotonic,
//! which makes reverse-id order a valid topological order for backward.

mod check;
mod nn;
mod ops;
mod optim;

pub use check::{finite_diff_check, FdReport};
pub use nn::{normal_fill, sample_normal, Conv2d, Embedding, GroupNorm, LayerNorm, Linear};
pub use optim::AdamW;

use ndarray::{ArrayD, IxDyn};
use std::cell::{Cell, RefCell};
use std::collections::{BinaryHeap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

type BackwardFn = Box<dyn Fn(&ArrayD<f64>) -> Vec<Option<ArrayD<f64>>>>;

struct Inner {
    id: u64,
    data: RefCell<ArrayD<f64>>,
    grad: RefCell<Option<ArrayD<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
    /// Whether this node participates in the tape. For leaves this mirrors
    /// the trainable flag; op nodes are always tracked.
    tracked: Cell<bool>,
    trainable: Cell<bool>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl Tensor {
    fn new(data: ArrayD<f64>, parents: Vec<Tensor>, backward: Option<BackwardFn>, tracked: bool, trainable: bool) -> Tensor {
        Tensor(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            data: RefCell::new(data),
            grad: RefCell::new(None),
            parents,
            backward,
            tracked: Cell::new(tracked),
            trainable: Cell::new(trainable),
        }))
    }

    /// Untracked leaf: network inputs, targets, detached values.
    pub fn constant(data: ArrayD<f64>) -> Tensor {
        Tensor::new(data, Vec::new(), None, false, false)
    }

    /// Trainable leaf; gradients accumulate here.
    pub fn param(data: ArrayD<f64>) -> Tensor {
        Tensor::new(data, Vec::new(), None, true, true)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    /// Records an op node. Falls back to an untracked constant when no input
    /// is tracked, so untracked forward passes build no tape.
    pub(crate) fn from_op(data: ArrayD<f64>, parents: Vec<Tensor>, backward: BackwardFn) -> Tensor {
        if parents.iter().any(|p| p.is_tracked()) {
            Tensor::new(data, parents, Some(backward), true, false)
        } else {
            Tensor::constant(data)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn data(&self) -> std::cell::Ref<'_, ArrayD<f64>> {
        self.0.data.borrow()
    }

    pub fn set_data(&self, data: ArrayD<f64>) {
        assert_eq!(data.shape(), self.shape().as_slice(), "set_data shape mismatch");
        *self.0.data.borrow_mut() = data;
    }

    /// In-place update of the value, used by optimizers.
    pub fn update_data(&self, f: impl FnOnce(&mut ArrayD<f64>)) {
        f(&mut self.0.data.borrow_mut());
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.data.borrow().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.0.data.borrow().len()
    }

    pub fn item(&self) -> f64 {
        let d = self.0.data.borrow();
        assert_eq!(d.len(), 1, "item() requires a single-element tensor");
        *d.iter().next().unwrap()
    }

    pub fn grad(&self) -> Option<ArrayD<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn is_tracked(&self) -> bool {
        self.0.tracked.get()
    }

    pub fn is_trainable(&self) -> bool {
        self.0.trainable.get()
    }

    /// Freezing a leaf stops both gradient accumulation and tape recording
    /// through it; ops consult this at record time, so toggling affects the
    /// next forward pass, not graphs already built.
    pub fn set_trainable(&self, trainable: bool) {
        assert!(self.0.backward.is_none(), "set_trainable only applies to leaves");
        self.0.trainable.set(trainable);
        self.0.tracked.set(trainable);
    }

    /// Copy of the value as a fresh untracked leaf.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.0.data.borrow().clone())
    }

    fn accum_grad(&self, g: ArrayD<f64>) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => *acc += &g,
            None => *slot = Some(g),
        }
    }

    /// Reverse pass from a scalar root. Gradients of tracked leaves
    /// accumulate into their grad slots (call zero_grad between steps).
    pub fn backward(&self) {
        assert_eq!(self.numel(), 1, "backward requires a scalar root");
        if self.0.backward.is_none() {
            return;
        }
        self.accum_grad(ArrayD::from_elem(self.0.data.borrow().raw_dim(), 1.0));

        let mut heap: BinaryHeap<ById> = BinaryHeap::new();
        let mut seen: HashSet<u64> = HashSet::new();
        heap.push(ById(self.clone()));
        seen.insert(self.id());

        while let Some(ById(node)) = heap.pop() {
            let go = match node.0.grad.borrow().clone() {
                Some(g) => g,
                None => continue,
            };
            let f = node.0.backward.as_ref().expect("only op nodes enter the heap");
            let parent_grads = f(&go);
            assert_eq!(parent_grads.len(), node.0.parents.len());
            for (p, g) in node.0.parents.iter().zip(parent_grads) {
                if let Some(g) = g {
                    if p.is_tracked() {
                        assert_eq!(g.shape(), p.shape().as_slice(), "backward produced wrong grad shape");
                        p.accum_grad(g);
                        if p.0.backward.is_some() && seen.insert(p.id()) {
                            heap.push(ById(p.clone()));
                        }
                    }
                }
            }
            // Intermediate grads are complete once popped (all children have
            // higher ids and were processed first); free them eagerly.
            *node.0.grad.borrow_mut() = None;
        }
    }
}

struct ById(Tensor);

impl PartialEq for ById {
    fn eq(&self, other: &Self) -> bool {
        self.0.id() == other.0.id()
    }
}
impl Eq for ById {}
impl PartialOrd for ById {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for ById {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.id().cmp(&other.0.id())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn arr(shape: &[usize], vals: &[f64]) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(shape), vals.to_vec()).unwrap()
    }

    #[test]
    fn untracked_inputs_record_no_tape() {
        let a = Tensor::constant(arr(&[2], &[1.0, 2.0]));
        let b = Tensor::constant(arr(&[2], &[3.0, 4.0]));
        let c = a.add(&b);
        assert!(!c.is_tracked());
        assert!(c.0.backward.is_none());
    }

    #[test]
    fn grad_accumulates_over_reuse() {
        let x = Tensor::param(arr(&[2], &[1.0, 2.0]));
        let y = x.add(&x).sum_all();
        y.backward();
        assert_eq!(x.grad().unwrap(), arr(&[2], &[2.0, 2.0]));
    }

    #[test]
    fn freezing_stops_grad_and_tape() {
        let x = Tensor::param(arr(&[2], &[1.0, 2.0]));
        x.set_trainable(false);
        let y = x.scale(3.0).sum_all();
        assert!(!y.is_tracked());
        y.backward();
        assert!(x.grad().is_none());
    }

    #[test]
    fn diamond_graph_sums_both_paths() {
        let x = Tensor::param(arr(&[], &[3.0]));
        let a = x.scale(2.0);
        let b = x.scale(5.0);
        let y = a.add(&b);
        y.backward();
        assert_eq!(x.grad().unwrap()[IxDyn(&[])], 7.0);
    }

    #[test]
    fn backward_through_frozen_middle_reaches_early_params() {
        // loss = frozen_w * (trainable_w * x): grad must flow through the
        // frozen multiply to reach the trainable leaf.
        let x = Tensor::constant(arr(&[], &[2.0]));
        let wt = Tensor::param(arr(&[], &[3.0]));
        let wf = Tensor::param(arr(&[], &[5.0]));
        wf.set_trainable(false);
        let y = wf.mul(&wt.mul(&x));
        y.backward();
        assert_eq!(wt.grad().unwrap()[IxDyn(&[])], 10.0);
        assert!(wf.grad().is_none());
    }
}
