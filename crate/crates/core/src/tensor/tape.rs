use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use super::Tensor;
use crate::error::{BstError, Result};
use crate::real::Real;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Deliberate corruption of one backward rule, used to prove that the
/// gradient checker actually catches broken derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Scales the right-operand gradient of `matmul` by 1.1.
    MatmulRhsGrad,
}

pub(crate) struct BackwardCtx<'a, T> {
    pub grad: &'a Tensor<T>,
    pub inputs: &'a [Rc<Tensor<T>>],
    pub output: &'a Tensor<T>,
    pub needs: &'a [bool],
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Records primitive applications in topological order so that one reverse
/// sweep yields gradients for every named parameter.
///
/// A tape is single-owner and not `Sync`. An inference tape (see
/// [`Tape::inference`]) computes values without keeping backward rules.
pub struct Tape<T: Real = f64> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<BTreeMap<String, Var>>,
    recording: bool,
    fault: Option<Fault>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(BTreeMap::new()),
            recording: true,
            fault: None,
        }
    }

    pub fn inference() -> Self {
        Self { recording: false, ..Self::new() }
    }

    pub fn with_fault(fault: Fault) -> Self {
        Self { fault: Some(fault), ..Self::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub(crate) fn fault(&self) -> Option<Fault> {
        self.fault
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a named trainable leaf. Registering the same name twice
    /// returns the first handle.
    pub fn param(&self, name: &str, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.borrow().get(name) {
            return v;
        }
        let v = self.leaf(value.clone(), self.recording);
        self.params.borrow_mut().insert(name.to_string(), v);
        v
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), parents: Vec::new(), backward: None, requires_grad });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub(crate) fn any_requires_grad(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        self.recording && vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Appends an op result. The backward rule is dropped when no operand
    /// participates in differentiation.
    pub(crate) fn push<F>(&self, value: Tensor<T>, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let rg = self.any_requires_grad(parents);
        let mut nodes = self.nodes.borrow_mut();
        let node = if rg {
            Node {
                value: Rc::new(value),
                parents: parents.iter().map(|v| v.0).collect(),
                backward: Some(Box::new(backward)),
                requires_grad: true,
            }
        } else {
            Node { value: Rc::new(value), parents: Vec::new(), backward: None, requires_grad: false }
        };
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    /// Reverse sweep from a scalar loss. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let mut nodes = self.nodes.into_inner();
        let params = self.params.into_inner();
        let loss_shape = nodes[loss.0].value.shape().to_vec();
        if nodes[loss.0].value.numel() != 1 {
            return Err(BstError::Contract(format!(
                "backward needs a scalar loss, got shape {loss_shape:?}"
            )));
        }
        let param_of: BTreeMap<usize, &str> = params.iter().map(|(k, v)| (v.0, k.as_str())).collect();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(loss_shape));
        let mut out = BTreeMap::new();
        let empty = Rc::new(Tensor::zeros(vec![0]));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Some(bw) = nodes[id].backward.take() {
                let parents = std::mem::take(&mut nodes[id].parents);
                let inputs: Vec<_> = parents.iter().map(|&p| nodes[p].value.clone()).collect();
                let needs: Vec<bool> = parents.iter().map(|&p| nodes[p].requires_grad).collect();
                let output = nodes[id].value.clone();
                let ctx = BackwardCtx { grad: &g, inputs: &inputs, output: &output, needs: &needs };
                let pgrads = bw(&ctx);
                debug_assert_eq!(pgrads.len(), parents.len());
                for ((&p, pg), need) in parents.iter().zip(pgrads).zip(&needs) {
                    let (Some(pg), true) = (pg, *need) else { continue };
                    debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "gradient shape mismatch");
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            if let Some(name) = param_of.get(&id) {
                out.insert(name.to_string(), g);
            }
            nodes[id].value = empty.clone();
        }
        for (name, v) in &params {
            if !out.contains_key(name) {
                out.insert(name.clone(), Tensor::zeros(nodes[v.0].value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads: out })
    }
}

/// Parameter gradients keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T = f64> {
    grads: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn global_norm(&self) -> T {
        self.grads
            .values()
            .flat_map(|g| g.data().iter())
            .fold(T::zero(), |acc, &x| acc + x * x)
            .sqrt()
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.values_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<T>> {
        self.grads
    }
}
