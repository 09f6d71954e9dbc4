//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every differentiable operation appends a node holding its output value
//! and a backward closure. [`Tape::backward`] walks the nodes in reverse,
//! propagating gradients from a scalar root to every leaf that was created
//! with `requires_grad = true`. A tape can be consumed by `backward` exactly
//! once; a second call is a usage error rather than silent garbage.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
///
/// A `Var` is only meaningful together with the tape that produced it.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

/// Forward-pass mode, which changes the semantics of batch norm and
/// DropConnect.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

/// Accumulator handed to backward closures.
///
/// `entry` returns the gradient buffer of an upstream variable, creating it
/// zero-filled on first access; closures add their contribution into it.
pub struct GradSink<'a> {
    grads: &'a mut [Option<Vec<f64>>],
    needs: &'a [bool],
}

impl GradSink<'_> {
    /// True if gradients must be propagated into `v` (it, or something it
    /// depends on, requires gradients). Closures use this to skip work.
    pub fn needs(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    /// Gradient buffer of `v`, zero-initialised on first use.
    pub fn entry(&mut self, v: Var, len: usize) -> &mut [f64] {
        self.grads[v.0]
            .get_or_insert_with(|| vec![0.0; len])
            .as_mut_slice()
    }
}

type BackwardFn = Box<dyn Fn(&[f64], &mut GradSink)>;

struct Node {
    value: Tensor,
    backward: Option<BackwardFn>,
}

/// Gradients of a scalar root with respect to tape leaves, keyed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    inner: HashMap<usize, Vec<f64>>,
}

impl Gradients {
    /// Gradient buffer for `v`, if `v` required gradients and was reached.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.inner.get(&v.0).map(|g| g.as_slice())
    }

    /// Removes and returns the gradient buffer for `v`.
    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.inner.remove(&v.0)
    }

    pub fn len(&self) -> usize {
        self.inner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.is_empty()
    }
}

/// Linear record of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    needs: Vec<bool>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input value. Gradients flow into it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, None)
    }

    /// Value held by a variable.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub(crate) fn push(
        &mut self,
        value: Tensor,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Var {
        self.nodes.push(Node { value, backward });
        self.needs.push(requires_grad);
        Var(self.nodes.len() - 1)
    }

    /// True if gradients must flow into `v`.
    pub(crate) fn requires_grad(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    /// Runs reverse-mode accumulation from the scalar `root`.
    ///
    /// Consumes the tape's ability to run backward again; call it once per
    /// forward pass.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Usage(
                "backward was already called on this tape".into(),
            ));
        }
        self.consumed = true;
        if root.0 >= self.nodes.len() {
            return Err(Error::Usage("backward root is not on this tape".into()));
        }
        if self.nodes[root.0].value.shape().count() != 1 {
            return Err(Error::Shape(format!(
                "backward requires a scalar root, got shape {}",
                self.nodes[root.0].value.shape()
            )));
        }

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);

        let mut leaf_grads = HashMap::new();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].backward {
                Some(f) => {
                    let mut sink = GradSink {
                        grads: &mut grads,
                        needs: &self.needs,
                    };
                    f(&g, &mut sink);
                }
                None => {
                    if self.needs[i] {
                        leaf_grads.insert(i, g);
                    }
                }
            }
        }
        Ok(Gradients { inner: leaf_grads })
    }
}
