//! Reverse-mode automatic differentiation over an explicit, per-forward-pass
//! tape.
//!
//! A [`Tape`] records every operation of one forward pass in execution
//! order, so node indices are already a topological order. Parameters are
//! copied onto the tape from a borrowed [`ParamStore`] the first time they
//! are used; [`Tape::backward`] consumes the tape and returns a
//! [`Gradients`] value holding dL/dθ for every parameter and every
//! gradient-tracked leaf reachable from the loss.
//!
//! Every matmul-like operation adds its multiply-add count to the tape's
//! [`OpCounter`]; elementwise and data-movement operations are not counted.

mod backward;
mod kernels;
mod ops;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub use kernels::ConvGeometry;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Multiply-add counter for matmul, batched matmul and convolutions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub multiply_adds: u64,
}

impl OpCounter {
    pub(crate) fn add(&mut self, n: usize) {
        self.multiply_adds += n as u64;
    }
}

pub(crate) enum Op<T: Real> {
    Input,
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `b` matches the trailing dims of `a` and is repeated over the rest.
    AddBroadcast(Var, Var),
    MulBroadcast(Var, Var),
    /// Adds a constant (trailing-dims broadcast); gradient passes straight through.
    AddConst(Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Bmm {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Ln(Var),
    Recip(Var),
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Sum(Var),
    Mean(Var),
    SumLeading(Var),
    MeanLeading(Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeometry,
        cols: Vec<T>,
    },
    DepthwiseConv2d {
        x: Var,
        w: Var,
        geom: ConvGeometry,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        inner: usize,
        sizes: Vec<usize>,
    },
    /// `out[i] = x[index[i]]`; backward scatter-adds.
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Reshape(Var),
    /// Sparse linear map over rows: `out[r] += c * x[s]` for each `(r, s, c)`.
    CombineRows {
        x: Var,
        row_len: usize,
        terms: Vec<(usize, usize, T)>,
    },
}

pub(crate) struct Node<T: Real> {
    pub(crate) value: Vec<T>,
    pub(crate) shape: Vec<usize>,
    pub(crate) op: Op<T>,
    pub(crate) needs_grad: bool,
}

/// Recording of one forward pass.
pub struct Tape<'p, T: Real> {
    params: Option<&'p ParamStore<T>>,
    param_vars: HashMap<ParamId, Var>,
    pub(crate) nodes: Vec<Node<T>>,
    counter: OpCounter,
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Real> Tape<'p, T> {
    /// A tape with no parameter store; only inputs and leaves can be recorded.
    pub fn new() -> Self {
        Tape {
            params: None,
            param_vars: HashMap::new(),
            nodes: Vec::new(),
            counter: OpCounter::default(),
        }
    }

    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Tape {
            params: Some(params),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn counter(&self) -> OpCounter {
        self.counter
    }

    pub(crate) fn count(&mut self, n: usize) {
        self.counter.add(n);
    }

    /// Records a constant input (no gradient).
    pub fn input(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Input, false)
    }

    /// Records a leaf whose gradient is reported by [`Tape::backward`].
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, true)
    }

    /// Brings a parameter onto the tape. Repeated calls return the same var.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self
            .params
            .expect("tape has no parameter store; build it with Tape::with_params");
        let t = store.get(id);
        let v = self.push(
            t.data().to_vec(),
            t.shape().to_vec(),
            Op::Param(id),
            t.requires_grad(),
        );
        self.param_vars.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("tape nodes hold consistent shapes")
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        let n = &self.nodes[v.0];
        assert_eq!(n.value.len(), 1, "item() on non-scalar of shape {:?}", n.shape);
        n.value[0]
    }

    pub(crate) fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Runs reverse-mode differentiation from a scalar loss and consumes the
    /// tape. A loss that does not depend on any gradient-tracked value
    /// yields empty gradients.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let numel = self.nodes[loss.0].value.len();
        if numel != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        backward::run(self, loss)
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients<T: Real> {
    params: Vec<(ParamId, Vec<T>)>,
    leaves: HashMap<Var, Vec<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf recorded with [`Tape::leaf`]; `None` when the leaf
    /// is not connected to the loss.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.leaves.get(&v).map(Vec::as_slice)
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g.as_slice())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.params.iter().map(|(p, g)| (*p, g.as_slice()))
    }
}

#[cfg(test)]
mod tests;
