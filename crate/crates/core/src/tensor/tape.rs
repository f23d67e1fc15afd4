//! Wengert-list tape for reverse-mode differentiation.
//!
//! Every op appends one node holding its output value, the handles of its
//! inputs, and (when some input requires a gradient) a closure computing the
//! vector-Jacobian product for each input. `backward` replays the closures in
//! reverse order and drains the tape.

use std::collections::{BTreeMap, HashMap};
use std::time::{Duration, Instant};

use super::{NdValue, ParamId, ParamStore, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Arguments handed to an adjoint rule.
pub struct BackwardCtx<'a> {
    pub grad: &'a [f64],
    pub inputs: Vec<&'a NdValue>,
    pub output: &'a NdValue,
}

/// Adjoint rule: one optional input-gradient per parent, in parent order.
pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>>>;

struct Node {
    op: &'static str,
    value: NdValue,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Multiply-add counts per op kind, accumulated as ops are recorded.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OpStats {
    pub total: u64,
    pub by_op: BTreeMap<&'static str, u64>,
}

impl OpStats {
    pub fn get(&self, op: &str) -> u64 {
        self.by_op.get(op).copied().unwrap_or(0)
    }
}

/// Wall-clock time per op kind. Forward time is the gap since the previous
/// record, so it includes any caller work between ops.
#[derive(Clone, Debug, Default)]
pub struct OpTimes {
    pub forward: BTreeMap<&'static str, Duration>,
    pub backward: BTreeMap<&'static str, Duration>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    param_of: HashMap<usize, ParamId>,
    stats: OpStats,
    times: OpTimes,
    last: Option<Instant>,
    no_grad: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that records values but never adjoint rules.
    pub fn inference() -> Self {
        Self { no_grad: true, ..Self::default() }
    }

    pub fn is_inference(&self) -> bool {
        self.no_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn stats(&self) -> &OpStats {
        &self.stats
    }

    pub fn times(&self) -> &OpTimes {
        &self.times
    }

    pub fn value(&self, v: Var) -> &NdValue {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: NdValue) -> Var {
        self.push_leaf("constant", value, false)
    }

    /// A leaf that receives a gradient on `backward`.
    pub fn leaf(&mut self, value: NdValue) -> Var {
        let rg = !self.no_grad;
        self.push_leaf("leaf", value, rg)
    }

    /// Binds a stored parameter onto the tape, once per tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push_leaf("param", store.value(id).clone(), !self.no_grad);
        self.params.insert(id, v);
        self.param_of.insert(v.0, id);
        v
    }

    fn push_leaf(&mut self, op: &'static str, value: NdValue, requires_grad: bool) -> Var {
        self.last = Some(Instant::now());
        self.nodes.push(Node { op, value, parents: Vec::new(), requires_grad, backward: None });
        Var(self.nodes.len() - 1)
    }

    /// Records an op. The adjoint closure is dropped when no parent needs a
    /// gradient, so constant subgraphs cost nothing on the way back.
    pub fn push(
        &mut self,
        op: &'static str,
        value: NdValue,
        parents: &[Var],
        flops: u64,
        backward: impl Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Var {
        let requires_grad = !self.no_grad && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.stats.total += flops;
        *self.stats.by_op.entry(op).or_insert(0) += flops;
        let now = Instant::now();
        if let Some(prev) = self.last {
            *self.times.forward.entry(op).or_default() += now - prev;
        }
        self.last = Some(now);
        let backward: Option<BackwardFn> =
            if requires_grad { Some(Box::new(backward)) } else { None };
        self.nodes.push(Node {
            op,
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            requires_grad,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    /// Replays adjoints from a scalar `loss` and drains the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, TensorError> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.nodes[loss.0].value.shape()),
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves = HashMap::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let (before, rest) = self.nodes.split_at(i);
            let node = &rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(bw) = &node.backward else {
                leaves.insert(i, g);
                continue;
            };
            let ctx = BackwardCtx {
                grad: &g,
                inputs: node.parents.iter().map(|&p| &before[p].value).collect(),
                output: &node.value,
            };
            let started = Instant::now();
            let input_grads = bw(&ctx);
            *self.times.backward.entry(node.op).or_default() += started.elapsed();
            debug_assert_eq!(input_grads.len(), node.parents.len(), "op {}", node.op);
            for (&p, ig) in node.parents.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !before[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(ig.len(), before[p].value.len(), "op {} parent {p}", node.op);
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(ig),
                }
            }
        }

        let by_param = self
            .param_of
            .iter()
            .filter_map(|(idx, id)| leaves.get(idx).map(|g| (*id, g.clone())))
            .collect();
        self.nodes.clear();
        self.params.clear();
        self.param_of.clear();
        Ok(Gradients { by_node: leaves, by_param })
    }
}

/// Gradients of a scalar with respect to every leaf that reached it.
#[derive(Debug, Default)]
pub struct Gradients {
    by_node: HashMap<usize, Vec<f64>>,
    by_param: HashMap<ParamId, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.by_node.get(&v.0).map(|g| g.as_slice())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.by_param.get(&id).map(|g| g.as_slice())
    }

    /// One gradient buffer per stored parameter; unused parameters get zeros.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Vec<f64>> {
        store
            .ids()
            .map(|id| match self.by_param.get(&id) {
                Some(g) => g.clone(),
                None => vec![0.0; store.value(id).len()],
            })
            .collect()
    }
}
