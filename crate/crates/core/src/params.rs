//! Named parameter storage and the per-forward session that binds stored
//! tensors to graph variables.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// What a stored tensor is for. Only `Weight` and `Arch` tensors are
/// learnable; `Buffer` holds running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    Weight,
    Arch,
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Entry<F> {
    pub name: String,
    pub group: Group,
    pub tensor: Tensor<F>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    entries: Vec<Entry<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, mut tensor: Tensor<F>) -> ParamId {
        tensor.set_requires_grad(group != Group::Buffer);
        self.entries.push(Entry {
            name: name.into(),
            group,
            tensor,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| F::of(rng.random_range(-bound..bound))).collect();
        self.add(name, Group::Weight, Tensor::new(shape, data))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &Entry<F> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[Entry<F>] {
        &self.entries
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn ids(&self, group: Group) -> Vec<ParamId> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.group == group)
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    /// Number of learnable scalars in `group`.
    pub fn numel(&self, group: Group) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.tensor.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.zero_grad());
    }

    pub fn replace_data(&mut self, id: ParamId, data: Vec<F>) {
        let t = &mut self.entries[id.0].tensor;
        assert_eq!(
            t.len(),
            data.len(),
            "replacement for {} has wrong length",
            self.entries[id.0].name
        );
        t.data_mut().copy_from_slice(&data);
    }
}

/// One forward pass: a fresh graph plus the store it reads from.
///
/// `grad_weights` / `grad_arch` decide which stored groups become
/// gradient-tracking leaves; the rest enter the graph as constants.
pub struct Session<'a, F: Real> {
    pub graph: Graph<F>,
    pub store: &'a mut ParamStore<F>,
    pub training: bool,
    pub grad_weights: bool,
    pub grad_arch: bool,
    bound: BTreeMap<ParamId, Var>,
}

impl<'a, F: Real> Session<'a, F> {
    pub fn new(store: &'a mut ParamStore<F>, training: bool) -> Self {
        Self {
            graph: Graph::new(),
            store,
            training,
            grad_weights: training,
            grad_arch: false,
            bound: BTreeMap::new(),
        }
    }

    pub fn with_grads(mut self, weights: bool, arch: bool) -> Self {
        self.grad_weights = weights;
        self.grad_arch = arch;
        self
    }

    /// Graph variable for a stored tensor; bound once per session.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let e = &self.store.entries[id.0];
        let rg = match e.group {
            Group::Weight => self.grad_weights,
            Group::Arch => self.grad_arch,
            Group::Buffer => false,
        };
        let v = self.graph.leaf(e.tensor.shape().to_vec(), e.tensor.data().to_vec(), rg);
        self.bound.insert(id, v);
        v
    }

    pub fn input(&mut self, t: &Tensor<F>) -> Var {
        self.graph.constant(t)
    }

    /// Runs the reverse sweep and adds the gradients of every bound,
    /// gradient-tracking parameter into the store.
    pub fn backward(&mut self, loss: Var) {
        self.graph.backward(loss);
        for (&id, &v) in &self.bound {
            if let Some(g) = self.graph.grad(v) {
                self.store.entries[id.0].tensor.accumulate_grad(g);
            }
        }
    }

    pub fn bound_params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.bound.keys().copied()
    }
}
