use std::collections::HashMap;

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Option<Tensor>,
    trainable: bool,
}

/// Named parameter registry shared by models and optimizers.
///
/// Non-trainable entries (normalization statistics and the like) are saved
/// with the checkpoint but never touched by an optimizer.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
}

/// Graph handles for every entry of a store, produced by [`ParamStore::bind`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Registers a tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::contract("ParamStore::add", format!("duplicate name {name}")));
        }
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(Entry {
            name,
            value,
            grad: None,
            trainable,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// Looks up `name` and checks its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let id = self
            .id(name)
            .ok_or_else(|| TensorError::Format(format!("missing tensor {name}")))?;
        let got = self.get(id).shape();
        if got != shape {
            return Err(TensorError::Format(format!(
                "tensor {name} has shape {got:?}, expected {shape:?}"
            )));
        }
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.entries[id.0].grad.as_ref()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Records every entry on `g`; trainable ones become differentiable
    /// leaves when `train` is set.
    pub fn bind(&self, g: &mut Graph, train: bool) -> Result<Bound> {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                let t = e.value.clone().with_grad(train && e.trainable);
                g.leaf(t)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { vars })
    }

    /// Adds the gradients from one backward pass to the stored gradients.
    /// Trainable entries the loss never touched receive exact zeros.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients) {
        for (e, v) in self.entries.iter_mut().zip(&bound.vars) {
            if !e.trainable {
                continue;
            }
            let delta = grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(e.value.shape().to_vec()));
            match &mut e.grad {
                Some(acc) => {
                    for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                        *a += d;
                    }
                }
                None => e.grad = Some(delta.with_grad(false)),
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .filter_map(|e| e.grad.as_ref())
            .map(|g| g.sq_norm())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for g in self.entries.iter_mut().filter_map(|e| e.grad.as_mut()) {
                for v in g.data_mut() {
                    *v *= s;
                }
            }
        }
        norm
    }

    pub(crate) fn take_grad(&mut self, id: ParamId) -> Option<Tensor> {
        self.entries[id.0].grad.take()
    }
}

/// Weight initialization for layers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with standard deviation `1/sqrt(fan_in)`.
    LeCun,
    Normal(f64),
    Zeros,
}

impl Init {
    fn make<R: Rng + ?Sized>(self, shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
        match self {
            Init::LeCun => Tensor::randn(shape.to_vec(), 1.0 / (fan_in as f64).sqrt(), rng),
            Init::Normal(std) => Tensor::randn(shape.to_vec(), std, rng),
            Init::Zeros => Tensor::zeros(shape.to_vec()),
        }
    }
}

/// Affine layer over the last axis: `x·W + b`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.w"), init.make(&[input, output], input, rng), true)?;
        let b = store.add(format!("{name}.b"), Tensor::zeros([output]), true)?;
        Ok(Dense { w, b, input, output })
    }

    /// Rebinds to tensors already present in `store` (after loading).
    pub fn load(store: &ParamStore, name: &str) -> Result<Self> {
        let w = store
            .id(&format!("{name}.w"))
            .ok_or_else(|| TensorError::Format(format!("missing tensor {name}.w")))?;
        let shape = store.get(w).shape().to_vec();
        if shape.len() != 2 {
            return Err(TensorError::Format(format!("{name}.w must be rank 2")));
        }
        let b = store.expect(&format!("{name}.b"), &[shape[1]])?;
        Ok(Dense {
            w,
            b,
            input: shape[0],
            output: shape[1],
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.w))?;
        g.add_row(y, p.var(self.b))
    }
}

/// Temporal convolution layer over `[B, T, C]` inputs.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub input: usize,
    pub output: usize,
}

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        kernel: usize,
        input: usize,
        output: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(TensorError::contract("Conv1d::new", format!("kernel {kernel} must be odd")));
        }
        let w = store.add(
            format!("{name}.w"),
            init.make(&[kernel, input, output], kernel * input, rng),
            true,
        )?;
        let b = store.add(format!("{name}.b"), Tensor::zeros([output]), true)?;
        Ok(Conv1d {
            w,
            b,
            kernel,
            input,
            output,
        })
    }

    pub fn load(store: &ParamStore, name: &str) -> Result<Self> {
        let w = store
            .id(&format!("{name}.w"))
            .ok_or_else(|| TensorError::Format(format!("missing tensor {name}.w")))?;
        let shape = store.get(w).shape().to_vec();
        if shape.len() != 3 {
            return Err(TensorError::Format(format!("{name}.w must be rank 3")));
        }
        let b = store.expect(&format!("{name}.b"), &[shape[2]])?;
        Ok(Conv1d {
            w,
            b,
            kernel: shape[0],
            input: shape[1],
            output: shape[2],
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv1d(x, p.var(self.w), p.var(self.b))
    }
}
