//! Minimal differentiable tensor engine.
//!
//! Values live in plain [`Tensor`]s (row-major `f64`). Computation is recorded
//! on a per-forward [`Graph`] tape whose [`Var`] handles support the usual
//! elementwise, linear-algebra and reduction operations; [`Graph::backward`]
//! replays the tape in reverse. Learnable parameters are held in a
//! [`ParamStore`] and bound into a graph on demand, so a store can be shared
//! read-only between independent tapes.

mod adam;
mod checkpoint;
mod gradcheck;
mod graph;
mod kernels;

pub use adam::{clip_grad_norm, AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, grad_check_params, grad_check_params_with, GradCheckReport};
pub use graph::{Fwd, Graph, Var};

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel(shape) != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Gaussian entries with standard deviation `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        }
    }

    /// Uniform entries in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        if !requires_grad {
            self.grad = None;
        }
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                len: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Adds `grad` into the gradient buffer. No-op for tensors that do not
    /// require gradients.
    pub fn accumulate_grad(&mut self, grad: &[f64]) -> Result<()> {
        if !self.requires_grad {
            return Ok(());
        }
        if grad.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![grad.len()],
            });
        }
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(grad).for_each(|(a, b)| *a += b),
            None => self.grad = Some(grad.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if self.requires_grad {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn grad_mut(&mut self) -> Option<&mut Vec<f64>> {
        self.grad.as_mut()
    }

    pub(crate) fn data_and_grad_mut(&mut self) -> (&mut [f64], Option<&mut Vec<f64>>) {
        (&mut self.data, self.grad.as_mut())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn clear_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }

    /// Adds the gradients collected on `graph`'s parameter leaves.
    pub fn accumulate_from(&mut self, graph: &Graph) -> Result<()> {
        for (id, grad) in graph.param_grads_for(self) {
            self.tensors[id.0].accumulate_grad(&grad)?;
        }
        Ok(())
    }

    /// Adds gradients collected elsewhere, e.g. by
    /// [`Graph::param_grads_for`] on another thread's tape.
    pub fn accumulate_grads(&mut self, grads: &[(ParamId, Vec<f64>)]) -> Result<()> {
        for (id, grad) in grads {
            self.tensors[id.0].accumulate_grad(grad)?;
        }
        Ok(())
    }

    pub fn grads_finite(&self) -> bool {
        self.tensors
            .iter()
            .filter_map(|t| t.grad())
            .all(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for t in &mut self.tensors {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|v| *v *= factor);
            }
        }
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Copies the values of every parameter of `other` into `self`, matching
    /// by name and shape.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        for (name, tensor) in other.iter() {
            let id = self
                .id(name)
                .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
            let dst = &mut self.tensors[id.0];
            if dst.shape() != tensor.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load_values",
                    lhs: dst.shape().to_vec(),
                    rhs: tensor.shape().to_vec(),
                });
            }
            dst.data_mut().copy_from_slice(tensor.data());
        }
        if other.len() != self.len() {
            let missing = self
                .names
                .iter()
                .find(|n| other.id(n).is_none())
                .cloned()
                .unwrap_or_default();
            return Err(Error::Checkpoint(format!("missing parameter `{missing}`")));
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for (name, t) in self.iter() {
            ck.push(name, t.shape(), t.data().to_vec());
        }
        ck
    }

    /// Restores values from a checkpoint holding (at least) every parameter.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        for i in 0..self.tensors.len() {
            let name = &self.names[i];
            let (shape, data) = ck
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if shape != self.tensors[i].shape() {
                return Err(Error::ShapeMismatch {
                    op: "load_checkpoint",
                    lhs: self.tensors[i].shape().to_vec(),
                    rhs: shape.to_vec(),
                });
            }
            self.tensors[i].data_mut().copy_from_slice(data);
        }
        Ok(())
    }
}
