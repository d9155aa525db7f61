//! Named parameter storage and the two layers every model here is built from.

use std::ops::Index;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named collection of `f32` parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<f32>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    /// Gaussian-initialized parameter with standard deviation `std`.
    pub fn add_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut Rng) -> ParamId {
        let t = Tensor::from_fn(shape, |_| (rng.normal() * std) as f32);
        self.add(name, t)
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: &[usize], value: f32) -> ParamId {
        self.add(name, Tensor::from_fn(shape, |_| value))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<f32> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<f32> {
        &mut self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Records every parameter as a gradient-collecting leaf.
    pub fn bind(&self, g: &mut Graph<f32>) -> Bound {
        Bound(self.tensors.iter().map(|t| g.param(t)).collect())
    }

    /// Records every parameter as a constant; nothing downstream is taped.
    pub fn bind_frozen(&self, g: &mut Graph<f32>) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| g.leaf(&t.clone().with_requires_grad(false)))
                .collect(),
        )
    }

    /// Replaces values by name; every stored name must be present with the same shape.
    pub fn load_named(&mut self, records: &[(String, Tensor<f32>)]) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let (_, t) = records
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::format("checkpoint", format!("missing tensor `{name}`")))?;
            if t.shape() != self.tensors[i].shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!(
                        "tensor `{name}` has shape {:?}, model expects {:?}",
                        t.shape(),
                        self.tensors[i].shape()
                    ),
                ));
            }
            self.tensors[i] = t.clone();
        }
        Ok(())
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn to_records(&self) -> Vec<(String, Tensor<f32>)> {
        self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect()
    }
}

/// Graph handles for a [`Params`] collection, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(params: &mut Params, name: &str, fan_in: usize, fan_out: usize, std: f64, rng: &mut Rng) -> Self {
        let w = params.add_normal(format!("{name}.w"), &[fan_in, fan_out], std, rng);
        let b = params.add_const(format!("{name}.b"), &[fan_out], 0.0);
        Linear { w, b }
    }

    pub fn zeros(params: &mut Params, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = params.add_const(format!("{name}.w"), &[fan_in, fan_out], 0.0);
        let b = params.add_const(format!("{name}.b"), &[fan_out], 0.0);
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph<f32>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.w])?;
        g.add_bias(y, p[self.b])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(params: &mut Params, name: &str, width: usize) -> Self {
        LayerNorm {
            gamma: params.add_const(format!("{name}.gamma"), &[width], 1.0),
            beta: params.add_const(format!("{name}.beta"), &[width], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph<f32>, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p[self.gamma], p[self.beta], Self::EPS)
    }
}

/// Sums per-example gradient lists in order and scales by `1 / count`.
pub fn mean_grads(per_example: Vec<Vec<Vec<f32>>>) -> Vec<Vec<f32>> {
    let count = per_example.len().max(1) as f32;
    let mut it = per_example.into_iter();
    let Some(mut total) = it.next() else {
        return Vec::new();
    };
    for grads in it {
        for (t, g) in total.iter_mut().zip(grads) {
            for (a, b) in t.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
    for t in &mut total {
        for a in t.iter_mut() {
            *a /= count;
        }
    }
    total
}
