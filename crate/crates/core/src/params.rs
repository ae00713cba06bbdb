//! Named parameter arrays shared by the fusion pretrainer and the encoder.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Which gradient-modulation branch a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    Shared,
    Fig,
    Ocr,
}

impl Branch {
    pub fn tag(self) -> &'static str {
        match self {
            Branch::Shared => "shared",
            Branch::Fig => "fig",
            Branch::Ocr => "ocr",
        }
    }

    pub fn from_tag(s: &str) -> Option<Self> {
        match s {
            "shared" => Some(Branch::Shared),
            "fig" => Some(Branch::Fig),
            "ocr" => Some(Branch::Ocr),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub branch: Branch,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Graph handles for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

impl core::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, branch: Branch) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            branch,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn total_size(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Binds every parameter as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.params.iter().map(|p| g.leaf(p.value.clone())).collect())
    }

    /// Binds every parameter as a constant (inference, no gradients).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound(self.params.iter().map(|p| g.constant(p.value.clone())).collect())
    }

    pub fn grads(&self, g: &Graph, bound: &Bound) -> Vec<Tensor> {
        bound.0.iter().map(|&v| g.grad(v)).collect()
    }

    /// Replaces all values with same-shaped arrays, e.g. from a checkpoint.
    pub fn load_values(&mut self, values: Vec<(String, Tensor)>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Config(alloc::format!(
                "expected {} parameter arrays, found {}",
                self.params.len(),
                values.len()
            )));
        }
        for (p, (name, t)) in self.params.iter_mut().zip(values) {
            if p.name != name || p.value.shape() != t.shape() {
                return Err(Error::Dimension {
                    op: "load_values",
                    left: p.value.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            p.value = t;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}
