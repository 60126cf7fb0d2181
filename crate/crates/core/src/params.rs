//! Named parameter storage and the JSON parameter-map format.
//!
//! A parameter map serializes as a JSON object keyed by parameter name,
//! each value `{"shape": [..], "data": [..]}` with the data in row-major
//! order. Floats use serde_json's shortest round-trip decimal form (at most
//! 17 significant digits), so a save/load cycle is bit-exact.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub type ParamMap = BTreeMap<String, ParamEntry>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
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

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn size(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter on `tape` as a tracked leaf; the returned
    /// vector is indexed by [`ParamId::index`].
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Registers every parameter as an untracked constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }

    /// Gradients of the bound parameters after a backward pass.
    pub fn collect_grads(&self, tape: &Tape, bound: &[Var]) -> Vec<Vec<f64>> {
        bound
            .iter()
            .zip(&self.tensors)
            .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
            .collect()
    }

    pub fn to_map(&self) -> ParamMap {
        self.iter()
            .map(|(name, t)| {
                (
                    name.to_string(),
                    ParamEntry {
                        shape: t.shape().to_vec(),
                        data: t.data().to_vec(),
                    },
                )
            })
            .collect()
    }

    /// Overwrites every parameter from `map`; names and shapes must match
    /// exactly.
    pub fn load_map(&mut self, map: &ParamMap) -> Result<()> {
        if map.len() != self.len() {
            return Err(Error::Config(format!(
                "parameter map has {} entries, model expects {}",
                map.len(),
                self.len()
            )));
        }
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let entry = map
                .get(name)
                .ok_or_else(|| Error::Config(format!("parameter `{name}` missing from map")))?;
            if entry.shape != t.shape() {
                return Err(Error::Config(format!(
                    "parameter `{name}`: shape {:?} in map, {:?} expected",
                    entry.shape,
                    t.shape()
                )));
            }
            *t = Tensor::new(entry.shape.clone(), entry.data.clone())?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_map())?)
    }
}
