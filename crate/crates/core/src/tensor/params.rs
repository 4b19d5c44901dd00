use std::collections::BTreeMap;

use super::tape::{Gradients, Tape, Var};
use super::value::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// A named persistent tensor. Non-trainable entries hold running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Ordered collection of named parameters and buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, trainable });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Ids of trainable entries whose name starts with any of `prefixes`.
    pub fn trainable_with_prefix(&self, prefixes: &[&str]) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.trainable && prefixes.iter().any(|pre| p.name.starts_with(pre)))
            .map(|(id, _)| id)
            .collect()
    }

    /// Overwrites the value of `name`, checking the shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
        let slot = &mut self.params[id.0].value;
        if slot.shape() != value.shape() {
            return Err(Error::Config(format!(
                "parameter {name}: expected shape {:?}, found {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// Places every entry on `tape` as a leaf; trainable ones require grad.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        let vars = self.params.iter().map(|p| tape.leaf(p.value.clone(), p.trainable)).collect();
        Bound { vars }
    }
}

/// Parameter handles on one tape, indexed like the originating store.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Per-parameter gradients; `None` where the loss does not reach.
    pub fn grads(&self, grads: &mut Gradients) -> Vec<Option<Vec<f64>>> {
        self.vars.iter().map(|v| grads.take_id(v.id)).collect()
    }
}
