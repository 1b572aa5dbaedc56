use std::collections::BTreeMap;

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Whether a parameter enters the graph as a trainable leaf or a constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BindMode {
    Trainable,
    Frozen,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Named tensors under a common scope. Graph bindings use `scope.name`, so
/// scopes must be unique among sets that share a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    scope: String,
    entries: BTreeMap<String, Param>,
}

impl ParameterSet {
    pub fn new(scope: impl Into<String>) -> Self {
        Self { scope: scope.into(), entries: BTreeMap::new() }
    }

    pub fn scope(&self) -> &str {
        &self.scope
    }

    /// Same tensors under a different scope, gradients dropped.
    pub fn rescoped(&self, scope: impl Into<String>) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|(k, p)| (k.clone(), Param { value: p.value.clone(), grad: None }))
            .collect();
        Self { scope: scope.into(), entries }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter `{name}` in `{}`",
                self.scope
            )));
        }
        self.entries.insert(name, Param { value, grad: None });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|p| &mut p.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).and_then(|p| p.grad.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar element count.
    pub fn count(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    pub fn full_name(&self, name: &str) -> String {
        format!("{}.{}", self.scope, name)
    }

    pub fn bind(&self, graph: &mut Graph, name: &str, mode: BindMode) -> Result<NodeId> {
        let value = self.get(name).ok_or_else(|| {
            Error::InvalidArgument(format!("no parameter `{name}` in `{}`", self.scope))
        })?;
        match mode {
            BindMode::Trainable => graph.param(&self.full_name(name), value),
            BindMode::Frozen => graph.constant(value.clone()),
        }
    }

    /// Copies gradients of every entry bound in `graph`. Entries the graph
    /// never saw keep `grad = None`. Returns whether any entry was bound.
    pub fn pull_grads(&mut self, graph: &Graph) -> bool {
        let scope = self.scope.clone();
        let mut any = false;
        for (name, p) in self.entries.iter_mut() {
            p.grad = graph.param_grad(&format!("{scope}.{name}"));
            any |= p.grad.is_some();
        }
        any
    }

    pub fn has_grads(&self) -> bool {
        !self.entries.is_empty() && self.entries.values().all(|p| p.grad.is_some())
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad = None;
        }
    }

    /// Order-sensitive digest over names and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0x8422_2325_cbf2_9ce4;
        for (name, p) in &self.entries {
            for b in name.bytes() {
                h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
            }
            h = (h ^ p.value.checksum()).wrapping_mul(0x0100_0000_01b3);
        }
        h
    }
}
