//! Ordered, named parameter collections.
//!
//! `Params` is the canonical storage for every trainable (or frozen) weight
//! set: weight-file IO, optimizer state, finite-difference checking and tape
//! leaf insertion all operate on it, keyed by canonical names like
//! `block3.attn.wq`.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    entries: Vec<(String, Tensor)>,
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        assert!(
            self.get(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    /// Replace an existing entry; the shape must not change.
    pub fn set(&mut self, name: &str, t: Tensor) {
        let entry = self
            .entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(entry.1.shape(), t.shape(), "shape change for {name}");
        entry.1 = t;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all entries.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Append every entry of `other` under `prefix.`.
    pub fn absorb(&mut self, prefix: &str, other: Params) {
        for (n, t) in other.entries {
            self.push(format!("{prefix}.{n}"), t);
        }
    }

    /// Split out the entries under `prefix.`, stripping the prefix.
    pub fn extract(&self, prefix: &str) -> Params {
        let dot = format!("{prefix}.");
        let mut out = Params::new();
        for (n, t) in &self.entries {
            if let Some(rest) = n.strip_prefix(&dot) {
                out.push(rest, t.clone());
            }
        }
        out
    }

    /// Insert all entries as tape leaves in order.
    pub fn leaves(&self, tape: &mut Tape, trainable: bool) -> Result<VarMap> {
        let mut vars = Vec::with_capacity(self.entries.len());
        for (n, t) in &self.entries {
            vars.push((n.clone(), tape.leaf(t.clone(), trainable)?));
        }
        Ok(VarMap { entries: vars })
    }
}

/// Name-to-handle lookup used by forward code; implementors may remap names.
pub trait VarLookup {
    fn var(&self, name: &str) -> Var;
}

/// Tape handles mirroring a `Params`, same order and names.
pub struct VarMap {
    entries: Vec<(String, Var)>,
}

impl VarLookup for VarMap {
    fn var(&self, name: &str) -> Var {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("no tape leaf named {name}"))
    }
}

/// View of a `VarMap` that prepends `prefix.` to every lookup.
pub struct ScopedVars<'a> {
    inner: &'a VarMap,
    prefix: &'a str,
}

impl VarLookup for ScopedVars<'_> {
    fn var(&self, name: &str) -> Var {
        self.inner.var(&format!("{}.{name}", self.prefix))
    }
}

impl VarMap {
    pub fn scoped<'a>(&'a self, prefix: &'a str) -> ScopedVars<'a> {
        ScopedVars { inner: self, prefix }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), *v))
    }

    /// Gradients for every leaf, aligned with the names; zeros where nothing
    /// flowed.
    pub fn grads(&self, tape: &Tape) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .map(|(n, v)| (n.clone(), tape.grad_or_zeros(*v)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn absorb_extract_round_trip() {
        let mut inner = Params::new();
        inner.push("w", Tensor::scalar(1.0));
        inner.push("b", Tensor::scalar(2.0));
        let mut outer = Params::new();
        outer.absorb("jbu", inner.clone());
        outer.push("other", Tensor::scalar(3.0));
        let back = outer.extract("jbu");
        assert_eq!(back, inner);
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_rejected() {
        let mut p = Params::new();
        p.push("x", Tensor::scalar(0.0));
        p.push("x", Tensor::scalar(1.0));
    }
}
