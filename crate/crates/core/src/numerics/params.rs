use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Array;
use crate::error::{Error, Result};

/// A named array plus optimizer metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub value: Array,
    /// Multiplier applied to the optimizer's base learning rate.
    pub lr_mult: f64,
    /// Buffers such as batch-norm running statistics are stored here too but never
    /// receive gradients.
    pub trainable: bool,
}

/// Named parameters, iterated in sorted name order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    entries: BTreeMap<String, Parameter>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) -> Result<()> {
        self.insert_with(name, value, 1.0, true)
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Array) -> Result<()> {
        self.insert_with(name, value, 0.0, false)
    }

    pub fn insert_with(
        &mut self,
        name: impl Into<String>,
        value: Array,
        lr_mult: f64,
        trainable: bool,
    ) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        self.entries.insert(
            name,
            Parameter {
                value,
                lr_mult,
                trainable,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Array> {
        self.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// Replaces the value of an existing parameter, keeping its shape.
    pub fn set_value(&mut self, name: &str, value: Array) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_value",
                format!("`{name}`: {:?} vs {:?}", p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Parameter> {
        self.entries.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Parameter)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Moves every entry of `other` into `self`; names must not collide.
    pub fn merge(&mut self, other: ParameterSet) -> Result<()> {
        for (name, p) in other.entries {
            if self.entries.contains_key(&name) {
                return Err(Error::DuplicateParameter(name));
            }
            self.entries.insert(name, p);
        }
        Ok(())
    }

    /// Removes and returns every entry whose name starts with `prefix`.
    pub fn split_prefix(&mut self, prefix: &str) -> ParameterSet {
        let keys: Vec<String> = self
            .entries
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect();
        let mut out = ParameterSet::new();
        for k in keys {
            let p = self.entries.remove(&k).expect("key listed above");
            out.entries.insert(k, p);
        }
        out
    }

    /// Sum of squared entries over trainable parameters whose name starts with any prefix.
    pub fn sum_sq_with_prefixes(&self, prefixes: &[&str]) -> f64 {
        self.entries
            .iter()
            .filter(|(n, p)| p.trainable && prefixes.iter().any(|pre| n.starts_with(pre)))
            .map(|(_, p)| p.value.sum_sq())
            .sum()
    }

    /// True when every array is bitwise identical.
    pub fn bitwise_eq(&self, other: &ParameterSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, pa), (b, pb))| {
                    a == b
                        && pa.value.shape() == pb.value.shape()
                        && pa
                            .value
                            .data()
                            .iter()
                            .zip(pb.value.data())
                            .all(|(x, y)| x.to_bits() == y.to_bits())
                })
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    entries: BTreeMap<String, Array>,
}

impl Gradients {
    pub(crate) fn accumulate(&mut self, name: &str, grad: &Array) {
        match self.entries.get_mut(name) {
            Some(acc) => {
                for (a, g) in acc.data_mut().iter_mut().zip(grad.data()) {
                    *a += g;
                }
            }
            None => {
                self.entries.insert(name.to_string(), grad.clone());
            }
        }
    }

    pub(crate) fn ensure_zero(&mut self, name: &str, shape: &[usize]) {
        self.entries
            .entry(name.to_string())
            .or_insert_with(|| Array::zeros(shape));
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.entries.get(name)
    }

    /// Gradient for `name`, or zeros shaped like the parameter when it did not
    /// contribute to the loss.
    pub fn get_or_zero(&self, params: &ParameterSet, name: &str) -> Result<Array> {
        match self.entries.get(name) {
            Some(g) => Ok(g.clone()),
            None => Ok(Array::zeros(params.value(name)?.shape())),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array)> {
        self.entries.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(Array::is_finite)
    }
}
