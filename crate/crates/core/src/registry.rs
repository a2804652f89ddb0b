//! Named, hierarchical store of trainable tensors.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub frozen: bool,
    pub grad: Option<Tensor>,
}

/// Parameters keyed by dot-separated path. Iteration is lexicographic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterRegistry {
    entries: BTreeMap<String, Parameter>,
}

impl ParameterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Registry(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(
            name.to_string(),
            Parameter {
                value,
                frozen: false,
                grad: None,
            },
        );
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Registry(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Registry(format!("unknown parameter `{name}`")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name).map(|p| &p.value)
    }

    /// Replaces a value, keeping the shape.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.value.shape() != value.shape() {
            return Err(Error::dim("set_value", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn remove_prefix(&mut self, prefix: &str) -> usize {
        let before = self.entries.len();
        self.entries.retain(|k, _| !has_prefix(k, prefix));
        before - self.entries.len()
    }

    pub fn set_frozen_where(&mut self, frozen: bool, mut pred: impl FnMut(&str) -> bool) {
        for (k, p) in &mut self.entries {
            if pred(k) {
                p.frozen = frozen;
            }
        }
    }

    pub fn freeze_all(&mut self) {
        self.set_frozen_where(true, |_| true);
    }

    pub fn unfreeze_all(&mut self) {
        self.set_frozen_where(false, |_| true);
    }

    pub fn trainable_names(&self) -> Vec<&str> {
        self.iter().filter(|(_, p)| !p.frozen).map(|(k, _)| k).collect()
    }

    pub fn trainable_numel(&self) -> usize {
        self.iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(_, p)| p.value.numel())
            .sum()
    }

    pub fn numel(&self) -> usize {
        self.iter().map(|(_, p)| p.value.numel()).sum()
    }

    /// Adds `grad` into the accumulator of a trainable parameter.
    pub fn accumulate_grad(&mut self, name: &str, grad: &[Scalar]) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.frozen {
            return Ok(());
        }
        if grad.len() != p.value.numel() {
            return Err(Error::dim("accumulate_grad", p.value.shape(), &[grad.len()]));
        }
        match &mut p.grad {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(grad)
                .for_each(|(a, g)| *a += g),
            None => p.grad = Some(Tensor::new(p.value.shape(), grad.to_vec())?),
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad = None;
        }
    }

    /// FNV-1a digest over names and value bits of the selected entries.
    pub fn checksum(&self, mut pred: impl FnMut(&str, &Parameter) -> bool) -> u64 {
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(PRIME);
            }
        };
        for (k, p) in &self.entries {
            if !pred(k, p) {
                continue;
            }
            eat(k.as_bytes());
            for v in p.value.data() {
                eat(&v.to_le_bytes());
            }
        }
        h
    }
}

/// True when `name` equals `prefix` or lives under it in the dotted hierarchy.
pub fn has_prefix(name: &str, prefix: &str) -> bool {
    name == prefix
        || (name.len() > prefix.len()
            && name.starts_with(prefix)
            && name.as_bytes()[prefix.len()] == b'.')
}
