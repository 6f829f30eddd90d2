//! Named parameter registry: every model parameter appears exactly once,
//! tagged frozen/trainable/adapter and assigned a learning-rate group.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamStatus {
    Frozen,
    Trainable,
    Adapter,
}

impl ParamStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamStatus::Frozen => "frozen",
            ParamStatus::Trainable => "trainable",
            ParamStatus::Adapter => "adapter",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrGroup {
    Base,
    ProjectionX100,
}

impl LrGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            LrGroup::Base => "base",
            LrGroup::ProjectionX100 => "projection_x100",
        }
    }
}

pub struct RegistryEntry<T: Element> {
    pub tensor: Tensor<T>,
    pub status: ParamStatus,
    pub lr_group: LrGroup,
}

/// Deterministically ordered (by name) map of model parameters. Iteration
/// order drives optimizer updates and checkpoint layout, so it must be
/// stable across runs.
pub struct ParameterRegistry<T: Element> {
    entries: BTreeMap<String, RegistryEntry<T>>,
}

impl<T: Element> Default for ParameterRegistry<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParameterRegistry<T> {
    pub fn new() -> Self {
        ParameterRegistry { entries: BTreeMap::new() }
    }

    pub fn register(&mut self, name: &str, tensor: &Tensor<T>, status: ParamStatus, lr_group: LrGroup) {
        assert!(
            !self.entries.contains_key(name),
            "parameter `{}` registered twice",
            name
        );
        tensor.set_requires_grad(status != ParamStatus::Frozen);
        self.entries.insert(
            name.to_string(),
            RegistryEntry { tensor: tensor.clone(), status, lr_group },
        );
    }

    pub fn get(&self, name: &str) -> Option<&RegistryEntry<T>> {
        self.entries.get(name)
    }

    pub fn set_status(&mut self, name: &str, status: ParamStatus) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownTarget(name.to_string()))?;
        entry.status = status;
        entry.tensor.set_requires_grad(status != ParamStatus::Frozen);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &RegistryEntry<T>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_params(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }

    pub fn count_by_status(&self, status: ParamStatus) -> usize {
        self.entries
            .values()
            .filter(|e| e.status == status)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Parameters that receive optimizer updates, in name order.
    pub fn trainable(&self) -> impl Iterator<Item = (&String, &RegistryEntry<T>)> {
        self.entries.iter().filter(|(_, e)| e.status != ParamStatus::Frozen)
    }

    pub fn zero_grads(&self) {
        for entry in self.entries.values() {
            entry.tensor.zero_grad();
        }
    }

    /// Audit dump: `name,status,lr_group,param_count` lines.
    pub fn audit_csv(&self) -> String {
        let mut out = String::from("name,status,lr_group,param_count\n");
        for (name, e) in &self.entries {
            out.push_str(&format!(
                "{},{},{},{}\n",
                name,
                e.status.as_str(),
                e.lr_group.as_str(),
                e.tensor.numel()
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_tracks_status_and_counts() {
        let mut reg = ParameterRegistry::<f64>::new();
        let w = Tensor::param(&[2, 2], vec![0.0; 4]).unwrap();
        let b = Tensor::param(&[2], vec![0.0; 2]).unwrap();
        reg.register("w", &w, ParamStatus::Frozen, LrGroup::Base);
        reg.register("b", &b, ParamStatus::Trainable, LrGroup::Base);
        assert!(!w.requires_grad());
        assert!(b.requires_grad());
        assert_eq!(reg.total_params(), 6);
        assert_eq!(reg.count_by_status(ParamStatus::Frozen), 4);
        assert_eq!(reg.count_by_status(ParamStatus::Trainable), 2);
    }

    #[test]
    #[should_panic(expected = "registered twice")]
    fn duplicate_registration_panics() {
        let mut reg = ParameterRegistry::<f64>::new();
        let w = Tensor::param(&[1], vec![0.0]).unwrap();
        reg.register("w", &w, ParamStatus::Trainable, LrGroup::Base);
        reg.register("w", &w, ParamStatus::Trainable, LrGroup::Base);
    }
}
