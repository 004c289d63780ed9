//! Trainable parameter registry.
//!
//! Parameters are owned here, not by layers; layers hold `ParamId` handles.
//! Every parameter is assigned to exactly one optimizer group at registration,
//! which is what lets the training loop step modality encoders independently.

use serde::{Deserialize, Serialize};

use crate::numerics::matrix::Matrix;
use crate::numerics::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Optimizer group tag. Five modality-encoder groups plus one for
/// fusion + detector parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    EncoderImagePrimary,
    EncoderImageBlip,
    EncoderTextPrimary,
    EncoderTextBlip,
    EncoderJoint,
    Head,
}

impl Group {
    pub const ALL: [Group; 6] = [
        Group::EncoderImagePrimary,
        Group::EncoderImageBlip,
        Group::EncoderTextPrimary,
        Group::EncoderTextBlip,
        Group::EncoderJoint,
        Group::Head,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Group::EncoderImagePrimary => "enc_z_i1",
            Group::EncoderImageBlip => "enc_z_i2",
            Group::EncoderTextPrimary => "enc_z_t1",
            Group::EncoderTextBlip => "enc_z_t2",
            Group::EncoderJoint => "enc_z_b",
            Group::Head => "head",
        }
    }
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    group: Group,
    value: Matrix,
}

#[derive(Debug, Clone, Default)]
pub struct Params {
    entries: Vec<Entry>,
}

impl Params {
    pub fn new() -> Self {
        Params { entries: Vec::new() }
    }

    /// Register a parameter initialized to zero.
    pub fn zeros(&mut self, name: &str, group: Group, rows: usize, cols: usize) -> ParamId {
        self.register(name, group, Matrix::zeros(rows, cols))
    }

    /// Register a parameter with scaled-normal init. The draw comes from a
    /// stream named after the parameter, so the init of one parameter never
    /// depends on which other parameters exist.
    pub fn normal(
        &mut self,
        name: &str,
        group: Group,
        rows: usize,
        cols: usize,
        std: f64,
        seed: u64,
    ) -> ParamId {
        let mut rng = RngStream::new(seed, &format!("init/{name}"));
        let data = (0..rows * cols).map(|_| std * rng.next_normal()).collect();
        self.register(name, group, Matrix::from_vec(rows, cols, data))
    }

    pub fn register(&mut self, name: &str, group: Group, value: Matrix) -> ParamId {
        assert!(
            !self.entries.iter().any(|e| e.name == name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            group,
            value,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> Group {
        self.entries[id.0].group
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn ids_in_group(&self, group: Group) -> Vec<ParamId> {
        self.ids().filter(|&id| self.group(id) == group).collect()
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.data.len()).sum()
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_partition_parameters() {
        let mut p = Params::new();
        p.zeros("a", Group::Head, 2, 2);
        p.zeros("b", Group::EncoderJoint, 3, 1);
        p.normal("c", Group::Head, 4, 4, 0.1, 9);
        let total: usize = Group::ALL.iter().map(|g| p.ids_in_group(*g).len()).sum();
        assert_eq!(total, p.len());
    }

    #[test]
    fn named_init_is_stable_under_registration_order() {
        let mut p1 = Params::new();
        let a1 = p1.normal("w", Group::Head, 2, 3, 1.0, 5);
        let mut p2 = Params::new();
        p2.normal("other", Group::Head, 7, 7, 1.0, 5);
        let a2 = p2.normal("w", Group::Head, 2, 3, 1.0, 5);
        assert_eq!(p1.get(a1).data, p2.get(a2).data);
    }
}
