//! Named parameter storage shared by all networks.
//!
//! Parameters are registered under slash-separated names
//! (`gen/lstm_p/w`, `fen/conv0/b`, ...) so optimizer groups and checkpoints
//! can select by prefix.

use crate::tensor::Tensor;
use std::collections::HashMap;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) u32);

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.tensors.len() as u32);
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0 as usize]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0 as usize]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0 as usize]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len() as u32).map(ParamId)
    }

    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.ids().filter(move |&id| self.name(id).starts_with(prefix))
    }

    /// A store of identical names/shapes with all entries zeroed
    /// (gradient and optimizer-moment buffers).
    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.dims()))
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    pub fn zero_all(&mut self) {
        for t in &mut self.tensors {
            t.fill(0.0);
        }
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }

    /// Copy values for every name present in both stores (shape-checked).
    pub fn copy_matching_from(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for (name, &oid) in &other.by_name {
            if let Some(id) = self.by_name.get(name).copied() {
                assert_eq!(
                    self.tensor(id).dims(),
                    other.tensor(oid).dims(),
                    "shape mismatch for {name}"
                );
                self.tensors[id.0 as usize] = other.tensor(oid).clone();
                copied += 1;
            }
        }
        copied
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefix_selection() {
        let mut ps = ParamStore::new();
        ps.add("gen/a", Tensor::zeros(&[2, 2]));
        ps.add("gen/b", Tensor::zeros(&[2, 2]));
        ps.add("disc/a", Tensor::zeros(&[2, 2]));
        let gen: Vec<_> = ps.ids_with_prefix("gen/").collect();
        assert_eq!(gen.len(), 2);
    }

    #[test]
    fn copy_matching_respects_names() {
        let mut a = ParamStore::new();
        a.add("x", Tensor::zeros(&[1, 2]));
        a.add("y", Tensor::zeros(&[1, 2]));
        let mut b = ParamStore::new();
        let bx = b.add("x", Tensor::new(vec![1, 2], vec![3.0, 4.0]));
        b.add("z", Tensor::zeros(&[1, 1]));
        let n = a.copy_matching_from(&b);
        assert_eq!(n, 1);
        assert_eq!(a.tensor(a.id_of("x").unwrap()).data(), b.tensor(bx).data());
    }
}
