//! Named parameter stores and gradient maps. BTreeMap keeps every iteration
//! order (checkpoints, optimizer sweeps, hashing) deterministic.

use std::collections::BTreeMap;

use super::graph::NodeId;
use super::tensor::Tensor;
use super::NnError;

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        trainable: bool,
    ) -> Result<(), NnError> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(NnError::DuplicateParam(name));
        }
        self.params.insert(name, Param { value, trainable });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param, NnError> {
        self.params
            .get(name)
            .ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor, NnError> {
        Ok(&self.get(name)?.value)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor, NnError> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<(), NnError> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| NnError::MissingParam(name.to_string()))?;
        p.value = value;
        Ok(())
    }

    /// Sets the trainable flag on every parameter whose name satisfies the
    /// predicate; returns how many matched.
    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool, trainable: bool) -> usize {
        let mut n = 0;
        for (name, p) in self.params.iter_mut() {
            if pred(name) {
                p.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Checksum over names, shapes and raw values of parameters selected by
    /// the predicate; used to prove subsets stay frozen across training.
    pub fn hash_where(&self, pred: impl Fn(&str) -> bool) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for (name, p) in &self.params {
            if pred(name) {
                h.update(name.as_bytes());
                h.update(&p.value.crc32().to_le_bytes());
            }
        }
        h.finalize()
    }

    pub fn hash_all(&self) -> u32 {
        self.hash_where(|_| true)
    }
}

/// Node bindings produced by [`super::Graph::bind`].
pub struct ParamNodes {
    pub(crate) nodes: BTreeMap<String, NodeId>,
}

impl ParamNodes {
    pub fn node(&self, name: &str) -> Result<NodeId, NnError> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| NnError::MissingParam(name.to_string()))
    }
}

/// Per-parameter gradient tensors keyed by name.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: String, g: Tensor) {
        self.map.insert(name, g);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Elementwise `self += other`, inserting entries absent on the left.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (name, g) in &other.map {
            match self.map.get_mut(name) {
                Some(mine) => {
                    for (dst, &src) in mine.data_mut().iter_mut().zip(g.data()) {
                        *dst += src;
                    }
                }
                None => {
                    self.map.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, c: f32) {
        for g in self.map.values_mut() {
            for v in g.data_mut() {
                *v *= c;
            }
        }
    }

    /// Global L2 norm over every entry; handy for logging.
    pub fn l2_norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|g| g.data().iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[2]), true).unwrap();
        assert!(matches!(
            s.insert("w", Tensor::zeros(&[2]), true),
            Err(NnError::DuplicateParam(_))
        ));
    }

    #[test]
    fn trainable_flags_flip_by_predicate() {
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::zeros(&[1]), true).unwrap();
        s.insert("a.lora.b", Tensor::zeros(&[1]), true).unwrap();
        s.insert("b.w", Tensor::zeros(&[1]), true).unwrap();
        let n = s.set_trainable_where(|n| !n.contains(".lora."), false);
        assert_eq!(n, 2);
        assert!(!s.get("a.w").unwrap().trainable);
        assert!(s.get("a.lora.b").unwrap().trainable);
    }

    #[test]
    fn hash_where_sees_only_selected_subset() {
        let mut s = ParamStore::new();
        s.insert("frozen.w", Tensor::from_vec(vec![1.0]), false)
            .unwrap();
        s.insert("live.w", Tensor::from_vec(vec![2.0]), true).unwrap();
        let before = s.hash_where(|n| n.starts_with("frozen"));
        s.tensor_mut("live.w").unwrap().data_mut()[0] = 99.0;
        assert_eq!(before, s.hash_where(|n| n.starts_with("frozen")));
        s.tensor_mut("frozen.w").unwrap().data_mut()[0] = 3.0;
        assert_ne!(before, s.hash_where(|n| n.starts_with("frozen")));
    }

    #[test]
    fn gradients_accumulate_elementwise() {
        let mut a = Gradients::new();
        a.insert("w".into(), Tensor::from_vec(vec![1.0, 2.0]));
        let mut b = Gradients::new();
        b.insert("w".into(), Tensor::from_vec(vec![0.5, -1.0]));
        b.insert("v".into(), Tensor::from_vec(vec![3.0]));
        a.accumulate(&b);
        assert_eq!(a.get("w").unwrap().data(), &[1.5, 1.0]);
        assert_eq!(a.get("v").unwrap().data(), &[3.0]);
        a.scale(2.0);
        assert_eq!(a.get("v").unwrap().data(), &[6.0]);
    }
}
