//! Named parameter store: every learned tensor in the model lives here under
//! a dotted name, which is also the checkpoint key.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SsmnError};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        match self.index.get(name) {
            Some(&i) => self.entries[i].1 = t,
            None => {
                self.index.insert(name.to_string(), self.entries.len());
                self.entries.push((name.to_string(), t));
            }
        }
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.entries[i].1
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.entries[i].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
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

    pub fn zero_grads(&mut self) {
        for (_, t) in self.entries.iter_mut() {
            t.zero_grad();
        }
    }

    /// Glorot-uniform weight in +-sqrt(6 / (fan_in + fan_out)).
    pub fn init_weight(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, Tensor::from_vec(shape, data).expect("init weight"));
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }
}

/// Records which tape leaves mirror which store entries, so backward results
/// can be pulled back into the store's grad slots.
#[derive(Debug, Default)]
pub struct TapeBinding {
    pairs: Vec<(usize, VarId)>,
}

impl TapeBinding {
    pub fn new() -> TapeBinding {
        TapeBinding::default()
    }

    pub fn bind(&mut self, store: &ParamStore, tape: &mut Tape, name: &str) -> VarId {
        let i = *store
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        let id = tape.leaf(store.entries[i].1.clone());
        self.pairs.push((i, id));
        id
    }

    /// Accumulate tape gradients into the store; parameters the loss never
    /// touched receive zero contribution.
    pub fn accumulate(&self, store: &mut ParamStore, grads: &crate::tape::Gradients) -> Result<()> {
        for &(i, id) in &self.pairs {
            if let Some(g) = grads.get(id) {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(SsmnError::NonFinite(format!(
                        "gradient for {} is non-finite",
                        store.entries[i].0
                    )));
                }
                let slot = store.entries[i].1.grad_mut();
                for (s, v) in slot.iter_mut().zip(g) {
                    *s += v;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn insert_overwrites_in_place() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::scalar(1.0));
        s.insert("b", Tensor::scalar(2.0));
        s.insert("a", Tensor::scalar(3.0));
        assert_eq!(s.len(), 2);
        assert_eq!(s.get("a").item(), 3.0);
        // order preserved
        let names: Vec<&str> = s.names().collect();
        assert_eq!(names, vec!["a", "b"]);
    }

    #[test]
    fn init_weight_is_seeded_and_bounded() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        s.init_weight("w", &[4, 4], 4, 4, &mut rng);
        let bound = (6.0 / 8.0f64).sqrt();
        assert!(s.get("w").data().iter().all(|v| v.abs() <= bound));
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let mut s2 = ParamStore::new();
        s2.init_weight("w", &[4, 4], 4, 4, &mut rng2);
        assert_eq!(s.get("w").data(), s2.get("w").data());
    }
}
