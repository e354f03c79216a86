//! Named parameter storage shared by every model component.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Which part of the network owns a tensor. Profiling counts everything but heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Group {
    Encoder,
    Pooler,
    WordHead,
    SpeakerHead,
    PhonemeHead,
}

impl Group {
    pub fn is_head(self) -> bool {
        matches!(
            self,
            Group::WordHead | Group::SpeakerHead | Group::PhonemeHead
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Kind {
    Trainable,
    /// Running statistics; updated outside the gradient path.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: Group,
    pub kind: Kind,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: String, group: Group, kind: Kind, value: Tensor) -> ParamId {
        self.entries.push(ParamEntry {
            name,
            group,
            kind,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    /// Trainable element count, optionally excluding classifier heads.
    pub fn trainable_count(&self, include_heads: bool) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == Kind::Trainable && (include_heads || !e.group.is_head()))
            .map(|e| e.value.len())
            .sum()
    }
}

/// Registers parameters under a name prefix with PyTorch-style default initialisation.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    group: Group,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, group: Group) -> Self {
        ParamBuilder {
            store,
            rng,
            group,
            prefix: String::new(),
        }
    }

    pub fn group(&mut self, group: Group) -> &mut Self {
        self.group = group;
        self
    }

    pub fn set_prefix(&mut self, prefix: &str) {
        self.prefix.clear();
        self.prefix.push_str(prefix);
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn full_name(&self, name: &str) -> String {
        let mut s = String::with_capacity(self.prefix.len() + name.len() + 1);
        if !self.prefix.is_empty() {
            s.push_str(&self.prefix);
            s.push('.');
        }
        s.push_str(name);
        s
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn uniform(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize) -> ParamId {
        let bound = 1.0 / libm::sqrt(fan_in.max(1) as f64);
        let data = (0..rows * cols)
            .map(|_| self.rng.gen_range(-bound..bound))
            .collect();
        self.constant(name, Tensor::from_vec(rows, cols, data))
    }

    pub fn constant(&mut self, name: &str, value: Tensor) -> ParamId {
        let name = self.full_name(name);
        self.store.push(name, self.group, Kind::Trainable, value)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor) -> ParamId {
        let name = self.full_name(name);
        self.store.push(name, self.group, Kind::Buffer, value)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }
}

/// Scales a layer width, rounding to nearest and never below one.
pub fn scale_count(c: usize, scale: f64) -> usize {
    (libm::round(c as f64 * scale) as usize).max(1)
}
