//! Named parameter storage, tape bindings and gradient buffers.

use std::sync::Arc;

use glitr_substrate::{Gradients, Real, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{GlitrError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Optimizer group a parameter belongs to; each group has its own learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Spatial,
    Classifier,
    Locator,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Spatial, ParamGroup::Classifier, ParamGroup::Locator];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Spatial => "spatial",
            ParamGroup::Classifier => "classifier",
            ParamGroup::Locator => "locator",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<R> {
    pub name: String,
    pub value: Arc<Tensor<R>>,
    pub group: ParamGroup,
    pub decay: bool,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<R> {
    params: Vec<Parameter<R>>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<R>, group: ParamGroup, decay: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Parameter {
            name,
            value: Arc::new(value),
            group,
            decay,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<R> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<R> {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<R>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(GlitrError::Checkpoint(format!(
                "{}: expected shape {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = Arc::new(value);
        Ok(())
    }

    /// In-place access; copies only if a tape still shares the tensor.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<R> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<R>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.group == group).map(|(id, _)| id).collect()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Order-dependent FNV-1a hash over names and raw value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for p in &self.params {
            eat(p.name.as_bytes());
            for &v in p.value.data() {
                eat(&v.to_f64_lossy().to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: Arc::new(p.value.cast()),
                    group: p.group,
                    decay: p.decay,
                    trainable: p.trainable,
                })
                .collect(),
        }
    }
}

/// Maps parameters onto tape leaves, each bound at most once per tape.
///
/// A trainable binding creates gradient-requiring leaves for trainable
/// parameters; a frozen binding creates constants over the same shared
/// storage, which is how frozen snapshots are realized.
pub struct Binding<'s, R: Real> {
    store: &'s ParamStore<R>,
    trainable: bool,
    vars: Vec<Option<Var>>,
}

impl<'s, R: Real> Binding<'s, R> {
    pub fn trainable(store: &'s ParamStore<R>) -> Self {
        Self {
            store,
            trainable: true,
            vars: vec![None; store.len()],
        }
    }

    pub fn frozen(store: &'s ParamStore<R>) -> Self {
        Self {
            store,
            trainable: false,
            vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'s ParamStore<R> {
        self.store
    }

    pub fn var(&mut self, tape: &mut Tape<R>, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = tape.leaf_shared(Arc::clone(&p.value), self.trainable && p.trainable);
        self.vars[id.0] = Some(v);
        v
    }

    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.vars[id.0]
    }

    /// Adds this tape's parameter gradients into `into`.
    pub fn accumulate(&self, grads: &Gradients<R>, into: &mut GradBuffer<R>) {
        for (i, v) in self.vars.iter().enumerate() {
            if let Some(g) = v.and_then(|v| grads.get(v)) {
                into.add(ParamId(i), g);
            }
        }
    }
}

/// One optional gradient tensor per parameter.
#[derive(Debug, Clone)]
pub struct GradBuffer<R> {
    grads: Vec<Option<Tensor<R>>>,
}

impl<R: Real> GradBuffer<R> {
    pub fn new(n: usize) -> Self {
        Self { grads: vec![None; n] }
    }

    pub fn for_store(store: &ParamStore<R>) -> Self {
        Self::new(store.len())
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<R>> {
        self.grads[id.0].as_ref()
    }

    pub fn add(&mut self, id: ParamId, g: &Tensor<R>) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(g),
            slot => *slot = Some(g.clone()),
        }
    }

    pub fn merge(&mut self, other: &GradBuffer<R>) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.add(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: R) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }

    pub fn max_abs(&self, ids: &[ParamId]) -> R {
        ids.iter()
            .filter_map(|&id| self.get(id))
            .map(|g| g.max_abs())
            .fold(R::zero(), |a, b| a.max(b))
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.is_finite())
    }
}

pub(crate) fn xavier<R: Real>(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor<R> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
    Tensor::from_fn(&[fan_in, fan_out], |_| R::lit(dist.sample(rng)))
}

/// Normal(0, std) truncated at two standard deviations.
pub(crate) fn trunc_normal<R: Real>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<R> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = dist.sample(rng);
        if v.abs() <= 2.0 * std {
            break R::lit(v);
        }
    })
}
