//! Named parameter storage with branch ownership, and lazy binding of
//! parameters onto a tape.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{BatchStats, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which part of the network owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Backbone,
    /// The main-branch BNNeck head, the only head kept for inference.
    MbHead,
    Feb,
    Sab,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Backbone => "backbone",
            Branch::MbHead => "mb_head",
            Branch::Feb => "feb",
            Branch::Sab => "sab",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub branch: Branch,
    /// False for running statistics, which are state but not optimized.
    pub trainable: bool,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), index: HashMap::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, branch: Branch, trainable: bool, value: Tensor<T>) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, branch, trainable, value });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn param(&self, i: usize) -> &Param<T> {
        &self.params[i]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.params[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index_of(name).map(move |i| &mut self.params[i].value)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    pub fn branches(&self) -> Vec<Branch> {
        let mut b: Vec<Branch> = self.params.iter().map(|p| p.branch).collect();
        b.sort();
        b.dedup();
        b
    }

    pub fn has_branch(&self, branch: Branch) -> bool {
        self.params.iter().any(|p| p.branch == branch)
    }

    /// Copy restricted to the given branches.
    pub fn retain_branches(&self, keep: &[Branch]) -> Self {
        let mut out = ParamStore::new();
        for p in self.params.iter().filter(|p| keep.contains(&p.branch)) {
            out.push(p.name.clone(), p.branch, p.trainable, p.value.clone());
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.push(p.name.clone(), p.branch, p.trainable, p.value.cast());
        }
        out
    }
}

/// A forward pass under construction: the tape, lazily bound parameters and
/// the batch statistics observed by training-mode normalization layers.
pub struct Graph<'s, T: Scalar> {
    pub tape: Tape<T>,
    store: &'s ParamStore<T>,
    bound: Vec<Option<Var>>,
    train: bool,
    stat_updates: Vec<(String, BatchStats<T>)>,
}

pub const BN_EPS: f64 = 1e-5;

impl<'s, T: Scalar> Graph<'s, T> {
    /// In training mode trainable parameters become gradient leaves and
    /// batch normalization uses batch statistics.
    pub fn new(store: &'s ParamStore<T>, train: bool) -> Self {
        Self::with_tape(store, train, Tape::new())
    }

    pub fn with_tape(store: &'s ParamStore<T>, train: bool, tape: Tape<T>) -> Self {
        Graph { tape, store, bound: vec![None; store.len()], train, stat_updates: Vec::new() }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    /// Binds `name` on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let i = self
            .store
            .index_of(name)
            .ok_or_else(|| Error::Capability(format!("parameter `{name}` is not present in this model")))?;
        if let Some(v) = self.bound[i] {
            return Ok(v);
        }
        let p = self.store.param(i);
        let v = if self.train && p.trainable { self.tape.leaf(p.value.clone()) } else { self.tape.constant(p.value.clone()) };
        self.bound[i] = Some(v);
        Ok(v)
    }

    /// Batch normalization over `[N, C, ...]` using `<prefix>.gamma`, `.beta`,
    /// `.running_mean` and `.running_var`.
    pub fn batch_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let eps = T::lit(BN_EPS);
        if self.train {
            let (y, stats) = self.tape.batch_norm_train(x, gamma, beta, eps);
            self.stat_updates.push((prefix.to_string(), stats));
            Ok(y)
        } else {
            let missing = || Error::Capability(format!("running statistics of `{prefix}` are missing"));
            let mean = self.store.get(&format!("{prefix}.running_mean")).ok_or_else(missing)?.data().to_vec();
            let var = self.store.get(&format!("{prefix}.running_var")).ok_or_else(missing)?.data().to_vec();
            Ok(self.tape.batch_norm_eval(x, gamma, beta, &mean, &var, eps))
        }
    }

    /// Gradients of every bound trainable parameter, by store index.
    pub fn param_gradients(&self, grads: &Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.bound
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let p = self.store.param(i);
                match v {
                    Some(v) if p.trainable => Some(grads.get_or_zeros(*v, p.value.shape())),
                    _ => None,
                }
            })
            .collect()
    }

    pub fn bound_var(&self, name: &str) -> Option<Var> {
        self.store.index_of(name).and_then(|i| self.bound[i])
    }

    pub fn into_stat_updates(self) -> Vec<(String, BatchStats<T>)> {
        self.stat_updates
    }

    pub fn stat_updates(&self) -> &[(String, BatchStats<T>)] {
        &self.stat_updates
    }
}

/// Adds `<prefix>.gamma`, `.beta` and the two running buffers for `dim`
/// channels.
pub fn push_batch_norm<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, branch: Branch, dim: usize) {
    store.push(format!("{prefix}.gamma"), branch, true, Tensor::full(&[dim], T::one()));
    store.push(format!("{prefix}.beta"), branch, true, Tensor::zeros(&[dim]));
    store.push(format!("{prefix}.running_mean"), branch, false, Tensor::zeros(&[dim]));
    store.push(format!("{prefix}.running_var"), branch, false, Tensor::full(&[dim], T::one()));
}

/// Exponential moving average of batch statistics into running buffers.
pub fn apply_stat_updates<T: Scalar>(store: &mut ParamStore<T>, updates: &[(String, BatchStats<T>)], momentum: T) {
    for (prefix, stats) in updates {
        for (suffix, fresh) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            let buf = store.get_mut(&format!("{prefix}.{suffix}")).expect("running buffer exists");
            for (r, &f) in buf.data_mut().iter_mut().zip(fresh.iter()) {
                *r = (T::one() - momentum) * *r + momentum * f;
            }
        }
    }
}
