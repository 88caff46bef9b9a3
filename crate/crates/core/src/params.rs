//! Named parameters, the per-pass forward session, and checkpoints.
//!
//! A [`ParamStore`] owns every tensor a model learns (plus normalization
//! running statistics). A [`Forward`] session binds each parameter to at most
//! one tape leaf, so layers reused by both branches read and accumulate into
//! the same node.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNormMode, BatchStats, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{read_btks, write_btks, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub trainable: bool,
    /// Backbone stage the parameter belongs to, if any.
    pub stage: Option<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor<T>,
        trainable: bool,
        stage: Option<usize>,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            grad: None,
            trainable,
            stage,
        });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Number of learnable scalars (running statistics excluded).
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Same store in another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    grad: p.grad.as_ref().map(|g| g.cast()),
                    trainable: p.trainable,
                    stage: p.stage,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Exponential moving update of running statistics.
    pub fn update_running_stats(&mut self, bn: &BnHandles, stats: &BatchStats<T>, momentum: f64) {
        let m = T::of(momentum);
        let keep = T::one() - m;
        let unbias = if stats.count > 1 {
            T::of(stats.count as f64 / (stats.count - 1) as f64)
        } else {
            T::one()
        };
        let mean = self.params[bn.running_mean.0].tensor.data_mut();
        for (r, &b) in mean.iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * b;
        }
        let var = self.params[bn.running_var.0].tensor.data_mut();
        for (r, &b) in var.iter_mut().zip(&stats.var) {
            *r = keep * *r + m * b * unbias;
        }
    }
}

/// Parameter ids of one batch-normalization layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BnHandles {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BnHandles {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        stage: Option<usize>,
    ) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::ones(&[channels]), true, stage)?,
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[channels]), true, stage)?,
            running_mean: store.add(
                format!("{prefix}.running_mean"),
                Tensor::zeros(&[channels]),
                false,
                stage,
            )?,
            running_var: store.add(
                format!("{prefix}.running_var"),
                Tensor::ones(&[channels]),
                false,
                stage,
            )?,
        })
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// One forward pass: a tape plus the parameter bindings made on it.
pub struct Forward<'s, T> {
    pub tape: Tape<T>,
    store: &'s ParamStore<T>,
    bound: Vec<Option<Var>>,
    /// Batch statistics use batch moments when set, running moments otherwise.
    pub train: bool,
    bn_stats: Vec<(BnHandles, BatchStats<T>)>,
}

impl<'s, T: Real> Forward<'s, T> {
    pub fn new(store: &'s ParamStore<T>, train: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            train,
            bn_stats: Vec::new(),
        }
    }

    /// Continues recording on an existing tape.
    pub fn with_tape(tape: Tape<T>, store: &'s ParamStore<T>, train: bool) -> Self {
        Self {
            tape,
            ..Self::new(store, train)
        }
    }

    /// Binds `id` to an existing node instead of a fresh leaf.
    pub fn bind(&mut self, id: ParamId, var: Var) {
        self.bound[id.0] = Some(var);
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Tape node for a parameter; the same node on every call.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = if p.trainable {
            self.tape.leaf(p.tensor.clone())
        } else {
            self.tape.constant(p.tensor.clone())
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Tape node bound to `id`, if the pass used it.
    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    pub fn batch_norm(&mut self, x: Var, bn: &BnHandles) -> Result<Var> {
        let gamma = self.param(bn.gamma);
        let beta = self.param(bn.beta);
        let mode = if self.train {
            BatchNormMode::Train { eps: BN_EPS }
        } else {
            BatchNormMode::Frozen {
                mean: self.store.get(bn.running_mean).tensor.data().to_vec(),
                var: self.store.get(bn.running_var).tensor.data().to_vec(),
                eps: BN_EPS,
            }
        };
        let (y, stats) = self.tape.batch_norm(x, gamma, beta, mode)?;
        if let Some(stats) = stats {
            self.bn_stats.push((*bn, stats));
        }
        Ok(y)
    }

    /// Batch statistics gathered during the pass, in execution order.
    pub fn take_bn_stats(&mut self) -> Vec<(BnHandles, BatchStats<T>)> {
        std::mem::take(&mut self.bn_stats)
    }

    /// Gradients for every trainable parameter the pass touched.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                let p = self.store.get(ParamId(i));
                p.trainable.then(|| (ParamId(i), grads.get_or_zeros(&self.tape, v)))
            })
            .collect()
    }
}

/// Writes gradients into the store; trainable parameters the pass did not
/// touch get zero gradients.
pub fn assign_grads<T: Real>(store: &mut ParamStore<T>, grads: Vec<(ParamId, Tensor<T>)>) {
    for p in store.iter_mut() {
        p.grad = p.trainable.then(|| Tensor::zeros(p.tensor.shape()));
    }
    for (id, g) in grads {
        store.get_mut(id).grad = Some(g);
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub stage: Option<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub format: String,
    pub params: Vec<ManifestEntry>,
}

const MANIFEST: &str = "manifest.json";

fn file_name_for(name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("{safe}.btks")
}

/// Saves every parameter as a BTKS file plus `manifest.json`.
pub fn save_checkpoint<T: Real>(store: &ParamStore<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(store.len());
    for (_, p) in store.iter() {
        let file = file_name_for(&p.name);
        write_btks(&p.tensor, &dir.join(&file))?;
        entries.push(ManifestEntry {
            name: p.name.clone(),
            file,
            shape: p.tensor.shape().to_vec(),
            stage: p.stage,
            trainable: p.trainable,
        });
    }
    let manifest = Manifest {
        format: "btks-checkpoint-v1".into(),
        params: entries,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Loads a checkpoint into an already-built store, matching by name and shape.
pub fn load_checkpoint<T: Real>(store: &mut ParamStore<T>, dir: &Path) -> Result<()> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.params.len() != store.len() {
        return Err(Error::config(format!(
            "checkpoint has {} parameters, model has {}",
            manifest.params.len(),
            store.len()
        )));
    }
    for entry in &manifest.params {
        let id = store
            .id(&entry.name)
            .ok_or_else(|| Error::config(format!("checkpoint parameter `{}` not in model", entry.name)))?;
        let tensor: Tensor<T> = read_btks(&dir.join(&entry.file))?;
        if tensor.shape() != store.get(id).tensor.shape() || tensor.shape() != entry.shape.as_slice() {
            return Err(Error::config(format!(
                "checkpoint parameter `{}` has shape {:?}, model expects {:?}",
                entry.name,
                tensor.shape(),
                store.get(id).tensor.shape()
            )));
        }
        store.get_mut(id).tensor = tensor;
    }
    Ok(())
}
