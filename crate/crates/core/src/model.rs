//! Named parameter storage and the architecture-independent parts of a model:
//! binding parameters into a [`Graph`], running a forward pass, and the layer
//! helpers both networks are assembled from.

use std::collections::HashMap;

use levitmc_tensor::{grad_check, BatchStats, GradCheckConfig, GradCheckReport, Graph, Real, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::densenet::{self, DenseNetConfig};
use crate::error::{Error, Result};
use crate::levit::{self, LeViTConfig};

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Running statistics; updated by forward passes in training mode.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<f32>,
}

/// Insertion-ordered table of uniquely named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, kind, tensor });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.index.get(name).map(|&i| &self.entries[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.index.get(name).map(|&i| &mut self.entries[i].tensor)
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    /// Replaces a tensor, keeping its position and kind.
    pub fn replace(&mut self, name: &str, tensor: Tensor<f32>) -> Result<()> {
        let slot = self
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))?;
        *slot = tensor;
        Ok(())
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter().filter(|e| e.kind == ParamKind::Trainable)
    }

    pub fn num_scalars(&self) -> usize {
        self.trainable().map(|e| e.tensor.numel()).sum()
    }
}

/// Architecture plus its configuration; serialized into checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "config")]
pub enum Architecture {
    #[serde(rename = "densenet")]
    DenseNet(DenseNetConfig),
    #[serde(rename = "levit")]
    LeViT(LeViTConfig),
}

impl Architecture {
    pub fn tag(&self) -> &'static str {
        match self {
            Architecture::DenseNet(_) => densenet::ARCH_TAG,
            Architecture::LeViT(_) => levit::ARCH_TAG,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Architecture::DenseNet(c) => c.num_classes,
            Architecture::LeViT(c) => c.num_classes,
        }
    }

    pub fn input_size(&self) -> usize {
        match self {
            Architecture::DenseNet(c) => c.input_size,
            Architecture::LeViT(c) => c.input_size,
        }
    }

    pub(crate) fn set_num_classes(&mut self, n: usize) {
        match self {
            Architecture::DenseNet(c) => c.num_classes = n,
            Architecture::LeViT(c) => c.num_classes = n,
        }
    }
}

/// Output of a forward pass.
pub struct Forward {
    pub logits: Var,
    /// Batch statistics of every training-mode batch norm, keyed by layer prefix.
    pub bn_stats: Vec<(String, BatchStats)>,
    /// Token count entering each attention stage (empty for convolutional models).
    pub stage_tokens: Vec<usize>,
}

/// Parameters of a model made available to one [`Graph`].
pub struct Bound<T: Real> {
    vars: HashMap<String, Var>,
    buffers: HashMap<String, Tensor<T>>,
}

impl<T: Real> Bound<T> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter {name} is not bound")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::Config(format!("buffer {name} is not bound")))
    }

    /// Binds caller-created leaves by name; buffers are copied from `params`.
    pub fn from_vars(names: &[String], vars: &[Var], params: &ParamStore) -> Self {
        Self {
            vars: names.iter().cloned().zip(vars.iter().copied()).collect(),
            buffers: params
                .entries()
                .iter()
                .filter(|e| e.kind == ParamKind::Buffer)
                .map(|e| (e.name.clone(), e.tensor.cast()))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    pub arch: Architecture,
    pub params: ParamStore,
}

impl ModelGraph {
    pub fn tag(&self) -> &'static str {
        self.arch.tag()
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes()
    }

    /// Adds every tensor to `g`. Trainable tensors become gradient-receiving
    /// leaves unless `frozen` says otherwise.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>, frozen: impl Fn(&str) -> bool) -> Bound<T> {
        let mut vars = HashMap::new();
        let mut buffers = HashMap::new();
        for e in self.params.entries() {
            match e.kind {
                ParamKind::Trainable => {
                    let t = e.tensor.cast();
                    let v = if frozen(&e.name) { g.constant(t) } else { g.param(t) };
                    vars.insert(e.name.clone(), v);
                }
                ParamKind::Buffer => {
                    buffers.insert(e.name.clone(), e.tensor.cast());
                }
            }
        }
        Bound { vars, buffers }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, bound: &Bound<T>, input: Var, mode: Mode) -> Result<Forward> {
        match &self.arch {
            Architecture::DenseNet(c) => densenet::forward(c, g, bound, input, mode),
            Architecture::LeViT(c) => levit::forward(c, g, bound, input, mode),
        }
    }

    /// Eval-mode logits for an `(N, 3, S, S)` batch.
    pub fn infer(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::<f32>::new();
        let bound = self.bind(&mut g, |_| true);
        let x = g.constant(batch.clone());
        let out = self.forward(&mut g, &bound, x, Mode::Eval)?;
        Ok(g.value(out.logits).clone())
    }

    /// Folds training-mode batch statistics into the running buffers.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats)], skip: impl Fn(&str) -> bool) -> Result<()> {
        for (prefix, s) in stats {
            for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let name = format!("{prefix}.{suffix}");
                if skip(&name) {
                    continue;
                }
                let t = self
                    .params
                    .get_mut(&name)
                    .ok_or_else(|| Error::Config(format!("missing buffer {name}")))?;
                for (r, b) in t.data_mut().iter_mut().zip(batch) {
                    *r = ((1.0 - BN_MOMENTUM) * *r as f64 + BN_MOMENTUM * b) as f32;
                }
            }
        }
        Ok(())
    }

    /// Trainable tensor names and their `f64` copies, for gradient checks.
    pub fn trainable_f64(&self) -> (Vec<String>, Vec<Tensor<f64>>) {
        self.params
            .trainable()
            .map(|e| (e.name.clone(), e.tensor.cast()))
            .unzip()
    }

    /// Finite-difference check of the training-mode cross-entropy with
    /// respect to every trainable tensor, in double precision.
    pub fn grad_check(
        &self,
        input: &Tensor<f64>,
        labels: &[usize],
        config: &GradCheckConfig,
    ) -> Result<GradCheckReport> {
        let (names, tensors) = self.trainable_f64();
        let f = |g: &mut Graph<f64>, vars: &[Var]| -> std::result::Result<Var, TensorError> {
            let bound = Bound::from_vars(&names, vars, &self.params);
            let x = g.constant(input.clone());
            let out = self
                .forward(g, &bound, x, Mode::Train)
                .map_err(|e| TensorError::InvalidInput(e.to_string()))?;
            g.cross_entropy(out.logits, labels)
        };
        Ok(grad_check(f, &tensors, config)?)
    }

    /// Replaces the classifier head with a freshly initialized one of
    /// `classes` outputs.
    pub fn reset_head(&mut self, classes: usize, seed: u64) -> Result<()> {
        if classes < 2 {
            return Err(Error::Config(format!("head needs at least 2 classes, got {classes}")));
        }
        let w = self
            .params
            .get(HEAD_WEIGHT)
            .ok_or_else(|| Error::Config("model has no head".into()))?;
        let fan_in = w.shape()[0];
        let mut init = Init::new(seed);
        let mut fresh = ParamStore::new();
        init.linear(&mut fresh, HEAD, fan_in, classes)?;
        let mut rebuilt = ParamStore::new();
        for e in self.params.entries() {
            let tensor = fresh.get(&e.name).cloned().unwrap_or_else(|| e.tensor.clone());
            rebuilt.insert(e.name.clone(), e.kind, tensor)?;
        }
        self.params = rebuilt;
        self.arch.set_num_classes(classes);
        Ok(())
    }
}

pub const HEAD: &str = "head";
pub const HEAD_WEIGHT: &str = "head.weight";

/// Seeded parameter initializer.
pub(crate) struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor<f32> {
        let dist = Normal::new(0.0, std).expect("positive std");
        Tensor::from_fn(shape, |_| dist.sample(&mut self.rng) as f32)
    }

    /// He-normal `(O, C, K, K)` weight, no bias.
    pub fn conv(&mut self, store: &mut ParamStore, prefix: &str, out_ch: usize, in_ch: usize, k: usize) -> Result<()> {
        let std = (2.0 / (in_ch * k * k) as f64).sqrt();
        store.insert(
            format!("{prefix}.weight"),
            ParamKind::Trainable,
            self.normal(&[out_ch, in_ch, k, k], std),
        )
    }

    pub fn bn(&mut self, store: &mut ParamStore, prefix: &str, ch: usize) -> Result<()> {
        store.insert(format!("{prefix}.gamma"), ParamKind::Trainable, Tensor::ones(&[ch]))?;
        store.insert(format!("{prefix}.beta"), ParamKind::Trainable, Tensor::zeros(&[ch]))?;
        store.insert(format!("{prefix}.running_mean"), ParamKind::Buffer, Tensor::zeros(&[ch]))?;
        store.insert(format!("{prefix}.running_var"), ParamKind::Buffer, Tensor::ones(&[ch]))
    }

    /// `(F, G)` weight with std `1/sqrt(F)` and a zero bias.
    pub fn linear(&mut self, store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        let std = (1.0 / fan_in as f64).sqrt();
        store.insert(
            format!("{prefix}.weight"),
            ParamKind::Trainable,
            self.normal(&[fan_in, fan_out], std),
        )?;
        store.insert(format!("{prefix}.bias"), ParamKind::Trainable, Tensor::zeros(&[fan_out]))
    }

    pub fn tensor(&mut self, store: &mut ParamStore, name: &str, shape: &[usize], std: f64) -> Result<()> {
        let t = if std == 0.0 {
            Tensor::zeros(shape)
        } else {
            self.normal(shape, std)
        };
        store.insert(name, ParamKind::Trainable, t)
    }
}

/// Forward-pass context shared by the layer helpers.
pub(crate) struct Ctx<'a, T: Real> {
    pub g: &'a mut Graph<T>,
    pub bound: &'a Bound<T>,
    pub mode: Mode,
    pub bn_stats: Vec<(String, BatchStats)>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(g: &'a mut Graph<T>, bound: &'a Bound<T>, mode: Mode) -> Self {
        Self {
            g,
            bound,
            mode,
            bn_stats: Vec::new(),
        }
    }

    pub fn p(&self, name: &str) -> Result<Var> {
        self.bound.var(name)
    }

    pub fn bn(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.g.batchnorm_train(x, gamma, beta)?;
                self.bn_stats.push((prefix.to_string(), stats));
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.bound.buffer(&format!("{prefix}.running_mean"))?;
                let var = self.bound.buffer(&format!("{prefix}.running_var"))?;
                Ok(self.g.batchnorm_eval(x, gamma, beta, mean, var)?)
            }
        }
    }

    pub fn conv(&mut self, x: Var, prefix: &str, stride: usize, pad: usize) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        Ok(self.g.conv2d(x, w, None, stride, pad)?)
    }

    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        Ok(self.g.linear(x, w, Some(b))?)
    }

    /// Checks the input batch against the model's expected spatial size.
    pub fn check_input(&self, x: Var, size: usize) -> Result<usize> {
        match *self.g.value(x).shape() {
            [n, 3, h, w] if h == size && w == size => Ok(n),
            ref s => Err(Error::Shape(format!(
                "model expects (N, 3, {size}, {size}) input, got {s:?}"
            ))),
        }
    }

    pub fn finish(self, logits: Var, stage_tokens: Vec<usize>) -> Result<Forward> {
        if !self.g.value(logits).all_finite() {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        Ok(Forward {
            logits,
            bn_stats: self.bn_stats,
            stage_tokens,
        })
    }
}
