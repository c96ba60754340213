//! Parameter registry and the small layer wrappers the blocks are built from.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Conv2dSpec, Float, Graph, NodeId, Tensor};

pub const INIT_STD: f64 = 0.02;

/// Flat, name-ordered store of trainable parameters plus non-trainable
/// buffers (batch-norm running statistics).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    /// Registers a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        let prev = self.params.insert(name.clone(), t);
        assert!(prev.is_none(), "parameter {name} registered twice");
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.buffers.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown buffer {name}")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown buffer {name}")))
    }

    pub fn bind(&self, g: &mut Graph<T>, name: &str) -> Result<NodeId> {
        Ok(g.param(name, self.get(name)?))
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.buffers
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// 2D convolution whose weights live in a [`ParamStore`] under `name.weight`
/// and `name.bias`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub spec: Conv2dSpec,
    pub bias: bool,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize, spec: Conv2dSpec) -> Self {
        Self {
            name: name.into(),
            in_ch,
            out_ch,
            kernel,
            spec,
            bias: true,
        }
    }

    pub fn pointwise(name: impl Into<String>, in_ch: usize, out_ch: usize) -> Self {
        Self::new(name, in_ch, out_ch, 1, Conv2dSpec::default())
    }

    pub fn depthwise(name: impl Into<String>, ch: usize, kernel: usize) -> Self {
        Self::new(name, ch, ch, kernel, Conv2dSpec::depthwise(kernel, ch))
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch / self.spec.groups, self.kernel, self.kernel]
    }

    pub fn init<T: Float, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        store.insert(self.weight_name(), Tensor::trunc_normal(&self.weight_shape(), INIT_STD, rng));
        if self.bias {
            store.insert(self.bias_name(), Tensor::zeros(&[self.out_ch]));
        }
    }

    pub fn init_zero<T: Float>(&self, store: &mut ParamStore<T>) {
        store.insert(self.weight_name(), Tensor::zeros(&self.weight_shape()));
        if self.bias {
            store.insert(self.bias_name(), Tensor::zeros(&[self.out_ch]));
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let w = store.bind(g, &self.weight_name())?;
        let b = if self.bias {
            Some(store.bind(g, &self.bias_name())?)
        } else {
            None
        };
        g.conv2d(x, w, b, self.spec)
    }
}

/// Per-position layer norm over channels with learnable affine.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    pub name: String,
    pub channels: usize,
}

impl ChannelNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
        }
    }

    pub fn init<T: Float>(&self, store: &mut ParamStore<T>) {
        store.insert(format!("{}.gamma", self.name), Tensor::ones(&[self.channels]));
        store.insert(format!("{}.beta", self.name), Tensor::zeros(&[self.channels]));
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let gamma = store.bind(g, &format!("{}.gamma", self.name))?;
        let beta = store.bind(g, &format!("{}.beta", self.name))?;
        g.channel_norm(x, gamma, beta, T::of(1e-5))
    }
}

/// Batch norm with running statistics kept as store buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub name: String,
    pub channels: usize,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm2d {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
        }
    }

    pub fn mean_name(&self) -> String {
        format!("{}.running_mean", self.name)
    }

    pub fn var_name(&self) -> String {
        format!("{}.running_var", self.name)
    }

    pub fn init<T: Float>(&self, store: &mut ParamStore<T>) {
        store.insert(format!("{}.gamma", self.name), Tensor::ones(&[self.channels]));
        store.insert(format!("{}.beta", self.name), Tensor::zeros(&[self.channels]));
        store.insert_buffer(self.mean_name(), Tensor::zeros(&[self.channels]));
        store.insert_buffer(self.var_name(), Tensor::ones(&[self.channels]));
    }

    /// In training mode the observed batch statistics are queued on the graph
    /// (see [`Graph::take_bn_updates`]) under this layer's name.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
        training: bool,
    ) -> Result<NodeId> {
        let gamma = store.bind(g, &format!("{}.gamma", self.name))?;
        let beta = store.bind(g, &format!("{}.beta", self.name))?;
        let rm = store.buffer(&self.mean_name())?.data();
        let rv = store.buffer(&self.var_name())?.data();
        let (y, stats) = g.batch_norm2d(x, gamma, beta, (rm, rv), training, T::of(BN_EPS))?;
        if let Some(stats) = stats {
            g.push_bn_update(&self.name, stats);
        }
        Ok(y)
    }
}

/// Folds queued batch statistics into the running buffers:
/// `running = (1 - m) * running + m * batch`.
pub fn apply_bn_updates<T: Float>(
    store: &mut ParamStore<T>,
    updates: &[(String, crate::tensor::BatchNormStats<T>)],
) -> Result<()> {
    let m = T::of(BN_MOMENTUM);
    for (name, stats) in updates {
        for (suffix, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            let buf = store.buffer_mut(&format!("{name}.{suffix}"))?;
            for (r, &b) in buf.data_mut().iter_mut().zip(batch) {
                *r = (T::one() - m) * *r + m * b;
            }
        }
    }
    Ok(())
}
