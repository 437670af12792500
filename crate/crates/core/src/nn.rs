//! Parameter storage and the convolution / normalization layers shared by
//! both networks.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segsr_autograd::{ConvGeom, Tape, Tensor, Var};

use crate::error::{ensure, Result};

/// How a stored tensor is initialized and whether the optimizer updates it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution kernel, Xavier-initialized from its fans.
    Weight {
        fan_in: usize,
        fan_out: usize,
    },
    Bias,
    /// Batch-norm scale (initialized to one).
    NormScale,
    /// Batch-norm shift (initialized to zero).
    NormShift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    pub fn default_fill(self) -> f64 {
        match self {
            ParamKind::NormScale | ParamKind::RunningVar => 1.0,
            _ => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub kind: ParamKind,
}

/// Named tensors of a model, ordered by hierarchical dotted name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor filled with the kind's default value.
    pub fn register(&mut self, name: impl Into<String>, shape: &[usize], kind: ParamKind) -> String {
        let name = name.into();
        let value = Tensor::full(shape.to_vec(), kind.default_fill());
        let prev = self.params.insert(name.clone(), Param { value, kind });
        assert!(prev.is_none(), "parameter {name} registered twice");
        name
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.param(name).value
    }

    pub fn param(&self, name: &str) -> &Param {
        self.params.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Replaces a tensor's value; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let Some(p) = self.params.get_mut(name) else {
            return Err(crate::Error::InvalidArgument(format!("unknown parameter {name}")));
        };
        ensure!(
            p.value.shape() == value.shape(),
            Shape,
            "parameter {name} has shape {:?}, got {:?}",
            p.value.shape(),
            value.shape()
        );
        p.value = value;
        Ok(())
    }

    pub fn apply_updates(&mut self, updates: Vec<(String, Tensor)>) {
        for (name, value) in updates {
            *self.get_mut(&name) = value;
        }
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self.params.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}")).value
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params.values().filter(|p| p.kind.trainable()).map(|p| p.value.numel()).sum()
    }

    /// Sets every trainable tensor to zero. Batch-norm scales are included.
    pub fn zero_trainable(&mut self) {
        for p in self.params.values_mut() {
            if p.kind.trainable() {
                p.value.data_mut().fill(0.0);
            }
        }
    }

    /// Sets every tensor whose name starts with `prefix` to `value`.
    pub fn fill_prefix(&mut self, prefix: &str, value: f64) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) && p.kind.trainable() {
                p.value.data_mut().fill(value);
            }
        }
    }
}

/// Xavier-uniform bound `gain · sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_bound(fan_in: usize, fan_out: usize, gain: f64) -> f64 {
    gain * (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Draws every weight Xavier-uniform from one seeded stream (in name order) and
/// resets biases, norm parameters and running statistics to their defaults.
pub fn init_weights(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.params.values_mut() {
        match p.kind {
            ParamKind::Weight { fan_in, fan_out } => {
                let bound = xavier_bound(fan_in, fan_out, 1.0);
                p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-bound..=bound));
            }
            kind => p.value.data_mut().fill(kind.default_fill()),
        }
    }
}

/// Per-forward-pass context: the tape being recorded, the parameters read,
/// and whether batch statistics (training) or running statistics are used.
pub struct Ctx<'t, 'p> {
    pub tape: &'t Tape,
    pub params: &'p ParamStore,
    pub train: bool,
    running: RefCell<Vec<(String, Tensor)>>,
}

impl<'t, 'p> Ctx<'t, 'p> {
    pub fn new(tape: &'t Tape, params: &'p ParamStore, train: bool) -> Self {
        Self { tape, params, train, running: RefCell::new(Vec::new()) }
    }

    pub fn param(&self, name: &str) -> Var<'t> {
        let p = self.params.param(name);
        if p.kind.trainable() {
            self.tape.param(name, &p.value)
        } else {
            self.tape.constant(p.value.clone())
        }
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    fn push_running(&self, name: &str, value: Tensor) {
        self.running.borrow_mut().push((name.to_string(), value));
    }

    /// Pending running-statistic updates in recording order; apply them with
    /// [`ParamStore::apply_updates`] once the pass is done.
    pub fn take_running_stats(&self) -> Vec<(String, Tensor)> {
        self.running.take()
    }
}

/// Checks the channel axis of an NCHW var.
pub fn expect_channels(x: Var<'_>, channels: usize, what: &str) -> Result<()> {
    let shape = x.shape();
    ensure!(shape.len() == 4, Shape, "{what}: expected an NCHW tensor, got shape {shape:?}");
    ensure!(shape[1] == channels, Shape, "{what}: expected {channels} channels, got {}", shape[1]);
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: String,
    bias: Option<String>,
    geom: ConvGeom,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        geom: ConvGeom,
        bias: bool,
    ) -> Self {
        let rf = kernel * kernel;
        let weight = store.register(
            format!("{prefix}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            ParamKind::Weight { fan_in: in_channels * rf, fan_out: out_channels * rf },
        );
        let bias = bias.then(|| store.register(format!("{prefix}.bias"), &[out_channels], ParamKind::Bias));
        Self { weight, bias, geom, in_channels, out_channels }
    }

    /// Stride-1 convolution that preserves spatial size.
    pub fn same(store: &mut ParamStore, prefix: &str, cin: usize, cout: usize, kernel: usize) -> Self {
        Self::new(store, prefix, cin, cout, kernel, ConvGeom::same(kernel, 1), true)
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }

    pub fn bias_name(&self) -> Option<&str> {
        self.bias.as_deref()
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Var<'t> {
        let bias = self.bias.as_ref().map(|b| ctx.param(b));
        x.conv2d(ctx.param(&self.weight), bias, self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    weight: String,
    bias: Option<String>,
    geom: ConvGeom,
    output_padding: usize,
}

impl ConvTranspose2d {
    /// 3×3, stride-2 transposed convolution that exactly doubles spatial size.
    pub fn doubling(store: &mut ParamStore, prefix: &str, cin: usize, cout: usize, bias: bool) -> Self {
        let rf = 9;
        let weight = store.register(
            format!("{prefix}.weight"),
            &[cin, cout, 3, 3],
            ParamKind::Weight { fan_in: cout * rf, fan_out: cin * rf },
        );
        let bias = bias.then(|| store.register(format!("{prefix}.bias"), &[cout], ParamKind::Bias));
        Self { weight, bias, geom: ConvGeom::strided(2, 1), output_padding: 1 }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Var<'t> {
        let bias = self.bias.as_ref().map(|b| ctx.param(b));
        x.conv_transpose2d(ctx.param(&self.weight), bias, self.geom, self.output_padding)
    }
}

/// Batch normalization over (N, H, W) per channel.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    scale: String,
    shift: String,
    running_mean: String,
    running_var: String,
    channels: usize,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Self {
        Self {
            scale: store.register(format!("{prefix}.scale"), &[channels], ParamKind::NormScale),
            shift: store.register(format!("{prefix}.shift"), &[channels], ParamKind::NormShift),
            running_mean: store.register(format!("{prefix}.running_mean"), &[channels], ParamKind::RunningMean),
            running_var: store.register(format!("{prefix}.running_var"), &[channels], ParamKind::RunningVar),
            channels,
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Var<'t> {
        let c = self.channels;
        let scale = ctx.param(&self.scale).reshape(&[1, c, 1, 1]);
        let shift = ctx.param(&self.shift).reshape(&[1, c, 1, 1]);
        let normed = if ctx.train {
            let mean = x.mean_axes(&[0, 2, 3]);
            let centered = x - mean;
            let var = centered.square().mean_axes(&[0, 2, 3]);
            self.record_running(ctx, &mean.value(), &var.value(), x.value().numel() / c);
            centered / var.add_scalar(BN_EPS).sqrt()
        } else {
            let mean = ctx.param(&self.running_mean).reshape(&[1, c, 1, 1]);
            let var = ctx.param(&self.running_var).reshape(&[1, c, 1, 1]);
            (x - mean) / var.add_scalar(BN_EPS).sqrt()
        };
        normed * scale + shift
    }

    fn record_running(&self, ctx: &Ctx<'_, '_>, mean: &Tensor, var: &Tensor, count: usize) {
        let m = BN_MOMENTUM;
        let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
        let old_mean = ctx.params.get(&self.running_mean);
        let old_var = ctx.params.get(&self.running_var);
        let pending = ctx.running.borrow();
        // chain onto an update already recorded in this pass (shared layer applied twice)
        let latest = |name: &str, fallback: &Tensor| {
            pending.iter().rev().find(|(n, _)| n == name).map(|(_, t)| t.clone()).unwrap_or_else(|| fallback.clone())
        };
        let (om, ov) = (latest(&self.running_mean, old_mean), latest(&self.running_var, old_var));
        drop(pending);
        let new_mean = Tensor::new(
            [self.channels],
            (0..self.channels).map(|i| (1.0 - m) * om.data()[i] + m * mean.data()[i]).collect(),
        );
        let new_var = Tensor::new(
            [self.channels],
            (0..self.channels).map(|i| (1.0 - m) * ov.data()[i] + m * var.data()[i] * unbias).collect(),
        );
        ctx.push_running(&self.running_mean, new_mean);
        ctx.push_running(&self.running_var, new_var);
    }
}
