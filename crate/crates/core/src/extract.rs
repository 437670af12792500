//! Per-view feature extraction: channel + spatial attention, dilated pyramid,
//! and a chain of residual dense blocks.

use segsr_autograd::{ConvGeom, Var};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::nn::{expect_channels, Conv2d, Ctx, ParamStore};

/// Kernel size of the spatial-attention convolution.
pub const SPATIAL_KERNEL: usize = 7;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorConfig {
    pub base_channels: usize,
    pub n_rdb: usize,
    pub rdb_layers: usize,
    pub rdb_growth: usize,
    pub ca_reduction: usize,
    pub aspp_rates: Vec<usize>,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            n_rdb: 4,
            rdb_layers: 4,
            rdb_growth: 32,
            ca_reduction: 16,
            aspp_rates: vec![1, 2, 4, 8],
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("base_channels", self.base_channels),
            ("n_rdb", self.n_rdb),
            ("rdb_layers", self.rdb_layers),
            ("rdb_growth", self.rdb_growth),
            ("ca_reduction", self.ca_reduction),
        ] {
            ensure!(v >= 1, Config, "extractor.{name} must be at least 1");
        }
        ensure!(
            self.base_channels.is_multiple_of(self.ca_reduction),
            Config,
            "extractor.base_channels ({}) must be divisible by extractor.ca_reduction ({})",
            self.base_channels,
            self.ca_reduction
        );
        ensure!(!self.aspp_rates.is_empty(), Config, "extractor.aspp_rates must not be empty");
        ensure!(self.aspp_rates.iter().all(|&r| r >= 1), Config, "extractor.aspp_rates must all be at least 1");
        Ok(())
    }
}

/// Squeeze-and-excitation style channel gate.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    down: Conv2d,
    up: Conv2d,
    channels: usize,
}

impl ChannelAttention {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, reduction: usize) -> Result<Self> {
        ensure!(
            reduction >= 1 && channels.is_multiple_of(reduction),
            Config,
            "channel attention: {channels} channels not divisible by reduction {reduction}"
        );
        let hidden = channels / reduction;
        Ok(Self {
            down: Conv2d::same(store, &format!("{prefix}.down"), channels, hidden, 1),
            up: Conv2d::same(store, &format!("{prefix}.up"), hidden, channels, 1),
            channels,
        })
    }

    pub fn down(&self) -> &Conv2d {
        &self.down
    }

    pub fn up(&self) -> &Conv2d {
        &self.up
    }

    /// Per-channel gate values in (0, 1), shape (N, C, 1, 1).
    pub fn gate<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        expect_channels(x, self.channels, "channel attention")?;
        let pooled = x.mean_axes(&[2, 3]);
        Ok(self.up.forward(ctx, self.down.forward(ctx, pooled).relu()).sigmoid())
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x * self.gate(ctx, x)?)
    }
}

/// Per-pixel gate from channel-wise mean and max maps.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    conv: Conv2d,
}

impl SpatialAttention {
    pub fn new(store: &mut ParamStore, prefix: &str, kernel: usize) -> Self {
        Self { conv: Conv2d::same(store, &format!("{prefix}.conv"), 2, 1, kernel) }
    }

    pub fn conv(&self) -> &Conv2d {
        &self.conv
    }

    /// Gate map in (0, 1), shape (N, 1, H, W).
    pub fn gate<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        ensure!(shape.len() == 4 && shape[1] >= 1, Shape, "spatial attention: expected NCHW input, got {shape:?}");
        let stats = Var::concat(&[x.mean_axes(&[1]), x.max_axis(1)], 1);
        Ok(self.conv.forward(ctx, stats).sigmoid())
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x * self.gate(ctx, x)?)
    }
}

/// Channel attention followed by spatial attention.
#[derive(Clone, Debug)]
pub struct Ccsb {
    pub channel: ChannelAttention,
    pub spatial: SpatialAttention,
}

impl Ccsb {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, reduction: usize) -> Result<Self> {
        Ok(Self {
            channel: ChannelAttention::new(store, &format!("{prefix}.ca"), channels, reduction)?,
            spatial: SpatialAttention::new(store, &format!("{prefix}.sa"), SPATIAL_KERNEL),
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        self.spatial.forward(ctx, self.channel.forward(ctx, x)?)
    }
}

/// Parallel dilated 3×3 branches (ReLU), concatenated and fused by a 1×1 conv.
#[derive(Clone, Debug)]
pub struct Aspp {
    pub branches: Vec<Conv2d>,
    pub fuse: Conv2d,
    channels: usize,
}

impl Aspp {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, rates: &[usize]) -> Result<Self> {
        ensure!(!rates.is_empty(), InvalidArgument, "ASPP needs at least one rate");
        if let Some(r) = rates.iter().find(|&&r| r < 1) {
            return Err(crate::Error::InvalidArgument(format!("ASPP rate must be at least 1, got {r}")));
        }
        let branches = rates
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                Conv2d::new(store, &format!("{prefix}.branch{i}"), channels, channels, 3, ConvGeom::same(3, r), true)
            })
            .collect();
        let fuse = Conv2d::same(store, &format!("{prefix}.fuse"), channels * rates.len(), channels, 1);
        Ok(Self { branches, fuse, channels })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        expect_channels(x, self.channels, "ASPP")?;
        let outs: Vec<Var<'t>> = self.branches.iter().map(|b| b.forward(ctx, x).relu()).collect();
        Ok(self.fuse.forward(ctx, Var::concat(&outs, 1)))
    }
}

/// Residual dense block: densely connected 3×3 conv + ReLU layers, 1×1 local
/// fusion, and a local residual.
#[derive(Clone, Debug)]
pub struct Rdb {
    pub layers: Vec<Conv2d>,
    pub fuse: Conv2d,
    channels: usize,
}

impl Rdb {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, n_layers: usize, growth: usize) -> Self {
        let layers = (0..n_layers)
            .map(|i| Conv2d::same(store, &format!("{prefix}.layer{i}"), channels + i * growth, growth, 3))
            .collect();
        let fuse = Conv2d::same(store, &format!("{prefix}.fuse"), channels + n_layers * growth, channels, 1);
        Self { layers, fuse, channels }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        expect_channels(x, self.channels, "residual dense block")?;
        let mut feats = vec![x];
        for layer in &self.layers {
            let y = layer.forward(ctx, Var::concat(&feats, 1)).relu();
            feats.push(y);
        }
        Ok(x + self.fuse.forward(ctx, Var::concat(&feats, 1)))
    }
}

/// Outputs of every residual dense block plus their 1×1 fusion.
#[derive(Clone, Debug)]
pub struct FeatureHierarchy<'t> {
    pub per_block: Vec<Var<'t>>,
    pub fused: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub head: Conv2d,
    pub ccsb: Ccsb,
    pub aspp: Aspp,
    pub rdbs: Vec<Rdb>,
    pub hierarchy_fuse: Conv2d,
}

impl FeatureExtractor {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &ExtractorConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.base_channels;
        Ok(Self {
            head: Conv2d::same(store, &format!("{prefix}.head"), 3, c, 3),
            ccsb: Ccsb::new(store, &format!("{prefix}.ccsb"), c, cfg.ca_reduction)?,
            aspp: Aspp::new(store, &format!("{prefix}.aspp"), c, &cfg.aspp_rates)?,
            rdbs: (0..cfg.n_rdb)
                .map(|i| Rdb::new(store, &format!("{prefix}.rdb{i}"), c, cfg.rdb_layers, cfg.rdb_growth))
                .collect(),
            hierarchy_fuse: Conv2d::same(store, &format!("{prefix}.hier_fuse"), c * cfg.n_rdb, c, 1),
        })
    }

    /// `lr` is an (N, 3, h, w) batch of low-resolution views.
    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, lr: Var<'t>) -> Result<FeatureHierarchy<'t>> {
        expect_channels(lr, 3, "feature extractor input")?;
        let mut x = self.head.forward(ctx, lr);
        x = self.ccsb.forward(ctx, x)?;
        x = self.aspp.forward(ctx, x)?;
        let mut per_block = Vec::with_capacity(self.rdbs.len());
        for rdb in &self.rdbs {
            x = rdb.forward(ctx, x)?;
            per_block.push(x);
        }
        let fused = self.hierarchy_fuse.forward(ctx, Var::concat(&per_block, 1));
        Ok(FeatureHierarchy { per_block, fused })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_weights;
    use segsr_autograd::{check_gradients, GradCheckOptions, Tape, Tensor};

    fn random(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    fn run<F>(store: &ParamStore, x: &Tensor, f: F) -> Tensor
    where
        F: for<'t> Fn(&Ctx<'t, '_>, Var<'t>) -> Result<Var<'t>>,
    {
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, store, false);
        f(&ctx, tape.constant(x.clone())).unwrap().value().as_ref().clone()
    }

    #[test]
    fn channel_attention_cases() {
        let mut store = ParamStore::new();
        let ca = ChannelAttention::new(&mut store, "ca", 2, 2).unwrap();
        let zeros = Tensor::zeros([1, 2, 3, 3]);
        assert_eq!(run(&store, &zeros, |c, x| ca.forward(c, x)), zeros);

        // pooled (1, 1) -> hidden relu(1 + 1) = 2 -> logits (0, 40) -> gates (0.5, ~1)
        store.set(ca.down().weight_name(), Tensor::new([1, 2, 1, 1], vec![1.0, 1.0])).unwrap();
        store.set(ca.up().weight_name(), Tensor::new([2, 1, 1, 1], vec![0.0, 20.0])).unwrap();
        let y = run(&store, &Tensor::ones([1, 2, 3, 3]), |c, x| ca.forward(c, x));
        assert!(y.data()[..9].iter().all(|&v| v == 0.5));
        assert!(y.data()[9..].iter().all(|&v| (v - 1.0).abs() < 1e-12));

        let mut store = ParamStore::new();
        let ca = ChannelAttention::new(&mut store, "ca", 4, 2).unwrap();
        store.fill_prefix("ca.up.bias", 20.0);
        let x = random(&[2, 4, 3, 5], 1);
        assert!(run(&store, &x, |c, v| ca.forward(c, v)).max_abs_diff(&x) < 1e-6);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store, false);
        assert!(ca.forward(&ctx, tape.constant(Tensor::zeros([1, 3, 2, 2]))).is_err());
    }

    #[test]
    fn spatial_attention_cases() {
        let mut store = ParamStore::new();
        let sa = SpatialAttention::new(&mut store, "sa", 1);
        let zeros = Tensor::zeros([1, 3, 4, 4]);
        assert_eq!(run(&store, &zeros, |c, x| sa.forward(c, x)), zeros);

        let x = random(&[1, 3, 4, 4], 2);
        store.fill_prefix("sa.conv.bias", 20.0);
        assert!(run(&store, &x, |c, v| sa.forward(c, v)).max_abs_diff(&x) < 1e-6);

        // one hot pixel of value 2 in a single channel: mean = max = 2 there, 0 elsewhere
        store.set("sa.conv.weight", Tensor::new([1, 2, 1, 1], vec![0.5, 0.25])).unwrap();
        store.set("sa.conv.bias", Tensor::new([1], vec![-1.0])).unwrap();
        let mut hot = Tensor::zeros([1, 1, 3, 3]);
        hot.set(&[0, 0, 1, 2], 2.0);
        let y = run(&store, &hot, |c, v| sa.forward(c, v));
        let gate = 1.0 / (1.0 + (-(0.5 * 2.0 + 0.25 * 2.0 - 1.0_f64)).exp());
        assert!((y.get(&[0, 0, 1, 2]) - 2.0 * gate).abs() < 1e-15);
        assert_eq!(y.data().iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn gates_never_amplify() {
        let mut store = ParamStore::new();
        let ccsb = Ccsb::new(&mut store, "c", 8, 4).unwrap();
        init_weights(&mut store, 3);
        let x = random(&[2, 8, 5, 6], 4);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store, false);
        let xv = tape.constant(x.clone());
        let ca = ccsb.channel.forward(&ctx, xv).unwrap().value();
        let sa = ccsb.spatial.forward(&ctx, xv).unwrap().value();
        for i in 0..x.numel() {
            assert!(ca.data()[i].abs() <= x.data()[i].abs());
            assert!(sa.data()[i].abs() <= x.data()[i].abs());
        }
    }

    #[test]
    fn ccsb_is_composition() {
        let mut store = ParamStore::new();
        let ccsb = Ccsb::new(&mut store, "c", 8, 4).unwrap();
        assert_eq!(run(&store, &Tensor::zeros([1, 8, 4, 4]), |c, x| ccsb.forward(c, x)), Tensor::zeros([1, 8, 4, 4]));
        init_weights(&mut store, 7);
        let x = random(&[1, 8, 5, 7], 8);
        let composed = run(&store, &x, |c, v| ccsb.channel.forward(c, v));
        let composed = run(&store, &composed, |c, v| ccsb.spatial.forward(c, v));
        assert!(run(&store, &x, |c, v| ccsb.forward(c, v)).max_abs_diff(&composed) < 1e-6);

        store.fill_prefix("c.ca.up.bias", 20.0);
        store.fill_prefix("c.sa.conv.bias", 20.0);
        store.fill_prefix("c.ca.up.weight", 0.0);
        store.fill_prefix("c.sa.conv.weight", 0.0);
        assert!(run(&store, &x, |c, v| ccsb.forward(c, v)).max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn aspp_cases() {
        let mut store = ParamStore::new();
        let aspp = Aspp::new(&mut store, "a", 2, &[1]).unwrap();
        init_weights(&mut store, 1);
        store.set("a.fuse.weight", Tensor::new([2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0])).unwrap();
        let x = random(&[1, 2, 6, 6], 3);
        let conv = run(&store, &x, |c, v| Ok(aspp.branches[0].forward(c, v).relu()));
        assert!(run(&store, &x, |c, v| aspp.forward(c, v)).max_abs_diff(&conv) < 1e-15);

        // constant input c, each branch kernel summing to sigma_i per output channel
        let mut store = ParamStore::new();
        let aspp = Aspp::new(&mut store, "a", 1, &[1, 2]).unwrap();
        store.fill_prefix("a.branch0.weight", 0.5 / 9.0);
        store.fill_prefix("a.branch1.weight", 2.0 / 9.0);
        store.set("a.fuse.weight", Tensor::new([1, 2, 1, 1], vec![1.0, 10.0])).unwrap();
        let y = run(&store, &Tensor::full([1, 1, 9, 9], 0.3), |c, v| aspp.forward(c, v));
        let want = 0.5 * 0.3 + 10.0 * 2.0 * 0.3;
        for r in 2..7 {
            for col in 2..7 {
                assert!((y.get(&[0, 0, r, col]) - want).abs() < 1e-12);
            }
        }

        let mut store = ParamStore::new();
        let aspp = Aspp::new(&mut store, "a", 4, &[1, 2, 4, 8]).unwrap();
        init_weights(&mut store, 2);
        assert_eq!(run(&store, &random(&[1, 4, 16, 16], 1), |c, v| aspp.forward(c, v)).shape(), &[1, 4, 16, 16]);
        assert!(Aspp::new(&mut ParamStore::new(), "a", 4, &[1, 0]).is_err());
    }

    #[test]
    fn rdb_cases() {
        let mut store = ParamStore::new();
        let rdb = Rdb::new(&mut store, "r", 3, 2, 4);
        let x = random(&[1, 3, 4, 5], 5);
        assert_eq!(run(&store, &x, |c, v| rdb.forward(c, v)), x);
        init_weights(&mut store, 9);
        let zeros = Tensor::zeros([1, 3, 4, 5]);
        assert_eq!(run(&store, &zeros, |c, v| rdb.forward(c, v)), zeros);

        // one layer, one channel, growth 1, 1x1 spatial: only kernel centers matter
        let mut store = ParamStore::new();
        let rdb = Rdb::new(&mut store, "r", 1, 1, 1);
        let mut k = Tensor::zeros([1, 1, 3, 3]);
        k.set(&[0, 0, 1, 1], 2.0);
        store.set("r.layer0.weight", k).unwrap();
        store.set("r.layer0.bias", Tensor::new([1], vec![-1.0])).unwrap();
        store.set("r.fuse.weight", Tensor::new([1, 2, 1, 1], vec![0.5, 3.0])).unwrap();
        store.set("r.fuse.bias", Tensor::new([1], vec![0.25])).unwrap();
        let x = 1.5;
        let layer = (2.0 * x - 1.0_f64).max(0.0);
        let want = x + 0.5 * x + 3.0 * layer + 0.25;
        let y = run(&store, &Tensor::new([1, 1, 1, 1], vec![x]), |c, v| rdb.forward(c, v));
        assert!((y.item() - want).abs() < 1e-15);
    }

    #[test]
    fn extractor_shapes() {
        let mut store = ParamStore::new();
        let ext = FeatureExtractor::new(&mut store, "extract", &ExtractorConfig::default()).unwrap();
        init_weights(&mut store, 0);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store, false);
        let h = ext.forward(&ctx, tape.constant(random(&[1, 3, 16, 24], 0))).unwrap();
        assert_eq!(h.per_block.len(), 4);
        for b in &h.per_block {
            assert_eq!(b.shape(), [1, 64, 16, 24]);
        }
        assert_eq!(h.fused.shape(), [1, 64, 16, 24]);

        let cfg = ExtractorConfig {
            base_channels: 8,
            n_rdb: 1,
            rdb_layers: 2,
            rdb_growth: 4,
            ca_reduction: 4,
            ..Default::default()
        };
        let mut store = ParamStore::new();
        let ext = FeatureExtractor::new(&mut store, "e", &cfg).unwrap();
        init_weights(&mut store, 1);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store, false);
        let h = ext.forward(&ctx, tape.constant(random(&[1, 3, 5, 6], 2))).unwrap();
        let by_hand = ext.hierarchy_fuse.forward(&ctx, h.per_block[0]);
        assert_eq!(h.fused.value(), by_hand.value());
    }

    #[test]
    fn config_validation() {
        let bad = ExtractorConfig { base_channels: 30, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ExtractorConfig { n_rdb: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn extractor_gradient() {
        let cfg = ExtractorConfig {
            base_channels: 4,
            n_rdb: 2,
            rdb_layers: 2,
            rdb_growth: 2,
            ca_reduction: 2,
            aspp_rates: vec![1, 2],
        };
        let mut store = ParamStore::new();
        let ext = FeatureExtractor::new(&mut store, "e", &cfg).unwrap();
        init_weights(&mut store, 4);
        let report = check_gradients(
            &[random(&[1, 3, 8, 8], 6)],
            |tape, v| ext.forward(&Ctx::new(tape, &store, true), v[0]).unwrap().fused,
            &GradCheckOptions::default(),
        );
        assert!(report.passes(1e-3), "{report:?}");
    }
}
