//! Stereo super-resolution network: shared per-view extractor, cross-view
//! interaction, view fusion, refinement and sub-pixel upsampling.

use segsr_autograd::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::{image_dims, validate_scale};
use crate::error::{ensure, Result};
use crate::extract::{ChannelAttention, ExtractorConfig, FeatureExtractor, Rdb};
use crate::nn::{expect_channels, init_weights, Conv2d, Ctx, ParamStore};
use crate::pam::{CrossView, Pam, PamConfig};
use crate::resize::bicubic_weights;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconstructionConfig {
    pub scale: usize,
    pub n_refine_rdb: usize,
    pub use_global_skip: bool,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        Self { scale: 2, n_refine_rdb: 2, use_global_skip: true }
    }
}

/// Full architecture description of the SR network.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SrConfig {
    pub extractor: ExtractorConfig,
    pub pam: PamConfig,
    pub reconstruction: ReconstructionConfig,
}

impl SrConfig {
    pub fn validate(&self) -> Result<()> {
        self.extractor.validate()?;
        self.pam.validate()?;
        validate_scale(self.reconstruction.scale).map_err(|_| {
            crate::Error::Config(format!("reconstruction.scale must be 2 or 4, got {}", self.reconstruction.scale))
        })?;
        ensure!(self.reconstruction.n_refine_rdb >= 1, Config, "reconstruction.n_refine_rdb must be at least 1");
        Ok(())
    }
}

/// RDB → channel attention → further RDBs → 3×3 conv.
#[derive(Clone, Debug)]
pub struct Refine {
    pub first: Rdb,
    pub attention: ChannelAttention,
    pub rest: Vec<Rdb>,
    pub out: Conv2d,
}

impl Refine {
    pub fn new(store: &mut ParamStore, prefix: &str, ext: &ExtractorConfig, n_rdb: usize) -> Result<Self> {
        let c = ext.base_channels;
        let rdb = |store: &mut ParamStore, i: usize| {
            Rdb::new(store, &format!("{prefix}.rdb{i}"), c, ext.rdb_layers, ext.rdb_growth)
        };
        let first = rdb(store, 0);
        let attention = ChannelAttention::new(store, &format!("{prefix}.ca"), c, ext.ca_reduction)?;
        let rest = (1..n_rdb).map(|i| rdb(store, i)).collect();
        Ok(Self { first, attention, rest, out: Conv2d::same(store, &format!("{prefix}.out"), c, c, 3) })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, f: Var<'t>) -> Result<Var<'t>> {
        let mut x = self.first.forward(ctx, f)?;
        x = self.attention.forward(ctx, x)?;
        for rdb in &self.rest {
            x = rdb.forward(ctx, x)?;
        }
        Ok(self.out.forward(ctx, x))
    }
}

#[derive(Clone, Debug)]
pub struct SrNet {
    pub extractor: FeatureExtractor,
    pub pam: Pam,
    pub fuse: Conv2d,
    pub refine: Refine,
    pub upsample: Conv2d,
    cfg: SrConfig,
}

/// Both super-resolved views plus the cross-view intermediates.
pub struct SrOutput<'t> {
    pub left: Var<'t>,
    pub right: Var<'t>,
    pub cross: CrossView<'t>,
}

impl SrNet {
    pub fn new(store: &mut ParamStore, cfg: &SrConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.extractor.base_channels;
        let s = cfg.reconstruction.scale;
        Ok(Self {
            extractor: FeatureExtractor::new(store, "extract", &cfg.extractor)?,
            pam: Pam::new(store, "pam", c, &cfg.pam)?,
            fuse: Conv2d::same(store, "recon.fuse", 2 * c, c, 1),
            refine: Refine::new(store, "recon.refine", &cfg.extractor, cfg.reconstruction.n_refine_rdb)?,
            upsample: Conv2d::same(store, "recon.upsample", c, 3 * s * s, 3),
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &SrConfig {
        &self.cfg
    }

    pub fn scale(&self) -> usize {
        self.cfg.reconstruction.scale
    }

    /// Channel concatenation of own and cross-view features, fused by a 1×1 conv.
    pub fn fuse_views<'t>(&self, ctx: &Ctx<'t, '_>, own: Var<'t>, cross: Var<'t>) -> Result<Var<'t>> {
        let c = self.cfg.extractor.base_channels;
        expect_channels(own, c, "view fusion (own)")?;
        expect_channels(cross, c, "view fusion (cross)")?;
        Ok(self.fuse.forward(ctx, Var::concat(&[own, cross], 1)))
    }

    /// Convolution to 3·s² channels followed by pixel shuffle.
    pub fn upsample_subpixel<'t>(&self, ctx: &Ctx<'t, '_>, f: Var<'t>) -> Var<'t> {
        self.upsample.forward(ctx, f).pixel_shuffle(self.scale())
    }

    fn bicubic_skip<'t>(&self, lr: Var<'t>) -> Var<'t> {
        let (_, _, h, w) = lr.dims4();
        let s = self.scale();
        lr.resample(&bicubic_weights(h, s * h, false), &bicubic_weights(w, s * w, false))
    }

    fn reconstruct_view<'t>(&self, ctx: &Ctx<'t, '_>, lr: Var<'t>, own: Var<'t>, filled: Var<'t>) -> Result<Var<'t>> {
        let fused = self.fuse_views(ctx, own, filled)?;
        let sr = self.upsample_subpixel(ctx, self.refine.forward(ctx, fused)?);
        Ok(if self.cfg.reconstruction.use_global_skip { sr + self.bicubic_skip(lr) } else { sr })
    }

    /// Raw (unclamped) outputs for (N, 3, h, w) batches of both views.
    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, lr_left: Var<'t>, lr_right: Var<'t>) -> Result<SrOutput<'t>> {
        ensure!(
            lr_left.shape() == lr_right.shape(),
            Shape,
            "left and right LR views differ in shape: {:?} vs {:?}",
            lr_left.shape(),
            lr_right.shape()
        );
        let hier_l = self.extractor.forward(ctx, lr_left)?;
        let hier_r = self.extractor.forward(ctx, lr_right)?;
        let cross = self.pam.interact(ctx, &hier_l, &hier_r)?;
        let left = self.reconstruct_view(ctx, lr_left, hier_l.fused, cross.left)?;
        let right = self.reconstruct_view(ctx, lr_right, hier_r.fused, cross.right)?;
        Ok(SrOutput { left, right, cross })
    }
}

/// SR network together with its parameters.
#[derive(Clone, Debug)]
pub struct SrModel {
    pub net: SrNet,
    pub params: ParamStore,
}

impl SrModel {
    /// Builds the network and draws Xavier weights from `seed`.
    pub fn new(cfg: &SrConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = SrNet::new(&mut params, cfg)?;
        init_weights(&mut params, seed);
        Ok(Self { net, params })
    }

    pub fn config(&self) -> &SrConfig {
        self.net.config()
    }

    /// Inference on one (3, h, w) pair: running batch-norm statistics, outputs
    /// clamped to [0, 1].
    pub fn super_resolve(&self, lr_left: &Tensor, lr_right: &Tensor) -> Result<(Tensor, Tensor)> {
        let (h, w) = image_dims(lr_left)?;
        ensure!(
            image_dims(lr_right)? == (h, w),
            Shape,
            "left and right LR views differ in shape: {:?} vs {:?}",
            lr_left.shape(),
            lr_right.shape()
        );
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &self.params, false);
        let batch = |t: &Tensor| tape.constant(t.clone().reshape([1, 3, h, w]));
        let out = self.net.forward(&ctx, batch(lr_left), batch(lr_right))?;
        let s = self.net.scale();
        let finish = |v: Var<'_>| v.value().map(|x| x.clamp(0.0, 1.0)).reshape([3, s * h, s * w]);
        Ok((finish(out.left), finish(out.right)))
    }
}

/// Bicubic ×`scale` upsampling of a (3, h, w) image, clamped to [0, 1]; the
/// reference baseline for SR.
pub fn bicubic_upscale(lr: &Tensor, scale: usize) -> Result<Tensor> {
    validate_scale(scale)?;
    let (h, w) = image_dims(lr)?;
    Ok(crate::resize::bicubic_resize(lr, scale * h, scale * w, false).map(|v| v.clamp(0.0, 1.0)))
}
