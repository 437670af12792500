//! Encoder–decoder segmentation network: residual encoder, spatial pyramid
//! pooling on the deepest stage, transposed-convolution decoder with skip
//! additions.

use segsr_autograd::{ConvGeom, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::{image_dims, Mask, TaskKind};
use crate::error::{ensure, Result};
use crate::nn::{expect_channels, init_weights, BatchNorm2d, Conv2d, ConvTranspose2d, Ctx, ParamStore};
use crate::resize::{adaptive_avg_weights, bilinear_weights};

/// Input height and width must be multiples of this.
pub const INPUT_MULTIPLE: usize = 32;

/// Channels of the first head layer.
const HEAD_CHANNELS: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegConfig {
    pub task: TaskKind,
    pub encoder_widths: Vec<usize>,
    pub spp_levels: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Binary,
            encoder_widths: vec![64, 64, 128, 256, 512],
            spp_levels: vec![1, 2, 3, 6],
            blocks_per_stage: vec![2, 2, 2, 2],
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.encoder_widths.len() == 5,
            Config,
            "seg.encoder_widths needs 5 entries (stem + 4 stages), got {}",
            self.encoder_widths.len()
        );
        ensure!(self.encoder_widths.iter().all(|&w| w >= 1), Config, "seg.encoder_widths must be positive");
        ensure!(
            self.blocks_per_stage.len() == 4,
            Config,
            "seg.blocks_per_stage needs 4 entries, got {}",
            self.blocks_per_stage.len()
        );
        ensure!(self.blocks_per_stage.iter().all(|&b| b >= 1), Config, "seg.blocks_per_stage must be positive");
        ensure!(!self.spp_levels.is_empty(), Config, "seg.spp_levels must not be empty");
        ensure!(self.spp_levels[0] >= 1, Config, "seg.spp_levels must be positive");
        ensure!(
            self.spp_levels.windows(2).all(|p| p[0] < p[1]),
            Config,
            "seg.spp_levels must be strictly increasing, got {:?}",
            self.spp_levels
        );
        let deepest = self.encoder_widths[4];
        ensure!(
            deepest.is_multiple_of(self.spp_levels.len()),
            Config,
            "deepest encoder width {deepest} must be divisible by the number of SPP levels ({})",
            self.spp_levels.len()
        );
        ensure!(
            self.encoder_widths[1..4].iter().all(|&w| w >= 4) && deepest >= 4,
            Config,
            "decoder blocks reduce channels by 4; encoder stage widths must be at least 4"
        );
        Ok(())
    }
}

/// Two 3×3 conv + batch-norm layers with an identity or projected shortcut.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let downsample = (stride != 1 || cin != cout).then(|| {
            (
                Conv2d::new(store, &format!("{prefix}.down.conv"), cin, cout, 1, ConvGeom::strided(stride, 0), false),
                BatchNorm2d::new(store, &format!("{prefix}.down.bn"), cout),
            )
        });
        Self {
            conv1: Conv2d::new(store, &format!("{prefix}.conv1"), cin, cout, 3, ConvGeom::strided(stride, 1), false),
            bn1: BatchNorm2d::new(store, &format!("{prefix}.bn1"), cout),
            conv2: Conv2d::new(store, &format!("{prefix}.conv2"), cout, cout, 3, ConvGeom::strided(1, 1), false),
            bn2: BatchNorm2d::new(store, &format!("{prefix}.bn2"), cout),
            downsample,
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Var<'t> {
        let y = self.bn1.forward(ctx, self.conv1.forward(ctx, x)).relu();
        let y = self.bn2.forward(ctx, self.conv2.forward(ctx, y));
        let shortcut = match &self.downsample {
            Some((conv, bn)) => bn.forward(ctx, conv.forward(ctx, x)),
            None => x,
        };
        (y + shortcut).relu()
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    stages: Vec<Vec<BasicBlock>>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &SegConfig) -> Self {
        let w = &cfg.encoder_widths;
        let stem = Conv2d::new(store, &format!("{prefix}.stem.conv"), 3, w[0], 7, ConvGeom::strided(2, 3), false);
        let stem_bn = BatchNorm2d::new(store, &format!("{prefix}.stem.bn"), w[0]);
        let stages = (0..4)
            .map(|s| {
                (0..cfg.blocks_per_stage[s])
                    .map(|b| {
                        let (cin, stride) = if b == 0 { (w[s], if s == 0 { 1 } else { 2 }) } else { (w[s + 1], 1) };
                        BasicBlock::new(store, &format!("{prefix}.stage{}.block{b}", s + 1), cin, w[s + 1], stride)
                    })
                    .collect()
            })
            .collect();
        Self { stem, stem_bn, stages }
    }

    /// Stage outputs at strides 4, 8, 16 and 32.
    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, image: Var<'t>) -> Result<Vec<Var<'t>>> {
        expect_channels(image, 3, "encoder input")?;
        let (_, _, h, w) = image.dims4();
        ensure!(
            h % INPUT_MULTIPLE == 0 && w % INPUT_MULTIPLE == 0 && h > 0 && w > 0,
            Shape,
            "segmentation input is {h}x{w}; height and width must be multiples of {INPUT_MULTIPLE}"
        );
        let mut x = self.stem_bn.forward(ctx, self.stem.forward(ctx, image)).relu().max_pool2d(3, 2, 1);
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                x = block.forward(ctx, x);
            }
            outs.push(x);
        }
        Ok(outs)
    }
}

/// Pyramid of adaptive average pools, each projected by a 1×1 conv (ReLU),
/// upsampled bilinearly and concatenated with the input before a 1×1 fusion.
#[derive(Clone, Debug)]
pub struct Spp {
    pub levels: Vec<usize>,
    pub branches: Vec<Conv2d>,
    pub fuse: Conv2d,
    channels: usize,
}

impl Spp {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, levels: &[usize]) -> Self {
        let reduced = channels / levels.len();
        let branches =
            levels.iter().map(|n| Conv2d::same(store, &format!("{prefix}.level{n}"), channels, reduced, 1)).collect();
        let fuse = Conv2d::same(store, &format!("{prefix}.fuse"), channels + reduced * levels.len(), channels, 1);
        Self { levels: levels.to_vec(), branches, fuse, channels }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, f: Var<'t>) -> Result<Var<'t>> {
        expect_channels(f, self.channels, "SPP")?;
        let (_, _, h, w) = f.dims4();
        let mut parts = vec![f];
        for (&n, conv) in self.levels.iter().zip(&self.branches) {
            let pooled = f.resample(&adaptive_avg_weights(h, n), &adaptive_avg_weights(w, n));
            let branch = conv.forward(ctx, pooled).relu();
            parts.push(branch.resample(&bilinear_weights(n, h), &bilinear_weights(n, w)));
        }
        Ok(self.fuse.forward(ctx, Var::concat(&parts, 1)).relu())
    }
}

/// 1×1 reduce (÷4) → 3×3 stride-2 transposed conv → 1×1 expand, each with
/// batch-norm and ReLU.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    reduce: Conv2d,
    bn1: BatchNorm2d,
    up: ConvTranspose2d,
    bn2: BatchNorm2d,
    expand: Conv2d,
    bn3: BatchNorm2d,
}

impl DecoderBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, cin: usize, cout: usize) -> Self {
        let mid = cin / 4;
        Self {
            reduce: Conv2d::same(store, &format!("{prefix}.reduce"), cin, mid, 1),
            bn1: BatchNorm2d::new(store, &format!("{prefix}.bn1"), mid),
            up: ConvTranspose2d::doubling(store, &format!("{prefix}.up"), mid, mid, true),
            bn2: BatchNorm2d::new(store, &format!("{prefix}.bn2"), mid),
            expand: Conv2d::same(store, &format!("{prefix}.expand"), mid, cout, 1),
            bn3: BatchNorm2d::new(store, &format!("{prefix}.bn3"), cout),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Var<'t> {
        let x = self.bn1.forward(ctx, self.reduce.forward(ctx, x)).relu();
        let x = self.bn2.forward(ctx, self.up.forward(ctx, x)).relu();
        self.bn3.forward(ctx, self.expand.forward(ctx, x)).relu()
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    blocks: Vec<DecoderBlock>,
    head_up: ConvTranspose2d,
    head_conv: Conv2d,
    head_out: ConvTranspose2d,
    classes: usize,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &SegConfig) -> Self {
        let w = &cfg.encoder_widths;
        let blocks =
            (1..4).rev().map(|i| DecoderBlock::new(store, &format!("{prefix}.block{i}"), w[i + 1], w[i])).collect();
        let classes = cfg.task.class_count();
        Self {
            blocks,
            head_up: ConvTranspose2d::doubling(store, &format!("{prefix}.head.up"), w[1], HEAD_CHANNELS, true),
            head_conv: Conv2d::same(store, &format!("{prefix}.head.conv"), HEAD_CHANNELS, HEAD_CHANNELS, 3),
            head_out: ConvTranspose2d::doubling(store, &format!("{prefix}.head.out"), HEAD_CHANNELS, classes, true),
            classes,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// `deepest` is the (SPP-processed) stride-32 map; `stages` are the encoder
    /// outputs, whose first three serve as skips.
    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, deepest: Var<'t>, stages: &[Var<'t>]) -> Var<'t> {
        let mut x = deepest;
        for (block, skip) in self.blocks.iter().zip(stages[..3].iter().rev()) {
            x = block.forward(ctx, x) + *skip;
        }
        let x = self.head_up.forward(ctx, x).relu();
        let x = self.head_conv.forward(ctx, x).relu();
        self.head_out.forward(ctx, x)
    }
}

#[derive(Clone, Debug)]
pub struct SegNet {
    pub encoder: Encoder,
    pub spp: Spp,
    pub decoder: Decoder,
    cfg: SegConfig,
}

impl SegNet {
    pub fn new(store: &mut ParamStore, cfg: &SegConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            encoder: Encoder::new(store, "encoder", cfg),
            spp: Spp::new(store, "spp", cfg.encoder_widths[4], &cfg.spp_levels),
            decoder: Decoder::new(store, "decoder", cfg),
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &SegConfig {
        &self.cfg
    }

    /// Logits (N, K, H, W) for an (N, 3, H, W) batch.
    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, image: Var<'t>) -> Result<Var<'t>> {
        let stages = self.encoder.forward(ctx, image)?;
        let deepest = self.spp.forward(ctx, stages[3])?;
        Ok(self.decoder.forward(ctx, deepest, &stages))
    }
}

/// Per-pixel argmax over the class axis of (K, H, W) logits; ties go to the
/// lowest class id.
pub fn argmax_mask(logits: &Tensor) -> Result<Mask> {
    let s = logits.shape();
    ensure!(s.len() == 3 && s[0] >= 1, Shape, "expected (K, H, W) logits, got {s:?}");
    let (k, h, w) = (s[0], s[1], s[2]);
    let plane = h * w;
    let d = logits.data();
    let labels = (0..plane)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if d[c * plane + p] > d[best * plane + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    Mask::new(h, w, labels)
}

/// Segmentation network together with its parameters.
#[derive(Clone, Debug)]
pub struct SegModel {
    pub net: SegNet,
    pub params: ParamStore,
}

impl SegModel {
    pub fn new(cfg: &SegConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = SegNet::new(&mut params, cfg)?;
        init_weights(&mut params, seed);
        Ok(Self { net, params })
    }

    pub fn config(&self) -> &SegConfig {
        self.net.config()
    }

    pub fn task(&self) -> TaskKind {
        self.net.cfg.task
    }

    /// Inference logits (K, H, W) for one (3, H, W) image.
    pub fn logits(&self, image: &Tensor) -> Result<Tensor> {
        let (h, w) = image_dims(image)?;
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &self.params, false);
        let out = self.net.forward(&ctx, tape.constant(image.clone().reshape([1, 3, h, w])))?;
        let k = self.net.decoder.classes();
        Ok(out.value().as_ref().clone().reshape([k, h, w]))
    }

    pub fn segment(&self, image: &Tensor) -> Result<Mask> {
        argmax_mask(&self.logits(image)?)
    }

    /// Like [`segment`](Self::segment) for any size: the image is padded by edge
    /// replication to a multiple of 32 and the mask cropped back.
    pub fn segment_padded(&self, image: &Tensor) -> Result<Mask> {
        let (h, w) = image_dims(image)?;
        let (ph, pw) = (h.next_multiple_of(INPUT_MULTIPLE), w.next_multiple_of(INPUT_MULTIPLE));
        if (ph, pw) == (h, w) {
            return self.segment(image);
        }
        let padded = Tensor::from_fn([3, ph, pw], |i| image.get(&[i[0], i[1].min(h - 1), i[2].min(w - 1)]));
        Ok(self.segment(&padded)?.crop(0, 0, h, w))
    }
}
