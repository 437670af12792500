//! Deterministic training loops, checkpoints, gradient verification and
//! cross-validated evaluation.

mod adam;
mod checkpoint;
mod eval;
pub mod loss;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segsr_autograd::{check_gradients, GradCheckOptions, GradCheckReport, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::{image_dims, Mask, StereoSample, TaskKind};
use crate::error::{ensure, Error, Result};
use crate::nn::{Ctx, ParamStore};
use crate::recon::SrModel;
use crate::seg::{SegModel, INPUT_MULTIPLE};

pub use adam::{Adam, AdamHyper};
pub use checkpoint::{Checkpoint, Model, ModelSpec, CHECKPOINT_FORMAT};
pub use eval::{evaluate_seg, evaluate_sr, SegMethod, SrMethod};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SrL1,
    SrL1Ssim,
    SegCeJaccard,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from `lr` to zero over the run.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossKind,
    /// Crop side in LR pixels; segmentation crops `patch_size · scale` input pixels.
    pub patch_size: usize,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    /// Stop after this many steps in total (0: run all epochs).
    pub max_steps: usize,
    /// Train on whole frames instead of random crops.
    pub full_frame: bool,
    pub schedule: LrSchedule,
    pub adam: AdamHyper,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            epochs: 100,
            batch_size: 6,
            seed: 0,
            loss: LossKind::SrL1,
            patch_size: 32,
            checkpoint_every: 0,
            max_steps: 0,
            full_frame: false,
            schedule: LrSchedule::Constant,
            adam: AdamHyper::default(),
        }
    }
}

impl TrainConfig {
    /// Defaults for SR at `scale`: batch 6 at ×2 and 5 at ×4.
    pub fn sr(scale: usize) -> Self {
        Self { batch_size: if scale == 4 { 5 } else { 6 }, ..Self::default() }
    }

    pub fn seg(scale: usize) -> Self {
        Self { loss: LossKind::SegCeJaccard, ..Self::sr(scale) }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.lr > 0.0 && self.lr.is_finite(), Config, "train.lr must be positive, got {}", self.lr);
        ensure!(self.batch_size >= 1, Config, "train.batch_size must be at least 1");
        ensure!(self.patch_size >= 1, Config, "train.patch_size must be at least 1");
        ensure!(self.epochs >= 1 || self.max_steps >= 1, Config, "train.epochs or train.max_steps must be positive");
        let h = self.adam;
        ensure!(
            (0.0..1.0).contains(&h.beta1) && (0.0..1.0).contains(&h.beta2) && h.eps > 0.0,
            Config,
            "invalid Adam hyperparameters {h:?}"
        );
        Ok(())
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, samples: usize) -> usize {
        let full = self.epochs * self.steps_per_epoch(samples);
        if self.max_steps > 0 {
            self.max_steps
        } else {
            full
        }
    }

    fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => 0.5 * self.lr * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()),
        }
    }
}

/// Independent random streams derived from the run seed.
#[derive(Clone, Copy)]
enum Stream {
    EpochOrder = 1,
    Crops = 2,
}

fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 56) | index);
    rng
}

/// Sample order for one epoch.
pub fn epoch_order(seed: u64, epoch: usize, samples: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..samples).collect();
    order.shuffle(&mut stream_rng(seed, Stream::EpochOrder, epoch as u64));
    order
}

/// Optimizer state carried across steps and checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub adam: Adam,
    /// Steps completed so far.
    pub step: usize,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self { adam: Adam::new(cfg.adam), step: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    /// Seconds since the start of this run.
    pub wall_time: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LossRecord>,
}

impl TrainLog {
    /// `(epoch, mean loss)` for every epoch with at least one step.
    pub fn epoch_means(&self) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64, usize)> = Vec::new();
        for r in &self.records {
            match out.last_mut() {
                Some((e, sum, n)) if *e == r.epoch => {
                    *sum += r.loss;
                    *n += 1;
                }
                _ => out.push((r.epoch, r.loss, 1)),
            }
        }
        out.into_iter().map(|(e, s, n)| (e, s / n as f64)).collect()
    }

    /// `step,epoch,loss`, one row per step. Deterministic for a fixed seed.
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,epoch,loss\n");
        for r in &self.records {
            s.push_str(&format!("{},{},{}\n", r.step, r.epoch, r.loss));
        }
        s
    }

    /// `step,wall_time`, kept apart from the loss table so that stays reproducible.
    pub fn timing_csv(&self) -> String {
        let mut s = String::from("step,wall_time\n");
        for r in &self.records {
            s.push_str(&format!("{},{:.6}\n", r.step, r.wall_time));
        }
        s
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub log: TrainLog,
    pub state: TrainState,
}

/// Called with the parameters and state after every `checkpoint_every` steps.
pub type CheckpointHook<'a> = dyn FnMut(&ParamStore, &TrainState) -> Result<()> + 'a;

/// The shared optimization loop. `batch_loss` builds the loss of one batch of
/// sample indices, drawing crops from the step's random stream.
fn optimize<F>(
    cfg: &TrainConfig,
    samples: usize,
    params: &mut ParamStore,
    mut state: TrainState,
    hook: &mut CheckpointHook<'_>,
    batch_loss: F,
) -> Result<TrainOutcome>
where
    F: for<'t> Fn(&Ctx<'t, '_>, &[usize], &mut ChaCha8Rng) -> Result<Var<'t>>,
{
    cfg.validate()?;
    ensure!(samples > 0, Dataset, "training set is empty");
    let per_epoch = cfg.steps_per_epoch(samples);
    let total = cfg.total_steps(samples);
    let start = Instant::now();
    let mut log = TrainLog::default();
    let mut order = Vec::new();
    let mut order_epoch = usize::MAX;
    while state.step < total {
        let step = state.step;
        let epoch = step / per_epoch;
        if epoch != order_epoch {
            order = epoch_order(cfg.seed, epoch, samples);
            order_epoch = epoch;
        }
        let pos = step % per_epoch;
        let batch = &order[pos * cfg.batch_size..((pos + 1) * cfg.batch_size).min(samples)];
        let mut rng = stream_rng(cfg.seed, Stream::Crops, step as u64);

        let tape = Tape::new();
        let ctx = Ctx::new(&tape, params, true);
        let loss = batch_loss(&ctx, batch, &mut rng)?;
        let value = loss.value().item();
        if !value.is_finite() {
            return Err(Error::Diverged(format!("loss is {value} at step {step} (epoch {epoch})")));
        }
        let grads = tape.backward(loss);
        let running = ctx.take_running_stats();
        drop(ctx);
        state.adam.step(params, grads.params(), cfg.lr_at(step, total));
        drop(grads);
        params.apply_updates(running);
        state.step += 1;
        log.records.push(LossRecord { step, epoch, loss: value, wall_time: start.elapsed().as_secs_f64() });
        if cfg.checkpoint_every > 0 && state.step.is_multiple_of(cfg.checkpoint_every) && state.step < total {
            hook(params, &state)?;
        }
    }
    Ok(TrainOutcome { log, state })
}

/// Top-left corner of a random `ph × pw` crop inside `h × w`.
fn crop_origin(rng: &mut ChaCha8Rng, h: usize, w: usize, ph: usize, pw: usize) -> (usize, usize) {
    (rng.gen_range(0..=h - ph), rng.gen_range(0..=w - pw))
}

fn crop_image(img: &Tensor, y: usize, x: usize, h: usize, w: usize) -> Tensor {
    img.narrow(1, y, h).narrow(2, x, w)
}

fn stack(images: Vec<Tensor>) -> Tensor {
    let views: Vec<Tensor> = images
        .into_iter()
        .map(|t| {
            let s = t.shape().to_vec();
            t.reshape([1, s[0], s[1], s[2]])
        })
        .collect();
    Tensor::concat(&views.iter().collect::<Vec<_>>(), 0)
}

/// Trains the SR network with L1 (or L1 + SSIM) on both views.
///
/// Samples need LR views at the model's scale. Each step draws one random LR
/// crop per sample, with the aligned HR crop as target.
pub fn train_sr(
    cfg: &TrainConfig,
    data: &[StereoSample],
    model: &mut SrModel,
    resume: Option<TrainState>,
    hook: &mut CheckpointHook<'_>,
) -> Result<TrainOutcome> {
    ensure!(
        matches!(cfg.loss, LossKind::SrL1 | LossKind::SrL1Ssim),
        Config,
        "SR training needs loss sr_l1 or sr_l1_ssim, got {:?}",
        cfg.loss
    );
    ensure!(!data.is_empty(), Dataset, "SR training set is empty");
    let scale = model.net.scale();
    let mut lr_dims = None;
    for s in data {
        s.validate(Some(scale))?;
        let (l, _) = s.lr_views()?;
        let dims = image_dims(l)?;
        if cfg.full_frame {
            ensure!(
                lr_dims.is_none_or(|d| d == dims),
                Dataset,
                "full-frame training needs equal image sizes; {} differs",
                s.sample_id
            );
        }
        lr_dims = Some(dims);
    }
    let with_ssim = cfg.loss == LossKind::SrL1Ssim;
    let net = &model.net;
    let state = resume.unwrap_or_else(|| TrainState::new(cfg));
    optimize(cfg, data.len(), &mut model.params, state, hook, |ctx, batch, rng| {
        let min_h = batch.iter().map(|&i| data[i].left_lr.as_ref().unwrap().shape()[1]).min().unwrap();
        let min_w = batch.iter().map(|&i| data[i].left_lr.as_ref().unwrap().shape()[2]).min().unwrap();
        let (ph, pw) =
            if cfg.full_frame { (min_h, min_w) } else { (cfg.patch_size.min(min_h), cfg.patch_size.min(min_w)) };
        let mut parts: [Vec<Tensor>; 4] = Default::default();
        for &i in batch {
            let s = &data[i];
            let (l, r) = s.lr_views()?;
            let (h, w) = image_dims(l)?;
            let (y, x) = crop_origin(rng, h, w, ph, pw);
            parts[0].push(crop_image(l, y, x, ph, pw));
            parts[1].push(crop_image(r, y, x, ph, pw));
            parts[2].push(crop_image(&s.left_hr, y * scale, x * scale, ph * scale, pw * scale));
            parts[3].push(crop_image(&s.right_hr, y * scale, x * scale, ph * scale, pw * scale));
        }
        let [l, r, hl, hr] = parts.map(|p| ctx.constant(stack(p)));
        let out = net.forward(ctx, l, r)?;
        let total = loss::sr_loss(out.left, hl, with_ssim) + loss::sr_loss(out.right, hr, with_ssim);
        Ok(total.mul_scalar(0.5))
    })
}

/// An image with its ground-truth mask for one task.
#[derive(Clone, Debug, PartialEq)]
pub struct SegExample {
    pub sample_id: String,
    pub image: Tensor,
    pub mask: Mask,
}

/// Which image the segmentation network sees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegInput {
    /// Super-resolved left view.
    #[default]
    Sr,
    /// Original high-resolution left view.
    Hr,
}

/// Pairs each sample's left view (super-resolved or original) with its mask
/// for `task`. Samples without that mask are skipped.
pub fn seg_examples(
    data: &[StereoSample],
    task: TaskKind,
    input: SegInput,
    sr: Option<&SrModel>,
) -> Result<Vec<SegExample>> {
    let mut out = Vec::new();
    for s in data.iter().filter(|s| s.masks.contains_key(&task)) {
        let image = match input {
            SegInput::Hr => s.left_hr.clone(),
            SegInput::Sr => {
                let model =
                    sr.ok_or_else(|| Error::Config("segmentation on SR input needs an SR checkpoint".into()))?;
                let (l, r) = s.lr_views()?;
                let sr_left = model.super_resolve(l, r)?.0;
                ensure!(
                    sr_left.shape() == s.left_hr.shape(),
                    Shape,
                    "{}: SR output {:?} does not match HR {:?}",
                    s.sample_id,
                    sr_left.shape(),
                    s.left_hr.shape()
                );
                sr_left
            }
        };
        out.push(SegExample { sample_id: s.sample_id.clone(), image, mask: s.masks[&task].clone() });
    }
    Ok(out)
}

/// Trains the segmentation network with cross-entropy + (1 − soft Jaccard).
///
/// Crops are `patch_size · scale` pixels (a multiple of 32), clipped to the
/// image; whole frames are used with `full_frame`.
pub fn train_seg(
    cfg: &TrainConfig,
    scale: usize,
    data: &[SegExample],
    model: &mut SegModel,
    resume: Option<TrainState>,
    hook: &mut CheckpointHook<'_>,
) -> Result<TrainOutcome> {
    ensure!(
        cfg.loss == LossKind::SegCeJaccard,
        Config,
        "segmentation training needs loss seg_ce_jaccard, got {:?}",
        cfg.loss
    );
    ensure!(!data.is_empty(), Dataset, "segmentation training set has no labelled samples");
    let patch = cfg.patch_size * scale;
    ensure!(
        cfg.full_frame || patch.is_multiple_of(INPUT_MULTIPLE),
        Config,
        "segmentation crops are patch_size x scale = {patch} pixels, which must be a multiple of {INPUT_MULTIPLE}"
    );
    let classes = model.task().class_count();
    for ex in data {
        let (h, w) = image_dims(&ex.image)?;
        ensure!(
            (ex.mask.height, ex.mask.width) == (h, w),
            Dataset,
            "{}: mask is {}x{}, image is {h}x{w}",
            ex.sample_id,
            ex.mask.height,
            ex.mask.width
        );
        ensure!(
            (ex.mask.max_label() as usize) < classes,
            Dataset,
            "{}: label {} outside {classes} classes",
            ex.sample_id,
            ex.mask.max_label()
        );
        let fits = if cfg.full_frame { (h, w) } else { (h.min(patch), w.min(patch)) };
        ensure!(
            fits.0 % INPUT_MULTIPLE == 0 && fits.1 % INPUT_MULTIPLE == 0,
            Dataset,
            "{}: training crop {}x{} is not a multiple of {INPUT_MULTIPLE}",
            ex.sample_id,
            fits.0,
            fits.1
        );
    }
    let net = &model.net;
    let state = resume.unwrap_or_else(|| TrainState::new(cfg));
    optimize(cfg, data.len(), &mut model.params, state, hook, |ctx, batch, rng| {
        let dims: Vec<(usize, usize)> = batch.iter().map(|&i| image_dims(&data[i].image)).collect::<Result<_>>()?;
        let (min_h, min_w) = (dims.iter().map(|d| d.0).min().unwrap(), dims.iter().map(|d| d.1).min().unwrap());
        let (ph, pw) = if cfg.full_frame { (min_h, min_w) } else { (patch.min(min_h), patch.min(min_w)) };
        let mut images = Vec::new();
        let mut targets = Vec::new();
        for (&i, &(h, w)) in batch.iter().zip(&dims) {
            ensure!(!cfg.full_frame || (h, w) == (ph, pw), Dataset, "full-frame training needs equal image sizes");
            let (y, x) = crop_origin(rng, h, w, ph, pw);
            images.push(crop_image(&data[i].image, y, x, ph, pw));
            targets.push(data[i].mask.crop(y, x, ph, pw).one_hot(classes));
        }
        let logits = net.forward(ctx, ctx.constant(stack(images)))?;
        let target = Tensor::concat(&targets.iter().collect::<Vec<_>>(), 0);
        Ok(loss::seg_loss(logits, ctx.constant(target)))
    })
}

/// A hook that does nothing.
pub fn no_checkpoints(_: &ParamStore, _: &TrainState) -> Result<()> {
    Ok(())
}

/// Gradient verification on random inputs of the given shapes (uniform in
/// [−1, 1] from `seed`).
pub fn gradient_check<F>(input_shapes: &[&[usize]], f: F, step: f64, seed: u64) -> GradCheckReport
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor> =
        input_shapes.iter().map(|s| Tensor::from_fn(s.to_vec(), |_| rng.gen_range(-1.0..1.0))).collect();
    check_gradients(&inputs, f, &GradCheckOptions { step, seed, ..Default::default() })
}
