//! Stereo samples, degradation to low resolution, synthetic scenes, fold splits
//! and on-disk dataset layout.

mod degrade;
mod folds;
mod io;
mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use segsr_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

pub use degrade::{degrade, validate_scale};
pub use folds::{split_folds, FoldSplit};
pub use io::{
    list_pngs, load_mask, load_rgb, load_stereo_dataset, save_mask, save_rgb, write_stereo_sample, LABELS_DIR,
    LEFT_DIR, RIGHT_DIR,
};
pub use synth::{make_synthetic_stereo, SynthScene};

/// Segmentation task granularity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Background vs instrument.
    Binary,
    /// Background, shaft, wrist, claspers.
    Parts,
    /// Background plus seven instrument types.
    Type,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Binary, TaskKind::Parts, TaskKind::Type];

    pub fn class_count(self) -> usize {
        match self {
            TaskKind::Binary => 2,
            TaskKind::Parts => 4,
            TaskKind::Type => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Binary => "binary",
            TaskKind::Parts => "parts",
            TaskKind::Type => "type",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown task {s:?} (expected binary, parts or type)")))
    }
}

/// Per-pixel class ids for one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        ensure!(labels.len() == height * width, Shape, "mask of {height}x{width} needs {} labels", height * width);
        Ok(Self { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self { height, width, labels: vec![class; height * width] }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// One-hot encoding as a (1, K, H, W) tensor.
    pub fn one_hot(&self, classes: usize) -> Tensor {
        let plane = self.height * self.width;
        let mut data = vec![0.0; classes * plane];
        for (i, &l) in self.labels.iter().enumerate() {
            data[l as usize * plane + i] = 1.0;
        }
        Tensor::new([1, classes, self.height, self.width], data)
    }

    /// Rectangular crop `[y, y+h) × [x, x+w)`.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Mask {
        let mut labels = Vec::with_capacity(h * w);
        for r in y..y + h {
            labels.extend_from_slice(&self.labels[r * self.width + x..r * self.width + x + w]);
        }
        Mask { height: h, width: w, labels }
    }
}

/// A rectified stereo pair with optional low-resolution views and label masks.
///
/// Images are (3, H, W) tensors with values in [0, 1]. Masks annotate the left view.
#[derive(Clone, Debug, PartialEq)]
pub struct StereoSample {
    pub sample_id: String,
    pub left_hr: Tensor,
    pub right_hr: Tensor,
    pub left_lr: Option<Tensor>,
    pub right_lr: Option<Tensor>,
    pub masks: BTreeMap<TaskKind, Mask>,
}

/// `(height, width)` of a (3, H, W) image tensor.
pub fn image_dims(img: &Tensor) -> Result<(usize, usize)> {
    let s = img.shape();
    ensure!(s.len() == 3 && s[0] == 3, Shape, "expected a (3, H, W) image, got shape {s:?}");
    Ok((s[1], s[2]))
}

impl StereoSample {
    pub fn hr_dims(&self) -> (usize, usize) {
        (self.left_hr.shape()[1], self.left_hr.shape()[2])
    }

    /// Checks the shape and label invariants; `scale` applies to LR views if present.
    pub fn validate(&self, scale: Option<usize>) -> Result<()> {
        let (h, w) = image_dims(&self.left_hr)?;
        let right = image_dims(&self.right_hr)?;
        ensure!(
            (h, w) == right,
            Dataset,
            "{}: left view is {h}x{w} but right view is {}x{}",
            self.sample_id,
            right.0,
            right.1
        );
        for lr in [&self.left_lr, &self.right_lr].into_iter().flatten() {
            let s = scale.ok_or_else(|| Error::InvalidArgument("LR views present but no scale given".into()))?;
            let (lh, lw) = image_dims(lr)?;
            ensure!(
                h % s == 0 && w % s == 0 && lh * s == h && lw * s == w,
                Dataset,
                "{}: LR view {lh}x{lw} is not the {h}x{w} HR view divided by {s}",
                self.sample_id
            );
        }
        for (task, mask) in &self.masks {
            ensure!(
                mask.height == h && mask.width == w,
                Dataset,
                "{}: {task} mask is {}x{}, image is {h}x{w}",
                self.sample_id,
                mask.height,
                mask.width
            );
            ensure!(
                (mask.max_label() as usize) < task.class_count(),
                Dataset,
                "{}: {task} mask has class id {} but the task has {} classes",
                self.sample_id,
                mask.max_label(),
                task.class_count()
            );
        }
        Ok(())
    }

    /// Fills missing LR views by degrading the HR views.
    pub fn ensure_lr(&mut self, scale: usize) -> Result<()> {
        if self.left_lr.is_none() {
            self.left_lr = Some(degrade(&self.left_hr, scale)?);
        }
        if self.right_lr.is_none() {
            self.right_lr = Some(degrade(&self.right_hr, scale)?);
        }
        self.validate(Some(scale))
    }

    pub fn lr_views(&self) -> Result<(&Tensor, &Tensor)> {
        match (&self.left_lr, &self.right_lr) {
            (Some(l), Some(r)) => Ok((l, r)),
            _ => Err(Error::Dataset(format!("{}: low-resolution views missing", self.sample_id))),
        }
    }
}
