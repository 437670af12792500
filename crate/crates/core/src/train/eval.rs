use super::SegExample;
use crate::data::{FoldSplit, StereoSample, TaskKind};
use crate::error::{Error, Result};
use crate::metrics::{dice, iou, psnr, ssim, MetricReport, ReportKind, SsimParams};
use crate::recon::{bicubic_upscale, SrModel};
use crate::seg::SegModel;

/// Source of super-resolved views.
#[derive(Clone, Copy)]
pub enum SrMethod<'a> {
    Model(&'a SrModel),
    /// Bicubic upscaling of each LR view.
    Bicubic,
}

/// Source of predicted masks.
#[derive(Clone, Copy)]
pub enum SegMethod<'a> {
    Model(&'a SegModel),
    /// Returns the ground truth itself.
    GroundTruth,
}

/// Samples grouped by validation fold, in fold order then dataset order.
fn by_fold<'d, T>(items: &'d [T], id: impl Fn(&T) -> &str, folds: &FoldSplit) -> Result<Vec<(usize, &'d T)>> {
    if let Some(missing) = items.iter().find(|i| folds.fold_of(id(i)).is_none()) {
        return Err(Error::Dataset(format!("sample {} is not in the fold split", id(missing))));
    }
    let mut out = Vec::with_capacity(items.len());
    for f in 0..folds.k {
        out.extend(items.iter().filter(|i| folds.fold_of(id(i)) == Some(f)).map(|i| (f, i)));
    }
    Ok(out)
}

/// PSNR and SSIM per stereo pair (mean of the two views) for every sample,
/// walking the validation folds in order.
pub fn evaluate_sr(
    method: SrMethod<'_>,
    name: &str,
    data: &[StereoSample],
    folds: &FoldSplit,
    scale: usize,
) -> Result<MetricReport> {
    let mut report = MetricReport::new(name, ReportKind::Sr, format!("x{scale}"));
    let params = SsimParams::default();
    for (fold, s) in by_fold(data, |s| &s.sample_id, folds)? {
        let (l, r) = s.lr_views()?;
        let (pl, pr) = match method {
            SrMethod::Model(m) => {
                if m.net.scale() != scale {
                    return Err(Error::Config(format!(
                        "model upscales x{}, evaluation asks for x{scale}",
                        m.net.scale()
                    )));
                }
                m.super_resolve(l, r)?
            }
            SrMethod::Bicubic => (bicubic_upscale(l, scale)?, bicubic_upscale(r, scale)?),
        };
        let p = (psnr(&pl, &s.left_hr, 1.0)? + psnr(&pr, &s.right_hr, 1.0)?) / 2.0;
        let q = (ssim(&pl, &s.left_hr, &params)? + ssim(&pr, &s.right_hr, &params)?) / 2.0;
        report.push(&s.sample_id, Some(fold), "psnr", p);
        report.push(&s.sample_id, Some(fold), "ssim", q);
    }
    report.finalize()?;
    Ok(report)
}

/// Mean IoU and mean Dice over scored classes for every example, walking the
/// validation folds in order.
pub fn evaluate_seg(
    method: SegMethod<'_>,
    name: &str,
    data: &[SegExample],
    folds: &FoldSplit,
    task: TaskKind,
) -> Result<MetricReport> {
    let mut report = MetricReport::new(name, ReportKind::Seg, task.name());
    let k = task.class_count();
    for (fold, ex) in by_fold(data, |e| &e.sample_id, folds)? {
        let pred = match method {
            SegMethod::Model(m) => m.segment_padded(&ex.image)?,
            SegMethod::GroundTruth => ex.mask.clone(),
        };
        report.push(&ex.sample_id, Some(fold), "iou", iou(&pred, &ex.mask, k)?.mean);
        report.push(&ex.sample_id, Some(fold), "dice", dice(&pred, &ex.mask, k)?.mean);
    }
    report.finalize()?;
    Ok(report)
}
