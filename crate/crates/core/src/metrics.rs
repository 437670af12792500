//! Image quality and overlap metrics with fold aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use segsr_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::Mask;
use crate::error::{ensure, Error, Result};

/// Peak signal-to-noise ratio in dB. Identical inputs give `f64::INFINITY`.
pub fn psnr(a: &Tensor, b: &Tensor, data_range: f64) -> Result<f64> {
    ensure!(a.shape() == b.shape(), Shape, "psnr: {:?} vs {:?}", a.shape(), b.shape());
    ensure!(data_range > 0.0, InvalidArgument, "psnr: data_range must be positive, got {data_range}");
    ensure!(a.numel() > 0, Shape, "psnr: empty images");
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.numel() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (data_range * data_range / mse).log10() })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, data_range: 1.0 }
    }
}

impl SsimParams {
    /// Window actually used for an `h × w` image: the configured size, shrunk
    /// to the largest odd size that fits.
    pub fn effective_window(&self, h: usize, w: usize) -> usize {
        let fit = h.min(w).min(self.window);
        if fit.is_multiple_of(2) {
            fit.saturating_sub(1).max(1)
        } else {
            fit
        }
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }
}

/// Normalized 1-D Gaussian taps of length `n`.
pub fn gaussian_window(n: usize, sigma: f64) -> Vec<f64> {
    let mid = (n as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..n).map(|i| (-((i as f64 - mid).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let n = g.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = g.iter().enumerate().map(|(k, gk)| gk * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = g.iter().enumerate().map(|(k, gk)| gk * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity over all valid Gaussian windows, computed per
/// channel and averaged. The last two axes are spatial; leading axes are
/// treated as channels.
pub fn ssim(a: &Tensor, b: &Tensor, p: &SsimParams) -> Result<f64> {
    ensure!(a.shape() == b.shape(), Shape, "ssim: {:?} vs {:?}", a.shape(), b.shape());
    ensure!(a.rank() >= 2 && a.numel() > 0, Shape, "ssim: need at least 2 non-empty axes, got {:?}", a.shape());
    ensure!(p.sigma > 0.0 && p.data_range > 0.0 && p.window >= 1, InvalidArgument, "ssim: invalid parameters {p:?}");
    let s = a.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let g = gaussian_window(p.effective_window(h, w), p.sigma);
    let (c1, c2) = (p.c1(), p.c2());
    let plane = h * w;
    let channels = a.numel() / plane;
    let mut total = 0.0;
    for c in 0..channels {
        let x = &a.data()[c * plane..(c + 1) * plane];
        let y = &b.data()[c * plane..(c + 1) * plane];
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(u, v)| u * v).collect();
        let [mx, my, sxx, syy, sxy] = [x, y, &xx[..], &yy[..], &xy[..]].map(|p| filter_valid(p, h, w, &g));
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            acc += (2.0 * ux * uy + c1) * (2.0 * cov + c2) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / channels as f64)
}

/// Per-class overlap scores and their mean over scored classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    /// `None` for classes absent from both masks.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

struct Counts {
    pred: Vec<usize>,
    gt: Vec<usize>,
    both: Vec<usize>,
}

fn count(pred: &Mask, gt: &Mask, n_classes: usize) -> Result<Counts> {
    ensure!(
        (pred.height, pred.width) == (gt.height, gt.width),
        Shape,
        "masks differ in size: {}x{} vs {}x{}",
        pred.height,
        pred.width,
        gt.height,
        gt.width
    );
    ensure!(n_classes >= 1, InvalidArgument, "n_classes must be positive");
    let mut c = Counts { pred: vec![0; n_classes], gt: vec![0; n_classes], both: vec![0; n_classes] };
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        let (p, g) = (p as usize, g as usize);
        ensure!(
            p < n_classes && g < n_classes,
            InvalidArgument,
            "label {} out of range for {n_classes} classes",
            p.max(g)
        );
        c.pred[p] += 1;
        c.gt[g] += 1;
        if p == g {
            c.both[p] += 1;
        }
    }
    Ok(c)
}

fn scores(c: Counts, f: impl Fn(usize, usize, usize) -> f64) -> ClassScores {
    let per_class: Vec<Option<f64>> =
        (0..c.pred.len()).map(|k| (c.pred[k] + c.gt[k] > 0).then(|| f(c.both[k], c.pred[k], c.gt[k]))).collect();
    let scored: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = scored.iter().sum::<f64>() / scored.len() as f64;
    ClassScores { per_class, mean }
}

/// Intersection over union per class. Classes absent from both masks are left
/// out of the mean; a class present in only one mask scores 0.
pub fn iou(pred: &Mask, gt: &Mask, n_classes: usize) -> Result<ClassScores> {
    Ok(scores(count(pred, gt, n_classes)?, |i, p, g| i as f64 / (p + g - i) as f64))
}

/// Dice coefficient per class, with the same absence handling as [`iou`].
pub fn dice(pred: &Mask, gt: &Mask, n_classes: usize) -> Result<ClassScores> {
    Ok(scores(count(pred, gt, n_classes)?, |i, p, g| 2.0 * i as f64 / (p + g) as f64))
}

/// Divisor used for standard deviations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StdConvention {
    /// Divide by N.
    #[default]
    Population,
    /// Divide by N − 1.
    Sample,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

pub fn aggregate(values: &[f64], conv: StdConvention) -> Result<Aggregate> {
    ensure!(!values.is_empty(), InvalidArgument, "cannot aggregate an empty list");
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let divisor = match conv {
        StdConvention::Population => n,
        StdConvention::Sample if values.len() > 1 => n - 1.0,
        StdConvention::Sample => return Ok(Aggregate { mean, std: 0.0 }),
    };
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / divisor;
    Ok(Aggregate { mean, std: var.sqrt() })
}

/// Mean and population standard deviation.
pub fn aggregate_folds(values: &[f64]) -> Result<(f64, f64)> {
    aggregate(values, StdConvention::Population).map(|a| (a.mean, a.std))
}

/// Which pair of metrics a report carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportKind {
    /// PSNR and SSIM.
    Sr,
    /// IoU and Dice.
    Seg,
}

impl ReportKind {
    pub fn metrics(self) -> [&'static str; 2] {
        match self {
            ReportKind::Sr => ["psnr", "ssim"],
            ReportKind::Seg => ["iou", "dice"],
        }
    }

    /// Header of the CSV table written by [`write_csv`].
    pub fn csv_header(self) -> String {
        let [a, b] = self.metrics();
        let setting = match self {
            ReportKind::Sr => "scale",
            ReportKind::Seg => "task",
        };
        format!("method,{setting},{a}_mean,{a}_std,{b}_mean,{b}_std")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetric {
    pub sample_id: String,
    pub fold: Option<usize>,
    pub metric: String,
    pub value: f64,
}

/// Per-sample metric values with their aggregates.
///
/// Non-finite values (PSNR of identical images) serialize to JSON as `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub kind: ReportKind,
    /// Scale factor (`"x2"`) or task name.
    pub setting: String,
    pub std_convention: StdConvention,
    /// How a stereo pair's PSNR/SSIM is formed from its two views.
    pub view_reduction: String,
    pub fold_id: Option<usize>,
    pub per_sample: Vec<SampleMetric>,
    pub aggregates: BTreeMap<String, Aggregate>,
    /// Metric → fold → mean over that fold's samples.
    pub per_fold: BTreeMap<String, BTreeMap<usize, f64>>,
}

impl MetricReport {
    pub fn new(method: impl Into<String>, kind: ReportKind, setting: impl Into<String>) -> Self {
        Self {
            method: method.into(),
            kind,
            setting: setting.into(),
            std_convention: StdConvention::Population,
            view_reduction: "per_view_mean".into(),
            fold_id: None,
            per_sample: Vec::new(),
            aggregates: BTreeMap::new(),
            per_fold: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, sample_id: &str, fold: Option<usize>, metric: &str, value: f64) {
        self.per_sample.push(SampleMetric { sample_id: sample_id.into(), fold, metric: metric.into(), value });
    }

    pub fn values(&self, metric: &str) -> Vec<f64> {
        self.per_sample.iter().filter(|e| e.metric == metric).map(|e| e.value).collect()
    }

    /// Recomputes `aggregates` and `per_fold` from `per_sample`.
    pub fn finalize(&mut self) -> Result<()> {
        self.aggregates.clear();
        self.per_fold.clear();
        for metric in self.kind.metrics() {
            let values = self.values(metric);
            if values.is_empty() {
                continue;
            }
            self.aggregates.insert(metric.into(), aggregate(&values, self.std_convention)?);
            let mut folds: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for e in self.per_sample.iter().filter(|e| e.metric == metric) {
                if let Some(f) = e.fold {
                    folds.entry(f).or_default().push(e.value);
                }
            }
            let means = folds.into_iter().map(|(f, v)| (f, v.iter().sum::<f64>() / v.len() as f64)).collect();
            self.per_fold.insert(metric.into(), means);
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metric report serializes")
    }

    pub fn csv_row(&self) -> String {
        let mut row = format!("{},{}", self.method, self.setting);
        for metric in self.kind.metrics() {
            match self.aggregates.get(metric) {
                Some(a) => write!(row, ",{},{}", a.mean, a.std),
                None => write!(row, ",,"),
            }
            .expect("writing to a String");
        }
        row
    }
}

/// Writes reports of one kind as a CSV table, one row per report.
pub fn write_csv(path: &Path, reports: &[MetricReport]) -> Result<()> {
    ensure!(!reports.is_empty(), InvalidArgument, "no reports to write");
    let kind = reports[0].kind;
    ensure!(reports.iter().all(|r| r.kind == kind), InvalidArgument, "reports mix SR and segmentation metrics");
    let mut text = kind.csv_header();
    text.push('\n');
    for r in reports {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
