//! PNG outputs: colorized masks, side-by-side strips and simple charts.

use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use segsr_core::autograd::Tensor;
use segsr_core::data::{image_dims, Mask, TaskKind};
use segsr_core::Result;
use serde::Serialize;

/// Class colors, indexed by class id.
pub const PALETTE: [[u8; 3]; 8] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
];

const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([60, 60, 60]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const MARGIN: u32 = 24;

pub fn class_names(task: TaskKind) -> Vec<String> {
    match task {
        TaskKind::Binary => vec!["background".into(), "instrument".into()],
        TaskKind::Parts => ["background", "shaft", "wrist", "claspers"].map(String::from).to_vec(),
        TaskKind::Type => {
            std::iter::once("background".to_string()).chain((1..=7).map(|i| format!("type_{i}"))).collect()
        }
    }
}

#[derive(Serialize)]
pub struct LegendEntry {
    pub id: usize,
    pub name: String,
    pub color: [u8; 3],
}

#[derive(Serialize)]
pub struct Legend {
    pub task: TaskKind,
    pub classes: Vec<LegendEntry>,
}

pub fn legend(task: TaskKind) -> Legend {
    let classes = class_names(task)
        .into_iter()
        .enumerate()
        .map(|(id, name)| LegendEntry { id, name, color: PALETTE[id] })
        .collect();
    Legend { task, classes }
}

pub fn color_mask(mask: &Mask) -> RgbImage {
    RgbImage::from_fn(mask.width as u32, mask.height as u32, |x, y| {
        Rgb(PALETTE[mask.get(y as usize, x as usize) as usize % PALETTE.len()])
    })
}

/// 8-bit RGB copy of a (3, H, W) image in [0, 1].
pub fn to_rgb(img: &Tensor) -> Result<RgbImage> {
    let (h, w) = image_dims(img)?;
    let d = img.data();
    let plane = h * w;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([0, 1, 2].map(|c| (d[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8))
    }))
}

/// Panels side by side, each scaled (nearest neighbour) to the tallest panel's height.
pub fn strip(panels: &[RgbImage]) -> RgbImage {
    const GAP: u32 = 4;
    let height = panels.iter().map(|p| p.height()).max().unwrap_or(1);
    let scaled: Vec<RgbImage> = panels
        .iter()
        .map(|p| {
            if p.height() == height {
                p.clone()
            } else {
                let w = (p.width() * height).div_ceil(p.height());
                imageops::resize(p, w, height, FilterType::Nearest)
            }
        })
        .collect();
    let width = scaled.iter().map(|p| p.width()).sum::<u32>() + GAP * scaled.len().saturating_sub(1) as u32;
    let mut out = RgbImage::from_pixel(width.max(1), height, BACKGROUND);
    let mut x = 0;
    for p in &scaled {
        imageops::replace(&mut out, p, i64::from(x), 0);
        x += p.width() + GAP;
    }
    out
}

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn new(w: u32, h: u32) -> Self {
        Self { img: RgbImage::from_pixel(w, h, BACKGROUND) }
    }

    fn rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb<u8>) {
        let (w, h) = (i64::from(self.img.width()), i64::from(self.img.height()));
        for y in y0.max(0)..y1.min(h) {
            for x in x0.max(0)..x1.min(w) {
                self.img.put_pixel(x as u32, y as u32, c);
            }
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
        let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
        for i in 0..=steps {
            let x = x0 + (x1 - x0) * i / steps;
            let y = y0 + (y1 - y0) * i / steps;
            self.rect(x, y, x + 2, y + 2, c);
        }
    }

    /// Frame around the plot area with horizontal grid lines at quarters.
    fn axes(&mut self) {
        let (w, h) = (i64::from(self.img.width()), i64::from(self.img.height()));
        let m = i64::from(MARGIN);
        for q in 1..4 {
            let y = m + (h - 2 * m) * q / 4;
            self.rect(m, y, w - m, y + 1, GRID);
        }
        self.rect(m, m, m + 1, h - m, AXIS);
        self.rect(m, h - m, w - m, h - m + 1, AXIS);
    }
}

/// Line chart of a series against its index, y range fitted to the data.
pub fn line_chart(values: &[f64], width: u32, height: u32) -> RgbImage {
    let mut c = Canvas::new(width, height);
    c.axes();
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.len() >= 2 {
        let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let (pw, ph) = (f64::from(width - 2 * MARGIN), f64::from(height - 2 * MARGIN));
        let point = |i: usize, v: f64| {
            let x = f64::from(MARGIN) + pw * i as f64 / (finite.len() - 1) as f64;
            let y = f64::from(MARGIN) + ph * (1.0 - (v - lo) / span);
            (x.round() as i64, y.round() as i64)
        };
        for (i, pair) in finite.windows(2).enumerate() {
            c.line(point(i, pair[0]), point(i + 1, pair[1]), Rgb(PALETTE[4]));
        }
    }
    c.img
}

/// Grouped bar chart: one panel per metric, one group per fold, one bar per
/// series (colored by series index). `panels[m][s][f]` is metric m of series
/// s on fold f; bars start at zero.
pub fn bar_chart(panels: &[Vec<Vec<f64>>], panel_height: u32) -> RgbImage {
    const BAR: u32 = 10;
    const GROUP_GAP: u32 = 8;
    let series = panels.iter().map(Vec::len).max().unwrap_or(0).max(1) as u32;
    let folds = panels.iter().flatten().map(Vec::len).max().unwrap_or(0).max(1) as u32;
    let width = 2 * MARGIN + folds * (series * BAR + GROUP_GAP);
    let mut c = Canvas::new(width, panel_height * panels.len().max(1) as u32);
    for (m, panel) in panels.iter().enumerate() {
        let top = i64::from(panel_height) * m as i64;
        let bottom = top + i64::from(panel_height - MARGIN);
        let hi = panel.iter().flatten().copied().filter(|v| v.is_finite()).fold(0.0, f64::max);
        let scale = if hi > 0.0 { f64::from(panel_height - 2 * MARGIN) / hi } else { 0.0 };
        for (s, values) in panel.iter().enumerate() {
            for (f, &v) in values.iter().enumerate() {
                let x = i64::from(MARGIN + f as u32 * (series * BAR + GROUP_GAP) + GROUP_GAP / 2 + s as u32 * BAR);
                let h = if v.is_finite() { (v.max(0.0) * scale).round() as i64 } else { 0 };
                c.rect(x, bottom - h, x + i64::from(BAR) - 1, bottom, Rgb(PALETTE[1 + s % (PALETTE.len() - 1)]));
            }
        }
        c.rect(i64::from(MARGIN), bottom, i64::from(width - MARGIN), bottom + 1, AXIS);
    }
    c.img
}
