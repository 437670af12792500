use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segsr_autograd::Tensor;

use crate::data::{Mask, StereoSample, TaskKind};
use crate::error::{ensure, Result};

/// Parts labels used by the synthetic instrument.
const SHAFT: u8 = 1;
const WRIST: u8 = 2;
const CLASPER: u8 = 3;

struct Wave {
    fy: f64,
    fx: f64,
    phase: f64,
    amp: f64,
}

struct Blob {
    cy: f64,
    cx: f64,
    sigma: f64,
    amp: f64,
}

/// Segment from `a` to `b` with a radius, in canvas (y, x) coordinates.
struct Capsule {
    a: (f64, f64),
    b: (f64, f64),
    radius: f64,
}

impl Capsule {
    /// Distance from `p` to the segment axis.
    fn axis_distance(&self, p: (f64, f64)) -> f64 {
        let (dy, dx) = (self.b.0 - self.a.0, self.b.1 - self.a.1);
        let len2 = dy * dy + dx * dx;
        let t =
            if len2 == 0.0 { 0.0 } else { (((p.0 - self.a.0) * dy + (p.1 - self.a.1) * dx) / len2).clamp(0.0, 1.0) };
        let (qy, qx) = (self.a.0 + t * dy, self.a.1 + t * dx);
        ((p.0 - qy).powi(2) + (p.1 - qx).powi(2)).sqrt()
    }
}

/// Procedural scene rendered on a canvas `disparity` pixels wider than the views.
pub struct SynthScene {
    tissue: [f64; 3],
    waves: Vec<Wave>,
    blobs: Vec<Blob>,
    shaft: Capsule,
    wrist: Capsule,
    claspers: [Capsule; 2],
    tool_type: u8,
    shaft_tone: [f64; 3],
}

impl SynthScene {
    pub fn random(height: usize, canvas_width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (height as f64, canvas_width as f64);
        let tissue = [rng.gen_range(0.55..0.85), rng.gen_range(0.2..0.4), rng.gen_range(0.18..0.35)];
        let waves = (0..6)
            .map(|_| {
                let freq = rng.gen_range(0.02..0.3);
                let angle: f64 = rng.gen_range(0.0..PI);
                Wave {
                    fy: freq * angle.sin(),
                    fx: freq * angle.cos(),
                    phase: rng.gen_range(0.0..2.0 * PI),
                    amp: rng.gen_range(0.02..0.08),
                }
            })
            .collect();
        let blobs = (0..4)
            .map(|_| Blob {
                cy: rng.gen_range(0.0..h),
                cx: rng.gen_range(0.0..w),
                sigma: rng.gen_range(0.08..0.25) * h.min(w),
                amp: rng.gen_range(-0.2..0.25),
            })
            .collect();

        let unit = h.min(w);
        let radius = (0.07 * unit).max(1.5);
        let entry = (h + radius, rng.gen_range(0.1..0.6) * w);
        let theta: f64 = rng.gen_range(-0.55..0.55);
        let dir = (-theta.cos(), theta.sin());
        let length = rng.gen_range(0.45..0.7) * h;
        let tip = (entry.0 + length * dir.0, entry.1 + length * dir.1);
        let jaw = |turn: f64| {
            let (s, c) = turn.sin_cos();
            let d = (dir.0 * c - dir.1 * s, dir.0 * s + dir.1 * c);
            Capsule { a: tip, b: (tip.0 + 2.6 * radius * d.0, tip.1 + 2.6 * radius * d.1), radius: 0.5 * radius }
        };
        let tool_type = rng.gen_range(1..=7u8);
        let tone = 0.15 + 0.07 * f64::from(tool_type % 4);
        let tint = if tool_type > 4 { 0.08 } else { 0.0 };
        Self {
            tissue,
            waves,
            blobs,
            shaft: Capsule { a: entry, b: tip, radius },
            wrist: Capsule { a: tip, b: tip, radius: 1.3 * radius },
            claspers: [jaw(0.4), jaw(-0.4)],
            tool_type,
            shaft_tone: [tone, tone + tint, tone + 2.0 * tint],
        }
    }

    /// Parts label and shading at a canvas point.
    fn instrument_at(&self, p: (f64, f64)) -> Option<(u8, [f64; 3])> {
        let shade = |d: f64, r: f64| 0.7 + 0.3 * (d / r * PI / 2.0).cos();
        let d = self.wrist.axis_distance(p);
        if d < self.wrist.radius {
            let s = shade(d, self.wrist.radius) * 0.6;
            return Some((WRIST, [s, s, s]));
        }
        for jaw in &self.claspers {
            let d = jaw.axis_distance(p);
            if d < jaw.radius {
                let s = shade(d, jaw.radius) * 0.85;
                return Some((CLASPER, [s, s, s * 0.95]));
            }
        }
        let d = self.shaft.axis_distance(p);
        if d < self.shaft.radius {
            let s = shade(d, self.shaft.radius);
            return Some((SHAFT, self.shaft_tone.map(|c| c * s)));
        }
        None
    }

    fn tissue_at(&self, p: (f64, f64)) -> [f64; 3] {
        let ripple: f64 =
            self.waves.iter().map(|w| w.amp * (2.0 * PI * (w.fy * p.0 + w.fx * p.1) + w.phase).sin()).sum();
        let glow: f64 = self
            .blobs
            .iter()
            .map(|b| b.amp * (-((p.0 - b.cy).powi(2) + (p.1 - b.cx).powi(2)) / (2.0 * b.sigma * b.sigma)).exp())
            .sum();
        self.tissue.map(|c| c * (1.0 + ripple) + glow)
    }

    /// Renders the canvas as an RGB tensor quantized to 8-bit levels plus a parts mask.
    pub fn render(&self, height: usize, canvas_width: usize) -> (Tensor, Mask) {
        let plane = height * canvas_width;
        let mut img = vec![0.0; 3 * plane];
        let mut parts = vec![0u8; plane];
        for y in 0..height {
            for x in 0..canvas_width {
                let p = (y as f64 + 0.5, x as f64 + 0.5);
                let rgb = match self.instrument_at(p) {
                    Some((label, rgb)) => {
                        parts[y * canvas_width + x] = label;
                        rgb
                    }
                    None => self.tissue_at(p),
                };
                for (c, v) in rgb.into_iter().enumerate() {
                    img[c * plane + y * canvas_width + x] = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
                }
            }
        }
        (Tensor::new([3, height, canvas_width], img), Mask { height, width: canvas_width, labels: parts })
    }
}

fn crop_columns(img: &Tensor, start: usize, width: usize) -> Tensor {
    img.narrow(2, start, width)
}

/// Deterministic stereo pair with a known horizontal disparity.
///
/// Column `c` of the right view equals column `c - disparity` of the left view.
/// Binary, parts and type masks annotate the left view.
pub fn make_synthetic_stereo(height: usize, width: usize, disparity: usize, seed: u64) -> Result<StereoSample> {
    ensure!(height >= 4 && width >= 4, InvalidArgument, "synthetic images must be at least 4x4, got {height}x{width}");
    ensure!(
        4 * disparity < width,
        InvalidArgument,
        "disparity {disparity} out of range; it must be below width/4 = {}",
        width as f64 / 4.0
    );
    let canvas_w = width + disparity;
    let scene = SynthScene::random(height, canvas_w, seed);
    let (canvas, parts) = scene.render(height, canvas_w);
    let left_parts = parts.crop(0, disparity, height, width);
    let binary = Mask { labels: left_parts.labels.iter().map(|&l| u8::from(l > 0)).collect(), ..left_parts.clone() };
    let kind = Mask {
        labels: left_parts.labels.iter().map(|&l| if l > 0 { scene.tool_type } else { 0 }).collect(),
        ..left_parts.clone()
    };
    let masks = BTreeMap::from([(TaskKind::Binary, binary), (TaskKind::Parts, left_parts), (TaskKind::Type, kind)]);
    Ok(StereoSample {
        sample_id: format!("synth_{seed:06}"),
        left_hr: crop_columns(&canvas, disparity, width),
        right_hr: crop_columns(&canvas, 0, width),
        left_lr: None,
        right_lr: None,
        masks,
    })
}
