use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use segsr_autograd::Tensor;

use crate::data::{degrade, image_dims, validate_scale, Mask, StereoSample, TaskKind};
use crate::error::{ensure, Error, Result};

pub const LEFT_DIR: &str = "left";
pub const RIGHT_DIR: &str = "right";
pub const LABELS_DIR: &str = "labels";

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image { path: path.to_path_buf(), source }
}

/// Reads an 8-bit image as a (3, H, W) tensor in [0, 1].
pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = f64::from(px[c]) / 255.0;
        }
    }
    Ok(Tensor::new([3, h, w], data))
}

/// Writes a (3, H, W) tensor as an 8-bit RGB PNG, clamping to [0, 1].
pub fn save_rgb(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w) = image_dims(img)?;
    let plane = h * w;
    let d = img.data();
    let out = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([0, 1, 2].map(|c| (d[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    out.save(path).map_err(|e| image_err(path, e))
}

/// Reads a single-channel PNG of raw class ids.
pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    ensure!(
        matches!(img.color(), image::ColorType::L8),
        Dataset,
        "{}: label masks must be 8-bit single-channel, got {:?}",
        path.display(),
        img.color()
    );
    let g = img.to_luma8();
    Mask::new(g.height() as usize, g.width() as usize, g.into_raw())
}

pub fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    let img = GrayImage::from_raw(mask.width as u32, mask.height as u32, mask.labels.clone())
        .expect("mask buffer matches its dimensions");
    img.save(path).map_err(|e| image_err(path, e))
}

/// Sorted `.png` file names in `dir`.
pub fn list_pngs(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.path().is_file() && name.to_ascii_lowercase().ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

fn stem(name: &str) -> String {
    Path::new(name).file_stem().map_or_else(|| name.to_string(), |s| s.to_string_lossy().into_owned())
}

fn lr_dir(root: &Path, scale: usize) -> PathBuf {
    root.join(format!("lr_x{scale}"))
}

/// Loads `<root>/left/*.png` and `<root>/right/*.png` pairs matched by file name.
///
/// LR views come from `<root>/lr_x{scale}/{left,right}/` when present and are
/// otherwise produced by [`degrade`]. Masks are read from
/// `<root>/labels/{binary,parts,type}/` for the samples that have them.
pub fn load_stereo_dataset(root: &Path, scale: usize) -> Result<Vec<StereoSample>> {
    validate_scale(scale)?;
    ensure!(root.is_dir(), Dataset, "dataset root {} is not a directory", root.display());
    let (left_dir, right_dir) = (root.join(LEFT_DIR), root.join(RIGHT_DIR));
    for d in [&left_dir, &right_dir] {
        ensure!(d.is_dir(), Dataset, "missing directory {}", d.display());
    }
    let left = list_pngs(&left_dir)?;
    let right = list_pngs(&right_dir)?;
    if let Some(orphan) = left.iter().find(|n| right.binary_search(n).is_err()) {
        return Err(Error::Dataset(format!(
            "{} has no counterpart in {}",
            left_dir.join(orphan).display(),
            right_dir.display()
        )));
    }
    if let Some(orphan) = right.iter().find(|n| left.binary_search(n).is_err()) {
        return Err(Error::Dataset(format!(
            "{} has no counterpart in {}",
            right_dir.join(orphan).display(),
            left_dir.display()
        )));
    }

    let mut samples = Vec::with_capacity(left.len());
    for name in &left {
        let left_hr = load_rgb(&left_dir.join(name))?;
        let right_hr = load_rgb(&right_dir.join(name))?;
        let (lh, rh) = (image_dims(&left_hr)?, image_dims(&right_hr)?);
        ensure!(lh == rh, Dataset, "pair {name}: left is {}x{} (HxW) but right is {}x{}", lh.0, lh.1, rh.0, rh.1);
        let lr_root = lr_dir(root, scale);
        let read_lr = |side: &str, hr: &Tensor| -> Result<Tensor> {
            let p = lr_root.join(side).join(name);
            if p.is_file() {
                load_rgb(&p)
            } else {
                degrade(hr, scale).map_err(|e| Error::Dataset(format!("{}: {e}", left_dir.join(name).display())))
            }
        };
        let left_lr = read_lr(LEFT_DIR, &left_hr)?;
        let right_lr = read_lr(RIGHT_DIR, &right_hr)?;
        let mut masks = BTreeMap::new();
        for task in TaskKind::ALL {
            let p = root.join(LABELS_DIR).join(task.name()).join(name);
            if p.is_file() {
                masks.insert(task, load_mask(&p)?);
            }
        }
        let sample = StereoSample {
            sample_id: stem(name),
            left_hr,
            right_hr,
            left_lr: Some(left_lr),
            right_lr: Some(right_lr),
            masks,
        };
        sample.validate(Some(scale)).map_err(|e| Error::Dataset(format!("{name}: {e}")))?;
        samples.push(sample);
    }
    samples.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    Ok(samples)
}

/// Writes a sample in the layout read by [`load_stereo_dataset`]. LR views are
/// written only when `scale` is given and the sample carries them.
pub fn write_stereo_sample(root: &Path, sample: &StereoSample, scale: Option<usize>) -> Result<()> {
    let file = format!("{}.png", sample.sample_id);
    let mut dirs = vec![root.join(LEFT_DIR), root.join(RIGHT_DIR)];
    dirs.extend(sample.masks.keys().map(|t| root.join(LABELS_DIR).join(t.name())));
    for d in &dirs {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    save_rgb(&root.join(LEFT_DIR).join(&file), &sample.left_hr)?;
    save_rgb(&root.join(RIGHT_DIR).join(&file), &sample.right_hr)?;
    if let (Some(s), Some(l), Some(r)) = (scale, &sample.left_lr, &sample.right_lr) {
        let base = lr_dir(root, s);
        for (side, img) in [(LEFT_DIR, l), (RIGHT_DIR, r)] {
            let d = base.join(side);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            save_rgb(&d.join(&file), img)?;
        }
    }
    for (task, mask) in &sample.masks {
        save_mask(&root.join(LABELS_DIR).join(task.name()).join(&file), mask)?;
    }
    Ok(())
}
