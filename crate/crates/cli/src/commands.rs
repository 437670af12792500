//! Subcommand implementations. Each returns after every artifact is on disk.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use segsr_core::data::{
    list_pngs, load_rgb, load_stereo_dataset, make_synthetic_stereo, save_mask, save_rgb, split_folds,
    write_stereo_sample, FoldSplit, LEFT_DIR, RIGHT_DIR,
};
use segsr_core::metrics::{write_csv, MetricReport, ReportKind};
use segsr_core::nn::ParamStore;
use segsr_core::recon::{bicubic_upscale, SrModel};
use segsr_core::seg::SegModel;
use segsr_core::train::{
    evaluate_seg, evaluate_sr, seg_examples, train_seg, train_sr, Checkpoint, Model, ModelSpec, SegInput, SegMethod,
    SrMethod, TrainConfig, TrainOutcome, TrainState,
};
use segsr_core::{Error, Result};
use serde::Serialize;

use crate::config::RunConfig;
use crate::viz;

pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const RUN_CONFIG_FILE: &str = "run_config.toml";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn save_png(path: &Path, img: &image::RgbImage) -> Result<()> {
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

/// Parses `HxW`, e.g. `64x96`.
pub fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(h)?, parse(w)?))
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Number of stereo pairs to generate.
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    /// Image size as HxW.
    #[arg(long, default_value = "64x96", value_parser = parse_size)]
    pub size: (usize, usize),
    /// Horizontal shift between the views, in pixels.
    #[arg(long, default_value_t = 3)]
    pub disparity: usize,
    /// Seed of the first sample; sample i uses seed + i.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write LR views degraded by this factor under `lr_x{scale}/`.
    #[arg(long, default_value_t = 2)]
    pub scale: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct SynthManifest<'a> {
    generator: &'static str,
    count: usize,
    height: usize,
    width: usize,
    disparity: usize,
    seed: u64,
    scale: usize,
    samples: Vec<&'a str>,
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let (h, w) = args.size;
    for d in [LEFT_DIR, RIGHT_DIR] {
        create_dir(&args.out.join(d))?;
    }
    let mut samples = Vec::with_capacity(args.n);
    for i in 0..args.n as u64 {
        let mut s = make_synthetic_stereo(h, w, args.disparity, args.seed + i)?;
        s.ensure_lr(args.scale)?;
        write_stereo_sample(&args.out, &s, Some(args.scale))?;
        samples.push(s.sample_id);
    }
    let manifest = SynthManifest {
        generator: "synthetic",
        count: args.n,
        height: h,
        width: w,
        disparity: args.disparity,
        seed: args.seed,
        scale: args.scale,
        samples: samples.iter().map(String::as_str).collect(),
    };
    write(&args.out.join("manifest.json"), to_json(&manifest)?)?;
    println!("synth: wrote {} samples ({h}x{w}, disparity {}) to {}", args.n, args.disparity, args.out.display());
    Ok(())
}

/// Options shared by every command that reads a run configuration.
#[derive(Args, Debug, Default)]
pub struct CommonArgs {
    /// Run configuration document (TOML); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root (overrides `data.root`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl CommonArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(d) = &self.data {
            cfg.data.root = d.clone();
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Training seed (overrides `seed` of the training section).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stop after this many steps (overrides `max_steps`).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Continue from a checkpoint written by the same command.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// SR checkpoint for segmentation on SR input (overrides `data.sr_checkpoint`).
    #[arg(long)]
    pub sr_checkpoint: Option<PathBuf>,
    /// Also write per-step wall-clock times to timing.csv (not reproducible byte for byte).
    #[arg(long)]
    pub timing: bool,
}

impl TrainArgs {
    fn load(&self, section: impl Fn(&mut RunConfig) -> &mut TrainConfig) -> Result<RunConfig> {
        let mut cfg = self.common.load()?;
        if let Some(p) = &self.sr_checkpoint {
            cfg.data.sr_checkpoint = p.clone();
        }
        let train = section(&mut cfg);
        if let Some(s) = self.seed {
            train.seed = s;
        }
        if let Some(s) = self.steps {
            train.max_steps = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn resume_state(path: Option<&Path>, expected: &ModelSpec) -> Result<Option<(Model, TrainState)>> {
    let Some(path) = path else { return Ok(None) };
    let ckpt = Checkpoint::load(path)?;
    if &ckpt.model.spec() != expected {
        return Err(Error::Config(format!(
            "{} was trained with a different architecture than the configuration describes",
            path.display()
        )));
    }
    Ok(Some((ckpt.model, ckpt.state)))
}

/// Writes the run configuration, final checkpoint, loss logs and loss plot.
fn write_training_artifacts(cfg: &RunConfig, ckpt: &Checkpoint, out: &TrainOutcome, timing: bool) -> Result<()> {
    let dir = &cfg.output_dir;
    cfg.save(&dir.join(RUN_CONFIG_FILE))?;
    ckpt.save(&dir.join(CHECKPOINT_FILE))?;
    write(&dir.join("loss.csv"), out.log.loss_csv())?;
    if timing {
        write(&dir.join("timing.csv"), out.log.timing_csv())?;
    }
    let losses: Vec<f64> = out.log.records.iter().map(|r| r.loss).collect();
    save_png(&dir.join("loss.png"), &viz::line_chart(&losses, 480, 240))
}

fn intermediate_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("checkpoint_step{step:06}.safetensors"))
}

fn report_training(name: &str, out: &TrainOutcome, dir: &Path) {
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.6}"));
    println!(
        "{name}: {} steps, loss {} -> {}, wrote {}",
        out.log.records.len(),
        fmt(out.log.first_loss()),
        fmt(out.log.last_loss()),
        dir.display()
    );
}

pub fn train_sr_cmd(args: &TrainArgs) -> Result<()> {
    let cfg = args.load(|c| &mut c.train_sr)?;
    let tc = cfg.train_sr.clone();
    let scale = cfg.sr.reconstruction.scale;
    let data = load_stereo_dataset(&cfg.data.root, scale)?;
    create_dir(&cfg.output_dir)?;
    let (mut model, state) = match resume_state(args.resume.as_deref(), &ModelSpec::Sr(cfg.sr.clone()))? {
        Some((Model::Sr(m), s)) => (m, Some(s)),
        _ => (SrModel::new(&cfg.sr, tc.seed)?, None),
    };
    let net = model.net.clone();
    let per_epoch = tc.steps_per_epoch(data.len());
    let mut hook = |p: &ParamStore, s: &TrainState| {
        let model = Model::Sr(SrModel { net: net.clone(), params: p.clone() });
        Checkpoint { model, train: tc.clone(), state: s.clone(), epoch: s.step / per_epoch }
            .save(&intermediate_path(&cfg.output_dir, s.step))
    };
    let out = train_sr(&tc, &data, &mut model, state, &mut hook)?;
    let epoch = out.state.step / per_epoch;
    let ckpt = Checkpoint { model: Model::Sr(model), train: tc.clone(), state: out.state.clone(), epoch };
    write_training_artifacts(&cfg, &ckpt, &out, args.timing)?;
    report_training("train-sr", &out, &cfg.output_dir);
    Ok(())
}

fn load_sr(path: &Path) -> Result<SrModel> {
    Checkpoint::load(path)?.into_sr()
}

/// SR model feeding segmentation, required when the input is super-resolved.
fn seg_source(cfg: &RunConfig) -> Result<Option<SrModel>> {
    match cfg.data.seg_input {
        SegInput::Hr => Ok(None),
        SegInput::Sr => {
            let path = cfg.sr_checkpoint().ok_or_else(|| {
                Error::Config("data.seg_input = \"sr\" needs data.sr_checkpoint (or --sr-checkpoint)".into())
            })?;
            load_sr(path).map(Some)
        }
    }
}

pub fn train_seg_cmd(args: &TrainArgs) -> Result<()> {
    let cfg = args.load(|c| &mut c.train_seg)?;
    let tc = cfg.train_seg.clone();
    let sr = seg_source(&cfg)?;
    let scale = sr.as_ref().map_or(cfg.sr.reconstruction.scale, |m| m.net.scale());
    let data = load_stereo_dataset(&cfg.data.root, scale)?;
    let examples = seg_examples(&data, cfg.seg.task, cfg.data.seg_input, sr.as_ref())?;
    create_dir(&cfg.output_dir)?;
    let (mut model, state) = match resume_state(args.resume.as_deref(), &ModelSpec::Seg(cfg.seg.clone()))? {
        Some((Model::Seg(m), s)) => (m, Some(s)),
        _ => (SegModel::new(&cfg.seg, tc.seed)?, None),
    };
    let net = model.net.clone();
    let per_epoch = tc.steps_per_epoch(examples.len().max(1));
    let mut hook = |p: &ParamStore, s: &TrainState| {
        let model = Model::Seg(SegModel { net: net.clone(), params: p.clone() });
        Checkpoint { model, train: tc.clone(), state: s.clone(), epoch: s.step / per_epoch }
            .save(&intermediate_path(&cfg.output_dir, s.step))
    };
    let out = train_seg(&tc, scale, &examples, &mut model, state, &mut hook)?;
    let epoch = out.state.step / per_epoch;
    let ckpt = Checkpoint { model: Model::Seg(model), train: tc.clone(), state: out.state.clone(), epoch };
    write_training_artifacts(&cfg, &ckpt, &out, args.timing)?;
    report_training("train-seg", &out, &cfg.output_dir);
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint to evaluate; repeat for several. SR and segmentation
    /// checkpoints are told apart by their manifest.
    #[arg(long = "checkpoint")]
    pub checkpoints: Vec<PathBuf>,
    /// Number of cross-validation folds (overrides `data.folds`).
    #[arg(long)]
    pub folds: Option<usize>,
    /// Add a row scoring the ground-truth masks themselves.
    #[arg(long)]
    pub oracle: bool,
}

/// Report label for a checkpoint: its run directory for `checkpoint.safetensors`, else its file stem.
fn method_name(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if path.file_name().is_some_and(|n| n == CHECKPOINT_FILE) {
        if let Some(dir) = path.parent().and_then(Path::file_name) {
            return dir.to_string_lossy().into_owned();
        }
    }
    stem
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    folds: &'a FoldSplit,
    reports: &'a [MetricReport],
}

/// Per-fold means laid out for [`viz::bar_chart`].
fn fold_panels(reports: &[&MetricReport], kind: ReportKind, k: usize) -> Vec<Vec<Vec<f64>>> {
    kind.metrics()
        .iter()
        .map(|m| {
            reports
                .iter()
                .map(|r| {
                    (0..k).map(|f| r.per_fold.get(*m).and_then(|v| v.get(&f)).copied().unwrap_or(f64::NAN)).collect()
                })
                .collect()
        })
        .collect()
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let mut cfg = args.common.load()?;
    if let Some(k) = args.folds {
        cfg.data.folds = k;
    }
    cfg.validate()?;
    let mut sr_models = Vec::new();
    let mut seg_models = Vec::new();
    for p in &args.checkpoints {
        match Checkpoint::load(p)?.model {
            Model::Sr(m) => sr_models.push((method_name(p), m)),
            Model::Seg(m) => seg_models.push((method_name(p), m)),
        }
    }
    let scale = sr_models.first().map_or(cfg.sr.reconstruction.scale, |(_, m)| m.net.scale());
    if let Some((name, _)) = sr_models.iter().find(|(_, m)| m.net.scale() != scale) {
        return Err(Error::Config(format!(
            "checkpoint {name} upscales by a different factor than the others (x{scale})"
        )));
    }
    let data = load_stereo_dataset(&cfg.data.root, scale)?;
    let ids: Vec<&str> = data.iter().map(|s| s.sample_id.as_str()).collect();
    let folds = split_folds(&ids, cfg.data.folds, cfg.data.split_seed)?;

    let mut reports = Vec::new();
    for (name, m) in &sr_models {
        reports.push(evaluate_sr(SrMethod::Model(m), name, &data, &folds, scale)?);
    }
    if !sr_models.is_empty() || seg_models.is_empty() {
        reports.push(evaluate_sr(SrMethod::Bicubic, "bicubic", &data, &folds, scale)?);
    }
    if !seg_models.is_empty() || args.oracle {
        let source = match cfg.data.seg_input {
            SegInput::Hr => None,
            SegInput::Sr => match sr_models.first() {
                Some((_, m)) => Some(m.clone()),
                None => seg_source(&cfg)?,
            },
        };
        let mut tasks: Vec<_> = seg_models.iter().map(|(_, m)| m.task()).collect();
        if args.oracle {
            tasks.push(cfg.seg.task);
        }
        tasks.sort();
        tasks.dedup();
        for task in tasks {
            let examples = seg_examples(&data, task, cfg.data.seg_input, source.as_ref())?;
            for (name, m) in seg_models.iter().filter(|(_, m)| m.task() == task) {
                reports.push(evaluate_seg(SegMethod::Model(m), name, &examples, &folds, task)?);
            }
            if args.oracle {
                reports.push(evaluate_seg(SegMethod::GroundTruth, "ground_truth", &examples, &folds, task)?);
            }
        }
    }

    let dir = &cfg.output_dir;
    create_dir(dir)?;
    cfg.save(&dir.join(RUN_CONFIG_FILE))?;
    folds.save(&dir.join("folds.json"))?;
    write(&dir.join("metrics.json"), to_json(&EvalOutput { folds: &folds, reports: &reports })?)?;
    for (kind, stem) in [(ReportKind::Sr, "sr"), (ReportKind::Seg, "seg")] {
        let of_kind: Vec<&MetricReport> = reports.iter().filter(|r| r.kind == kind).collect();
        if of_kind.is_empty() {
            continue;
        }
        let owned: Vec<MetricReport> = of_kind.iter().map(|r| (*r).clone()).collect();
        write_csv(&dir.join(format!("metrics_{stem}.csv")), &owned)?;
        let chart = viz::bar_chart(&fold_panels(&of_kind, kind, folds.k), 160);
        save_png(&dir.join(format!("folds_{stem}.png")), &chart)?;
        println!("{}", kind.csv_header());
        for r in &of_kind {
            println!("{}", r.csv_row());
        }
    }
    println!("eval: {} samples in {} folds, wrote {}", data.len(), folds.k, dir.display());
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Sr,
    Seg,
    Both,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    /// Directory with `left/` (and for SR, `right/`) PNG views matched by file name.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Stage::Both)]
    pub stage: Stage,
    /// SR and/or segmentation checkpoints, as the stage requires.
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<PathBuf>,
}

struct InputPair {
    id: String,
    left: segsr_core::autograd::Tensor,
    right: Option<segsr_core::autograd::Tensor>,
}

fn read_inputs(dir: &Path, need_right: bool) -> Result<Vec<InputPair>> {
    let left_dir = dir.join(LEFT_DIR);
    let right_dir = dir.join(RIGHT_DIR);
    if !left_dir.is_dir() {
        return Err(Error::Dataset(format!("missing directory {}", left_dir.display())));
    }
    if need_right && !right_dir.is_dir() {
        return Err(Error::Dataset(format!("missing directory {}", right_dir.display())));
    }
    let mut out = Vec::new();
    for name in list_pngs(&left_dir)? {
        let right_path = right_dir.join(&name);
        let right = if right_path.is_file() {
            Some(load_rgb(&right_path)?)
        } else if need_right {
            return Err(Error::Dataset(format!(
                "{} has no counterpart in {}",
                left_dir.join(&name).display(),
                right_dir.display()
            )));
        } else {
            None
        };
        let id = Path::new(&name).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or(name.clone());
        out.push(InputPair { id, left: load_rgb(&left_dir.join(&name))?, right });
    }
    Ok(out)
}

pub fn infer(args: &InferArgs) -> Result<()> {
    let mut sr = None;
    let mut seg = None;
    for p in &args.checkpoints {
        match Checkpoint::load(p)?.model {
            Model::Sr(m) => sr = Some(m),
            Model::Seg(m) => seg = Some(m),
        }
    }
    let wants_sr = matches!(args.stage, Stage::Sr | Stage::Both);
    let wants_seg = matches!(args.stage, Stage::Seg | Stage::Both);
    let sr =
        if wants_sr { Some(sr.ok_or_else(|| Error::Config("stage needs an SR checkpoint".into()))?) } else { None };
    let seg = if wants_seg {
        Some(seg.ok_or_else(|| Error::Config("stage needs a segmentation checkpoint".into()))?)
    } else {
        None
    };

    let inputs = read_inputs(&args.input, wants_sr)?;
    let (sr_dir, mask_dir, strip_dir) = (args.out.join("sr"), args.out.join("masks"), args.out.join("strips"));
    create_dir(&strip_dir)?;
    if wants_sr {
        create_dir(&sr_dir)?;
    }
    if let Some(m) = &seg {
        create_dir(&mask_dir)?;
        write(&args.out.join("legend.json"), to_json(&viz::legend(m.task()))?)?;
    }
    for pair in &inputs {
        let mut views = vec![("left", pair.left.clone())];
        if let Some(r) = &pair.right {
            views.push(("right", r.clone()));
        }
        let mut panels = vec![viz::to_rgb(&pair.left)?];
        if let Some(m) = &sr {
            let right = pair.right.as_ref().expect("SR inputs carry both views");
            let (l, r) = m.super_resolve(&pair.left, right)?;
            save_rgb(&sr_dir.join(format!("{}_left.png", pair.id)), &l)?;
            save_rgb(&sr_dir.join(format!("{}_right.png", pair.id)), &r)?;
            panels.push(viz::to_rgb(&bicubic_upscale(&pair.left, m.net.scale())?)?);
            panels.push(viz::to_rgb(&l)?);
            views = vec![("left", l), ("right", r)];
        }
        if let Some(m) = &seg {
            for (view, img) in &views {
                let mask = m.segment_padded(img)?;
                let color = viz::color_mask(&mask);
                save_mask(&mask_dir.join(format!("{}_{view}.png", pair.id)), &mask)?;
                save_png(&mask_dir.join(format!("{}_{view}_color.png", pair.id)), &color)?;
                if *view == "left" {
                    panels.push(color);
                }
            }
        }
        save_png(&strip_dir.join(format!("{}.png", pair.id)), &viz::strip(&panels))?;
    }
    println!("infer: {} inputs, stage {:?}, wrote {}", inputs.len(), args.stage, args.out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct ConfigArgs {
    /// Document to validate and expand; the defaults are printed when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Prints the fully materialized configuration.
pub fn show_config(args: &ConfigArgs) -> Result<()> {
    let cfg = CommonArgs { config: args.config.clone(), ..CommonArgs::default() }.load()?;
    print!("{}", cfg.to_toml());
    Ok(())
}
