//! Run configuration document (TOML).
//!
//! Every section is optional; missing keys take their defaults and the
//! persisted copy written next to each run spells all of them out.

use std::path::{Path, PathBuf};

use segsr_core::recon::SrConfig;
use segsr_core::seg::SegConfig;
use segsr_core::train::{SegInput, TrainConfig};
use segsr_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Dataset root with `left/`, `right/` and optional `labels/`, `lr_x{s}/`.
    pub root: PathBuf,
    /// Number of cross-validation folds used by `eval`.
    pub folds: usize,
    pub split_seed: u64,
    /// Image the segmentation network is trained and evaluated on.
    pub seg_input: SegInput,
    /// SR checkpoint feeding segmentation when `seg_input = "sr"`; empty for none.
    pub sr_checkpoint: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            folds: 10,
            split_seed: 0,
            seg_input: SegInput::Sr,
            sr_checkpoint: PathBuf::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub sr: SrConfig,
    pub seg: SegConfig,
    pub train_sr: TrainConfig,
    pub train_seg: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sr = SrConfig::default();
        let scale = sr.reconstruction.scale;
        Self {
            output_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            sr,
            seg: SegConfig::default(),
            train_sr: TrainConfig::sr(scale),
            train_seg: TrainConfig::seg(scale),
        }
    }
}

impl RunConfig {
    /// Parses a document, rejecting it with every unknown key listed.
    pub fn parse(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut unknown = Vec::new();
        let mut cfg: RunConfig = serde_ignored::deserialize(de, |path| unknown.push(path.to_string()))
            .map_err(|e| Error::Config(e.to_string().trim_end().replace('\n', " ")))?;
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.apply_stage_defaults(&table);
        cfg.validate()?;
        Ok(cfg)
    }

    /// A training section only overrides the keys it names; the rest take that
    /// stage's defaults (segmentation loss, batch size for the configured scale).
    fn apply_stage_defaults(&mut self, doc: &toml::Table) {
        let scale = self.sr.reconstruction.scale;
        let given = |section: &str, key: &str| doc.get(section).and_then(|t| t.get(key)).is_some();
        for (section, defaults, train) in [
            ("train_sr", TrainConfig::sr(scale), &mut self.train_sr),
            ("train_seg", TrainConfig::seg(scale), &mut self.train_seg),
        ] {
            if !given(section, "loss") {
                train.loss = defaults.loss;
            }
            if !given(section, "batch_size") {
                train.batch_size = defaults.batch_size;
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.sr.validate()?;
        self.seg.validate()?;
        self.train_sr.validate()?;
        self.train_seg.validate()?;
        if self.data.folds < 2 {
            return Err(Error::Config(format!("data.folds must be at least 2, got {}", self.data.folds)));
        }
        Ok(())
    }

    /// The fully materialized document.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes to TOML")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn sr_checkpoint(&self) -> Option<&Path> {
        let p = self.data.sr_checkpoint.as_path();
        (!p.as_os_str().is_empty()).then_some(p)
    }
}
