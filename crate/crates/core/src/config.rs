//! Run configuration read from a flat TOML key-value file.
//!
//! Every key is optional; unknown keys are rejected. Example:
//!
//! ```toml
//! fdgn_checkpoint = "models/fdgn.cftn"
//! retrieval_checkpoint = "models/retrieval.cftn"
//! candidates = 8
//! alpha = 1.0
//! beta = 0.5
//! strategy = "finenet"
//! seed = 7
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fdgn::{FdgnConfig, OptimizerKind, TrainConfig, Trunk};
use crate::gcrm::SelectionWeights;
use crate::motion::DEFAULT_FPS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "finenet")]
    FineNet,
    #[serde(rename = "fdgn-g")]
    FdgnG,
    #[serde(rename = "fdgn-c")]
    FdgnC,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finenet" => Ok(Strategy::FineNet),
            "fdgn-g" => Ok(Strategy::FdgnG),
            "fdgn-c" => Ok(Strategy::FdgnC),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub fdgn_checkpoint: PathBuf,
    pub retrieval_checkpoint: PathBuf,
    pub classifier_checkpoint: PathBuf,
    pub hand_classifier_checkpoint: PathBuf,
    pub input: Option<PathBuf>,
    pub output: PathBuf,

    /// Candidates generated per clip (M).
    pub candidates: usize,
    pub alpha: f64,
    pub beta: f64,
    pub strategy: Strategy,
    pub seed: Option<u64>,
    pub fps: f32,
    pub variations: usize,

    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub hidden: usize,
    pub music_latent: usize,
    pub trunk: Trunk,

    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub clip_norm: f64,
    pub retrieval_iterations: usize,
    pub classifier_iterations: usize,

    pub genres: usize,
    pub pairs_per_genre: usize,
    pub pair_seconds: f64,
    pub sample_rate: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = FdgnConfig::default();
        let train = TrainConfig::default();
        RunConfig {
            data_dir: PathBuf::from("data"),
            fdgn_checkpoint: PathBuf::from("models/fdgn.cftn"),
            retrieval_checkpoint: PathBuf::from("models/retrieval.cftn"),
            classifier_checkpoint: PathBuf::from("models/classifier.cftn"),
            hand_classifier_checkpoint: PathBuf::from("models/hand_classifier.cftn"),
            input: None,
            output: PathBuf::from("out"),
            candidates: 8,
            alpha: 1.0,
            beta: 0.5,
            strategy: Strategy::FineNet,
            seed: None,
            fps: DEFAULT_FPS,
            variations: 10,
            diffusion_steps: model.steps,
            beta_start: model.beta_start,
            beta_end: model.beta_end,
            hidden: model.hidden,
            music_latent: model.music_latent,
            trunk: model.trunk,
            iterations: train.iterations,
            batch: train.batch,
            lr: train.lr,
            optimizer: train.optimizer,
            clip_norm: train.clip_norm,
            retrieval_iterations: 400,
            classifier_iterations: 300,
            genres: 4,
            pairs_per_genre: 10,
            pair_seconds: 20.0,
            sample_rate: crate::audio::FIXTURE_SAMPLE_RATE,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.candidates == 0 {
            return bad("candidates must be at least 1".into());
        }
        if self.fps != DEFAULT_FPS {
            return bad(format!("only {DEFAULT_FPS} fps motion is supported, got {}", self.fps));
        }
        if self.diffusion_steps == 0 || self.hidden == 0 || self.music_latent == 0 || self.batch == 0 {
            return bad("diffusion_steps, hidden, music_latent and batch must be positive".into());
        }
        if !(self.lr > 0.0) || self.clip_norm < 0.0 {
            return bad("lr must be positive and clip_norm non-negative".into());
        }
        if self.genres < 2 || self.pairs_per_genre < 3 {
            return bad("need at least 2 genres and 3 pairs per genre".into());
        }
        SelectionWeights::new(self.alpha, self.beta)?;
        Ok(())
    }

    pub fn weights(&self) -> SelectionWeights {
        SelectionWeights {
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    /// The seed of a generation run; there is no implicit default.
    pub fn require_seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("a seed is required for generation (--seed)".into()))
    }

    pub fn model(&self) -> FdgnConfig {
        FdgnConfig {
            hidden: self.hidden,
            music_latent: self.music_latent,
            trunk: self.trunk,
            steps: self.diffusion_steps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
        }
    }

    pub fn training(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            batch: self.batch,
            lr: self.lr,
            optimizer: self.optimizer,
            clip_norm: self.clip_norm,
            seed: self.seed.unwrap_or(0),
        }
    }

    /// FNV-1a hash of the canonical JSON form, as 16 hex digits.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).unwrap_or_default();
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}
