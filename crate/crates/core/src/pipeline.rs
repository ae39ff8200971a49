//! Long-form choreography: split the track into 4 s clips, generate M
//! candidates per clip, pick one per clip by `α·GS + β·CS` and stitch the
//! picks together.

use std::path::Path;

use choreo_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::audio::{mel_image, temporal_features, FeatureConfig, MusicClip};
use crate::config::{RunConfig, Strategy};
use crate::dataset::{patch_pool, split_music};
use crate::error::{Error, Result};
use crate::fdgn::Fdgn;
use crate::gcrm::{coherent_score, combined_scores, rank, stitch, Retrieval, SelectionWeights};
use crate::motion::{concat_fragments, MotionFragment, CLIP_FRAMES};

pub use crate::dataset::split_music as split_track;

pub struct Models {
    pub fdgn: Fdgn,
    pub retrieval: Retrieval,
}

impl Models {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        Ok(Models {
            fdgn: Fdgn::load(&cfg.fdgn_checkpoint)?,
            retrieval: Retrieval::load(&cfg.retrieval_checkpoint)?,
        })
    }
}

/// Per-clip inputs derived from the track.
pub struct PreparedTrack {
    pub clips: Vec<MusicClip>,
    /// `[120, 35]` features per clip.
    pub features: Vec<Tensor>,
    /// `[196]` pooled mel image per clip.
    pub mels: Vec<Tensor>,
}

pub fn prepare(track: &MusicClip) -> Result<PreparedTrack> {
    let cfg = FeatureConfig::default();
    let clips = split_music(track)?;
    let mut features = Vec::with_capacity(clips.len());
    let mut mels = Vec::with_capacity(clips.len());
    for (t, c) in clips.iter().enumerate() {
        features.push(temporal_features(c, &cfg).map_err(Error::at_step(t + 1))?.0);
        mels.push(patch_pool(&mel_image(c, &cfg).map_err(Error::at_step(t + 1))?)?);
    }
    Ok(PreparedTrack { clips, features, mels })
}

/// Scores and choice at one time step (1-based `t`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub gs: Vec<f64>,
    pub cs: Vec<f64>,
    pub combined: Vec<f64>,
    pub idx: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub strategy: Strategy,
    pub alpha: f64,
    pub beta: f64,
    pub candidates: usize,
    /// Rank forced at step 1 for variation runs.
    pub variation: usize,
}

#[derive(Clone, Debug)]
pub struct ChoreographyResult {
    pub motion: MotionFragment,
    pub steps: Vec<StepRecord>,
    pub provenance: Provenance,
}

#[derive(Serialize)]
struct ReportDoc<'a> {
    provenance: &'a Provenance,
    clips: usize,
    frames: usize,
    steps: &'a [StepRecord],
}

impl ChoreographyResult {
    pub fn report_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ReportDoc {
            provenance: &self.provenance,
            clips: self.motion.len() / CLIP_FRAMES,
            frames: self.motion.len(),
            steps: &self.steps,
        })?)
    }

    /// Writes `<stem>.motn` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.motion.save(dir.join(format!("{stem}.motn")))?;
        let path = dir.join(format!("{stem}.json"));
        std::fs::write(&path, self.report_json()?).map_err(|e| Error::io(&path, e))
    }
}

/// Recomputes every choice from recorded GS and CS values.
pub fn replay(steps: &[StepRecord], w: SelectionWeights, variation: usize) -> Result<Vec<usize>> {
    steps
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let order = rank(&combined_scores(&s.gs, &s.cs, w)?);
            let pick = if i == 0 { variation } else { 0 };
            order
                .get(pick)
                .copied()
                .ok_or_else(|| Error::contract(format!("rank {pick} of {} candidates", order.len())))
        })
        .collect()
}

/// Picks one candidate per clip and stitches the picks. At step 1 the
/// candidate with the `variation`-th best score is taken.
pub fn select_and_stitch(
    retrieval: &Retrieval,
    mels: &[Tensor],
    candidates: &[Vec<MotionFragment>],
    w: SelectionWeights,
    variation: usize,
) -> Result<(MotionFragment, Vec<StepRecord>)> {
    if candidates.is_empty() || candidates.len() != mels.len() {
        return Err(Error::contract(format!("{} clips with {} candidate sets", mels.len(), candidates.len())));
    }
    let music = retrieval.embed_music_pooled(&crate::nets::stack(&mels.iter().collect::<Vec<_>>())?)?;
    let dim = music.last_dim();
    let mut steps = Vec::with_capacity(candidates.len());
    let mut prev: Option<&MotionFragment> = None;
    let mut out: Option<MotionFragment> = None;
    for (i, cands) in candidates.iter().enumerate() {
        let t = i + 1;
        let gs = retrieval
            .genre_scores(&music.data()[i * dim..][..dim], cands)
            .map_err(Error::at_step(t))?;
        let cs = cands
            .iter()
            .map(|c| coherent_score(prev, c))
            .collect::<Result<Vec<_>>>()
            .map_err(Error::at_step(t))?;
        let combined = combined_scores(&gs, &cs, w)?;
        let pick = if i == 0 { variation } else { 0 };
        let idx = *rank(&combined).get(pick).ok_or_else(|| {
            Error::contract(format!("variation {pick} needs more than {} candidates", cands.len()))
        })?;
        let chosen = &cands[idx];
        out = Some(match out {
            None => chosen.clone(),
            Some(acc) => stitch(&acc, chosen).map_err(Error::at_step(t))?,
        });
        prev = Some(chosen);
        steps.push(StepRecord { t, gs, cs, combined, idx });
    }
    Ok((out.expect("at least one clip"), steps))
}

fn provenance(cfg: &RunConfig, seed: u64, strategy: Strategy, candidates: usize, variation: usize) -> Provenance {
    Provenance {
        config_hash: cfg.hash(),
        seed,
        strategy,
        alpha: cfg.alpha,
        beta: cfg.beta,
        candidates,
        variation,
    }
}

/// Generation, selection and stitching over the whole track.
pub fn run_finenet(cfg: &RunConfig, models: &Models, track: &MusicClip) -> Result<ChoreographyResult> {
    Ok(run_variations(cfg, models, track, 1)?.remove(0))
}

/// `k` choreographies that differ in their step-1 choice; variation `j`
/// starts from the candidate with the `j`-th best score. Candidates are
/// generated once and shared by all variations.
pub fn run_variations(cfg: &RunConfig, models: &Models, track: &MusicClip, k: usize) -> Result<Vec<ChoreographyResult>> {
    let seed = cfg.require_seed()?;
    if k == 0 || k > cfg.candidates {
        return Err(Error::contract(format!(
            "variations must be between 1 and the candidate count {}, got {k}",
            cfg.candidates
        )));
    }
    let prepared = prepare(track)?;
    let candidates = models.fdgn.generate(&prepared.features, cfg.candidates, seed)?;
    (0..k)
        .map(|v| {
            let (motion, steps) =
                select_and_stitch(&models.retrieval, &prepared.mels, &candidates, cfg.weights(), v)?;
            Ok(ChoreographyResult {
                motion,
                steps,
                provenance: provenance(cfg, seed, Strategy::FineNet, cfg.candidates, v),
            })
        })
        .collect()
}

/// The two baselines: one reverse pass over the whole track (`fdgn-g`) or
/// one candidate per clip concatenated as is (`fdgn-c`).
pub fn run_ablation(cfg: &RunConfig, models: &Models, track: &MusicClip, strategy: Strategy) -> Result<ChoreographyResult> {
    let seed = cfg.require_seed()?;
    let prepared = prepare(track)?;
    let motion = match strategy {
        Strategy::FdgnG => {
            let refs: Vec<&Tensor> = prepared.features.iter().collect();
            let cond = Tensor::concat(&refs, 0)?;
            models.fdgn.generate_long(&cond, seed)?
        }
        Strategy::FdgnC => {
            let picks: Vec<MotionFragment> = models
                .fdgn
                .generate(&prepared.features, 1, seed)?
                .into_iter()
                .map(|mut c| c.remove(0))
                .collect();
            concat_fragments(&picks)?
        }
        Strategy::FineNet => return Err(Error::Config("ablation strategy must be fdgn-g or fdgn-c".into())),
    };
    Ok(ChoreographyResult {
        motion,
        steps: Vec::new(),
        provenance: provenance(cfg, seed, strategy, 1, 0),
    })
}

/// Runs whichever strategy `cfg` names.
pub fn run(cfg: &RunConfig, models: &Models, track: &MusicClip) -> Result<ChoreographyResult> {
    match cfg.strategy {
        Strategy::FineNet => run_finenet(cfg, models, track),
        s => run_ablation(cfg, models, track, s),
    }
}

/// Largest distance between consecutive frames over the steps that end in
/// frames `j - 5 ..= j + 5` of every clip boundary `j`: the region a stitch
/// rewrites.
pub fn junction_max_jump(motion: &MotionFragment) -> f64 {
    let clips = motion.len() / CLIP_FRAMES;
    (1..clips)
        .map(|c| {
            let j = c * CLIP_FRAMES;
            motion.max_frame_jump(j - crate::gcrm::TRIM, j + crate::gcrm::TRIM + 1)
        })
        .fold(0.0, f64::max)
}
