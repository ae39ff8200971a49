//! Aligned 4-second clips cut from music/motion pairs.

use choreo_tensor::Tensor;

use crate::audio::{mel_image, temporal_features, FeatureConfig, MelImage, MusicClip, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::fdgn::FdgnSample;
use crate::motion::{MotionFragment, CLIP_FRAMES, CLIP_SECONDS};
use crate::synth::{Pair, Split};

/// Side of one mel-image pooling patch.
pub const PATCH: usize = 16;
/// Pooled patches per image: a 14 × 14 grid.
pub const PATCHES: usize = (IMAGE_SIZE / PATCH) * (IMAGE_SIZE / PATCH);

/// Cuts a track into non-overlapping 4-second clips; a trailing remainder
/// shorter than 4 s is dropped.
pub fn split_music(track: &MusicClip) -> Result<Vec<MusicClip>> {
    let per = (CLIP_SECONDS * track.sample_rate as f64).round() as usize;
    let n = track.samples.len() / per;
    if n == 0 {
        return Err(Error::contract(format!(
            "track of {:.3} s is shorter than one {CLIP_SECONDS} s clip",
            track.duration()
        )));
    }
    (0..n).map(|i| track.slice(i * per, (i + 1) * per)).collect()
}

/// Mean of every 16 × 16 × 3 patch of a mel image, row-major over the grid.
pub fn patch_pool(image: &MelImage) -> Result<Tensor> {
    let t = &image.0;
    if t.shape() != [IMAGE_SIZE, IMAGE_SIZE, 3] {
        return Err(Error::contract(format!("mel image has shape {:?}", t.shape())));
    }
    let grid = IMAGE_SIZE / PATCH;
    let mut out = vec![0.0; PATCHES];
    let data = t.data();
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let cell = (y / PATCH) * grid + x / PATCH;
            out[cell] += data[(y * IMAGE_SIZE + x) * 3..][..3].iter().sum::<f64>();
        }
    }
    let norm = (PATCH * PATCH * 3) as f64;
    Ok(Tensor::new([PATCHES], out.into_iter().map(|v| v / norm).collect())?)
}

/// One aligned clip with everything the trainers need.
#[derive(Clone, Debug)]
pub struct Clip {
    pub pair: usize,
    pub index: usize,
    pub genre: usize,
    pub split: Split,
    /// `[120, 35]` temporal music features.
    pub features: Tensor,
    /// `[196]` patch-pooled mel image.
    pub mel: Tensor,
    pub motion: MotionFragment,
}

impl Clip {
    pub fn fdgn_sample(&self) -> Result<FdgnSample> {
        FdgnSample::new(self.features.clone(), &self.motion)
    }
}

/// Cuts every pair into 4 s clips and extracts their features.
pub fn clips_from_pairs(pairs: &[Pair], cfg: &FeatureConfig) -> Result<Vec<Clip>> {
    let mut clips = Vec::new();
    for p in pairs {
        let music = split_music(&p.music)?;
        if p.motion.len() < music.len() * CLIP_FRAMES {
            return Err(Error::contract(format!(
                "pair {} has {} frames for {} clips",
                p.id,
                p.motion.len(),
                music.len()
            )));
        }
        for (i, m) in music.iter().enumerate() {
            clips.push(Clip {
                pair: p.id,
                index: i,
                genre: p.genre,
                split: p.split,
                features: temporal_features(m, cfg)?.0,
                mel: patch_pool(&mel_image(m, cfg)?)?,
                motion: p.motion.slice(i * CLIP_FRAMES, (i + 1) * CLIP_FRAMES)?,
            });
        }
    }
    Ok(clips)
}

pub fn in_split(clips: &[Clip], split: Split) -> Vec<Clip> {
    clips.iter().filter(|c| c.split == split).cloned().collect()
}
