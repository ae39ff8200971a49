//! Deterministic genre-labelled music/dance pairs.
//!
//! Each genre has a tempo, a base tone and a table of per-joint sinusoids.
//! Music is the tone plus a click on every beat; every joint oscillates at the
//! beat frequency with a genre-specific amplitude and phase, so motion is
//! phase-locked to the clicks.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use choreo_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::{MusicClip, FIXTURE_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::motion::{
    joint_column, MotionFragment, BODY_JOINTS, CLIP_SECONDS, DEFAULT_FPS, FRAME_DIM, JOINTS,
};

/// One sinusoid per rotation component of a joint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointWave {
    pub amplitude: [f64; 3],
    pub phase: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenreSpec {
    pub id: usize,
    pub name: String,
    pub tempo_bpm: f64,
    pub tone_hz: f64,
    /// One entry per joint, body joints first.
    pub joints: Vec<JointWave>,
    /// Peak root sway in meters.
    pub sway: f64,
    /// Std-dev of Gaussian noise added to every motion value.
    pub noise: f64,
}

const PRESET_TEMPI: [f64; 8] = [90.0, 120.0, 150.0, 105.0, 135.0, 75.0, 165.0, 60.0];
const PRESET_TONES: [f64; 8] = [180.0, 600.0, 1450.0, 2900.0, 330.0, 950.0, 2100.0, 4000.0];

impl GenreSpec {
    /// Built-in genre `id`; tables are drawn from a generator seeded by `id`.
    pub fn preset(id: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6e72_0000 + id as u64);
        let joints = (0..JOINTS)
            .map(|j| {
                let hand = j >= BODY_JOINTS;
                let active = rng.gen_bool(if hand { 0.5 } else { 0.6 });
                let (lo, hi) = match (hand, active) {
                    (false, true) => (0.25, 0.6),
                    (true, true) => (0.15, 0.4),
                    (_, false) => (0.0, 0.06),
                };
                JointWave {
                    amplitude: [0; 3].map(|_| rng.gen_range(lo..hi)),
                    phase: [0; 3].map(|_| rng.gen_range(0.0..2.0 * PI)),
                }
            })
            .collect();
        GenreSpec {
            id,
            name: format!("genre{id}"),
            tempo_bpm: PRESET_TEMPI[id % PRESET_TEMPI.len()],
            tone_hz: PRESET_TONES[id % PRESET_TONES.len()],
            joints,
            sway: 0.05 + 0.02 * (id % 3) as f64,
            noise: 0.01,
        }
    }

    pub fn presets(count: usize) -> Vec<Self> {
        (0..count).map(Self::preset).collect()
    }

    pub fn beat_hz(&self) -> f64 {
        self.tempo_bpm / 60.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(60.0..=180.0).contains(&self.tempo_bpm) {
            return Err(Error::contract(format!("tempo {} outside [60, 180]", self.tempo_bpm)));
        }
        if self.joints.len() != JOINTS {
            return Err(Error::contract(format!(
                "genre table has {} joints, expected {JOINTS}",
                self.joints.len()
            )));
        }
        for (j, w) in self.joints.iter().enumerate() {
            // jitter can scale amplitudes by up to 10%
            let peak = 1.1 * w.amplitude.iter().map(|a| a * a).sum::<f64>().sqrt();
            if peak >= PI - 0.1 {
                return Err(Error::contract(format!("joint {j} amplitude can reach π")));
            }
        }
        if self.noise < 0.0 {
            return Err(Error::contract("negative noise level"));
        }
        Ok(())
    }
}

fn check_duration(duration_s: f64) -> Result<()> {
    let clips = duration_s / CLIP_SECONDS;
    if duration_s <= 0.0 || (clips - clips.round()).abs() > 1e-9 {
        return Err(Error::contract(format!(
            "duration {duration_s} s is not a positive multiple of {CLIP_SECONDS} s"
        )));
    }
    Ok(())
}

/// Click: 10 ms decaying 2.5 kHz burst.
fn click(t: f64) -> f64 {
    if !(0.0..0.01).contains(&t) {
        return 0.0;
    }
    0.6 * (2.0 * PI * 2500.0 * t).sin() * (-t * 400.0).exp()
}

/// Generates one music/motion pair of `duration_s` seconds.
pub fn gen_pair(
    spec: &GenreSpec,
    seed: u64,
    duration_s: f64,
    sample_rate: u32,
) -> Result<(MusicClip, MotionFragment)> {
    spec.validate()?;
    check_duration(duration_s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beat_hz = spec.beat_hz();
    let period = 1.0 / beat_hz;

    let tone_gain = rng.gen_range(0.2..0.3);
    let hiss = Normal::new(0.0, 0.002).unwrap();
    let n = (duration_s * sample_rate as f64).round() as usize;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sample_rate as f64;
            let tone = tone_gain
                * ((2.0 * PI * spec.tone_hz * t).sin() + 0.3 * (4.0 * PI * spec.tone_hz * t).sin());
            let beat_t = t - (t / period).floor() * period;
            (tone + click(beat_t) + hiss.sample(&mut rng)).clamp(-1.0, 1.0)
        })
        .collect();
    let music = MusicClip::new(samples, sample_rate)?;

    let jitter: Vec<f64> = (0..JOINTS).map(|_| rng.gen_range(0.9..1.1)).collect();
    let frames = (duration_s * DEFAULT_FPS as f64).round() as usize;
    let mut data = Tensor::zeros([frames, FRAME_DIM]);
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).unwrap();
    for f in 0..frames {
        let t = f as f64 / DEFAULT_FPS as f64;
        let w = 2.0 * PI * beat_hz * t;
        let row = data.row_mut(f);
        row[0] = spec.sway * (0.5 * w).sin();
        row[1] = 0.5 * spec.sway * w.sin().abs();
        for (j, wave) in spec.joints.iter().enumerate() {
            let c = joint_column(j);
            for k in 0..3 {
                row[c + k] = jitter[j] * wave.amplitude[k] * (w + wave.phase[k]).sin();
            }
        }
        if spec.noise > 0.0 {
            for v in row.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }
    }
    let motion = MotionFragment::new(DEFAULT_FPS, data)?;
    Ok((music, motion))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One generated pair held in memory.
#[derive(Clone, Debug)]
pub struct Pair {
    pub id: usize,
    pub genre: usize,
    pub split: Split,
    pub music: MusicClip,
    pub motion: MotionFragment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub genre: usize,
    pub genre_name: String,
    pub split: Split,
    pub audio: String,
    pub motion: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub sample_rate: u32,
    pub fps: f32,
    pub duration_s: f64,
    pub genres: Vec<String>,
    pub pairs: Vec<ManifestEntry>,
}

#[derive(Clone, Debug)]
pub struct DatasetConfig {
    pub n_per_genre: usize,
    pub seed: u64,
    pub duration_s: f64,
    pub sample_rate: u32,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_per_genre: 10,
            seed: 0,
            duration_s: CLIP_SECONDS,
            sample_rate: FIXTURE_SAMPLE_RATE,
        }
    }
}

/// Split assignment for `total` pairs listed genre-interleaved:
/// first 70% train, next 15% val, rest test.
pub fn split_for(index: usize, total: usize) -> Split {
    let train = (total as f64 * 0.7).round() as usize;
    let val = (total as f64 * 0.15).round() as usize;
    if index < train {
        Split::Train
    } else if index < train + val {
        Split::Val
    } else {
        Split::Test
    }
}

/// Generates `n_per_genre` pairs for every genre in memory.
///
/// Pairs are ordered round-robin over genres before splitting, so every split
/// sees every genre whenever it is large enough.
pub fn gen_pairs(specs: &[GenreSpec], cfg: &DatasetConfig) -> Result<Vec<Pair>> {
    if cfg.n_per_genre < 3 {
        return Err(Error::contract(format!(
            "need at least 3 pairs per genre, got {}",
            cfg.n_per_genre
        )));
    }
    if specs.is_empty() {
        return Err(Error::contract("no genres"));
    }
    let total = specs.len() * cfg.n_per_genre;
    (0..total)
        .map(|id| {
            let spec = &specs[id % specs.len()];
            let mut seeder = ChaCha8Rng::seed_from_u64(cfg.seed);
            seeder.set_stream(id as u64 + 1);
            let (music, motion) = gen_pair(spec, seeder.gen(), cfg.duration_s, cfg.sample_rate)?;
            Ok(Pair {
                id,
                genre: spec.id,
                split: split_for(id, total),
                music,
                motion,
            })
        })
        .collect()
}

/// Generates the dataset and writes WAV/MOTN files plus `manifest.json`.
pub fn gen_dataset(specs: &[GenreSpec], cfg: &DatasetConfig, out_dir: &Path) -> Result<Manifest> {
    let pairs = gen_pairs(specs, cfg)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(pairs.len());
    for p in &pairs {
        let audio = format!("pair_{:04}.wav", p.id);
        let motion = format!("pair_{:04}.motn", p.id);
        p.music.save(out_dir.join(&audio))?;
        p.motion.save(out_dir.join(&motion))?;
        entries.push(ManifestEntry {
            id: p.id,
            genre: p.genre,
            genre_name: specs[p.id % specs.len()].name.clone(),
            split: p.split,
            audio,
            motion,
        });
    }
    let manifest = Manifest {
        sample_rate: cfg.sample_rate,
        fps: DEFAULT_FPS,
        duration_s: cfg.duration_s,
        genres: specs.iter().map(|s| s.name.clone()).collect(),
        pairs: entries,
    };
    let path = out_dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Reads every pair listed in a manifest stored in `dir`.
    pub fn load_pairs(&self, dir: &Path) -> Result<Vec<Pair>> {
        self.pairs
            .iter()
            .map(|e| {
                let resolve = |name: &str| -> PathBuf { dir.join(name) };
                Ok(Pair {
                    id: e.id,
                    genre: e.genre,
                    split: e.split,
                    music: MusicClip::load(resolve(&e.audio))?,
                    motion: MotionFragment::load(resolve(&e.motion))?,
                })
            })
            .collect()
    }
}
