//! Music ingestion and the two music representations used downstream: a
//! per-motion-frame feature matrix (`120 × 35`) and a `224 × 224 × 3`
//! log-mel image.

pub mod dsp;
mod wav;

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use choreo_tensor::Tensor;

use crate::error::{Error, Result};
use crate::motion::{read_container, write_container, CLIP_FRAMES, CLIP_SECONDS, DEFAULT_FPS};
use dsp::{dct2, frame_count, MelFilterbank};

pub use wav::{encode_pcm16, parse_wav, quantize, write_wav, WavError};

/// Sample rate used for feature extraction on real material.
pub const DEFAULT_SAMPLE_RATE: u32 = 76_800;
/// Sample rate of the generated fixtures.
pub const FIXTURE_SAMPLE_RATE: u32 = 48_000;

pub const FEATURE_DIM: usize = 35;
pub const MFCC_COLS: std::ops::Range<usize> = 0..20;
pub const CHROMA_COLS: std::ops::Range<usize> = 20..32;
pub const RMS_COL: usize = 32;
pub const ONSET_COL: usize = 33;
pub const BEAT_COL: usize = 34;
pub const IMAGE_SIZE: usize = 224;

/// Mono PCM in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MusicClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl MusicClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::contract("sample rate must be positive"));
        }
        if samples.is_empty() {
            return Err(Error::contract("music clip is empty"));
        }
        Ok(MusicClip {
            samples,
            sample_rate,
        })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(parse_wav(&bytes)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, write_wav(self)).map_err(|e| Error::io(path, e))
    }

    /// Samples `[start, end)` as a new clip.
    pub fn slice(&self, start: usize, end: usize) -> Result<MusicClip> {
        if start >= end || end > self.samples.len() {
            return Err(Error::contract(format!(
                "sample range {start}..{end} out of 0..{}",
                self.samples.len()
            )));
        }
        MusicClip::new(self.samples[start..end].to_vec(), self.sample_rate)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub n_mfcc: usize,
    /// Half-width of the beat picker's local-maximum window, in STFT frames.
    pub beat_window: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            n_fft: 2048,
            hop: 512,
            n_mels: 128,
            n_mfcc: 20,
            beat_window: 7,
        }
    }
}

/// `120 × 35` per-motion-frame music features.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalFeatures(pub Tensor);

/// `224 × 224 × 3` log-mel image, values in `[0, 1]`, identical channels.
#[derive(Clone, Debug, PartialEq)]
pub struct MelImage(pub Tensor);

fn log_power(p: f64) -> f64 {
    10.0 * p.max(1e-10).log10()
}

/// Hop-rate analysis shared by the feature matrix and the mel image.
struct Analysis {
    frames: usize,
    log_mel: Vec<Vec<f64>>,
    power: Vec<Vec<f64>>,
}

fn analyse(clip: &MusicClip, cfg: &FeatureConfig) -> Result<Analysis> {
    let power = dsp::stft_power(&clip.samples, cfg.n_fft, cfg.hop)?;
    let bank = MelFilterbank::new(
        cfg.n_mels,
        cfg.n_fft,
        clip.sample_rate,
        0.0,
        clip.sample_rate as f64 / 2.0,
    );
    let log_mel = power
        .iter()
        .map(|p| bank.apply(p).into_iter().map(log_power).collect())
        .collect();
    Ok(Analysis {
        frames: power.len(),
        log_mel,
        power,
    })
}

fn chroma(power: &[f64], n_fft: usize, sample_rate: u32) -> [f64; 12] {
    let mut c = [0.0; 12];
    for (k, p) in power.iter().enumerate().skip(1) {
        let hz = dsp::bin_hz(k, n_fft, sample_rate);
        if hz < 27.5 {
            continue;
        }
        // pitch class with C = 0
        let midi = 69.0 + 12.0 * (hz / 440.0).log2();
        let pc = (midi.round() as i64).rem_euclid(12) as usize;
        c[pc] += p;
    }
    let max = c.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        for v in &mut c {
            *v /= max;
        }
    }
    c
}

/// Positive log-mel flux per frame; the first frame is 0.
pub fn onset_strength(log_mel: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; log_mel.len()];
    for t in 1..log_mel.len() {
        let n = log_mel[t].len() as f64;
        out[t] = log_mel[t]
            .iter()
            .zip(&log_mel[t - 1])
            .map(|(a, b)| (a - b).max(0.0))
            .sum::<f64>()
            / n;
    }
    out
}

/// Frames that are the maximum within `±window` and exceed mean + 1σ.
pub fn pick_beats(onset: &[f64], window: usize) -> Vec<usize> {
    let n = onset.len() as f64;
    let mean = onset.iter().sum::<f64>() / n;
    let std = (onset.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let threshold = mean + std;
    (0..onset.len())
        .filter(|&t| {
            let lo = t.saturating_sub(window);
            let hi = (t + window + 1).min(onset.len());
            let v = onset[t];
            // ties resolve to the earliest frame
            v > threshold
                && onset[lo..hi].iter().all(|&u| u <= v)
                && onset[lo..t].iter().all(|&u| u < v)
        })
        .collect()
}

/// Linear resampling of a hop-rate series onto `out_len` motion frames.
fn resample(series: &[f64], out_len: usize) -> Vec<f64> {
    let n = series.len();
    if n == 1 {
        return vec![series[0]; out_len];
    }
    (0..out_len)
        .map(|r| {
            let pos = r as f64 * (n - 1) as f64 / (out_len - 1) as f64;
            let i = (pos.floor() as usize).min(n - 2);
            let w = pos - i as f64;
            series[i] * (1.0 - w) + series[i + 1] * w
        })
        .collect()
}

fn nearest_row(frame: usize, frames: usize, out_len: usize) -> usize {
    if frames <= 1 {
        return 0;
    }
    ((frame as f64 * (out_len - 1) as f64 / (frames - 1) as f64).round() as usize).min(out_len - 1)
}

/// Per-frame music features of one 4-second clip.
///
/// Columns: 0..20 MFCC, 20..32 chroma, 32 RMS, 33 onset strength, 34 beat
/// indicator. Hop-rate rows are linearly resampled to 120 motion frames; beat
/// flags are moved to the nearest motion frame instead.
pub fn temporal_features(clip: &MusicClip, cfg: &FeatureConfig) -> Result<TemporalFeatures> {
    let expected = (CLIP_SECONDS * clip.sample_rate as f64).round() as usize;
    if clip.samples.len() != expected {
        return Err(Error::contract(format!(
            "feature extraction needs a {CLIP_SECONDS} s clip ({expected} samples), got {}",
            clip.samples.len()
        )));
    }
    let a = analyse(clip, cfg)?;
    let onset = onset_strength(&a.log_mel);
    let beats = pick_beats(&onset, cfg.beat_window);

    let mut columns: Vec<Vec<f64>> = vec![Vec::with_capacity(a.frames); FEATURE_DIM];
    for f in 0..a.frames {
        let mfcc = dct2(&a.log_mel[f], cfg.n_mfcc);
        for (i, v) in mfcc.into_iter().enumerate().take(MFCC_COLS.len()) {
            columns[MFCC_COLS.start + i].push(v);
        }
        for (i, v) in chroma(&a.power[f], cfg.n_fft, clip.sample_rate).into_iter().enumerate() {
            columns[CHROMA_COLS.start + i].push(v);
        }
        let start = f * cfg.hop;
        let window = &clip.samples[start..start + cfg.n_fft];
        let rms = (window.iter().map(|s| s * s).sum::<f64>() / window.len() as f64).sqrt();
        columns[RMS_COL].push(rms);
        columns[ONSET_COL].push(onset[f]);
    }

    let mut out = Tensor::zeros([CLIP_FRAMES, FEATURE_DIM]);
    for (c, series) in columns.iter().enumerate().take(BEAT_COL) {
        for (r, v) in resample(series, CLIP_FRAMES).into_iter().enumerate() {
            out.row_mut(r)[c] = v;
        }
    }
    for b in beats {
        out.row_mut(nearest_row(b, a.frames, CLIP_FRAMES))[BEAT_COL] = 1.0;
    }
    out.validate("temporal features")?;
    Ok(TemporalFeatures(out))
}

/// Bilinear resize with corner alignment of a row-major `h × w` grid.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        if n_in == 1 || n_out == 1 {
            return (0, 0, 0.0);
        }
        let pos = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let lo = (pos.floor() as usize).min(n_in - 2);
        (lo, lo + 1, pos - lo as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, w, out_w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Log-power mel image: rows are mel bands (lowest first), columns are
/// frames. A constant spectrogram maps to all zeros.
pub fn mel_image(clip: &MusicClip, cfg: &FeatureConfig) -> Result<MelImage> {
    let a = analyse(clip, cfg)?;
    let (h, w) = (cfg.n_mels, a.frames);
    let mut grid = vec![0.0; h * w];
    for (f, row) in a.log_mel.iter().enumerate() {
        for (m, v) in row.iter().enumerate() {
            grid[m * w + f] = *v;
        }
    }
    let min = grid.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = grid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    for v in &mut grid {
        *v = if range > 1e-12 { (*v - min) / range } else { 0.0 };
    }
    let resized = resize_bilinear(&grid, h, w, IMAGE_SIZE, IMAGE_SIZE);
    let mut data = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE * 3);
    for v in resized {
        let v = v.clamp(0.0, 1.0);
        data.extend_from_slice(&[v, v, v]);
    }
    Ok(MelImage(Tensor::new([IMAGE_SIZE, IMAGE_SIZE, 3], data)?))
}

/// Number of hop-rate frames a clip produces.
pub fn analysis_frames(clip: &MusicClip, cfg: &FeatureConfig) -> usize {
    frame_count(clip.samples.len(), cfg.n_fft, cfg.hop)
}

pub const FEAT_MAGIC: &[u8; 4] = b"FEAT";
pub const MELI_MAGIC: &[u8; 4] = b"MELI";

impl TemporalFeatures {
    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        write_container(w, FEAT_MAGIC, DEFAULT_FPS, &self.0)
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let (_, t) = read_container(r, FEAT_MAGIC)?;
        if t.shape()[1] != FEATURE_DIM {
            return Err(Error::Format(format!(
                "FEAT: expected {FEATURE_DIM} columns, got {}",
                t.shape()[1]
            )));
        }
        Ok(TemporalFeatures(t))
    }
}

impl MelImage {
    /// `MELI` layout: magic, version u32, height u32, width u32, channels
    /// u32, then the f32 grid in row-major `[height, width, channels]` order.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let s = self.0.shape();
        let mut buf = Vec::with_capacity(20 + self.0.numel() * 4);
        buf.extend_from_slice(MELI_MAGIC);
        buf.extend_from_slice(&1u32.to_le_bytes());
        for &d in s {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in self.0.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)
            .map_err(|e| Error::Format(format!("write failed: {e}")))
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut b = Vec::new();
        r.read_to_end(&mut b)
            .map_err(|e| Error::Format(format!("read failed: {e}")))?;
        if b.len() < 20 || &b[..4] != MELI_MAGIC {
            return Err(Error::Format("MELI: bad header".into()));
        }
        let u = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap()) as usize;
        if u(4) != 1 {
            return Err(Error::Format(format!("MELI: unsupported version {}", u(4))));
        }
        let (h, w, c) = (u(8), u(12), u(16));
        if b.len() - 20 != h * w * c * 4 {
            return Err(Error::Format("MELI: payload size mismatch".into()));
        }
        let data = b[20..]
            .chunks_exact(4)
            .map(|x| f32::from_le_bytes([x[0], x[1], x[2], x[3]]) as f64)
            .collect();
        Ok(MelImage(Tensor::new([h, w, c], data)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn silence() -> MusicClip {
        MusicClip::new(vec![0.0; 4 * FIXTURE_SAMPLE_RATE as usize], FIXTURE_SAMPLE_RATE).unwrap()
    }

    #[test]
    fn silence_features() {
        let f = temporal_features(&silence(), &FeatureConfig::default()).unwrap().0;
        assert_eq!(f.shape(), &[120, 35]);
        for c in MFCC_COLS {
            let first = f.at(0, c);
            assert!((0..120).all(|r| f.at(r, c) == first), "mfcc column {c}");
        }
        assert!((0..120).all(|r| f.at(r, RMS_COL) == 0.0 && f.at(r, BEAT_COL) == 0.0));
    }

    #[test]
    fn wrong_duration_is_rejected() {
        let clip = MusicClip::new(vec![0.0; 48_000], 48_000).unwrap();
        assert!(matches!(
            temporal_features(&clip, &FeatureConfig::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn silence_image_is_zero() {
        let img = mel_image(&silence(), &FeatureConfig::default()).unwrap().0;
        assert_eq!(img.shape(), &[224, 224, 3]);
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn image_channels_identical() {
        let sr = FIXTURE_SAMPLE_RATE;
        let samples = (0..4 * sr as usize)
            .map(|i| 0.3 * (2.0 * PI * 440.0 * i as f64 / sr as f64).sin() * ((i / 4000) % 2) as f64)
            .collect();
        let img = mel_image(&MusicClip::new(samples, sr).unwrap(), &FeatureConfig::default())
            .unwrap()
            .0;
        for px in img.data().chunks(3) {
            assert!(px[0] == px[1] && px[1] == px[2]);
            assert!((0.0..=1.0).contains(&px[0]));
        }
        assert!(img.data().iter().any(|&v| v > 0.5));
    }

    #[test]
    fn checkerboard_corners_survive_resize() {
        let src = [1.0, 0.0, 0.0, 1.0];
        let out = resize_bilinear(&src, 2, 2, 4, 4);
        assert_eq!((out[0], out[3], out[12], out[15]), (1.0, 0.0, 0.0, 1.0));
        // (1,1) sits a third of the way in both directions: weights 4/9, 2/9, 2/9, 1/9
        assert!((out[5] - (4.0 / 9.0 + 1.0 / 9.0)).abs() < 1e-12);
    }

    #[test]
    fn containers_roundtrip() {
        let f = TemporalFeatures(Tensor::from_fn([120, 35], |i| i as f64 * 0.25));
        let mut buf = Vec::new();
        f.write(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"FEAT");
        assert_eq!(TemporalFeatures::read(&buf[..]).unwrap(), f);
        let img = MelImage(Tensor::from_fn([4, 5, 3], |i| i as f64 / 64.0));
        let mut buf = Vec::new();
        img.write(&mut buf).unwrap();
        assert_eq!(MelImage::read(&buf[..]).unwrap(), img);
    }

    #[test]
    fn beat_picker_prefers_first_of_ties() {
        let mut onset = vec![0.0; 40];
        onset[10] = 5.0;
        onset[11] = 5.0;
        onset[30] = 4.0;
        assert_eq!(pick_beats(&onset, 7), vec![10, 30]);
    }
}
