//! STFT and HTK mel filterbank.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

pub fn frame_count(len: usize, n_fft: usize, hop: usize) -> usize {
    1 + (len - n_fft) / hop
}

fn check_frame_params(len: usize, n_fft: usize, hop: usize) -> Result<()> {
    if !n_fft.is_power_of_two() {
        return Err(Error::contract(format!("n_fft {n_fft} is not a power of two")));
    }
    if hop == 0 || hop > n_fft {
        return Err(Error::contract(format!("hop {hop} must be in 1..={n_fft}")));
    }
    if len < n_fft {
        return Err(Error::contract(format!(
            "clip of {len} samples is shorter than n_fft {n_fft}"
        )));
    }
    Ok(())
}

/// One-sided power spectra `|X_k|²`, `k = 0..=n_fft/2`, of Hann-windowed
/// frames. No padding: frame `i` covers samples `[i*hop, i*hop + n_fft)`.
pub fn stft_power(samples: &[f64], n_fft: usize, hop: usize) -> Result<Vec<Vec<f64>>> {
    check_frame_params(samples.len(), n_fft, hop)?;
    let window = hann(n_fft);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let frames = frame_count(samples.len(), n_fft, hop);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut out = Vec::with_capacity(frames);
    for f in 0..frames {
        let start = f * hop;
        for (i, c) in buf.iter_mut().enumerate() {
            *c = Complex::new(samples[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        out.push(buf[..=n_fft / 2].iter().map(|c| c.norm_sqr()).collect());
    }
    Ok(out)
}

/// Centre frequency (Hz) of FFT bin `k`.
pub fn bin_hz(k: usize, n_fft: usize, sample_rate: u32) -> f64 {
    k as f64 * sample_rate as f64 / n_fft as f64
}

/// Triangular filters equally spaced on the HTK mel scale between `fmin` and
/// `fmax`, each peaking at 1 on its centre frequency.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// `n_mels + 2` edge frequencies in Hz.
    edges: Vec<f64>,
    weights: Vec<Vec<f64>>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: u32, fmin: f64, fmax: f64) -> Self {
        let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bins = n_fft / 2 + 1;
        let weights = (0..n_mels)
            .map(|m| {
                let (l, c, u) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..bins)
                    .map(|k| {
                        let f = bin_hz(k, n_fft, sample_rate);
                        let rise = (f - l) / (c - l);
                        let fall = (u - f) / (u - c);
                        rise.min(fall).max(0.0)
                    })
                    .collect()
            })
            .collect();
        MelFilterbank { edges, weights }
    }

    pub fn n_mels(&self) -> usize {
        self.weights.len()
    }

    pub fn center_hz(&self, m: usize) -> f64 {
        self.edges[m + 1]
    }

    pub fn weights(&self, m: usize) -> &[f64] {
        &self.weights[m]
    }

    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| w.iter().zip(power).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Mel power matrix, one row per STFT frame.
pub fn mel_spectrogram(
    samples: &[f64],
    sample_rate: u32,
    n_fft: usize,
    hop: usize,
    n_mels: usize,
) -> Result<Vec<Vec<f64>>> {
    let power = stft_power(samples, n_fft, hop)?;
    let bank = MelFilterbank::new(n_mels, n_fft, sample_rate, 0.0, sample_rate as f64 / 2.0);
    Ok(power.iter().map(|p| bank.apply(p)).collect())
}

/// Orthonormal DCT-II, first `n_out` coefficients.
pub fn dct2(input: &[f64], n_out: usize) -> Vec<f64> {
    let n = input.len() as f64;
    (0..n_out)
        .map(|k| {
            let s: f64 = input
                .iter()
                .enumerate()
                .map(|(i, x)| x * (PI * k as f64 * (2.0 * i as f64 + 1.0) / (2.0 * n)).cos())
                .sum();
            let norm = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            s * norm
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn htk_reference_points() {
        assert_eq!(hz_to_mel(0.0), 0.0);
        assert!((hz_to_mel(700.0) - 781.17).abs() < 0.01);
        assert!((mel_to_hz(hz_to_mel(1234.5)) - 1234.5).abs() < 1e-9);
    }

    #[test]
    fn frame_count_without_padding() {
        let x = vec![0.0; 2048 + 512 * 3 + 100];
        assert_eq!(stft_power(&x, 2048, 512).unwrap().len(), 4);
        assert!(stft_power(&x[..1000], 2048, 512).is_err());
        assert!(stft_power(&x, 1000, 512).is_err());
        assert!(stft_power(&x, 512, 1024).is_err());
    }

    #[test]
    fn dct_of_constant_is_dc_only() {
        let c = dct2(&[2.0; 8], 4);
        assert!((c[0] - 2.0 * 8f64.sqrt()).abs() < 1e-12);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-12));
    }
}
