use std::f64::consts::PI;

use choreo_core::audio::dsp::{hann, mel_spectrogram, stft_power, MelFilterbank};
use choreo_core::audio::{
    encode_pcm16, parse_wav, temporal_features, write_wav, FeatureConfig, MusicClip, BEAT_COL,
    FIXTURE_SAMPLE_RATE,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const SR: u32 = FIXTURE_SAMPLE_RATE;

fn tone(hz: f64, seconds: f64) -> Vec<f64> {
    (0..(seconds * SR as f64) as usize)
        .map(|i| 0.5 * (2.0 * PI * hz * i as f64 / SR as f64).sin())
        .collect()
}

/// 10 ms decaying 3 kHz bursts every `60/bpm` seconds starting at t=0.
fn click_track(bpm: f64, seconds: f64) -> Vec<f64> {
    let n = (seconds * SR as f64) as usize;
    let period = (60.0 / bpm * SR as f64) as usize;
    let burst = SR as usize / 100;
    let mut x = vec![0.0; n];
    for start in (0..n).step_by(period) {
        for i in 0..burst.min(n - start) {
            let t = i as f64 / SR as f64;
            x[start + i] = 0.8 * (2.0 * PI * 3000.0 * t).sin() * (-t * 400.0).exp();
        }
    }
    x
}

#[test]
fn tone_at_filter_centre_peaks_in_that_filter() {
    let cfg = FeatureConfig::default();
    let bank = MelFilterbank::new(cfg.n_mels, cfg.n_fft, SR, 0.0, SR as f64 / 2.0);
    for k in [20, 40, 64, 90, 120] {
        let hz = bank.center_hz(k);
        let mel = mel_spectrogram(&tone(hz, 0.5), SR, cfg.n_fft, cfg.hop, cfg.n_mels).unwrap();
        for frame in &mel {
            // brute force over every bin
            let mut best = 0;
            for (m, v) in frame.iter().enumerate() {
                if *v > frame[best] {
                    best = m;
                }
            }
            assert_eq!(best, k, "tone at {hz:.1} Hz");
        }
    }
}

#[test]
fn click_track_at_120_bpm_gives_eight_beats() {
    let clip = MusicClip::new(click_track(120.0, 4.0), SR).unwrap();
    let f = temporal_features(&clip, &FeatureConfig::default()).unwrap().0;
    let beats: Vec<usize> = (0..120).filter(|&r| f.at(r, BEAT_COL) == 1.0).collect();
    assert!((7..=9).contains(&beats.len()), "beats at {beats:?}");
    // 0.5 s at 30 fps
    for w in beats.windows(2) {
        let gap = w[1] - w[0];
        assert!((14..=16).contains(&gap), "beats at {beats:?}");
    }
}

#[test]
fn white_noise_parseval() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let normal = Normal::new(0.0, 0.2).unwrap();
    let x: Vec<f64> = (0..SR as usize).map(|_| normal.sample(&mut rng)).collect();
    let n_fft = 2048;
    let spectra = stft_power(&x, n_fft, 512).unwrap();
    let w2: f64 = hann(n_fft).iter().map(|w| w * w).sum();
    let per_frame: Vec<f64> = spectra
        .iter()
        .map(|p| {
            let half = p.len() - 1;
            let two_sided = p[0] + p[half] + 2.0 * p[1..half].iter().sum::<f64>();
            two_sided / (n_fft as f64 * w2)
        })
        .collect();
    let spectral = per_frame.iter().sum::<f64>() / per_frame.len() as f64;
    let temporal = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    assert!((spectral / temporal - 1.0).abs() < 0.05, "{spectral} vs {temporal}");
}

#[test]
fn features_are_deterministic() {
    let bytes = write_wav(&MusicClip::new(click_track(90.0, 4.0), SR).unwrap());
    let a = temporal_features(&parse_wav(&bytes).unwrap(), &FeatureConfig::default()).unwrap();
    let b = temporal_features(&parse_wav(&bytes).unwrap(), &FeatureConfig::default()).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #[test]
    fn wav_roundtrip_is_bit_exact(pcm in prop::collection::vec(any::<i16>(), 1..500), rate in 8000u32..96000) {
        let bytes = encode_pcm16(&pcm, 1, rate);
        let clip = parse_wav(&bytes).unwrap();
        prop_assert_eq!(write_wav(&clip), bytes);
    }
}
