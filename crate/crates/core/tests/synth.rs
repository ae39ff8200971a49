use std::collections::HashSet;

use choreo_core::audio::FeatureConfig;
use choreo_core::dataset::{clips_from_pairs, in_split};
use choreo_core::metrics::{train_classifier, ClassifierTrainConfig, GenreClassifier, Part};
use choreo_core::motion::{joint_column, MotionFragment};
use choreo_core::synth::{gen_dataset, gen_pair, gen_pairs, DatasetConfig, GenreSpec, Manifest, Split};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

#[test]
fn joint_trajectory_peaks_at_the_beat_frequency() {
    let spec = GenreSpec::preset(1);
    assert_eq!(spec.tempo_bpm, 120.0);
    let (_, motion) = gen_pair(&spec, 7, 8.0, 8000).unwrap();
    let (j, k) = (0..22)
        .flat_map(|j| (0..3).map(move |k| (j, k)))
        .max_by(|a, b| spec.joints[a.0].amplitude[a.1].total_cmp(&spec.joints[b.0].amplitude[b.1]))
        .unwrap();
    let col = joint_column(j) + k;
    let n = motion.len();
    let mut buf: Vec<Complex<f64>> = (0..n).map(|t| Complex::new(motion.frame(t)[col], 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let peak = (1..n / 2).max_by(|a, b| buf[*a].norm().total_cmp(&buf[*b].norm())).unwrap();
    let hz = peak as f64 * 30.0 / n as f64;
    assert!((hz - 2.0).abs() < 1e-9, "peak at {hz} Hz");
}

#[test]
fn dataset_files_and_disjoint_splits() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig {
        n_per_genre: 10,
        seed: 3,
        duration_s: 4.0,
        sample_rate: 8000,
    };
    let manifest = gen_dataset(&GenreSpec::presets(4), &cfg, dir.path()).unwrap();
    assert_eq!(manifest.pairs.len(), 40);
    let ids = |s: Split| -> HashSet<usize> { manifest.pairs.iter().filter(|p| p.split == s).map(|p| p.id).collect() };
    let (train, val, test) = (ids(Split::Train), ids(Split::Val), ids(Split::Test));
    assert_eq!((train.len(), val.len(), test.len()), (28, 6, 6));
    assert!(train.is_disjoint(&val) && train.is_disjoint(&test) && val.is_disjoint(&test));
    let genres: HashSet<usize> = manifest.pairs.iter().filter(|p| p.split == Split::Test).map(|p| p.genre).collect();
    assert_eq!(genres.len(), 4);

    let reread = Manifest::load(dir.path().join("manifest.json")).unwrap();
    assert_eq!(reread, manifest);
    let pairs = reread.load_pairs(dir.path()).unwrap();
    let direct = gen_pairs(&GenreSpec::presets(4), &cfg).unwrap();
    for (a, b) in pairs.iter().zip(&direct) {
        assert_eq!(a.motion.len(), b.motion.len());
        assert!(a.motion.frames().max_abs_diff(b.motion.frames()) < 1e-6);
        assert_eq!(a.music.samples.len(), b.music.samples.len());
    }
}

#[test]
fn io_failures_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let err = gen_dataset(&GenreSpec::presets(2), &DatasetConfig::default(), &blocker.join("sub")).unwrap_err();
    assert!(err.to_string().contains("file"), "{err}");
}

fn mean_distance(a: &[&MotionFragment], b: &[&MotionFragment], same: bool) -> f64 {
    let mut acc = (0.0, 0);
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            if !same || i < j {
                acc.0 += x.sq_distance(y).sqrt();
                acc.1 += 1;
            }
        }
    }
    acc.0 / acc.1 as f64
}

#[test]
fn genres_are_separable() {
    let cfg = DatasetConfig {
        n_per_genre: 10,
        seed: 11,
        duration_s: 4.0,
        ..DatasetConfig::default()
    };
    let pairs = gen_pairs(&GenreSpec::presets(4), &cfg).unwrap();
    let of = |g: usize| -> Vec<&MotionFragment> { pairs.iter().filter(|p| p.genre == g).map(|p| &p.motion).collect() };
    let within = (0..4).map(|g| mean_distance(&of(g), &of(g), true)).sum::<f64>() / 4.0;
    let across = mean_distance(&of(0), &of(1), false);
    assert!(across > within, "across {across} within {within}");

    let clips = clips_from_pairs(&pairs, &FeatureConfig::default()).unwrap();
    let mut cls = GenreClassifier::new(Part::Full, 4, 0).unwrap();
    let cfg = ClassifierTrainConfig {
        iterations: 150,
        ..ClassifierTrainConfig::default()
    };
    train_classifier(&mut cls, &in_split(&clips, Split::Train), &cfg).unwrap();
    let acc = cls.accuracy(&in_split(&clips, Split::Test)).unwrap();
    assert!(acc >= 0.9, "test accuracy {acc}");
}
