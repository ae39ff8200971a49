//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Run with `cargo test --release -p choreo-core --test acceptance`.

#[allow(dead_code)]
#[path = "../../tensor/tests/common/gradcheck.rs"]
mod gradcheck;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use choreo_core::audio::dsp::{hz_to_mel, mel_spectrogram, MelFilterbank};
use choreo_core::audio::{encode_pcm16, parse_wav, temporal_features, write_wav, FeatureConfig, MusicClip, BEAT_COL};
use choreo_core::config::{RunConfig, Strategy};
use choreo_core::dataset::{clips_from_pairs, in_split, Clip};
use choreo_core::diffusion::{forward_diffuse, reverse_sample, standard_normal, ConstantDenoiser, NoiseSchedule};
use choreo_core::fdgn::{train_fdgn, Fdgn, FdgnConfig, FdgnSample, TrainConfig};
use choreo_core::gcrm::{
    combined_scores, evaluate_retrieval, select, stitch, train_retrieval, Retrieval, RetrievalTrainConfig,
    SelectionWeights,
};
use choreo_core::metrics::{
    diversity, fid, fid_features, multimodality, train_classifier, ClassifierTrainConfig, GaussianStats,
    GenreClassifier, Matrix, Part,
};
use choreo_core::motion::{frame_distance, MotionFragment, CLIP_FRAMES, FRAME_DIM};
use choreo_core::pipeline::{junction_max_jump, replay, run_ablation, run_finenet, run_variations, Models};
use choreo_core::synth::{gen_pair, gen_pairs, DatasetConfig, GenreSpec, Split};
use choreo_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: std::result::Result<T, E>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn c1_autodiff() -> Outcome {
    let ops = gradcheck::ops();
    let mut worst: (f64, &str) = (0.0, "");
    for (i, op) in ops.iter().enumerate() {
        let err = ok(gradcheck::check_op(op, 100, 1000 + i as u64))?;
        if err > worst.0 {
            worst = (err, op.name);
        }
    }
    ensure!(worst.0 < 1e-4, "{}: max relative error {:.3e}", worst.1, worst.0);
    Ok(format!("{} ops x 100 cases, worst relative error {:.2e} ({})", ops.len(), worst.0, worst.1))
}

fn c2_diffusion() -> Outcome {
    let sched = ok(NoiseSchedule::linear(50, 1e-4, 0.02))?;
    for s in 1..=50 {
        let gap = (sched.alpha_bar(s) - sched.alpha_bar(s - 1) * sched.alpha(s)).abs();
        ensure!(gap <= 1e-12, "schedule identity off by {gap:e} at s={s}");
    }
    let (draws, x0) = (10_000, 0.8);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for s in [1, 25, 50] {
        let eps = standard_normal(&[draws], &mut rng);
        let xs = ok(forward_diffuse(&Tensor::full([draws], x0), s, &eps, &sched))?;
        let n = draws as f64;
        let mean = xs.sum() / n;
        let var = xs.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let ab = sched.alpha_bar(s);
        let (mu, sigma2) = (ab.sqrt() * x0, 1.0 - ab);
        let zm = (mean - mu).abs() / (sigma2 / n).sqrt();
        let zv = (var - sigma2).abs() / (sigma2 * (2.0 / (n - 1.0)).sqrt());
        ensure!(zm < 3.0 && zv < 3.0, "s={s}: mean {mean} vs {mu} ({zm:.2} se), var {var} vs {sigma2} ({zv:.2} se)");
        worst = worst.max(zm).max(zv);
    }
    Ok(format!("mean/variance within {worst:.2} standard errors at s=1,25,50; identity holds to 1e-12"))
}

fn c3_fixed_point() -> Outcome {
    let sched = ok(NoiseSchedule::linear(50, 1e-4, 0.02))?;
    let target = Tensor::from_fn([CLIP_FRAMES, FRAME_DIM], |i| ((i * 31) % 17) as f64 * 0.05 - 0.4);
    let den = ConstantDenoiser::new(target.clone());
    let out = ok(reverse_sample(&den, &Tensor::zeros([CLIP_FRAMES, 35]), FRAME_DIM, &sched, &mut ChaCha8Rng::seed_from_u64(5)))?;
    let err = out.max_abs_diff(&target);
    ensure!(err <= 1e-6, "max deviation {err:e}");
    Ok(format!("max deviation {err:.1e}"))
}

/// Models and data shared by criteria 4, 6 and 10.
struct Trained {
    models: Models,
    classifier: GenreClassifier,
}

fn c4_training(slot: &mut Option<Trained>) -> Outcome {
    let start = Instant::now();
    let cfg = DatasetConfig {
        n_per_genre: 10,
        duration_s: 20.0,
        ..DatasetConfig::default()
    };
    let pairs = ok(gen_pairs(&GenreSpec::presets(4), &cfg))?;
    let clips = ok(clips_from_pairs(&pairs, &FeatureConfig::default()))?;
    let train = in_split(&clips, Split::Train);
    let test = in_split(&clips, Split::Test);

    let data = ok(train.iter().map(Clip::fdgn_sample).collect::<choreo_core::Result<Vec<FdgnSample>>>())?;
    let mut fdgn = ok(Fdgn::new(&FdgnConfig::default(), &data, 0))?;
    let report = ok(train_fdgn(&mut fdgn, &data, &TrainConfig::default()))?;
    let ratio = report.final_loss.total() / report.initial.total();

    let mut retrieval = ok(Retrieval::new(0))?;
    ok(train_retrieval(&mut retrieval, &train, &RetrievalTrainConfig::default()))?;
    let r = ok(evaluate_retrieval(&retrieval, &test))?;
    let elapsed = start.elapsed();

    let mut classifier = ok(GenreClassifier::new(Part::Full, 4, 0))?;
    ok(train_classifier(&mut classifier, &train, &ClassifierTrainConfig::default()))?;
    *slot = Some(Trained {
        models: Models { fdgn, retrieval },
        classifier,
    });

    let detail = format!(
        "{} pairs / {} clips; FDGN loss {:.4} -> {:.4} (ratio {:.3}); retrieval top-1 {:.3}, GS margin {:.3} ({:.3} vs {:.3}); {:.0} s",
        pairs.len(),
        clips.len(),
        report.initial.total(),
        report.final_loss.total(),
        ratio,
        r.top1,
        r.margin,
        r.gs_matched,
        r.gs_mismatched,
        elapsed.as_secs_f64()
    );
    ensure!(ratio <= 0.5, "loss ratio above 0.5: {detail}");
    ensure!(r.top1 >= 0.9, "top-1 below 0.9: {detail}");
    ensure!(r.margin >= 0.2, "GS margin below 0.2: {detail}");
    ensure!(elapsed < Duration::from_secs(600), "over 10 minutes: {detail}");
    Ok(detail)
}

fn brute_force(gs: &[f64], cs: &[f64], a: f64, b: f64) -> usize {
    let mut best = 0;
    for i in 1..gs.len() {
        if a * gs[i] + b * cs[i] > a * gs[best] + b * cs[best] {
            best = i;
        }
    }
    best
}

fn c5_selection() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..1000 {
        let n = rng.gen_range(1..12);
        let gs: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cs: Vec<f64> = (0..n).map(|_| -rng.gen_range(0.0..20.0)).collect();
        let (a, b) = (rng.gen_range(0.01..2.0), rng.gen_range(0.0..2.0));
        let w = ok(SelectionWeights::new(a, b))?;
        let got = ok(select(&gs, &cs, w))?.idx;
        ensure!(got == brute_force(&gs, &cs, a, b), "case {case}: select {got} disagrees with brute force");
        let pure = ok(select(&gs, &cs, ok(SelectionWeights::new(a, 0.0))?))?.idx;
        ensure!(pure == brute_force(&gs, &vec![0.0; n], 1.0, 0.0), "case {case}: beta=0 is not the GS argmax");
        let combined = ok(combined_scores(&gs, &cs, w))?;
        let shift = rng.gen_range(-50.0..50.0);
        let shifted: Vec<f64> = combined.iter().map(|v| v + shift).collect();
        let unit = ok(SelectionWeights::new(1.0, 0.0))?;
        let base = ok(select(&combined, &vec![0.0; n], unit))?.idx;
        ensure!(ok(select(&shifted, &vec![0.0; n], unit))?.idx == base, "case {case}: shift changed the argmax");
    }
    Ok("1000 random tuples agree with brute force; beta=0 and constant shifts behave".into())
}

fn c6_stitch(trained: Option<&Trained>, track: &MusicClip) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst_slack = f64::INFINITY;
    for _ in 0..200 {
        let (la, lb) = (rng.gen_range(11..40), rng.gen_range(11..40));
        let mut mk = |n: usize| ok(MotionFragment::new(30.0, Tensor::from_fn([n, FRAME_DIM], |_| rng.gen_range(-1.0..1.0))));
        let (a, b) = (mk(la)?, mk(lb)?);
        let s = ok(stitch(&a, &b))?;
        let j = la - 5;
        let (p, q) = (s.frame(j - 1), s.frame(j + 10));
        ensure!(p == a.frame(la - 6) && q == b.frame(5), "junction endpoints moved");
        let bound = frame_distance(p, q) / 11.0 + 1e-9;
        for t in j..=j + 10 {
            let step = frame_distance(s.frame(t - 1), s.frame(t));
            ensure!(step <= bound, "step {step} exceeds {bound}");
            worst_slack = worst_slack.min(bound - step);
        }
    }
    let t = trained.ok_or("training in criterion 4 did not produce models")?;
    let cfg = RunConfig {
        seed: Some(7),
        ..RunConfig::default()
    };
    let fine = ok(run_finenet(&cfg, &t.models, track))?;
    let concat = ok(run_ablation(&cfg, &t.models, track, Strategy::FdgnC))?;
    let (jf, jc) = (junction_max_jump(&fine.motion), junction_max_jump(&concat.motion));
    ensure!(jf <= jc, "FineNet junction jump {jf:.4} exceeds FDGN-C {jc:.4}");
    Ok(format!(
        "200 random stitches hit endpoints with steps <= |q-p|/11; junction max-jump FineNet {jf:.4} <= FDGN-C {jc:.4}"
    ))
}

fn c7_fid() -> Outcome {
    let one = |mean: f64, var: f64| ok(Matrix::new(1, vec![var]).and_then(|c| GaussianStats::new(vec![mean], c)));
    let shift = ok(fid(&one(0.0, 1.0)?, &one(1.0, 1.0)?))?;
    let scale = ok(fid(&one(0.0, 1.0)?, &one(0.0, 4.0)?))?;
    ensure!((shift - 1.0).abs() < 1e-3 && (scale - 1.0).abs() < 1e-3, "1-D cases gave {shift} and {scale}");

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut feats = |n: usize, m: f64| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                let z: Vec<f64> = (0..64).map(|_| rng.sample(StandardNormal)).collect();
                (0..64).map(|i| m + z[i] + 0.5 * z[(i + 1) % 64]).collect()
            })
            .collect()
    };
    let (a, b) = (feats(200, 0.0), feats(150, 0.3));
    let self_fid = ok(fid_features(&a, &a))?;
    ensure!(self_fid <= 1e-6, "fid(A,A) = {self_fid:e}");
    let (ab, ba) = (ok(fid_features(&a, &b))?, ok(fid_features(&b, &a))?);
    ensure!((ab - ba).abs() < 1e-6, "asymmetric: {ab} vs {ba}");

    // orthogonal matrix by Gram-Schmidt
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < 64 {
        let mut v: Vec<f64> = (0..64).map(|_| rng.sample(StandardNormal)).collect();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(u).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        q.push(v.into_iter().map(|x| x / n).collect());
    }
    let rot = |f: &[Vec<f64>]| -> Vec<Vec<f64>> {
        f.iter().map(|x| q.iter().map(|r| r.iter().zip(x).map(|(p, s)| p * s).sum()).collect()).collect()
    };
    let rotated = ok(fid_features(&rot(&a), &rot(&b)))?;
    ensure!((rotated - ab).abs() < 1e-5, "rotation changed FID {ab} -> {rotated}");
    Ok(format!(
        "1-D cases {shift:.6}, {scale:.6}; fid(A,A) {self_fid:.1e}; |asym| {:.1e}; |rotation change| {:.1e}",
        (ab - ba).abs(),
        (rotated - ab).abs()
    ))
}

fn c8_degeneracies() -> Outcome {
    let same = vec![vec![0.25, -1.0, 3.0]; 5];
    ensure!(ok(diversity(&same))? == 0.0, "diversity of identical features is not 0");
    ensure!(ok(multimodality(&[same.clone(), same]))? == 0.0, "multimodality of identical versions is not 0");
    let div = ok(diversity(&[vec![0.0, 0.0], vec![3.0, 4.0], vec![0.0, 4.0]]))?;
    ensure!((div - 4.0).abs() < 1e-12, "diversity fixture gave {div}, expected 4");
    let mm = ok(multimodality(&[
        vec![vec![0.0, 0.0], vec![3.0, 4.0]],
        vec![vec![1.0, 1.0], vec![1.0, 1.0], vec![4.0, 5.0]],
    ]))?;
    ensure!((mm - 25.0 / 6.0).abs() < 1e-12, "multimodality fixture gave {mm}, expected 25/6");
    Ok(format!("zero on identical inputs; fixtures diversity {div} and MM {mm:.6}"))
}

fn c9_audio() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let pcm: Vec<i16> = (0..rng.gen_range(1..2000)).map(|_| rng.gen()).collect();
        let bytes = encode_pcm16(&pcm, 1, rng.gen_range(8000..96000));
        ensure!(write_wav(&ok(parse_wav(&bytes))?) == bytes, "WAV round trip changed bytes");
    }
    let mel = hz_to_mel(700.0);
    ensure!((mel - 781.17).abs() < 0.01, "mel(700 Hz) = {mel}");

    let sr = 48_000u32;
    let cfg = FeatureConfig::default();
    let bank = MelFilterbank::new(cfg.n_mels, cfg.n_fft, sr, 0.0, sr as f64 / 2.0);
    for k in [20, 64, 120] {
        let hz = bank.center_hz(k);
        let tone: Vec<f64> = (0..sr as usize / 2)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * hz * i as f64 / sr as f64).sin())
            .collect();
        for frame in ok(mel_spectrogram(&tone, sr, cfg.n_fft, cfg.hop, cfg.n_mels))? {
            let best = (0..frame.len()).fold(0, |b, m| if frame[m] > frame[b] { m } else { b });
            ensure!(best == k, "tone at filter {k} centre ({hz:.1} Hz) peaks in filter {best}");
        }
    }

    let n = 4 * sr as usize;
    let mut click = vec![0.0; n];
    for start in (0..n).step_by(sr as usize / 2) {
        for i in 0..(sr as usize / 100).min(n - start) {
            let t = i as f64 / sr as f64;
            click[start + i] = 0.8 * (2.0 * std::f64::consts::PI * 3000.0 * t).sin() * (-t * 400.0).exp();
        }
    }
    let f = ok(temporal_features(&ok(MusicClip::new(click, sr))?, &cfg))?.0;
    let beats = (0..CLIP_FRAMES).filter(|&r| f.at(r, BEAT_COL) == 1.0).count();
    ensure!((7..=9).contains(&beats), "{beats} beat flags for a 4 s 120 BPM click");
    Ok(format!("WAV bit-exact; mel(700) = {mel:.4}; tone peaks at filter centres; {beats} beats"))
}

fn c10_end_to_end(trained: Option<&Trained>, track: &MusicClip) -> Outcome {
    let t = trained.ok_or("training in criterion 4 did not produce models")?;
    let cfg = RunConfig {
        seed: Some(7),
        ..RunConfig::default()
    };
    let motn = |r: &MotionFragment| -> std::result::Result<Vec<u8>, String> {
        let mut buf = Vec::new();
        ok(r.write_motn(&mut buf))?;
        Ok(buf)
    };
    let a = ok(run_finenet(&cfg, &t.models, track))?;
    let b = ok(run_finenet(&cfg, &t.models, track))?;
    ensure!(a.motion.len() == 8 * CLIP_FRAMES, "{} frames for a 32 s track", a.motion.len());
    ensure!(motn(&a.motion)? == motn(&b.motion)?, "reruns with the same seed differ");

    let vcfg = RunConfig {
        candidates: 10,
        ..cfg
    };
    let vars = ok(run_variations(&vcfg, &t.models, track, 10))?;
    for (k, v) in vars.iter().enumerate() {
        let picks: Vec<usize> = v.steps.iter().map(|s| s.idx).collect();
        ensure!(ok(replay(&v.steps, vcfg.weights(), k))? == picks, "variation {k}: replay disagrees");
    }
    let groups = (0..8)
        .map(|c| {
            let versions = vars
                .iter()
                .map(|v| v.motion.slice(c * CLIP_FRAMES, (c + 1) * CLIP_FRAMES))
                .collect::<choreo_core::Result<Vec<_>>>()?;
            t.classifier.features(&versions)
        })
        .collect::<choreo_core::Result<Vec<_>>>();
    let mm = ok(multimodality(&ok(groups)?))?;
    ensure!(mm > 0.0, "multimodality {mm}");
    Ok(format!("960 frames, bit-identical rerun; K=10 variations MM {mm:.4}; replay matches all {} steps", 10 * 8))
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {n:>2} {name}: {detail} [{secs:.1} s]"),
            Err(why) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {why} [{secs:.1} s]");
            }
        }
    };
    report(1, "autodiff gradients", &mut c1_autodiff);
    report(2, "diffusion statistics", &mut c2_diffusion);
    report(3, "oracle sampler fixed point", &mut c3_fixed_point);
    let mut trained = None;
    report(4, "training progress", &mut || c4_training(&mut trained));
    report(5, "selection oracle", &mut c5_selection);
    let track = gen_pair(&GenreSpec::preset(1), 12_345, 32.0, 48_000).map(|(m, _)| m);
    let track = match track {
        Ok(t) => t,
        Err(e) => panic!("cannot synthesise the 32 s track: {e}"),
    };
    report(6, "stitch continuity", &mut || c6_stitch(trained.as_ref(), &track));
    report(7, "FID closed forms", &mut c7_fid);
    report(8, "metric degeneracies", &mut c8_degeneracies);
    report(9, "audio", &mut c9_audio);
    report(10, "end-to-end determinism and diversity", &mut || c10_end_to_end(trained.as_ref(), &track));
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all 10 criteria passed");
}
