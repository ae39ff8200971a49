//! `choreoforge`: synthetic data, training, generation and evaluation.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use choreo_core::audio::{mel_image, temporal_features, FeatureConfig, MusicClip};
use choreo_core::config::{RunConfig, Strategy};
use choreo_core::dataset::{clips_from_pairs, in_split, Clip};
use choreo_core::fdgn::{train_fdgn, Fdgn, FdgnSample};
use choreo_core::gcrm::{evaluate_retrieval, train_retrieval, Retrieval, RetrievalTrainConfig};
use choreo_core::metrics::{
    evaluate, train_classifier, ClassifierTrainConfig, EvalSet, GenreClassifier, Part,
};
use choreo_core::motion::{MotionFragment, CLIP_FRAMES};
use choreo_core::pipeline::{
    junction_max_jump, run, run_ablation, run_variations, split_track, ChoreographyResult, Models,
};
use choreo_core::synth::{gen_dataset, DatasetConfig, GenreSpec, Manifest, Split};
use choreo_core::{Error, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

#[derive(Parser)]
#[command(name = "choreoforge", version, about = "Music-driven long-form dance generation")]
struct Cli {
    /// TOML file with RunConfig keys; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic paired corpus into `data_dir`.
    SynthData,
    /// Train the body/hand diffusion network on the training split.
    TrainFdgn,
    /// Train the music-style and dance-genre encoders.
    TrainRetrieval,
    /// Train the full-body and hand genre classifiers used by the metrics.
    TrainClassifier,
    /// Per-clip temporal features (FEAT) and mel images (MELI) of `input`.
    Featurize,
    /// Choreograph `input` with the configured strategy.
    Generate,
    /// `variations` choreographies of `input` differing in their first clip.
    Variations,
    /// Run a baseline strategy (fdgn-g or fdgn-c) on `input`.
    Ablate,
    /// Generate for every test-split track and report FID, diversity, MM and GS.
    Evaluate,
}

/// Flags mirroring the keys of the config file.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    fdgn_checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    retrieval_checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    classifier_checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    hand_classifier_checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Candidates per clip (M).
    #[arg(long, global = true)]
    candidates: Option<usize>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    /// finenet, fdgn-g or fdgn-c.
    #[arg(long, global = true)]
    strategy: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    fps: Option<f32>,
    #[arg(long, global = true)]
    variations: Option<usize>,
    #[arg(long, global = true)]
    diffusion_steps: Option<usize>,
    #[arg(long, global = true)]
    beta_start: Option<f64>,
    #[arg(long, global = true)]
    beta_end: Option<f64>,
    #[arg(long, global = true)]
    hidden: Option<usize>,
    #[arg(long, global = true)]
    music_latent: Option<usize>,
    /// mlp or attention.
    #[arg(long, global = true)]
    trunk: Option<String>,
    #[arg(long, global = true)]
    iterations: Option<usize>,
    #[arg(long, global = true)]
    batch: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// adam or sgd.
    #[arg(long, global = true)]
    optimizer: Option<String>,
    #[arg(long, global = true)]
    clip_norm: Option<f64>,
    #[arg(long, global = true)]
    retrieval_iterations: Option<usize>,
    #[arg(long, global = true)]
    classifier_iterations: Option<usize>,
    #[arg(long, global = true)]
    genres: Option<usize>,
    #[arg(long, global = true)]
    pairs_per_genre: Option<usize>,
    #[arg(long, global = true)]
    pair_seconds: Option<f64>,
    #[arg(long, global = true)]
    sample_rate: Option<u32>,
}

impl Overrides {
    fn to_map(&self) -> Map<String, Value> {
        let mut m = Map::new();
        macro_rules! put {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field {
                    m.insert(stringify!($field).to_string(), json!(v));
                })*
            };
        }
        put!(
            data_dir, fdgn_checkpoint, retrieval_checkpoint, classifier_checkpoint, hand_classifier_checkpoint,
            input, output, candidates, alpha, beta, strategy, seed, fps, variations, diffusion_steps, beta_start,
            beta_end, hidden, music_latent, trunk, iterations, batch, lr, optimizer, clip_norm,
            retrieval_iterations, classifier_iterations, genres, pairs_per_genre, pair_seconds, sample_rate
        );
        m
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let base = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let mut doc = serde_json::to_value(&base)?;
    if let Value::Object(map) = &mut doc {
        map.extend(cli.overrides.to_map());
    }
    let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_clips(cfg: &RunConfig) -> Result<Vec<Clip>> {
    let manifest = Manifest::load(cfg.data_dir.join("manifest.json"))?;
    let pairs = manifest.load_pairs(&cfg.data_dir)?;
    eprintln!("extracting features for {} pairs", pairs.len());
    clips_from_pairs(&pairs, &FeatureConfig::default())
}

fn genre_count(cfg: &RunConfig) -> Result<usize> {
    Ok(Manifest::load(cfg.data_dir.join("manifest.json"))?.genres.len())
}

fn input_track(cfg: &RunConfig) -> Result<(MusicClip, String)> {
    let path = cfg
        .input
        .as_ref()
        .ok_or_else(|| Error::Config("an input WAV is required (--input)".into()))?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "track".into());
    Ok((MusicClip::load(path)?, stem))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

fn report(result: &ChoreographyResult, dir: &Path, stem: &str) -> Result<()> {
    result.write(dir, stem)?;
    println!(
        "{}: {} frames, junction max jump {:.4}",
        dir.join(format!("{stem}.motn")).display(),
        result.motion.len(),
        junction_max_jump(&result.motion)
    );
    Ok(())
}

fn synth_data(cfg: &RunConfig) -> Result<()> {
    let specs = GenreSpec::presets(cfg.genres);
    let data = DatasetConfig {
        n_per_genre: cfg.pairs_per_genre,
        seed: cfg.seed.unwrap_or(0),
        duration_s: cfg.pair_seconds,
        sample_rate: cfg.sample_rate,
    };
    let manifest = gen_dataset(&specs, &data, &cfg.data_dir)?;
    println!("wrote {} pairs to {}", manifest.pairs.len(), cfg.data_dir.display());
    Ok(())
}

fn train_fdgn_cmd(cfg: &RunConfig) -> Result<()> {
    let clips = load_clips(cfg)?;
    let data = in_split(&clips, Split::Train)
        .iter()
        .map(Clip::fdgn_sample)
        .collect::<Result<Vec<FdgnSample>>>()?;
    let mut model = Fdgn::new(&cfg.model(), &data, cfg.seed.unwrap_or(0))?;
    let rep = train_fdgn(&mut model, &data, &cfg.training())?;
    ensure_parent(&cfg.fdgn_checkpoint)?;
    model.save(&cfg.fdgn_checkpoint)?;
    write_json(&cfg.fdgn_checkpoint.with_extension("json"), &rep)?;
    println!(
        "fdgn: {} clips, loss {:.5} -> {:.5} (ratio {:.3}), saved {}",
        data.len(),
        rep.initial.total(),
        rep.final_loss.total(),
        rep.final_loss.total() / rep.initial.total(),
        cfg.fdgn_checkpoint.display()
    );
    Ok(())
}

fn train_retrieval_cmd(cfg: &RunConfig) -> Result<()> {
    let clips = load_clips(cfg)?;
    let mut model = Retrieval::new(cfg.seed.unwrap_or(0))?;
    let tc = RetrievalTrainConfig {
        iterations: cfg.retrieval_iterations,
        seed: cfg.seed.unwrap_or(0),
        ..RetrievalTrainConfig::default()
    };
    train_retrieval(&mut model, &in_split(&clips, Split::Train), &tc)?;
    ensure_parent(&cfg.retrieval_checkpoint)?;
    model.save(&cfg.retrieval_checkpoint)?;
    let rep = evaluate_retrieval(&model, &in_split(&clips, Split::Test))?;
    write_json(&cfg.retrieval_checkpoint.with_extension("json"), &rep)?;
    println!(
        "retrieval: test top-1 {:.3}, GS matched {:.3} mismatched {:.3}, saved {}",
        rep.top1,
        rep.gs_matched,
        rep.gs_mismatched,
        cfg.retrieval_checkpoint.display()
    );
    Ok(())
}

fn train_classifier_cmd(cfg: &RunConfig) -> Result<()> {
    let clips = load_clips(cfg)?;
    let genres = genre_count(cfg)?;
    let (train, test) = (in_split(&clips, Split::Train), in_split(&clips, Split::Test));
    for (part, path, offset) in [
        (Part::Full, &cfg.classifier_checkpoint, 0),
        (Part::Hand, &cfg.hand_classifier_checkpoint, 1),
    ] {
        let seed = cfg.seed.unwrap_or(0) + offset;
        let mut model = GenreClassifier::new(part, genres, seed)?;
        let tc = ClassifierTrainConfig {
            iterations: cfg.classifier_iterations,
            seed,
            ..ClassifierTrainConfig::default()
        };
        train_classifier(&mut model, &train, &tc)?;
        ensure_parent(path)?;
        model.save(path)?;
        println!("{part:?} classifier: test accuracy {:.3}, saved {}", model.accuracy(&test)?, path.display());
    }
    Ok(())
}

fn featurize(cfg: &RunConfig) -> Result<()> {
    let (track, stem) = input_track(cfg)?;
    let fc = FeatureConfig::default();
    std::fs::create_dir_all(&cfg.output).map_err(|e| Error::io(&cfg.output, e))?;
    let clips = split_track(&track)?;
    for (i, clip) in clips.iter().enumerate() {
        let feat = cfg.output.join(format!("{stem}_{i:03}.feat"));
        let file = File::create(&feat).map_err(|e| Error::io(&feat, e))?;
        temporal_features(clip, &fc)?.write(BufWriter::new(file))?;
        let mel = cfg.output.join(format!("{stem}_{i:03}.meli"));
        let file = File::create(&mel).map_err(|e| Error::io(&mel, e))?;
        mel_image(clip, &fc)?.write(BufWriter::new(file))?;
    }
    println!("featurized {} clips into {}", clips.len(), cfg.output.display());
    Ok(())
}

fn generate(cfg: &RunConfig) -> Result<()> {
    cfg.require_seed()?;
    let (track, stem) = input_track(cfg)?;
    let models = Models::load(cfg)?;
    report(&run(cfg, &models, &track)?, &cfg.output, &stem)
}

fn variations(cfg: &RunConfig) -> Result<()> {
    cfg.require_seed()?;
    let (track, stem) = input_track(cfg)?;
    let models = Models::load(cfg)?;
    for (k, result) in run_variations(cfg, &models, &track, cfg.variations)?.iter().enumerate() {
        report(result, &cfg.output, &format!("{stem}_v{k:02}"))?;
    }
    Ok(())
}

fn ablate(cfg: &RunConfig) -> Result<()> {
    cfg.require_seed()?;
    if cfg.strategy == Strategy::FineNet {
        return Err(Error::Config("ablate needs --strategy fdgn-g or fdgn-c".into()));
    }
    let (track, stem) = input_track(cfg)?;
    let models = Models::load(cfg)?;
    let result = run_ablation(cfg, &models, &track, cfg.strategy)?;
    let tag = serde_json::to_value(cfg.strategy)?;
    report(&result, &cfg.output, &format!("{stem}_{}", tag.as_str().unwrap_or("ablation")))
}

fn clips_of(motion: &MotionFragment) -> Result<Vec<MotionFragment>> {
    (0..motion.len() / CLIP_FRAMES)
        .map(|i| motion.slice(i * CLIP_FRAMES, (i + 1) * CLIP_FRAMES))
        .collect()
}

fn evaluate_cmd(cfg: &RunConfig) -> Result<()> {
    let seed = cfg.require_seed()?;
    let models = Models::load(cfg)?;
    let full = GenreClassifier::load(&cfg.classifier_checkpoint)?;
    let hand = GenreClassifier::load(&cfg.hand_classifier_checkpoint)?;
    let manifest = Manifest::load(cfg.data_dir.join("manifest.json"))?;
    let pairs: Vec<_> = manifest
        .load_pairs(&cfg.data_dir)?
        .into_iter()
        .filter(|p| p.split == Split::Test)
        .collect();
    let real_clips = clips_from_pairs(&pairs, &FeatureConfig::default())?;
    let real: Vec<MotionFragment> = real_clips.iter().map(|c| c.motion.clone()).collect();
    let k = cfg.variations.min(cfg.candidates);
    let (mut generated, mut music, mut versions) = (Vec::new(), Vec::new(), Vec::new());
    for pair in &pairs {
        let track_cfg = RunConfig {
            seed: Some(seed ^ pair.id as u64),
            ..cfg.clone()
        };
        let results = match cfg.strategy {
            Strategy::FineNet => run_variations(&track_cfg, &models, &pair.music, k)?,
            s => vec![run_ablation(&track_cfg, &models, &pair.music, s)?],
        };
        let per_variation = results.iter().map(|r| clips_of(&r.motion)).collect::<Result<Vec<_>>>()?;
        generated.extend(per_variation[0].iter().cloned());
        music.extend(real_clips.iter().filter(|c| c.pair == pair.id).map(|c| c.mel.clone()));
        if per_variation.len() > 1 {
            for i in 0..per_variation[0].len() {
                versions.push(per_variation.iter().map(|v| v[i].clone()).collect());
            }
        }
        eprintln!("evaluated pair {}", pair.id);
    }
    let rep = evaluate(
        &full,
        &hand,
        &models.retrieval,
        &EvalSet {
            real: &real,
            generated: &generated,
            music: &music,
            versions: &versions,
        },
    )?;
    let path = cfg.output.join("evaluation.json");
    write_json(&path, &json!({ "config_hash": cfg.hash(), "seed": seed, "strategy": cfg.strategy, "report": rep }))?;
    println!(
        "FID {:.4}  FID_hand {:.4}  Div {:.4}  Div_hand {:.4}  MM {}  GS {:.4}",
        rep.fid,
        rep.fid_hand,
        rep.diversity,
        rep.diversity_hand,
        rep.multimodality.map_or("n/a".into(), |m| format!("{m:.4}")),
        rep.gs
    );
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    match cli.command {
        Command::SynthData => synth_data(&cfg),
        Command::TrainFdgn => train_fdgn_cmd(&cfg),
        Command::TrainRetrieval => train_retrieval_cmd(&cfg),
        Command::TrainClassifier => train_classifier_cmd(&cfg),
        Command::Featurize => featurize(&cfg),
        Command::Generate => generate(&cfg),
        Command::Variations => variations(&cfg),
        Command::Ablate => ablate(&cfg),
        Command::Evaluate => evaluate_cmd(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
