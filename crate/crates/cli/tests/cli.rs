use std::path::Path;
use std::process::{Command, Output};

fn choreoforge(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_choreoforge"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn choreoforge")
}

fn ok(out: Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {stdout}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    stdout
}

const TINY: &str = r#"
genres = 2
pairs_per_genre = 3
pair_seconds = 8.0
diffusion_steps = 4
hidden = 16
music_latent = 8
iterations = 3
retrieval_iterations = 3
classifier_iterations = 3
candidates = 3
variations = 2
"#;

#[test]
fn end_to_end_on_a_tiny_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("run.toml"), TINY).unwrap();
    let cfg = ["--config", "run.toml"];
    let with = |extra: &[&str]| -> Vec<String> { cfg.iter().chain(extra).map(|s| s.to_string()).collect() };
    let run = |extra: &[&str]| {
        let args = with(extra);
        choreoforge(root, &args.iter().map(String::as_str).collect::<Vec<_>>())
    };

    ok(run(&["synth-data"]));
    assert!(root.join("data/manifest.json").exists());
    ok(run(&["train-fdgn"]));
    ok(run(&["train-retrieval"]));
    ok(run(&["train-classifier"]));
    assert!(root.join("models/fdgn.cftn").exists());
    assert!(root.join("models/hand_classifier.cftn").exists());

    let track = ["--input", "data/pair_0000.wav"];
    let gen = |seed: &str| {
        ok(run(&[&["generate", "--seed", seed], &track[..]].concat()));
        std::fs::read(root.join("out/pair_0000.motn")).unwrap()
    };
    let first = gen("9");
    assert!(root.join("out/pair_0000.json").exists());
    assert_eq!(first, gen("9"));
    // 8 s of music gives two clips of 120 frames of 159 f32 values
    assert_eq!(first.len() - 20, 2 * 120 * 159 * 4);

    ok(run(&[&["variations", "--seed", "9"], &track[..]].concat()));
    assert!(root.join("out/pair_0000_v01.motn").exists());
    ok(run(&[&["ablate", "--seed", "9", "--strategy", "fdgn-c"], &track[..]].concat()));
    assert!(root.join("out/pair_0000_fdgn-c.motn").exists());
    ok(run(&[&["featurize"], &track[..]].concat()));
    assert!(root.join("out/pair_0000_001.meli").exists());
    let summary = ok(run(&["evaluate", "--seed", "1"]));
    assert!(summary.contains("FID"), "{summary}");
    assert!(root.join("out/evaluation.json").exists());

    // missing seed and unknown keys are configuration errors
    assert_eq!(run(&[&["generate"], &track[..]].concat()).status.code(), Some(2));
    assert_eq!(run(&["generate", "--seed", "1"]).status.code(), Some(2));
    assert_eq!(run(&["ablate", "--seed", "1", "--strategy", "finenet", "--input", "x.wav"]).status.code(), Some(2));
    std::fs::write(root.join("bad.toml"), "candidats = 3\n").unwrap();
    assert_eq!(choreoforge(root, &["--config", "bad.toml", "synth-data"]).status.code(), Some(2));
    // missing audio is a data error
    assert_eq!(run(&["generate", "--seed", "1", "--input", "nope.wav"]).status.code(), Some(3));
}
