//! Evaluation metrics: FID, diversity, multimodality and genre matching,
//! computed on features of a small genre classifier.

use std::ops::Range;
use std::path::Path;

use choreo_tensor::{Dense, Graph, Init, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Clip;
use crate::error::{Error, Result};
use crate::fdgn::{load_store, make_optimizer, with_path, OptimizerKind};
use crate::gcrm::{cosine, Retrieval, EMBED_DIM};
use crate::motion::{MotionFragment, BODY_DIM, FRAME_DIM};
use crate::nets::{stack, TemporalEncoder};

pub const FEATURE_DIM: usize = 64;
/// Random pairs averaged by [`diversity`].
pub const DIVERSITY_PAIRS: usize = 300;
const DIVERSITY_SEED: u64 = 0xd1e5;
const JACOBI_TOL: f64 = 1e-10;
const JACOBI_SWEEPS: usize = 100;

/// Row-major square matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::contract(format!("{} values for a {n}x{n} matrix", data.len())));
        }
        Ok(Matrix { n, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix { n, data: vec![0.0; n * n] };
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.n + c]
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.at(i, i)).sum()
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        let n = self.n;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += a * other.data[k * n + j];
                }
            }
        }
        Matrix { n, data: out }
    }

    pub fn transpose(&self) -> Matrix {
        let n = self.n;
        Matrix {
            n,
            data: (0..n * n).map(|i| self.data[(i % n) * n + i / n]).collect(),
        }
    }

    fn off_diagonal_norm(&self) -> f64 {
        let mut s = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                if i != j {
                    s += self.at(i, j).powi(2);
                }
            }
        }
        s.sqrt()
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns the
/// eigenvalues and the matrix whose columns are the eigenvectors.
pub fn symmetric_eigen(m: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = m.n;
    for i in 0..n {
        for j in 0..i {
            let (a, b) = (m.at(i, j), m.at(j, i));
            if (a - b).abs() > 1e-9 * (1.0 + a.abs().max(b.abs())) {
                return Err(Error::contract(format!("matrix is not symmetric at ({i}, {j})")));
            }
        }
    }
    if m.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite matrix entry".into()));
    }
    let mut a = m.clone();
    let mut v = Matrix::identity(n);
    let scale = a.data.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _ in 0..JACOBI_SWEEPS {
        if a.off_diagonal_norm() <= JACOBI_TOL * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.at(p, q);
                if apq.abs() < f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a.at(q, q) - a.at(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a.at(k, p), a.at(k, q));
                    a.data[k * n + p] = c * akp - s * akq;
                    a.data[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a.at(p, k), a.at(q, k));
                    a.data[p * n + k] = c * apk - s * aqk;
                    a.data[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v.at(k, p), v.at(k, q));
                    v.data[k * n + p] = c * vkp - s * vkq;
                    v.data[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    Ok(((0..n).map(|i| a.at(i, i)).collect(), v))
}

/// Square root of a symmetric PSD matrix; negative eigenvalues clamp to 0.
pub fn sqrt_psd(m: &Matrix) -> Result<Matrix> {
    let (vals, vecs) = symmetric_eigen(m)?;
    let n = m.n;
    let mut scaled = vecs.clone();
    for r in 0..n {
        for c in 0..n {
            scaled.data[r * n + c] *= vals[c].max(0.0).sqrt();
        }
    }
    let mut out = scaled.matmul(&vecs.transpose());
    symmetrize(&mut out);
    Ok(out)
}

fn symmetrize(m: &mut Matrix) {
    let n = m.n;
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (m.at(i, j) + m.at(j, i));
            m.data[i * n + j] = avg;
            m.data[j * n + i] = avg;
        }
    }
}

/// Gaussian fit of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    pub cov: Matrix,
}

impl GaussianStats {
    pub fn new(mean: Vec<f64>, mut cov: Matrix) -> Result<Self> {
        if cov.n != mean.len() {
            return Err(Error::contract(format!(
                "mean of {} dims with {}x{} covariance",
                mean.len(),
                cov.n,
                cov.n
            )));
        }
        symmetric_eigen(&cov)?;
        symmetrize(&mut cov);
        Ok(GaussianStats { mean, cov })
    }

    /// Sample mean and unbiased covariance; needs at least two vectors.
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return Err(Error::contract(format!("covariance needs at least 2 samples, got {n}")));
        }
        let d = features[0].len();
        if features.iter().any(|f| f.len() != d) {
            return Err(Error::contract("feature vectors differ in length"));
        }
        let mut mean = vec![0.0; d];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v / n as f64;
            }
        }
        let mut cov = vec![0.0; d * d];
        for f in features {
            for i in 0..d {
                let di = f[i] - mean[i];
                for j in 0..=i {
                    cov[i * d + j] += di * (f[j] - mean[j]) / (n - 1) as f64;
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                cov[j * d + i] = cov[i * d + j];
            }
        }
        Ok(GaussianStats {
            mean,
            cov: Matrix::new(d, cov)?,
        })
    }
}

/// `‖μ₁ − μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2})`.
pub fn fid(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::contract(format!(
            "FID of {} and {} dimensional statistics",
            a.mean.len(),
            b.mean.len()
        )));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let s1 = sqrt_psd(&a.cov)?;
    let mut c = s1.matmul(&b.cov).matmul(&s1);
    symmetrize(&mut c);
    let (vals, _) = symmetric_eigen(&c)?;
    let tr_sqrt: f64 = vals.iter().map(|v| v.max(0.0).sqrt()).sum();
    Ok((mean_term + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt).max(0.0))
}

pub fn fid_features(real: &[Vec<f64>], generated: &[Vec<f64>]) -> Result<f64> {
    fid(&GaussianStats::from_features(real)?, &GaussianStats::from_features(generated)?)
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Mean distance over 300 fixed-seed random pairs, or over all pairs when
/// there are no more than 300.
pub fn diversity(features: &[Vec<f64>]) -> Result<f64> {
    let n = features.len();
    if n < 2 {
        return Err(Error::contract(format!("diversity needs at least 2 items, got {n}")));
    }
    let mut pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    if pairs.len() > DIVERSITY_PAIRS {
        let mut rng = ChaCha8Rng::seed_from_u64(DIVERSITY_SEED);
        pairs = (0..DIVERSITY_PAIRS)
            .map(|_| {
                let i = rng.gen_range(0..n);
                let j = (i + rng.gen_range(1..n)) % n;
                (i, j)
            })
            .collect();
    }
    Ok(pairs.iter().map(|&(i, j)| l2(&features[i], &features[j])).sum::<f64>() / pairs.len() as f64)
}

/// Mean over groups of the mean pairwise distance inside each group.
pub fn multimodality(groups: &[Vec<Vec<f64>>]) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::contract("multimodality needs at least one group"));
    }
    let mut total = 0.0;
    for (g, items) in groups.iter().enumerate() {
        let n = items.len();
        if n < 2 {
            return Err(Error::contract(format!("group {g} has {n} versions; need at least 2")));
        }
        let mut acc = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                acc += l2(&items[i], &items[j]);
            }
        }
        total += acc / (n * (n - 1) / 2) as f64;
    }
    Ok(total / groups.len() as f64)
}

/// Mean genre matching score over aligned (music, fragment) pairs.
pub fn gs_metric(model: &Retrieval, pooled_mels: &[Tensor], fragments: &[MotionFragment]) -> Result<(f64, Vec<f64>)> {
    if pooled_mels.len() != fragments.len() || fragments.is_empty() {
        return Err(Error::contract(format!(
            "{} music clips for {} fragments",
            pooled_mels.len(),
            fragments.len()
        )));
    }
    let mels: Vec<&Tensor> = pooled_mels.iter().collect();
    let music = model.embed_music_pooled(&stack(&mels)?)?;
    let refs: Vec<&MotionFragment> = fragments.iter().collect();
    let dance = model.embed_dances(&refs)?;
    let scores = music
        .data()
        .chunks(EMBED_DIM)
        .zip(dance.data().chunks(EMBED_DIM))
        .map(|(m, d)| cosine(m, d))
        .collect::<Result<Vec<_>>>()?;
    Ok((scores.iter().sum::<f64>() / scores.len() as f64, scores))
}

/// Motion columns a classifier reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Full,
    Hand,
}

impl Part {
    pub fn columns(self) -> Range<usize> {
        match self {
            Part::Full => 0..FRAME_DIM,
            Part::Hand => BODY_DIM..FRAME_DIM,
        }
    }
}

/// Genre classifier whose 64-dim penultimate layer supplies metric features.
pub struct GenreClassifier {
    store: ParamStore,
    encoder: TemporalEncoder,
    head: Dense,
    part: Part,
}

impl GenreClassifier {
    pub fn new(part: Part, genres: usize, seed: u64) -> Result<Self> {
        if genres < 2 {
            return Err(Error::contract("classifier needs at least two genres"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let width = part.columns().len();
        let encoder = TemporalEncoder::new(&mut store, "cls", width, 64, FEATURE_DIM, &mut rng)?;
        let head = Dense::new(&mut store, "cls.head", FEATURE_DIM, genres, Init::LeCun, &mut rng)?;
        Ok(GenreClassifier {
            store,
            encoder,
            head,
            part,
        })
    }

    pub fn from_store(store: ParamStore) -> Result<Self> {
        let encoder = TemporalEncoder::load(&store, "cls")?;
        let head = Dense::load(&store, "cls.head")?;
        let part = match encoder.input() {
            FRAME_DIM => Part::Full,
            w if w == FRAME_DIM - BODY_DIM => Part::Hand,
            w => return Err(Error::Format(format!("classifier input width {w} is neither 159 nor 90"))),
        };
        if encoder.proj.output != FEATURE_DIM || head.input != FEATURE_DIM {
            return Err(Error::Format("classifier feature layer must be 64 wide".into()));
        }
        Ok(GenreClassifier {
            store,
            encoder,
            head,
            part,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_store(load_store(path.as_ref())?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        choreo_tensor::checkpoint::save_params(&self.store, path).map_err(|e| with_path(e, path))
    }

    pub fn part(&self) -> Part {
        self.part
    }

    pub fn genres(&self) -> usize {
        self.head.output
    }

    fn input(&self, fragments: &[&MotionFragment]) -> Result<Tensor> {
        let cols = self.part.columns();
        let sliced = fragments
            .iter()
            .map(|f| Ok(f.frames().slice_axis(1, cols.start, cols.end)?))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = sliced.iter().collect();
        stack(&refs)
    }

    /// Returns `(features [B, 64], logits [B, G])`.
    fn run(&self, fragments: &[&MotionFragment]) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false)?;
        let x = g.constant(self.input(fragments)?)?;
        let z = self.encoder.forward(&mut g, &p, x)?;
        let f = g.gelu(z)?;
        let logits = self.head.forward(&mut g, &p, f)?;
        Ok((g.value(f).clone(), g.value(logits).clone()))
    }

    pub fn features(&self, fragments: &[MotionFragment]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(fragments.len());
        for chunk in fragments.chunks(32) {
            let refs: Vec<&MotionFragment> = chunk.iter().collect();
            let (f, _) = self.run(&refs)?;
            out.extend(f.data().chunks(FEATURE_DIM).map(|r| r.to_vec()));
        }
        Ok(out)
    }

    pub fn predict(&self, fragments: &[MotionFragment]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(fragments.len());
        for chunk in fragments.chunks(32) {
            let refs: Vec<&MotionFragment> = chunk.iter().collect();
            let (_, logits) = self.run(&refs)?;
            out.extend(logits.data().chunks(self.genres()).map(|row| {
                (0..row.len()).fold(0, |best, i| if row[i] > row[best] { i } else { best })
            }));
        }
        Ok(out)
    }

    pub fn accuracy(&self, clips: &[Clip]) -> Result<f64> {
        let frags: Vec<MotionFragment> = clips.iter().map(|c| c.motion.clone()).collect();
        let pred = self.predict(&frags)?;
        let hits = pred.iter().zip(clips).filter(|(p, c)| **p == c.genre).count();
        Ok(hits as f64 / clips.len().max(1) as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            iterations: 300,
            batch: 16,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Cross-entropy training; returns per-iteration losses.
pub fn train_classifier(model: &mut GenreClassifier, clips: &[Clip], cfg: &ClassifierTrainConfig) -> Result<Vec<f64>> {
    if clips.is_empty() {
        return Err(Error::contract("empty classifier training set"));
    }
    if let Some(c) = clips.iter().find(|c| c.genre >= model.genres()) {
        return Err(Error::contract(format!("genre {} outside the classifier's {} classes", c.genre, model.genres())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = make_optimizer(OptimizerKind::Adam, cfg.lr);
    let mut order: Vec<usize> = (0..clips.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&clips[order[cursor]]);
            cursor += 1;
        }
        let frags: Vec<&MotionFragment> = batch.iter().map(|c| &c.motion).collect();
        let labels: Vec<usize> = batch.iter().map(|c| c.genre).collect();
        let mut g = Graph::new();
        let p = model.store.bind(&mut g, true)?;
        let x = g.constant(model.input(&frags)?)?;
        let z = model.encoder.forward(&mut g, &p, x)?;
        let f = g.gelu(z)?;
        let logits = model.head.forward(&mut g, &p, f)?;
        let loss = g.cross_entropy(logits, &labels)?;
        losses.push(g.value(loss).item());
        let grads = g.backward(loss).map_err(|e| Error::at_step(it)(e.into()))?;
        model.store.accumulate(&p, &grads);
        opt.step(&mut model.store)?;
    }
    Ok(losses)
}

/// `(hand FID, hand diversity)` from a hand-column classifier.
pub fn hand_metrics(
    hand: &GenreClassifier,
    real: &[MotionFragment],
    generated: &[MotionFragment],
) -> Result<(f64, f64)> {
    if hand.part() != Part::Hand {
        return Err(Error::contract("hand metrics need a classifier trained on hand columns"));
    }
    let gen = hand.features(generated)?;
    Ok((fid_features(&hand.features(real)?, &gen)?, diversity(&gen)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fid: f64,
    pub fid_hand: f64,
    pub diversity: f64,
    pub diversity_hand: f64,
    pub multimodality: Option<f64>,
    pub gs: f64,
    pub per_pair_gs: Vec<f64>,
}

/// Inputs to [`evaluate`].
pub struct EvalSet<'a> {
    pub real: &'a [MotionFragment],
    pub generated: &'a [MotionFragment],
    /// Pooled mel image for each generated fragment.
    pub music: &'a [Tensor],
    /// Optional groups of versions generated for the same music.
    pub versions: &'a [Vec<MotionFragment>],
}

pub fn evaluate(
    full: &GenreClassifier,
    hand: &GenreClassifier,
    retrieval: &Retrieval,
    set: &EvalSet<'_>,
) -> Result<EvalReport> {
    if full.part() != Part::Full {
        return Err(Error::contract("FID needs a classifier trained on all columns"));
    }
    let gen = full.features(set.generated)?;
    let fid = fid_features(&full.features(set.real)?, &gen)?;
    let (fid_hand, diversity_hand) = hand_metrics(hand, set.real, set.generated)?;
    let multimodality = if set.versions.is_empty() {
        None
    } else {
        let groups = set
            .versions
            .iter()
            .map(|g| full.features(g))
            .collect::<Result<Vec<_>>>()?;
        Some(multimodality(&groups)?)
    };
    let (gs, per_pair_gs) = gs_metric(retrieval, set.music, set.generated)?;
    Ok(EvalReport {
        fid,
        fid_hand,
        diversity: diversity(&gen)?,
        diversity_hand,
        multimodality,
        gs,
        per_pair_gs,
    })
}
