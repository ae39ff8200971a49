//! Genre- and coherence-aware retrieval.
//!
//! A music-style encoder and a dance-genre encoder map mel images and motion
//! into a shared 64-dim space. Candidates are ranked by
//! `α·GS + β·CS`, where GS is the cosine similarity of the two embeddings and
//! CS is the negated distance between the previous fragment's frame `T-5`
//! and the candidate's frame 5. Chosen fragments are joined by replacing five
//! frames on each side of the junction with a linear blend.

use std::path::Path;

use choreo_tensor::{Bound, Dense, Graph, Init, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::MelImage;
use crate::dataset::{patch_pool, Clip, PATCHES};
use crate::error::{Error, Result};
use crate::fdgn::{load_store, make_optimizer, with_path, OptimizerKind};
use crate::motion::{canonicalize_axis_angle, frame_distance, MotionFragment, FRAME_DIM};
use crate::nets::{stack, TemporalEncoder};

pub const EMBED_DIM: usize = 64;
/// Frames removed on each side of a junction.
pub const TRIM: usize = 5;
/// Frames inserted at a junction.
pub const BLEND: usize = 2 * TRIM;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for SelectionWeights {
    fn default() -> Self {
        SelectionWeights { alpha: 1.0, beta: 0.5 }
    }
}

impl SelectionWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha >= 0.0 && beta >= 0.0) || alpha + beta == 0.0 {
            return Err(Error::Config(format!(
                "selection weights must be non-negative and not both zero, got α={alpha} β={beta}"
            )));
        }
        Ok(SelectionWeights { alpha, beta })
    }
}

/// Cosine similarity; a zero vector is a numeric error.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::contract(format!("cosine of {} and {} dims", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("zero-norm embedding".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// `y(1 - s) + (1 - y)·max(0, s)` for a binary label `y`.
pub fn cosine_loss(matched: bool, s: f64) -> f64 {
    if matched {
        1.0 - s
    } else {
        s.max(0.0)
    }
}

/// `-‖prev[T-5] - cand[5]‖`, or 0 when there is no previous fragment.
pub fn coherent_score(prev: Option<&MotionFragment>, cand: &MotionFragment) -> Result<f64> {
    let Some(prev) = prev else {
        return Ok(0.0);
    };
    if prev.len() <= TRIM || cand.len() <= TRIM {
        return Err(Error::contract(format!(
            "coherent score needs more than {TRIM} frames, got {} and {}",
            prev.len(),
            cand.len()
        )));
    }
    if prev.frames().last_dim() != cand.frames().last_dim() {
        return Err(Error::contract("coherent score of fragments with different widths"));
    }
    Ok(-frame_distance(prev.frame(prev.len() - TRIM), cand.frame(TRIM)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub idx: usize,
    pub combined: Vec<f64>,
}

pub fn combined_scores(gs: &[f64], cs: &[f64], w: SelectionWeights) -> Result<Vec<f64>> {
    if gs.is_empty() {
        return Err(Error::contract("no candidates to select from"));
    }
    if gs.len() != cs.len() {
        return Err(Error::contract(format!("{} GS values but {} CS values", gs.len(), cs.len())));
    }
    Ok(gs.iter().zip(cs).map(|(g, c)| w.alpha * g + w.beta * c).collect())
}

/// Argmax of the combined score; the lowest index wins ties.
pub fn select(gs: &[f64], cs: &[f64], w: SelectionWeights) -> Result<Selection> {
    let combined = combined_scores(gs, cs, w)?;
    let idx = rank(&combined)[0];
    Ok(Selection { idx, combined })
}

/// Candidate indices from best to worst combined score, ties by index.
pub fn rank(combined: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..combined.len()).collect();
    order.sort_by(|&a, &b| combined[b].total_cmp(&combined[a]).then(a.cmp(&b)));
    order
}

/// Joins two fragments, replacing the last 5 frames of `prev` and the first 5
/// of `next` with 10 frames blended linearly between the last kept frame `p`
/// of `prev` and the first kept frame `q` of `next`:
/// `p + (k/11)(q - p)` for `k = 1..=10`. Both inputs are canonicalized first.
pub fn stitch(prev: &MotionFragment, next: &MotionFragment) -> Result<MotionFragment> {
    let min = BLEND + 1;
    if prev.len() < min || next.len() < min {
        return Err(Error::contract(format!(
            "stitch needs at least {min} frames per fragment, got {} and {}",
            prev.len(),
            next.len()
        )));
    }
    if prev.fps() != next.fps() || prev.frames().last_dim() != next.frames().last_dim() {
        return Err(Error::contract("stitch of fragments with different fps or width"));
    }
    let prev = canonicalize_axis_angle(prev)?;
    let next = canonicalize_axis_angle(next)?;
    let cols = prev.frames().last_dim();
    let keep_prev = prev.len() - TRIM;
    let p = prev.frame(keep_prev - 1);
    let q = next.frame(TRIM);
    let mut data = Vec::with_capacity((prev.len() + next.len()) * cols);
    data.extend_from_slice(&prev.frames().data()[..keep_prev * cols]);
    for k in 1..=BLEND {
        let w = k as f64 / (BLEND + 1) as f64;
        data.extend(p.iter().zip(q).map(|(a, b)| a + w * (b - a)));
    }
    data.extend_from_slice(&next.frames().data()[TRIM * cols..]);
    MotionFragment::new(prev.fps(), Tensor::new([prev.len() + next.len(), cols], data)?)
}

/// Dual encoders of the retrieval module.
pub struct Retrieval {
    store: ParamStore,
    music: [Dense; 2],
    dance: TemporalEncoder,
}

impl Retrieval {
    pub fn new(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let music = [
            Dense::new(&mut store, "music.fc0", PATCHES, 128, Init::LeCun, &mut rng)?,
            Dense::new(&mut store, "music.fc1", 128, EMBED_DIM, Init::LeCun, &mut rng)?,
        ];
        let dance = TemporalEncoder::new(&mut store, "dance", FRAME_DIM, 64, EMBED_DIM, &mut rng)?;
        Ok(Retrieval { store, music, dance })
    }

    pub fn from_store(store: ParamStore) -> Result<Self> {
        let music = [Dense::load(&store, "music.fc0")?, Dense::load(&store, "music.fc1")?];
        let dance = TemporalEncoder::load(&store, "dance")?;
        if music[0].input != PATCHES || music[1].output != EMBED_DIM || dance.proj.output != EMBED_DIM {
            return Err(Error::Format("retrieval encoder shapes do not match".into()));
        }
        Ok(Retrieval { store, music, dance })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_store(load_store(path.as_ref())?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        choreo_tensor::checkpoint::save_params(&self.store, path).map_err(|e| with_path(e, path))
    }

    fn music_forward(&self, g: &mut Graph, p: &Bound, pooled: Var) -> Result<Var> {
        let h = self.music[0].forward(g, p, pooled)?;
        let h = g.gelu(h)?;
        Ok(self.music[1].forward(g, p, h)?)
    }

    /// `[B, 196]` pooled mel images to `[B, 64]` embeddings.
    pub fn embed_music_pooled(&self, pooled: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false)?;
        let x = g.constant(pooled.clone())?;
        let out = self.music_forward(&mut g, &p, x)?;
        Ok(g.value(out).clone())
    }

    pub fn embed_music(&self, image: &MelImage) -> Result<Vec<f64>> {
        let pooled = patch_pool(image)?.reshape([1, PATCHES])?;
        Ok(self.embed_music_pooled(&pooled)?.into_data())
    }

    /// One embedding per fragment; all fragments must have equal length.
    pub fn embed_dances(&self, fragments: &[&MotionFragment]) -> Result<Tensor> {
        let frames: Vec<&Tensor> = fragments.iter().map(|f| f.frames()).collect();
        let x = stack(&frames)?;
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false)?;
        let xv = g.constant(x)?;
        let out = self.dance.forward(&mut g, &p, xv)?;
        Ok(g.value(out).clone())
    }

    pub fn embed_dance(&self, fragment: &MotionFragment) -> Result<Vec<f64>> {
        Ok(self.embed_dances(&[fragment])?.into_data())
    }

    /// Genre matching score of one music clip and one fragment.
    pub fn genre_score(&self, image: &MelImage, fragment: &MotionFragment) -> Result<f64> {
        cosine(&self.embed_music(image)?, &self.embed_dance(fragment)?)
    }

    /// Scores every candidate against one music embedding.
    pub fn genre_scores(&self, music: &[f64], candidates: &[MotionFragment]) -> Result<Vec<f64>> {
        let refs: Vec<&MotionFragment> = candidates.iter().collect();
        let emb = self.embed_dances(&refs)?;
        emb.data().chunks(EMBED_DIM).map(|d| cosine(music, d)).collect()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTrainConfig {
    pub iterations: usize,
    /// Pairs per batch; half matched, half mismatched.
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for RetrievalTrainConfig {
    fn default() -> Self {
        RetrievalTrainConfig {
            iterations: 400,
            batch: 16,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Trains both encoders on balanced genre-matched/mismatched pairs and
/// returns the per-iteration mean cosine loss.
pub fn train_retrieval(model: &mut Retrieval, clips: &[Clip], cfg: &RetrievalTrainConfig) -> Result<Vec<f64>> {
    let mut genres: Vec<usize> = clips.iter().map(|c| c.genre).collect();
    genres.sort_unstable();
    genres.dedup();
    if genres.len() < 2 {
        return Err(Error::contract("retrieval training needs at least two genres"));
    }
    if cfg.batch < 2 {
        return Err(Error::Config("retrieval batch must hold at least two pairs".into()));
    }
    let by_genre: Vec<Vec<usize>> = genres
        .iter()
        .map(|g| (0..clips.len()).filter(|&i| clips[i].genre == *g).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = make_optimizer(OptimizerKind::Adam, cfg.lr);
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let mut music = Vec::with_capacity(cfg.batch);
        let mut dance = Vec::with_capacity(cfg.batch);
        let mut labels = Vec::with_capacity(cfg.batch);
        for k in 0..cfg.batch {
            let gi = rng.gen_range(0..genres.len());
            let i = *by_genre[gi].choose(&mut rng).unwrap();
            let matched = k < cfg.batch / 2;
            let gj = if matched {
                gi
            } else {
                (gi + rng.gen_range(1..genres.len())) % genres.len()
            };
            let j = *by_genre[gj].choose(&mut rng).unwrap();
            music.push(&clips[i].mel);
            dance.push(clips[j].motion.frames());
            labels.push(if matched { 1.0 } else { 0.0 });
        }
        let b = cfg.batch;
        let mut g = Graph::new();
        let p = model.store.bind(&mut g, true)?;
        let mv = g.constant(stack(&music)?)?;
        let dv = g.constant(stack(&dance)?)?;
        let em = model.music_forward(&mut g, &p, mv)?;
        let ed = model.dance.forward(&mut g, &p, dv)?;
        let s = g.cosine_rows(em, ed).map_err(|e| Error::at_step(it)(e.into()))?;
        let y = g.constant(Tensor::new([b], labels.clone())?)?;
        let not_y = g.constant(Tensor::new([b], labels.iter().map(|v| 1.0 - v).collect())?)?;
        let neg_s = g.scale(s, -1.0)?;
        let one_minus = g.add_scalar(neg_s, 1.0)?;
        let pos = g.mul(y, one_minus)?;
        let hinge = g.relu(s)?;
        let neg = g.mul(not_y, hinge)?;
        let per = g.add(pos, neg)?;
        let loss = g.mean(per)?;
        losses.push(g.value(loss).item());
        let grads = g.backward(loss).map_err(|e| Error::at_step(it)(e.into()))?;
        model.store.accumulate(&p, &grads);
        opt.step(&mut model.store)?;
    }
    Ok(losses)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    /// Fraction of music clips whose best-scoring fragment shares their genre.
    pub top1: f64,
    pub gs_matched: f64,
    pub gs_mismatched: f64,
    pub margin: f64,
    pub clips: usize,
}

/// Scores every music clip against every fragment of `clips`.
pub fn evaluate_retrieval(model: &Retrieval, clips: &[Clip]) -> Result<RetrievalReport> {
    if clips.len() < 2 {
        return Err(Error::contract("retrieval evaluation needs at least two clips"));
    }
    let pooled: Vec<&Tensor> = clips.iter().map(|c| &c.mel).collect();
    let music = model.embed_music_pooled(&stack(&pooled)?)?;
    let frags: Vec<&MotionFragment> = clips.iter().map(|c| &c.motion).collect();
    let dance = model.embed_dances(&frags)?;
    let (mut hits, mut same, mut diff) = (0usize, Vec::new(), Vec::new());
    for (i, ci) in clips.iter().enumerate() {
        let m = &music.data()[i * EMBED_DIM..][..EMBED_DIM];
        let scores = dance
            .data()
            .chunks(EMBED_DIM)
            .map(|d| cosine(m, d))
            .collect::<Result<Vec<_>>>()?;
        if clips[rank(&scores)[0]].genre == ci.genre {
            hits += 1;
        }
        for (j, s) in scores.iter().enumerate() {
            if clips[j].genre == ci.genre {
                same.push(*s);
            } else {
                diff.push(*s);
            }
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let (gs_matched, gs_mismatched) = (mean(&same), mean(&diff));
    Ok(RetrievalReport {
        top1: hits as f64 / clips.len() as f64,
        gs_matched,
        gs_mismatched,
        margin: gs_matched - gs_mismatched,
        clips: clips.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        let s = cosine(&[1.0, 1.0, 0.0, 0.0], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(matches!(cosine(&[0.0; 3], &[1.0; 3]), Err(Error::Numeric(_))));
    }

    #[test]
    fn cosine_loss_examples() {
        assert_eq!(cosine_loss(true, 1.0), 0.0);
        assert_eq!(cosine_loss(false, -0.3), 0.0);
        assert_eq!(cosine_loss(false, 0.4), 0.4);
    }

    #[test]
    fn selection_examples() {
        let w = SelectionWeights::default();
        let sel = select(&[0.9, 0.2], &[-10.0, 0.0], w).unwrap();
        assert_eq!(sel.idx, 1);
        assert!((sel.combined[0] + 4.1).abs() < 1e-12);
        assert!((sel.combined[1] - 0.2).abs() < 1e-12);
        assert_eq!(select(&[0.5; 4], &[-1.0; 4], w).unwrap().idx, 0);
        assert!(select(&[], &[], w).is_err());
        assert!(SelectionWeights::new(0.0, 0.0).is_err());
    }

    #[test]
    fn coherent_score_examples() {
        let mut a = MotionFragment::zeros(30.0, 120);
        let b = MotionFragment::zeros(30.0, 120);
        assert_eq!(coherent_score(Some(&a), &b).unwrap(), 0.0);
        a.frame_mut(115)[10] = 3.0;
        a.frame_mut(115)[20] = 4.0;
        assert_eq!(coherent_score(Some(&a), &b).unwrap(), -5.0);
        assert_eq!(coherent_score(None, &b).unwrap(), 0.0);
        assert!(coherent_score(Some(&MotionFragment::zeros(30.0, 5)), &b).is_err());
    }

    #[test]
    fn stitch_length_and_constant_junction() {
        let c = 0.3;
        let a = MotionFragment::new(30.0, Tensor::full([120, FRAME_DIM], c)).unwrap();
        let s = stitch(&a, &a).unwrap();
        assert_eq!(s.len(), 240);
        assert!(s.frames().data().iter().all(|v| *v == c));
        assert!(stitch(&a, &MotionFragment::zeros(30.0, 10)).is_err());
    }
}
