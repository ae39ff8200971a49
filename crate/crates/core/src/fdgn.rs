//! Full-body dance generation network.
//!
//! Two expert denoisers share the diffusion schedule: the body expert predicts
//! the 69 body columns from noisy body motion and music, the hand expert
//! predicts the 90 hand columns from noisy hand motion, music and the body
//! prediction. A gated temporal convolution refines their concatenation:
//! `out = raw + sigmoid(w) ⊙ conv1d(raw)`.

use std::path::Path;

use choreo_tensor::{checkpoint, Adam, Bound, Conv1d, Dense, Graph, Init, Optimizer, ParamStore, Sgd, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::FEATURE_DIM;
use crate::diffusion::{
    forward_diffuse_batch, reverse_sample_batch, standard_normal, Denoiser, NoiseSchedule, DEFAULT_BETA_END,
    DEFAULT_BETA_START, DEFAULT_STEPS,
};
use crate::error::{Error, Result};
use crate::motion::{MotionFragment, BODY_DIM, CLIP_FRAMES, DEFAULT_FPS, FRAME_DIM, HAND_DIM};

const EMBED_HALF: usize = 8;
/// Step embedding plus frame position embedding.
const EMBED_DIM: usize = 4 * EMBED_HALF;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trunk {
    Mlp,
    Attention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdgnConfig {
    pub hidden: usize,
    pub music_latent: usize,
    pub trunk: Trunk,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for FdgnConfig {
    fn default() -> Self {
        FdgnConfig {
            hidden: 256,
            music_latent: 64,
            trunk: Trunk::Mlp,
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

/// Sinusoidal features of `value` at geometrically spaced frequencies.
fn sinusoid(value: f64, base: f64, out: &mut [f64]) {
    let half = out.len() / 2;
    for i in 0..half {
        let freq = base.powf(-(i as f64) / half as f64);
        out[i] = (value * freq).sin();
        out[half + i] = (value * freq).cos();
    }
}

/// `[B, T, EMBED_DIM]` step and frame-position embedding.
fn embedding(steps: &[usize], frames: usize) -> Tensor {
    let mut out = Tensor::zeros([steps.len(), frames, EMBED_DIM]);
    let data = out.data_mut();
    for (b, &s) in steps.iter().enumerate() {
        for t in 0..frames {
            let row = &mut data[(b * frames + t) * EMBED_DIM..][..EMBED_DIM];
            sinusoid(s as f64, 100.0, &mut row[..2 * EMBED_HALF]);
            sinusoid(t as f64, 100.0, &mut row[2 * EMBED_HALF..]);
        }
    }
    out
}

/// Single-head self-attention over frames with a residual connection.
struct Attention {
    q: Dense,
    k: Dense,
    v: Dense,
    o: Dense,
}

impl Attention {
    fn new(store: &mut ParamStore, name: &str, width: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut layer = |n: &str, init| Dense::new(store, &format!("{name}.{n}"), width, width, init, rng);
        Ok(Attention {
            q: layer("q", Init::LeCun)?,
            k: layer("k", Init::LeCun)?,
            v: layer("v", Init::LeCun)?,
            o: layer("o", Init::Zeros)?,
        })
    }

    fn load(store: &ParamStore, name: &str) -> Result<Option<Self>> {
        if store.id(&format!("{name}.q.w")).is_none() {
            return Ok(None);
        }
        let layer = |n: &str| Dense::load(store, &format!("{name}.{n}"));
        Ok(Some(Attention {
            q: layer("q")?,
            k: layer("k")?,
            v: layer("v")?,
            o: layer("o")?,
        }))
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let q = self.q.forward(g, p, x)?;
        let k = self.k.forward(g, p, x)?;
        let v = self.v.forward(g, p, x)?;
        let kt = g.transpose_last(k)?;
        let scores = g.bmm(q, kt)?;
        let scaled = g.scale(scores, 1.0 / (self.q.output as f64).sqrt())?;
        let att = g.softmax(scaled)?;
        let mixed = g.bmm(att, v)?;
        let out = self.o.forward(g, p, mixed)?;
        Ok(g.add(x, out)?)
    }
}

/// One expert: a per-frame music encoder and a trunk over
/// `[noisy slice, extra condition, music latent, music features, embedding]`.
struct Expert {
    music: [Dense; 3],
    trunk: [Dense; 3],
    attention: Option<Attention>,
}

impl Expert {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &FdgnConfig,
        slice: usize,
        extra: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let (h, m) = (cfg.hidden, cfg.music_latent);
        let music = [
            Dense::new(store, &format!("{name}.music0"), FEATURE_DIM, m, Init::LeCun, rng)?,
            Dense::new(store, &format!("{name}.music1"), m, m, Init::LeCun, rng)?,
            Dense::new(store, &format!("{name}.music2"), m, m, Init::LeCun, rng)?,
        ];
        let input = slice + extra + m + FEATURE_DIM + EMBED_DIM;
        let trunk = [
            Dense::new(store, &format!("{name}.trunk0"), input, h, Init::LeCun, rng)?,
            Dense::new(store, &format!("{name}.trunk1"), h, h, Init::LeCun, rng)?,
            Dense::new(store, &format!("{name}.out"), h, slice, Init::Zeros, rng)?,
        ];
        let attention = match cfg.trunk {
            Trunk::Mlp => None,
            Trunk::Attention => Some(Attention::new(store, &format!("{name}.attn"), h, rng)?),
        };
        Ok(Expert { music, trunk, attention })
    }

    fn load(store: &ParamStore, name: &str) -> Result<Self> {
        let d = |n: &str| Dense::load(store, &format!("{name}.{n}"));
        Ok(Expert {
            music: [d("music0")?, d("music1")?, d("music2")?],
            trunk: [d("trunk0")?, d("trunk1")?, d("out")?],
            attention: Attention::load(store, &format!("{name}.attn"))?,
        })
    }

    fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        noisy: Var,
        extra: Option<Var>,
        music: Var,
        embed: Var,
    ) -> Result<Var> {
        let mut z = music;
        for (i, layer) in self.music.iter().enumerate() {
            z = layer.forward(g, p, z)?;
            if i < 2 {
                z = g.gelu(z)?;
            }
        }
        let mut parts = vec![noisy];
        parts.extend(extra);
        parts.extend([z, music, embed]);
        let x = g.concat(&parts, 2)?;
        let mut h = self.trunk[0].forward(g, p, x)?;
        h = g.gelu(h)?;
        if let Some(att) = &self.attention {
            h = att.forward(g, p, h)?;
        }
        h = self.trunk[1].forward(g, p, h)?;
        h = g.gelu(h)?;
        Ok(self.trunk[2].forward(g, p, h)?)
    }
}

/// Gated residual temporal convolution over the assembled prediction.
pub struct RefineNet {
    pub conv: Conv1d,
    pub gate: choreo_tensor::ParamId,
}

impl RefineNet {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        let conv = Conv1d::new(store, "refine.conv", 3, FRAME_DIM, FRAME_DIM, Init::Normal(1e-3), rng)?;
        let gate = store.add("refine.gate", Tensor::zeros([FRAME_DIM]), true)?;
        Ok(RefineNet { conv, gate })
    }

    fn load(store: &ParamStore) -> Result<Self> {
        let conv = Conv1d::load(store, "refine.conv")?;
        if conv.kernel != 3 || conv.input != FRAME_DIM || conv.output != FRAME_DIM {
            return Err(Error::Format("refine.conv must be 3x159x159".into()));
        }
        let gate = store.expect("refine.gate", &[FRAME_DIM])?;
        Ok(RefineNet { conv, gate })
    }

    /// `raw` is `[B, T, 159]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, raw: Var) -> Result<Var> {
        let conv = self.conv.forward(g, p, raw)?;
        let gate = g.sigmoid(p.var(self.gate))?;
        let gated = g.mul_row(conv, gate)?;
        Ok(g.add(raw, gated)?)
    }
}

/// Runs the refine net of `store` on one body/hand prediction pair.
pub fn assemble(store: &ParamStore, refine: &RefineNet, body: &Tensor, hand: &Tensor) -> Result<MotionFragment> {
    if body.shape() != [CLIP_FRAMES, BODY_DIM] || hand.shape() != [CLIP_FRAMES, HAND_DIM] {
        return Err(Error::contract(format!(
            "assemble expects [{CLIP_FRAMES}, {BODY_DIM}] and [{CLIP_FRAMES}, {HAND_DIM}], got {:?} and {:?}",
            body.shape(),
            hand.shape()
        )));
    }
    let raw = Tensor::concat(&[body, hand], 1)?.reshape([1, CLIP_FRAMES, FRAME_DIM])?;
    let mut g = Graph::new();
    let p = store.bind(&mut g, false)?;
    let x = g.constant(raw)?;
    let out = refine.forward(&mut g, &p, x)?;
    MotionFragment::new(DEFAULT_FPS, g.value(out).reshape([CLIP_FRAMES, FRAME_DIM])?)
}

/// One training example: `[120, 35]` music features and `[120, 159]` motion.
#[derive(Clone, Debug)]
pub struct FdgnSample {
    pub cond: Tensor,
    pub motion: Tensor,
}

impl FdgnSample {
    pub fn new(cond: Tensor, motion: &MotionFragment) -> Result<Self> {
        if cond.shape() != [CLIP_FRAMES, FEATURE_DIM] || motion.len() != CLIP_FRAMES {
            return Err(Error::contract(format!(
                "training sample needs [{CLIP_FRAMES}, {FEATURE_DIM}] features and {CLIP_FRAMES} frames, got {:?} and {}",
                cond.shape(),
                motion.len()
            )));
        }
        Ok(FdgnSample {
            cond,
            motion: motion.frames().clone(),
        })
    }
}

/// Per-term losses of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub body: f64,
    pub hand: f64,
    pub refine: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.body + self.hand + self.refine
    }
}

pub struct Fdgn {
    store: ParamStore,
    body: Expert,
    hand: Expert,
    refine: RefineNet,
    schedule: NoiseSchedule,
    music_mean: choreo_tensor::ParamId,
    music_std: choreo_tensor::ParamId,
}

struct Parts {
    body: Var,
    hand: Var,
    out: Var,
}

impl Fdgn {
    /// Fresh network whose music normalisation comes from `data`.
    pub fn new(cfg: &FdgnConfig, data: &[FdgnSample], seed: u64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::contract("empty training set"));
        }
        let schedule = NoiseSchedule::linear(cfg.steps, cfg.beta_start, cfg.beta_end)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (mean, std) = column_stats(data);
        let music_mean = store.add("music.mean", mean, false)?;
        let music_std = store.add("music.std", std, false)?;
        store.add(
            "schedule",
            Tensor::new([3], vec![cfg.steps as f64, cfg.beta_start, cfg.beta_end])?,
            false,
        )?;
        let body = Expert::new(&mut store, "body", cfg, BODY_DIM, 0, &mut rng)?;
        let hand = Expert::new(&mut store, "hand", cfg, HAND_DIM, BODY_DIM, &mut rng)?;
        let refine = RefineNet::new(&mut store, &mut rng)?;
        Ok(Fdgn {
            store,
            body,
            hand,
            refine,
            schedule,
            music_mean,
            music_std,
        })
    }

    /// Rebuilds a network from checkpoint tensors; the architecture is read
    /// from tensor names and shapes.
    pub fn from_store(mut store: ParamStore) -> Result<Self> {
        let music_mean = store.expect("music.mean", &[FEATURE_DIM])?;
        let music_std = store.expect("music.std", &[FEATURE_DIM])?;
        let sched = store.expect("schedule", &[3])?;
        for id in [music_mean, music_std, sched] {
            store.set_trainable(id, false);
        }
        let s = store.get(sched).data().to_vec();
        // betas are stored as f32; rounding keeps the step count exact
        let steps = s[0].round() as usize;
        let schedule = NoiseSchedule::linear(steps, round_f32(s[1]), round_f32(s[2]))?;
        let body = Expert::load(&store, "body")?;
        let hand = Expert::load(&store, "hand")?;
        if body.trunk[2].output != BODY_DIM || hand.trunk[2].output != HAND_DIM {
            return Err(Error::Format("expert output widths do not match the skeleton".into()));
        }
        let refine = RefineNet::load(&store)?;
        Ok(Fdgn {
            store,
            body,
            hand,
            refine,
            schedule,
            music_mean,
            music_std,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_store(load_store(path.as_ref())?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        checkpoint::save_params(&self.store, path).map_err(|e| with_path(e, path))
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn refine_net(&self) -> &RefineNet {
        &self.refine
    }

    pub fn trunk(&self) -> Trunk {
        if self.body.attention.is_some() {
            Trunk::Attention
        } else {
            Trunk::Mlp
        }
    }

    fn standardize(&self, cond: &Tensor) -> Result<Tensor> {
        let mean = self.store.get(self.music_mean).data();
        let std = self.store.get(self.music_std).data();
        let mut out = cond.clone();
        if cond.last_dim() != FEATURE_DIM {
            return Err(Error::contract(format!("music features have {} columns", cond.last_dim())));
        }
        for row in out.data_mut().chunks_mut(FEATURE_DIM) {
            for ((v, m), s) in row.iter_mut().zip(mean).zip(std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }

    /// Records body, hand and refined predictions. Without `body_cond` the
    /// hand expert sees the body expert's own prediction.
    fn parts(
        &self,
        g: &mut Graph,
        p: &Bound,
        x_s: Var,
        steps: &[usize],
        cond: &Tensor,
        body_cond: Option<Var>,
    ) -> Result<Parts> {
        let shape = g.shape(x_s).to_vec();
        if shape.len() != 3 || shape[2] != FRAME_DIM || cond.shape()[..2] != shape[..2] || steps.len() != shape[0] {
            return Err(Error::contract(format!(
                "FDGN input {shape:?} with condition {:?} and {} steps",
                cond.shape(),
                steps.len()
            )));
        }
        let music = g.constant(self.standardize(cond)?)?;
        let embed = g.constant(embedding(steps, shape[1]))?;
        let noisy_body = g.slice_axis(x_s, 2, 0, BODY_DIM)?;
        let noisy_hand = g.slice_axis(x_s, 2, BODY_DIM, FRAME_DIM)?;
        let body = self.body.forward(g, p, noisy_body, None, music, embed)?;
        let hand_cond = body_cond.unwrap_or(body);
        let hand = self.hand.forward(g, p, noisy_hand, Some(hand_cond), music, embed)?;
        let raw = g.concat(&[body, hand], 2)?;
        let out = self.refine.forward(g, p, raw)?;
        Ok(Parts { body, hand, out })
    }

    /// Predicts `(body, hand, refined)` for a `[B, T, 159]` noisy batch,
    /// optionally replacing the hand expert's body condition.
    pub fn predict_parts(
        &self,
        x_s: &Tensor,
        steps: &[usize],
        cond: &Tensor,
        body_cond: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false)?;
        let x = g.constant(x_s.clone())?;
        let bc = body_cond.map(|b| g.constant(b.clone())).transpose()?;
        let parts = self.parts(&mut g, &p, x, steps, cond, bc)?;
        Ok((
            g.value(parts.body).clone(),
            g.value(parts.hand).clone(),
            g.value(parts.out).clone(),
        ))
    }

    /// Records the three loss terms for explicit steps and noise.
    fn loss_at(
        &self,
        g: &mut Graph,
        p: &Bound,
        x0: &Tensor,
        cond: &Tensor,
        steps: &[usize],
        eps: &Tensor,
    ) -> Result<(Var, Var, Var)> {
        let x_s = forward_diffuse_batch(x0, steps, eps, &self.schedule)?;
        let xv = g.constant(x_s)?;
        let target = g.constant(x0.clone())?;
        let target_body = g.slice_axis(target, 2, 0, BODY_DIM)?;
        let target_hand = g.slice_axis(target, 2, BODY_DIM, FRAME_DIM)?;
        let parts = self.parts(g, p, xv, steps, cond, Some(target_body))?;
        Ok((
            g.mse(parts.body, target_body)?,
            g.mse(parts.hand, target_hand)?,
            g.mse(parts.out, target)?,
        ))
    }

    /// Loss terms on a fixed set of examples with noise drawn from `seed`.
    pub fn evaluate_loss(&self, data: &[FdgnSample], seed: u64) -> Result<LossTerms> {
        if data.is_empty() {
            return Err(Error::contract("empty evaluation set"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x0, cond) = stack(data.iter())?;
        let steps: Vec<usize> = (0..data.len()).map(|_| rng.gen_range(1..=self.schedule.steps())).collect();
        let eps = standard_normal(x0.shape(), &mut rng);
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false)?;
        let (b, h, r) = self.loss_at(&mut g, &p, &x0, &cond, &steps, &eps)?;
        Ok(LossTerms {
            body: g.value(b).item(),
            hand: g.value(h).item(),
            refine: g.value(r).item(),
        })
    }

    /// Generates `m` candidates for every `[120, 35]` clip in `conds`.
    /// Candidate `i` of clip `c` draws its noise from ChaCha8 stream
    /// `(c << 32) | i` of `seed`.
    pub fn generate(&self, conds: &[Tensor], m: usize, seed: u64) -> Result<Vec<Vec<MotionFragment>>> {
        if m == 0 {
            return Err(Error::contract("need at least one candidate"));
        }
        if conds.is_empty() {
            return Ok(Vec::new());
        }
        let mut parts = Vec::with_capacity(conds.len() * m);
        let mut rngs = Vec::with_capacity(conds.len() * m);
        for (c, cond) in conds.iter().enumerate() {
            if cond.shape() != [CLIP_FRAMES, FEATURE_DIM] {
                return Err(Error::contract(format!("clip {c} features have shape {:?}", cond.shape())));
            }
            for i in 0..m {
                parts.push(cond);
                rngs.push(candidate_rng(seed, c, i));
            }
        }
        let batch = parts.len();
        let cond = Tensor::concat(&parts, 0)?.reshape([batch, CLIP_FRAMES, FEATURE_DIM])?;
        let out = reverse_sample_batch(self, &cond, [batch, CLIP_FRAMES, FRAME_DIM], &self.schedule, &mut rngs)?;
        let per = CLIP_FRAMES * FRAME_DIM;
        let mut clips = Vec::with_capacity(conds.len());
        for c in 0..conds.len() {
            let cands = (0..m)
                .map(|i| {
                    let b = c * m + i;
                    let frames = Tensor::new([CLIP_FRAMES, FRAME_DIM], out.data()[b * per..(b + 1) * per].to_vec())?;
                    MotionFragment::new(DEFAULT_FPS, frames)
                })
                .collect::<Result<Vec<_>>>()?;
            clips.push(cands);
        }
        Ok(clips)
    }

    /// `m` candidates for one clip.
    pub fn generate_candidates(&self, cond: &Tensor, m: usize, seed: u64) -> Result<Vec<MotionFragment>> {
        Ok(self.generate(std::slice::from_ref(cond), m, seed)?.remove(0))
    }

    /// One reverse-diffusion pass over `[T, 35]` features of any length.
    pub fn generate_long(&self, cond: &Tensor, seed: u64) -> Result<MotionFragment> {
        let t = cond.shape()[0];
        if cond.shape() != [t, FEATURE_DIM] {
            return Err(Error::contract(format!("features have shape {:?}", cond.shape())));
        }
        let mut rngs = [candidate_rng(seed, 0, 0)];
        let out = reverse_sample_batch(
            self,
            &cond.reshape([1, t, FEATURE_DIM])?,
            [1, t, FRAME_DIM],
            &self.schedule,
            &mut rngs,
        )?;
        MotionFragment::new(DEFAULT_FPS, out.reshape([t, FRAME_DIM])?)
    }
}

impl Denoiser for Fdgn {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn denoise(&self, g: &mut Graph, p: &Bound, x_s: Var, steps: &[usize], cond: Var) -> Result<Var> {
        let cond = g.value(cond).clone();
        Ok(self.parts(g, p, x_s, steps, &cond, None)?.out)
    }
}

pub fn candidate_rng(seed: u64, clip: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((clip as u64) << 32) | index as u64);
    rng
}

fn round_f32(v: f64) -> f64 {
    format!("{}", v as f32).parse().unwrap_or(v)
}

pub(crate) fn load_store(path: &Path) -> Result<ParamStore> {
    checkpoint::load_params(path).map_err(|e| with_path(e, path))
}

pub(crate) fn with_path(e: choreo_tensor::TensorError, path: &Path) -> Error {
    match e {
        choreo_tensor::TensorError::Io(io) => Error::io(path, io),
        choreo_tensor::TensorError::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other.into(),
    }
}

fn column_stats(data: &[FdgnSample]) -> (Tensor, Tensor) {
    let mut sum = [0.0; FEATURE_DIM];
    let mut sq = [0.0; FEATURE_DIM];
    let mut n = 0.0;
    for s in data {
        for row in s.cond.data().chunks(FEATURE_DIM) {
            for c in 0..FEATURE_DIM {
                sum[c] += row[c];
                sq[c] += row[c] * row[c];
            }
            n += 1.0;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std: Vec<f64> = (0..FEATURE_DIM)
        .map(|c| (sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt().max(1e-3))
        .collect();
    (Tensor::from_fn([FEATURE_DIM], |i| mean[i]), Tensor::from_fn([FEATURE_DIM], |i| std[i]))
}

fn stack<'a>(items: impl Iterator<Item = &'a FdgnSample>) -> Result<(Tensor, Tensor)> {
    let items: Vec<&FdgnSample> = items.collect();
    let b = items.len();
    let x0: Vec<&Tensor> = items.iter().map(|s| &s.motion).collect();
    let cond: Vec<&Tensor> = items.iter().map(|s| &s.cond).collect();
    Ok((
        Tensor::concat(&x0, 0)?.reshape([b, CLIP_FRAMES, FRAME_DIM])?,
        Tensor::concat(&cond, 0)?.reshape([b, CLIP_FRAMES, FEATURE_DIM])?,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 500,
            batch: 8,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

pub(crate) fn make_optimizer(kind: OptimizerKind, lr: f64) -> Box<dyn Optimizer> {
    match kind {
        OptimizerKind::Sgd => Box::new(Sgd::new(lr)),
        OptimizerKind::Adam => Box::new(Adam::new(lr)),
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// Per-iteration batch losses.
    pub losses: Vec<LossTerms>,
    /// Fixed-noise loss on the training set before and after training.
    pub initial: LossTerms,
    pub final_loss: LossTerms,
}

/// Number of examples used for the fixed-noise before/after evaluation.
const EVAL_EXAMPLES: usize = 32;

/// Trains both experts and the refine net jointly on the summed loss.
pub fn train_fdgn(model: &mut Fdgn, data: &[FdgnSample], cfg: &TrainConfig) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::contract("empty training set"));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let eval: Vec<FdgnSample> = data.iter().take(EVAL_EXAMPLES).cloned().collect();
    let eval_seed = cfg.seed ^ 0x5eed;
    let mut report = TrainReport {
        initial: model.evaluate_loss(&eval, eval_seed)?,
        ..TrainReport::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = make_optimizer(cfg.optimizer, cfg.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    for it in 0..cfg.iterations {
        let mut picked = Vec::with_capacity(cfg.batch);
        while picked.len() < cfg.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(&data[order[cursor]]);
            cursor += 1;
        }
        let (x0, cond) = stack(picked.into_iter())?;
        let steps: Vec<usize> = (0..cfg.batch).map(|_| rng.gen_range(1..=model.schedule.steps())).collect();
        let eps = standard_normal(x0.shape(), &mut rng);
        let mut g = Graph::new();
        let p = model.store.bind(&mut g, true)?;
        let (b, h, r) = model
            .loss_at(&mut g, &p, &x0, &cond, &steps, &eps)
            .map_err(Error::at_step(it))?;
        let terms = LossTerms {
            body: g.value(b).item(),
            hand: g.value(h).item(),
            refine: g.value(r).item(),
        };
        let bh = g.add(b, h)?;
        let total = g.add(bh, r)?;
        let grads = g.backward(total).map_err(|e| Error::at_step(it)(e.into()))?;
        model.store.accumulate(&p, &grads);
        if cfg.clip_norm > 0.0 {
            model.store.clip_grad_norm(cfg.clip_norm);
        }
        opt.step(&mut model.store).map_err(|e| Error::at_step(it)(e.into()))?;
        report.losses.push(terms);
    }
    report.final_loss = model.evaluate_loss(&eval, eval_seed)?;
    Ok(report)
}
