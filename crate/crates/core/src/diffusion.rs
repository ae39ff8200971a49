//! Denoising diffusion with x0-prediction.
//!
//! Forward process: `x_s = sqrt(ᾱ_s)·x0 + sqrt(1-ᾱ_s)·ε`. The denoiser
//! predicts `x0` directly and is trained with the squared error against the
//! clean sample. Sampling walks the DDPM posterior `q(x_{s-1} | x_s, x̂0)`
//! from `s = S` down to 1, with no noise on the final step.

use choreo_tensor::{Bound, Graph, ParamStore, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Linear-β Markov chain of `S` steps. Step indices are 1-based.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

impl NoiseSchedule {
    /// Linear ramp from `beta_start` to `beta_end` over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::contract("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::contract(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::contract("every beta must lie in (0, 1)"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, s: usize) -> f64 {
        self.betas[s - 1]
    }

    pub fn alpha(&self, s: usize) -> f64 {
        self.alphas[s - 1]
    }

    /// `ᾱ_s`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, s: usize) -> f64 {
        if s == 0 {
            1.0
        } else {
            self.alpha_bars[s - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_step(&self, s: usize) -> Result<()> {
        if s == 0 || s > self.steps() {
            return Err(Error::contract(format!(
                "diffusion step {s} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// Coefficients `(c_x0, c_xs, variance)` of `q(x_{s-1} | x_s, x0)`.
    pub fn posterior(&self, s: usize) -> (f64, f64, f64) {
        let ab = self.alpha_bar(s);
        let ab_prev = self.alpha_bar(s - 1);
        let beta = self.beta(s);
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = self.alpha(s).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let var = (1.0 - ab_prev) / (1.0 - ab) * beta;
        (c0, ct, var)
    }
}

/// `x_s = sqrt(ᾱ_s)·x0 + sqrt(1-ᾱ_s)·ε`.
pub fn forward_diffuse(x0: &Tensor, s: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_step(s)?;
    if x0.shape() != eps.shape() {
        return Err(Error::contract(format!(
            "noise shape {:?} does not match sample shape {:?}",
            eps.shape(),
            x0.shape()
        )));
    }
    let ab = sched.alpha_bar(s);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.zip_map(eps, |x, e| a * x + b * e)?)
}

/// Diffuses each item of a `[B, ...]` batch with its own step.
pub fn forward_diffuse_batch(
    x0: &Tensor,
    steps: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if x0.shape() != eps.shape() || x0.shape()[0] != steps.len() {
        return Err(Error::contract(format!(
            "batch {:?} with noise {:?} and {} steps",
            x0.shape(),
            eps.shape(),
            steps.len()
        )));
    }
    let per = x0.numel() / steps.len();
    let mut out = x0.clone();
    for (b, &s) in steps.iter().enumerate() {
        sched.check_step(s)?;
        let ab = sched.alpha_bar(s);
        let (ca, cb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let range = b * per..(b + 1) * per;
        for (o, e) in out.data_mut()[range.clone()].iter_mut().zip(&eps.data()[range]) {
            *o = ca * *o + cb * e;
        }
    }
    Ok(out)
}

/// A network predicting the clean sample from a noisy one.
///
/// `x_s` is `[B, T, C]`, `steps` holds one diffusion step per batch item and
/// `cond` is `[B, T, C_cond]`. The output has the shape of `x_s`.
pub trait Denoiser {
    fn params(&self) -> &ParamStore;

    fn denoise(&self, g: &mut Graph, p: &Bound, x_s: Var, steps: &[usize], cond: Var) -> Result<Var>;

    /// Evaluates the network without recording gradients.
    fn predict(&self, x_s: &Tensor, steps: &[usize], cond: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params().bind(&mut g, false)?;
        let xv = g.constant(x_s.clone())?;
        let cv = g.constant(cond.clone())?;
        let out = self.denoise(&mut g, &p, xv, steps, cv)?;
        if g.shape(out) != x_s.shape() {
            return Err(Error::contract(format!(
                "denoiser returned {:?} for input {:?}",
                g.shape(out),
                x_s.shape()
            )));
        }
        Ok(g.value(out).clone())
    }
}

pub fn standard_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.sample::<f64, _>(StandardNormal))
}

/// Draws `s ~ U{1..S}` and `ε ~ N(0, I)` per batch item and records
/// `mean ‖x0 - denoiser(x_s, s, cond)‖²` on `g`.
pub fn training_loss<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    g: &mut Graph,
    p: &Bound,
    denoiser: &D,
    x0: &Tensor,
    cond: Var,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Var> {
    let batch = x0.shape()[0];
    let steps: Vec<usize> = (0..batch).map(|_| rng.gen_range(1..=sched.steps())).collect();
    let eps = standard_normal(x0.shape(), rng);
    training_loss_at(g, p, denoiser, x0, cond, sched, &steps, &eps)
}

/// [`training_loss`] with explicit steps and noise.
#[allow(clippy::too_many_arguments)]
pub fn training_loss_at<D: Denoiser + ?Sized>(
    g: &mut Graph,
    p: &Bound,
    denoiser: &D,
    x0: &Tensor,
    cond: Var,
    sched: &NoiseSchedule,
    steps: &[usize],
    eps: &Tensor,
) -> Result<Var> {
    let x_s = forward_diffuse_batch(x0, steps, eps, sched)?;
    let xv = g.constant(x_s)?;
    let target = g.constant(x0.clone())?;
    let pred = denoiser.denoise(g, p, xv, steps, cond)?;
    Ok(g.mse(pred, target)?)
}

/// Ancestral sampling of a `[B, T, C]` batch; item `b` draws all of its
/// noise from `rngs[b]`, so batched and one-at-a-time runs agree.
pub fn reverse_sample_batch<D: Denoiser + ?Sized, R: Rng>(
    denoiser: &D,
    cond: &Tensor,
    shape: [usize; 3],
    sched: &NoiseSchedule,
    rngs: &mut [R],
) -> Result<Tensor> {
    let [batch, t, c] = shape;
    if rngs.len() != batch || cond.shape()[0] != batch || cond.shape()[1] != t {
        return Err(Error::contract(format!(
            "sampling {shape:?} with condition {:?} and {} rng streams",
            cond.shape(),
            rngs.len()
        )));
    }
    let per = t * c;
    let mut x = Tensor::zeros([batch, t, c]);
    for (b, rng) in rngs.iter_mut().enumerate() {
        for v in &mut x.data_mut()[b * per..(b + 1) * per] {
            *v = rng.sample(StandardNormal);
        }
    }
    for s in (1..=sched.steps()).rev() {
        let x0_hat = denoiser.predict(&x, &vec![s; batch], cond)?;
        let (c0, ct, var) = sched.posterior(s);
        let sd = var.sqrt();
        let data = x.data_mut();
        for (b, rng) in rngs.iter_mut().enumerate() {
            for i in b * per..(b + 1) * per {
                let mean = c0 * x0_hat.data()[i] + ct * data[i];
                data[i] = if s > 1 {
                    mean + sd * rng.sample::<f64, _>(StandardNormal)
                } else {
                    mean
                };
            }
        }
    }
    x.validate("reverse sample")?;
    Ok(x)
}

/// Samples one `[T, C]` fragment given a `[T, C_cond]` condition.
pub fn reverse_sample<D: Denoiser + ?Sized, R: Rng>(
    denoiser: &D,
    cond: &Tensor,
    channels: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    let (t, cc) = (cond.shape()[0], cond.shape()[1]);
    let cond = cond.reshape([1, t, cc])?;
    let mut streams = [rng];
    let out = reverse_sample_batch(denoiser, &cond, [1, t, channels], sched, &mut streams)?;
    Ok(out.reshape([t, channels])?)
}

/// Denoiser with fixed output, used for oracle checks of the sampler and loss.
pub struct ConstantDenoiser {
    pub output: Tensor,
    params: ParamStore,
}

impl ConstantDenoiser {
    /// `output` is `[T, C]` and is returned for every batch item.
    pub fn new(output: Tensor) -> Self {
        ConstantDenoiser {
            output,
            params: ParamStore::new(),
        }
    }
}

impl Denoiser for ConstantDenoiser {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn denoise(&self, g: &mut Graph, _p: &Bound, x_s: Var, _steps: &[usize], _cond: Var) -> Result<Var> {
        let batch = g.shape(x_s)[0];
        let parts: Vec<&Tensor> = (0..batch).map(|_| &self.output).collect();
        let (t, c) = (self.output.shape()[0], self.output.shape()[1]);
        let stacked = Tensor::concat(&parts, 0)?.reshape([batch, t, c])?;
        Ok(g.constant(stacked)?)
    }
}
