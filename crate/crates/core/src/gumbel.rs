//! Gumbel-softmax scheduled sampling for the auto-regressive stage.
//!
//! A two-pass step first predicts every position from the gold sequence
//! without recording gradients, scores each prediction's reliability against
//! the gold token's codebook embedding, and swaps some reliable gold inputs
//! for tokens drawn with Gumbel-softmax. The second pass scores the gold
//! targets from the mixed inputs and is the only one differentiated.

use serde::{Deserialize, Serialize};

use crate::ar::{ArModel, InputOverride};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::nn::Bound;
use crate::tensor::{cst, Graph, Scalar, Var};
use crate::vae::Codebook;

/// Clamp for uniforms and additive guard inside `log(p + EPS)`.
pub const EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GumbelConfig {
    /// Off means plain teacher forcing at every step.
    pub enabled: bool,
    pub tau_start: f64,
    pub tau_end: f64,
    /// Minimum reliability for a position to be eligible for replacement.
    pub threshold: f64,
    /// Run the two-pass procedure on steps divisible by this.
    pub every: usize,
    /// Plateau of the mixing probability, reached halfway through training.
    pub mix_max: f64,
}

impl Default for GumbelConfig {
    fn default() -> Self {
        GumbelConfig {
            enabled: true,
            tau_start: 1.0,
            tau_end: 0.1,
            threshold: 0.9,
            every: 4,
            mix_max: 0.5,
        }
    }
}

impl GumbelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_start > 0.0 && self.tau_end > 0.0) || !self.tau_start.is_finite() || !self.tau_end.is_finite() {
            return Err(Error::invalid("gumbel temperatures must be finite and > 0"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::invalid(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        if !(0.0..=1.0).contains(&self.mix_max) {
            return Err(Error::invalid(format!("mix_max {} outside [0, 1]", self.mix_max)));
        }
        if self.every == 0 {
            return Err(Error::invalid("gumbel every must be >= 1"));
        }
        Ok(())
    }

    /// Exponential anneal from `tau_start` to `tau_end`.
    pub fn tau(&self, step: usize, total: usize) -> f64 {
        let frac = if total == 0 { 1.0 } else { (step as f64 / total as f64).min(1.0) };
        self.tau_start * (self.tau_end / self.tau_start).powf(frac)
    }

    pub fn mix(&self, step: usize, total: usize) -> f64 {
        mix_schedule(step, total, self.mix_max)
    }

    pub fn is_gumbel_step(&self, step: usize) -> bool {
        self.enabled && step % self.every == 0
    }
}

/// Linear ramp from 0 to `mix_max` over the first half of training, then flat.
pub fn mix_schedule(step: usize, total: usize, mix_max: f64) -> f64 {
    let half = total as f64 / 2.0;
    if half <= 0.0 || step as f64 >= half {
        return mix_max;
    }
    mix_max * step as f64 / half
}

/// Standard Gumbel draws `-ln(-ln U)` with `U` clamped to `(EPS, 1 - EPS)`.
pub fn gumbel_noise(rng: &mut Rng, count: usize) -> Vec<f64> {
    (0..count)
        .map(|_| {
            let u = rng.next_f64().clamp(EPS, 1.0 - EPS);
            -(-u.ln()).ln()
        })
        .collect()
}

fn check_sample_args(len: usize, tau: f64, noise: usize) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!("tau must be > 0, got {tau}")));
    }
    if len == 0 || noise != len {
        return Err(Error::invalid(format!("{len} probabilities with {noise} noise values")));
    }
    Ok(())
}

/// `softmax((log(p + EPS) + g) / tau)`.
pub fn gumbel_softmax_sample(p: &[f64], tau: f64, g: &[f64]) -> Result<Vec<f64>> {
    check_sample_args(p.len(), tau, g.len())?;
    let z: Vec<f64> = p.iter().zip(g).map(|(pi, gi)| ((pi + EPS).ln() + gi) / tau).collect();
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

/// Graph version of [`gumbel_softmax_sample`]: differentiable in `p`
/// (shape `[1, K]`), with the noise held fixed.
pub fn gumbel_softmax<T: Scalar>(g: &mut Graph<T>, p: Var, tau: f64, noise: &[f64]) -> Result<Var> {
    let shape = g.shape(p).to_vec();
    check_sample_args(shape.iter().product(), tau, noise.len())?;
    let guarded = g.add_scalar(p, cst(EPS))?;
    let logp = g.log(guarded)?;
    let n = g.constant(&shape, noise.iter().map(|v| cst(*v)).collect())?;
    let z = g.add(logp, n)?;
    let z = g.scale(z, cst(1.0 / tau))?;
    g.softmax(z, shape.len() - 1)
}

/// `R_t = clamp(sum_j p_t[j] * <e_j, e_gold_t>, 0, 1)` over the
/// row-normalized codebook.
pub fn reliability(dists: &[Vec<f32>], cb: &Codebook, gold: &[usize]) -> Result<Vec<f64>> {
    if dists.len() != gold.len() {
        return Err(Error::invalid(format!(
            "{} distributions for {} gold tokens",
            dists.len(),
            gold.len()
        )));
    }
    let unit = cb.normalized()?;
    let k = unit.len();
    dists
        .iter()
        .zip(gold)
        .map(|(p, &t)| {
            if t >= k {
                return Err(Error::TokenOutOfRange { token: t, vocab: k });
            }
            if p.len() != k {
                return Err(Error::invalid(format!("distribution over {} tokens, codebook has {k}", p.len())));
            }
            let target = &unit[t];
            let r: f64 = p
                .iter()
                .zip(&unit)
                .map(|(pj, ej)| {
                    let dot: f64 = ej.iter().zip(target).map(|(a, b)| *a as f64 * *b as f64).sum();
                    *pj as f64 * dot
                })
                .sum();
            Ok(r.clamp(0.0, 1.0))
        })
        .collect()
}

/// Graph handle and diagnostics of one [`two_pass_step`].
#[derive(Debug, Clone)]
pub struct TwoPass {
    pub loss: Var,
    /// Input positions whose gold token was replaced.
    pub active_positions: usize,
    pub mean_reliability: f64,
    /// Image tokens actually fed as inputs to the second pass.
    pub mixed_inputs: Vec<usize>,
}

/// Records the second pass of a Gumbel scheduled-sampling step into `g`.
///
/// Pass 1 runs frozen on the gold sequence. Input positions `t < n - 1`
/// with `R_t >= threshold` are each replaced with probability `mix` by the
/// argmax of a Gumbel-softmax sample of `p_t`; the hard one-hot feeds the
/// embedding and passes its gradient straight through to the relaxed sample.
/// Targets stay gold.
#[allow(clippy::too_many_arguments)]
pub fn two_pass_step(
    model: &ArModel,
    g: &mut Graph<f32>,
    p: &Bound,
    cond: &[usize],
    gold: &[usize],
    cb: &Codebook,
    cfg: &GumbelConfig,
    tau: f64,
    mix: f64,
    rng: &mut Rng,
) -> Result<TwoPass> {
    let dists = model.forward(cond, gold)?;
    let r = reliability(&dists, cb, gold)?;
    let mean_reliability = r.iter().sum::<f64>() / r.len().max(1) as f64;
    let k = model.config().image_vocab;
    let vocab = model.config().vocab();
    let mut overrides = Vec::new();
    let mut mixed_inputs = gold[..gold.len().saturating_sub(1)].to_vec();
    for (t, slot) in mixed_inputs.iter_mut().enumerate() {
        if r[t] < cfg.threshold || !rng.bernoulli(mix) {
            continue;
        }
        let noise = gumbel_noise(rng, k);
        let pt = g.constant(&[1, k], dists[t].clone())?;
        let relaxed = gumbel_softmax(g, pt, tau, &noise)?;
        let hard = argmax(g.value(relaxed));
        let pad = g.constant(&[1, vocab - k], vec![0.0; vocab - k])?;
        let relaxed = g.concat(&[relaxed, pad], 1)?;
        let mut one_hot = vec![0.0; vocab];
        one_hot[hard] = 1.0;
        let one_hot = g.constant(&[1, vocab], one_hot)?;
        let row = g.straight_through(one_hot, relaxed)?;
        overrides.push(InputOverride { image_pos: t, row });
        *slot = hard;
    }
    let loss = model.nll_var(g, p, cond, gold, &overrides)?;
    Ok(TwoPass {
        loss,
        active_positions: overrides.len(),
        mean_reliability,
        mixed_inputs,
    })
}

/// First index of the maximum.
pub fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
