use serde::{Deserialize, Serialize};

use super::{quantize, IqVae, LossWeights, VaeConfig};
use crate::data::PairedSample;
use crate::error::{Error, Result};
use crate::ot::{sample_directions, sliced_gw, Domain, PointSet, ProjectionSet};
use crate::par;
use crate::rng::Rng;
use crate::tensor::nn::mean_grads;
use crate::tensor::{AdamW, AdamWConfig, Graph};

const SHUFFLE_STREAM: u64 = 1;
const PROJECTION_STREAM: u64 = 2;
const INIT_STREAM: u64 = 3;
const RESTART_STREAM: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Directions drawn per step for the regularizer.
    pub projections: usize,
    pub weights: LossWeights,
    pub optim: AdamWConfig,
    /// Re-seed codes left unused by an epoch with current encoder outputs
    /// (every epoch but the last).
    pub restart_dead_codes: bool,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        VaeTrainConfig {
            epochs: 12,
            batch_size: 16,
            projections: 64,
            weights: LossWeights::default(),
            optim: AdamWConfig {
                lr: 2e-3,
                ..AdamWConfig::default()
            },
            restart_dead_codes: true,
        }
    }
}

impl VaeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.projections == 0 {
            return Err(Error::invalid("epochs, batch_size and projections must be >= 1"));
        }
        self.weights.validate()
    }
}

/// One line of the stage-1 metrics stream. Losses are per-sample means
/// over the epoch; `codebook_usage` is the fraction of image codes hit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_total: f64,
    pub l_reg: f64,
    pub l_recon: f64,
    pub l_quan: f64,
    pub codebook_usage: f64,
}

struct SampleOut {
    total: f64,
    reg: f64,
    recon: f64,
    quan: f64,
    grads: Vec<Vec<f32>>,
    image_tokens: Vec<usize>,
    cond_tokens: Vec<usize>,
}

fn sample_step(
    model: &IqVae,
    sample: &PairedSample,
    weights: &LossWeights,
    proj: &ProjectionSet,
) -> Result<SampleOut> {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g);
    let f = model.forward(&mut g, &p, sample, weights, proj)?;
    g.backward(f.total)?;
    Ok(SampleOut {
        total: g.scalar(f.total) as f64,
        reg: g.scalar(f.l_reg) as f64,
        recon: g.scalar(f.l_recon) as f64,
        quan: g.scalar(f.l_quan) as f64,
        grads: g.grads_of(p.vars()),
        image_tokens: f.image_tokens,
        cond_tokens: f.cond_tokens,
    })
}

/// Seeds both codebooks with encoder outputs of the first batch, so every
/// code starts inside the data manifold.
fn init_codebooks(model: &mut IqVae, batch: &[&PairedSample], seed: u64) -> Result<()> {
    let cfg = model.config().clone();
    let d = cfg.latent_dim;
    let mut xs = Vec::new();
    let mut cs = Vec::new();
    for s in batch {
        let (zx, zc) = model.encode(&s.image, &s.condition_unit())?;
        xs.extend(zx.data().chunks(d).map(<[f32]>::to_vec));
        cs.extend(zc.data().chunks(d).map(<[f32]>::to_vec));
    }
    let mut rng = Rng::for_stream(seed, INIT_STREAM);
    let mut pick = |rows: &mut Vec<Vec<f32>>| {
        rng.shuffle(rows);
        let mut out = Vec::with_capacity(cfg.codebook_size * d);
        for k in 0..cfg.codebook_size {
            let row = &rows[k % rows.len()];
            // Repeated rows (tiny first batch) get jittered apart.
            let jitter = if k >= rows.len() { 1e-2 } else { 0.0 };
            out.extend(row.iter().map(|v| v + jitter * rng.normal() as f32));
        }
        out
    };
    let image = pick(&mut xs);
    let cond = pick(&mut cs);
    model.set_codebooks(image, cond)
}

/// Moves every unused code onto the encoder output of a random token of a
/// random training sample.
fn restart_dead_codes(
    model: &mut IqVae,
    data: &[PairedSample],
    image_used: &[bool],
    cond_used: &[bool],
    rng: &mut Rng,
) -> Result<()> {
    let d = model.config().latent_dim;
    let tokens = model.config().tokens();
    let mut image = model.image_codebook().embeddings().data().to_vec();
    let mut cond = model.cond_codebook().embeddings().data().to_vec();
    for (book, used, pick_image) in [(&mut image, image_used, true), (&mut cond, cond_used, false)] {
        for k in (0..used.len()).filter(|&k| !used[k]) {
            let s = &data[rng.below(data.len() as u64) as usize];
            let t = rng.below(tokens as u64) as usize;
            let (zx, zc) = model.encode(&s.image, &s.condition_unit())?;
            let z = if pick_image { zx } else { zc };
            book[k * d..(k + 1) * d].copy_from_slice(z.row(t));
        }
    }
    model.set_codebooks(image, cond)
}

/// Stage 1: trains an [`IqVae`] on `data`. `log` sees each epoch's metrics
/// as soon as it completes.
pub fn train_iqvae(
    data: &[PairedSample],
    model_cfg: &VaeConfig,
    cfg: &VaeTrainConfig,
    seed: u64,
    mut log: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<(IqVae, Vec<EpochMetrics>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut model = IqVae::new(model_cfg.clone(), seed)?;
    let mut shuffle_rng = Rng::for_stream(seed, SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..data.len()).collect();
    shuffle_rng.shuffle(&mut order);
    {
        let first: Vec<&PairedSample> = order.iter().take(cfg.batch_size).map(|&i| &data[i]).collect();
        init_codebooks(&mut model, &first, seed)?;
    }
    let mut opt = AdamW::new(cfg.optim)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;

    for epoch in 0..cfg.epochs {
        if epoch > 0 {
            shuffle_rng.shuffle(&mut order);
        }
        let mut sums = [0.0f64; 4];
        let mut used = vec![false; model_cfg.codebook_size];
        let mut cond_used = vec![false; model_cfg.codebook_size];
        for chunk in order.chunks(cfg.batch_size) {
            let dir_seed = Rng::for_stream(seed ^ PROJECTION_STREAM, step).next_u64();
            let proj = sample_directions(model_cfg.latent_dim, cfg.projections, dir_seed)?;
            let outs = par::try_map_indexed(chunk.len(), |i| {
                sample_step(&model, &data[chunk[i]], &cfg.weights, &proj)
            })
            .map_err(|e| diverged(epoch, e))?;
            let mut grads = Vec::with_capacity(outs.len());
            for o in outs {
                for (s, v) in sums.iter_mut().zip([o.total, o.reg, o.recon, o.quan]) {
                    *s += v;
                }
                for t in o.image_tokens {
                    used[t] = true;
                }
                for t in o.cond_tokens {
                    cond_used[t] = true;
                }
                grads.push(o.grads);
            }
            let grads = mean_grads(grads);
            opt.step(model.params_mut().tensors_mut(), &grads)?;
            step += 1;
        }
        let n = data.len() as f64;
        let m = EpochMetrics {
            epoch,
            l_total: sums[0] / n,
            l_reg: sums[1] / n,
            l_recon: sums[2] / n,
            l_quan: sums[3] / n,
            codebook_usage: used.iter().filter(|u| **u).count() as f64 / used.len() as f64,
        };
        if sums.iter().any(|v| !v.is_finite()) {
            return Err(diverged(epoch, Error::NonFinite { op: "iqvae_loss" }));
        }
        log(&m)?;
        history.push(m);
        if cfg.restart_dead_codes && epoch + 1 < cfg.epochs {
            let mut rng = Rng::for_stream(seed ^ RESTART_STREAM, epoch as u64);
            restart_dead_codes(&mut model, data, &used, &cond_used, &mut rng)?;
        }
    }
    Ok((model, history))
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged {
            stage: "iqvae epoch",
            at: epoch,
            source: Box::new(e),
        },
        other => other,
    }
}

/// Held-out diagnostics for a trained [`IqVae`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeEval {
    /// Per-pixel image reconstruction MSE.
    pub recon_mse: f64,
    /// Mean sliced GW between each sample's condition and image latents.
    pub latent_sgw: f64,
    pub image_usage: f64,
    pub cond_usage: f64,
}

pub fn evaluate_iqvae(model: &IqVae, data: &[PairedSample], proj: &ProjectionSet) -> Result<VaeEval> {
    if data.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let cfg = model.config();
    let (icb, ccb) = (model.image_codebook(), model.cond_codebook());
    let per = par::try_map_indexed(data.len(), |i| -> Result<_> {
        let s = &data[i];
        let (zx, zc) = model.encode(&s.image, &s.condition_unit())?;
        let qx = quantize(&zx, &icb, cfg.commit_beta)?;
        let qc = quantize(&zc, &ccb, cfg.commit_beta)?;
        let recon = model.decode(&qx.quantized, &zc)?;
        let mse = recon
            .iter()
            .zip(&s.image)
            .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
            .sum::<f64>()
            / recon.len() as f64;
        let n = cfg.tokens();
        let pc = PointSet::from_f32(zc.data(), n, cfg.latent_dim, Domain::Condition)?;
        let px = PointSet::from_f32(zx.data(), n, cfg.latent_dim, Domain::Image)?;
        Ok((mse, sliced_gw(&pc, &px, proj)?, qx.indices, qc.indices))
    })?;
    let mut image_used = vec![false; cfg.codebook_size];
    let mut cond_used = vec![false; cfg.codebook_size];
    let (mut mse, mut sgw) = (0.0, 0.0);
    for (m, s, ix, ic) in per {
        mse += m;
        sgw += s;
        ix.into_iter().for_each(|t| image_used[t] = true);
        ic.into_iter().for_each(|t| cond_used[t] = true);
    }
    let frac = |u: &[bool]| u.iter().filter(|x| **x).count() as f64 / u.len() as f64;
    let n = data.len() as f64;
    Ok(VaeEval {
        recon_mse: mse / n,
        latent_sgw: sgw / n,
        image_usage: frac(&image_used),
        cond_usage: frac(&cond_used),
    })
}
