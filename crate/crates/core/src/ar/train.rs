use serde::{Deserialize, Serialize};

use super::{ArConfig, ArModel};
use crate::error::{Error, Result};
use crate::gumbel::{two_pass_step, GumbelConfig};
use crate::par;
use crate::rng::Rng;
use crate::tensor::nn::mean_grads;
use crate::tensor::{AdamW, AdamWConfig, Graph};
use crate::vae::Codebook;

const ORDER_STREAM: u64 = 11;
const GUMBEL_STREAM: u64 = 12;

/// Condition and image token sequences of one training pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenPair {
    pub cond: Vec<usize>,
    pub image: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optim: AdamWConfig,
}

impl Default for ArTrainConfig {
    fn default() -> Self {
        ArTrainConfig {
            steps: 600,
            batch_size: 16,
            optim: AdamWConfig {
                lr: 3e-3,
                ..AdamWConfig::default()
            },
        }
    }
}

/// One line of the stage-2 metrics stream. `mean_reliability` is only
/// measured on two-pass steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArStepMetrics {
    pub step: usize,
    pub nll: f64,
    pub gumbel_active_positions: usize,
    pub mean_reliability: Option<f64>,
    pub tau: f64,
    pub mix_prob: f64,
}

struct PairOut {
    nll: f64,
    active: usize,
    reliability: Option<f64>,
    grads: Vec<Vec<f32>>,
}

/// Stage 2: fits `p(x | C)` on token pairs. Steps selected by the Gumbel
/// config run the two-pass procedure against the image codebook `cb`; the
/// rest are teacher-forced.
pub fn train_ar(
    pairs: &[TokenPair],
    cfg: &ArConfig,
    train: &ArTrainConfig,
    gumbel: &GumbelConfig,
    cb: &Codebook,
    seed: u64,
    mut log: impl FnMut(&ArStepMetrics) -> Result<()>,
) -> Result<(ArModel, Vec<ArStepMetrics>)> {
    gumbel.validate()?;
    if train.steps == 0 || train.batch_size == 0 {
        return Err(Error::invalid("steps and batch_size must be >= 1"));
    }
    if pairs.is_empty() {
        return Err(Error::invalid("no token pairs to train on"));
    }
    if cb.size() != cfg.image_vocab {
        return Err(Error::invalid(format!(
            "codebook has {} entries, model vocabulary {}",
            cb.size(),
            cfg.image_vocab
        )));
    }
    let mut model = ArModel::new(cfg.clone(), seed)?;
    let mut opt = AdamW::new(train.optim)?;
    let mut order_rng = Rng::for_stream(seed, ORDER_STREAM);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut cursor = order.len();
    let mut history = Vec::with_capacity(train.steps);

    for step in 0..train.steps {
        let mut batch = Vec::with_capacity(train.batch_size);
        while batch.len() < train.batch_size {
            if cursor == order.len() {
                order_rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let two_pass = gumbel.is_gumbel_step(step);
        let tau = gumbel.tau(step, train.steps);
        let mix = if gumbel.enabled { gumbel.mix(step, train.steps) } else { 0.0 };
        let outs = par::try_map_indexed(batch.len(), |i| -> Result<PairOut> {
            let pair = &pairs[batch[i]];
            let mut g = Graph::new();
            let p = model.params().bind(&mut g);
            let (loss, active, reliability) = if two_pass {
                let mut rng = Rng::for_stream(seed ^ GUMBEL_STREAM, (step * train.batch_size + i) as u64);
                let r = two_pass_step(&model, &mut g, &p, &pair.cond, &pair.image, cb, gumbel, tau, mix, &mut rng)?;
                (r.loss, r.active_positions, Some(r.mean_reliability))
            } else {
                (model.nll_var(&mut g, &p, &pair.cond, &pair.image, &[])?, 0, None)
            };
            g.backward(loss)?;
            Ok(PairOut {
                nll: g.scalar(loss) as f64,
                active,
                reliability,
                grads: g.grads_of(p.vars()),
            })
        })
        .map_err(|e| match e {
            Error::NonFinite { .. } => Error::Diverged {
                stage: "ar step",
                at: step,
                source: Box::new(e),
            },
            other => other,
        })?;
        let n = outs.len() as f64;
        let mut nll = 0.0;
        let mut active = 0;
        let mut rel = 0.0;
        let mut grads = Vec::with_capacity(outs.len());
        for o in outs {
            nll += o.nll;
            active += o.active;
            rel += o.reliability.unwrap_or(0.0);
            grads.push(o.grads);
        }
        if !nll.is_finite() {
            return Err(Error::Diverged {
                stage: "ar step",
                at: step,
                source: Box::new(Error::NonFinite { op: "nll" }),
            });
        }
        opt.step(model.params_mut().tensors_mut(), &mean_grads(grads))?;
        let m = ArStepMetrics {
            step,
            nll: nll / n,
            gumbel_active_positions: active,
            mean_reliability: two_pass.then_some(rel / n),
            tau,
            mix_prob: mix,
        };
        log(&m)?;
        history.push(m);
    }
    Ok((model, history))
}
