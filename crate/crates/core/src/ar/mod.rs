//! Causal transformer over image tokens with a condition-token prefix.
//!
//! Input layout for a pair with `m` condition and `n` image tokens:
//!
//! ```text
//! [c_1 .. c_m | START | x_1 .. x_{n-1}]
//! ```
//!
//! Condition tokens live at a vocabulary offset of `image_vocab`, the start
//! token follows them. The condition prefix attends within itself; every
//! later position attends to the whole prefix and causally to the image
//! segment. The hidden state at `START + t` predicts `x_{t+1}`.

mod train;

pub use train::{train_ar, ArStepMetrics, ArTrainConfig, TokenPair};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::nn::{Bound, LayerNorm, Linear, ParamId, Params};
use crate::tensor::{Graph, Tensor, Var};

const MASKED: f32 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArConfig {
    pub image_vocab: usize,
    pub cond_vocab: usize,
    pub cond_len: usize,
    pub image_len: usize,
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Feed-forward hidden size as a multiple of `width`.
    pub mlp_ratio: usize,
    pub init_std: f64,
}

impl Default for ArConfig {
    fn default() -> Self {
        ArConfig {
            image_vocab: 32,
            cond_vocab: 32,
            cond_len: 16,
            image_len: 16,
            width: 64,
            heads: 4,
            blocks: 2,
            mlp_ratio: 4,
            init_std: 0.02,
        }
    }
}

impl ArConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_vocab < 2 || self.cond_vocab < 1 {
            return Err(Error::invalid("need image_vocab >= 2 and cond_vocab >= 1"));
        }
        if self.image_len == 0 || self.cond_len == 0 {
            return Err(Error::invalid("sequence lengths must be >= 1"));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::invalid(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.blocks == 0 || self.mlp_ratio == 0 || !(self.init_std > 0.0) {
            return Err(Error::invalid("blocks, mlp_ratio and init_std must be positive"));
        }
        Ok(())
    }

    pub fn start_token(&self) -> usize {
        self.image_vocab + self.cond_vocab
    }

    pub fn vocab(&self) -> usize {
        self.image_vocab + self.cond_vocab + 1
    }

    /// Longest input: prefix, start token and all but the last image token.
    pub fn max_positions(&self) -> usize {
        self.cond_len + self.image_len
    }
}

#[derive(Debug, Clone, Copy)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// An input position whose embedding comes from a `[1, vocab]` row (a
/// one-hot, possibly straight-through) instead of a token lookup.
#[derive(Debug, Clone, Copy)]
pub struct InputOverride {
    /// Image position `t`, i.e. the input slot of `x_{t+1}` in 1-based terms.
    pub image_pos: usize,
    pub row: Var,
}

#[derive(Debug, Clone)]
pub struct ArModel {
    cfg: ArConfig,
    params: Params,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
}

impl ArModel {
    /// GPT-2 style initialization with a zero output head, so an untrained
    /// model predicts the uniform distribution.
    pub fn new(cfg: ArConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let mut params = Params::new();
        let (w, std) = (cfg.width, cfg.init_std);
        let resid_std = std / (2.0 * cfg.blocks as f64).sqrt();
        let tok_emb = params.add_normal("tok_emb", &[cfg.vocab(), w], std, &mut rng);
        let pos_emb = params.add_normal("pos_emb", &[cfg.max_positions(), w], std, &mut rng);
        let blocks = (0..cfg.blocks)
            .map(|b| {
                let name = |s: &str| format!("block{b}.{s}");
                Block {
                    ln1: LayerNorm::new(&mut params, &name("ln1"), w),
                    qkv: Linear::new(&mut params, &name("qkv"), w, 3 * w, std, &mut rng),
                    proj: Linear::new(&mut params, &name("proj"), w, w, resid_std, &mut rng),
                    ln2: LayerNorm::new(&mut params, &name("ln2"), w),
                    fc1: Linear::new(&mut params, &name("fc1"), w, cfg.mlp_ratio * w, std, &mut rng),
                    fc2: Linear::new(&mut params, &name("fc2"), cfg.mlp_ratio * w, w, resid_std, &mut rng),
                }
            })
            .collect();
        let ln_f = LayerNorm::new(&mut params, "ln_f", w);
        let head = Linear::zeros(&mut params, "head", w, cfg.image_vocab);
        Ok(ArModel {
            cfg,
            params,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            head,
        })
    }

    pub fn from_records(cfg: ArConfig, records: &[(String, Tensor)]) -> Result<Self> {
        let mut model = ArModel::new(cfg, 0)?;
        model.params.load_named(records)?;
        Ok(model)
    }

    pub fn to_records(&self) -> Vec<(String, Tensor)> {
        self.params.to_records()
    }

    pub fn config(&self) -> &ArConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn token_embeddings(&self) -> ParamId {
        self.tok_emb
    }

    fn check_tokens(&self, cond: &[usize], image: &[usize]) -> Result<()> {
        if cond.len() != self.cfg.cond_len {
            return Err(Error::invalid(format!(
                "expected {} condition tokens, got {}",
                self.cfg.cond_len,
                cond.len()
            )));
        }
        if image.len() > self.cfg.image_len {
            return Err(Error::invalid(format!(
                "image prefix of {} tokens exceeds maximum {}",
                image.len(),
                self.cfg.image_len
            )));
        }
        if let Some(&t) = cond.iter().find(|&&t| t >= self.cfg.cond_vocab) {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab: self.cfg.cond_vocab,
            });
        }
        if let Some(&t) = image.iter().find(|&&t| t >= self.cfg.image_vocab) {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab: self.cfg.image_vocab,
            });
        }
        Ok(())
    }

    /// Additive mask: prefix rows see the prefix, later rows see everything
    /// up to and including themselves.
    fn mask(&self, len: usize) -> Vec<f32> {
        let m = self.cfg.cond_len;
        let mut out = vec![0.0; len * len];
        for i in 0..len {
            let visible = if i < m { m } else { i + 1 };
            for v in &mut out[i * len + visible..(i + 1) * len] {
                *v = MASKED;
            }
        }
        out
    }

    fn embed(&self, g: &mut Graph<f32>, p: &Bound, seq: &[usize], overrides: &[InputOverride]) -> Result<Var> {
        let offset = self.cfg.cond_len + 1;
        let mut pieces = Vec::new();
        let mut run_start = 0;
        let mut sorted: Vec<&InputOverride> = overrides.iter().collect();
        sorted.sort_by_key(|o| o.image_pos);
        for o in sorted {
            let at = offset + o.image_pos;
            if at >= seq.len() || at < run_start {
                return Err(Error::invalid(format!(
                    "override at image position {} is outside the input",
                    o.image_pos
                )));
            }
            if at > run_start {
                pieces.push(g.embedding(p[self.tok_emb], &seq[run_start..at])?);
            }
            pieces.push(g.matmul(o.row, p[self.tok_emb])?);
            run_start = at + 1;
        }
        if run_start < seq.len() {
            pieces.push(g.embedding(p[self.tok_emb], &seq[run_start..])?);
        }
        let tok = if pieces.len() == 1 { pieces[0] } else { g.concat(&pieces, 0)? };
        let positions: Vec<usize> = (0..seq.len()).collect();
        let pos = g.embedding(p[self.pos_emb], &positions)?;
        g.add(tok, pos)
    }

    fn attention(&self, g: &mut Graph<f32>, p: &Bound, b: &Block, x: Var, mask: Var) -> Result<Var> {
        let w = self.cfg.width;
        let dh = w / self.cfg.heads;
        let qkv = b.qkv.forward(g, p, x)?;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let q = g.slice(qkv, 1, h * dh, dh)?;
            let k = g.slice(qkv, 1, w + h * dh, dh)?;
            let v = g.slice(qkv, 1, 2 * w + h * dh, dh)?;
            let kt = g.transpose(k)?;
            let s = g.matmul(q, kt)?;
            let s = g.scale(s, scale)?;
            let s = g.add(s, mask)?;
            let a = g.softmax(s, 1)?;
            heads.push(g.matmul(a, v)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 1)? };
        b.proj.forward(g, p, cat)
    }

    /// Input token ids: offset condition tokens, start token, image tokens.
    pub fn input_sequence(&self, cond: &[usize], image_inputs: &[usize]) -> Vec<usize> {
        let mut seq: Vec<usize> = cond.iter().map(|c| c + self.cfg.image_vocab).collect();
        seq.push(self.cfg.start_token());
        seq.extend_from_slice(image_inputs);
        seq
    }

    /// Logits `[k + 1, image_vocab]` for image positions `0..=k`, where
    /// `k = image_inputs.len() < image_len`.
    pub fn logits(
        &self,
        g: &mut Graph<f32>,
        p: &Bound,
        cond: &[usize],
        image_inputs: &[usize],
        overrides: &[InputOverride],
    ) -> Result<Var> {
        self.check_tokens(cond, image_inputs)?;
        if image_inputs.len() >= self.cfg.image_len {
            return Err(Error::invalid("at most image_len - 1 image tokens are inputs"));
        }
        let seq = self.input_sequence(cond, image_inputs);
        let len = seq.len();
        let mut x = self.embed(g, p, &seq, overrides)?;
        let mask = g.constant(&[len, len], self.mask(len))?;
        for b in &self.blocks {
            let h = b.ln1.forward(g, p, x)?;
            let a = self.attention(g, p, b, h, mask)?;
            x = g.add(x, a)?;
            let h = b.ln2.forward(g, p, x)?;
            let h = b.fc1.forward(g, p, h)?;
            let h = g.gelu(h)?;
            let h = b.fc2.forward(g, p, h)?;
            x = g.add(x, h)?;
        }
        let out = g.slice(x, 0, self.cfg.cond_len, image_inputs.len() + 1)?;
        let out = self.ln_f.forward(g, p, out)?;
        self.head.forward(g, p, out)
    }

    /// Teacher-forced loss: mean `-log p(x_t | C, x_<t)` over the full sequence.
    pub fn nll_var(&self, g: &mut Graph<f32>, p: &Bound, cond: &[usize], image: &[usize], overrides: &[InputOverride]) -> Result<Var> {
        if image.len() != self.cfg.image_len {
            return Err(Error::invalid(format!(
                "expected {} image tokens, got {}",
                self.cfg.image_len,
                image.len()
            )));
        }
        let logits = self.logits(g, p, cond, &image[..image.len() - 1], overrides)?;
        g.cross_entropy(logits, image)
    }

    /// Distributions for image positions `0..min(prefix.len() + 1, n)`;
    /// position `t` depends only on `cond` and `prefix[..t]`.
    pub fn forward(&self, cond: &[usize], prefix: &[usize]) -> Result<Vec<Vec<f32>>> {
        self.check_tokens(cond, prefix)?;
        let inputs = &prefix[..prefix.len().min(self.cfg.image_len - 1)];
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let logits = self.logits(&mut g, &p, cond, inputs, &[])?;
        let probs = g.softmax(logits, 1)?;
        Ok(g.value(probs)
            .chunks(self.cfg.image_vocab)
            .map(<[f32]>::to_vec)
            .collect())
    }

    /// Mean negative log-likelihood of `image` given `cond`.
    pub fn nll(&self, cond: &[usize], image: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let v = self.nll_var(&mut g, &p, cond, image, &[])?;
        Ok(g.scalar(v) as f64)
    }

    /// Left-to-right generation by top-k sampling from the growing prefix.
    pub fn generate(&self, cond: &[usize], k: usize, temperature: f64, rng: &mut Rng) -> Result<Vec<usize>> {
        check_topk(k, self.cfg.image_vocab, temperature)?;
        let mut out = Vec::with_capacity(self.cfg.image_len);
        while out.len() < self.cfg.image_len {
            let dists = self.forward(cond, &out)?;
            let last = dists.last().expect("forward returns at least one position");
            out.push(sample_topk(last, k, temperature, rng)?);
        }
        Ok(out)
    }

    /// NLL of `gold` under distributions produced while the model feeds back
    /// its own top-k samples instead of the gold prefix.
    pub fn free_running_nll(&self, cond: &[usize], gold: &[usize], k: usize, temperature: f64, rng: &mut Rng) -> Result<f64> {
        if gold.len() != self.cfg.image_len {
            return Err(Error::invalid("gold sequence has the wrong length"));
        }
        check_topk(k, self.cfg.image_vocab, temperature)?;
        let mut prefix = Vec::with_capacity(gold.len());
        let mut total = 0.0;
        for &target in gold {
            let dists = self.forward(cond, &prefix)?;
            let last = dists.last().expect("at least one position");
            total -= (last[target] as f64).max(1e-12).ln();
            prefix.push(sample_topk(last, k, temperature, rng)?);
        }
        Ok(total / gold.len() as f64)
    }
}

fn check_topk(k: usize, vocab: usize, temperature: f64) -> Result<()> {
    if k < 1 || k > vocab {
        return Err(Error::invalid(format!("top-k needs 1 <= k <= {vocab}, got {k}")));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::invalid(format!("temperature must be > 0, got {temperature}")));
    }
    Ok(())
}

/// Draws from the `k` most probable tokens after dividing log-probabilities
/// by `temperature`. Ties in probability keep the lower index.
pub fn sample_topk(dist: &[f32], k: usize, temperature: f64, rng: &mut Rng) -> Result<usize> {
    check_topk(k, dist.len(), temperature)?;
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]));
    let top = &order[..k];
    let logits: Vec<f64> = top.iter().map(|&i| (dist[i] as f64).ln() / temperature).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok(top[0]);
    }
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.next_f64() * total;
    for (&i, w) in top.iter().zip(&weights) {
        if u < *w {
            return Ok(i);
        }
        u -= w;
    }
    Ok(*top.iter().zip(&weights).rev().find(|(_, w)| **w > 0.0).map(|(i, _)| i).unwrap_or(&top[0]))
}
