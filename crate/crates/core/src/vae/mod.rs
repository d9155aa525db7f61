//! Integrated-quantization VAE.
//!
//! Two patch encoders map an image and its condition map to token feature
//! grids, each quantized against its own codebook. The image decoder sees
//! the quantized image features concatenated with the condition features;
//! a second decoder reconstructs the condition from its own tokens. The
//! sliced GW discrepancy between the two unquantized grids couples their
//! geometry.

mod codebook;
mod train;

pub use codebook::{dequantize, quantize, Codebook, QuantizeResult};
pub use train::{evaluate_iqvae, train_iqvae, EpochMetrics, VaeEval, VaeTrainConfig};

use serde::{Deserialize, Serialize};

use crate::data::{PairedSample, SIDE};
use crate::error::{Error, Result};
use crate::ot::ProjectionSet;
use crate::rng::Rng;
use crate::tensor::nn::{Bound, Linear, ParamId, Params};
use crate::tensor::{Graph, Tensor, Var};

/// Weights of the composite objective. Perceptual and adversarial terms are
/// not implemented, so their weights must stay zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub reg: f64,
    pub recon: f64,
    pub quan: f64,
    pub perc: f64,
    pub dis: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            reg: 1.0,
            recon: 1.0,
            quan: 1.0,
            perc: 0.0,
            dis: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.reg, self.recon, self.quan, self.perc, self.dis];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("loss weights must be finite and >= 0"));
        }
        if self.perc != 0.0 || self.dis != 0.0 {
            return Err(Error::invalid("perceptual and discriminator weights must be 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    /// Input side length in pixels.
    pub side: usize,
    /// Downsampling factor F (patch side).
    pub patch: usize,
    pub hidden: usize,
    /// Codebook embedding dimension d.
    pub latent_dim: usize,
    /// Codebook size K (same for both domains).
    pub codebook_size: usize,
    /// Commitment coefficient β_c.
    pub commit_beta: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            side: SIDE,
            patch: 4,
            hidden: 64,
            latent_dim: 16,
            codebook_size: 32,
            commit_beta: 0.25,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.side % self.patch != 0 {
            return Err(Error::invalid(format!(
                "input side {} is not divisible by downsampling factor {}",
                self.side, self.patch
            )));
        }
        if self.codebook_size < 2 || self.latent_dim == 0 || self.hidden == 0 {
            return Err(Error::invalid("need codebook_size >= 2, latent_dim >= 1, hidden >= 1"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.side / self.patch
    }

    /// Tokens per sequence: `(H/F)·(W/F)`.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_pixels(&self) -> usize {
        self.patch * self.patch
    }
}

/// Splits a row-major `side x side` grid into `F x F` patches in raster order.
pub fn patchify(img: &[f32], side: usize, patch: usize) -> Result<Vec<f32>> {
    if patch == 0 || side % patch != 0 {
        return Err(Error::invalid(format!("side {side} not divisible by {patch}")));
    }
    if img.len() != side * side {
        return Err(Error::invalid(format!(
            "expected {side}x{side} input, got {} values",
            img.len()
        )));
    }
    let grid = side / patch;
    let mut out = Vec::with_capacity(img.len());
    for py in 0..grid {
        for px in 0..grid {
            for y in 0..patch {
                let row = (py * patch + y) * side + px * patch;
                out.extend_from_slice(&img[row..row + patch]);
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &[f32], side: usize, patch: usize) -> Vec<f32> {
    let grid = side / patch;
    let mut out = vec![0.0; side * side];
    let mut it = patches.iter();
    for py in 0..grid {
        for px in 0..grid {
            for y in 0..patch {
                for x in 0..patch {
                    out[(py * patch + y) * side + px * patch + x] = *it.next().unwrap();
                }
            }
        }
    }
    out
}

/// Per-position three-layer network with GELU between layers.
#[derive(Debug, Clone, Copy)]
struct Mlp {
    layers: [Linear; 3],
}

impl Mlp {
    fn new(params: &mut Params, name: &str, dims: [usize; 4], rng: &mut Rng) -> Self {
        let layer = |p: &mut Params, i: usize, rng: &mut Rng| {
            let std = (2.0 / dims[i] as f64).sqrt();
            Linear::new(p, &format!("{name}.l{i}"), dims[i], dims[i + 1], std, rng)
        };
        Mlp {
            layers: [layer(params, 0, rng), layer(params, 1, rng), layer(params, 2, rng)],
        }
    }

    fn forward(&self, g: &mut Graph<f32>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.layers[0].forward(g, p, x)?;
        let h = g.gelu(h)?;
        let h = self.layers[1].forward(g, p, h)?;
        let h = g.gelu(h)?;
        self.layers[2].forward(g, p, h)
    }
}

/// Graph handles produced by one forward pass of [`IqVae::forward`].
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub z_image: Var,
    pub z_cond: Var,
    pub recon_image: Var,
    pub recon_cond: Var,
    pub l_reg: Var,
    pub l_recon: Var,
    pub l_quan: Var,
    pub total: Var,
    pub image_tokens: Vec<usize>,
    pub cond_tokens: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct IqVae {
    cfg: VaeConfig,
    params: Params,
    enc_x: Mlp,
    enc_c: Mlp,
    dec_x: Mlp,
    dec_c: Mlp,
    cb_x: ParamId,
    cb_c: ParamId,
}

impl IqVae {
    pub fn new(cfg: VaeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let mut params = Params::new();
        let (pp, h, d) = (cfg.patch_pixels(), cfg.hidden, cfg.latent_dim);
        let enc_x = Mlp::new(&mut params, "enc_x", [pp, h, h, d], &mut rng);
        let enc_c = Mlp::new(&mut params, "enc_c", [pp, h, h, d], &mut rng);
        let dec_x = Mlp::new(&mut params, "dec_x", [2 * d, h, h, pp], &mut rng);
        let dec_c = Mlp::new(&mut params, "dec_c", [d, h, h, pp], &mut rng);
        let cb_x = params.add_normal("codebook_x", &[cfg.codebook_size, d], 1.0, &mut rng);
        let cb_c = params.add_normal("codebook_c", &[cfg.codebook_size, d], 1.0, &mut rng);
        Ok(IqVae {
            cfg,
            params,
            enc_x,
            enc_c,
            dec_x,
            dec_c,
            cb_x,
            cb_c,
        })
    }

    /// Rebuilds a model from checkpoint records written by [`to_records`](Self::to_records).
    pub fn from_records(cfg: VaeConfig, records: &[(String, Tensor)]) -> Result<Self> {
        let mut model = IqVae::new(cfg, 0)?;
        model.params.load_named(records)?;
        Ok(model)
    }

    pub fn to_records(&self) -> Vec<(String, Tensor)> {
        self.params.to_records()
    }

    pub fn config(&self) -> &VaeConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn image_codebook(&self) -> Codebook {
        Codebook::new(self.params.get(self.cb_x).clone()).expect("codebook is valid")
    }

    pub fn cond_codebook(&self) -> Codebook {
        Codebook::new(self.params.get(self.cb_c).clone()).expect("codebook is valid")
    }

    pub(crate) fn set_codebooks(&mut self, image: Vec<f32>, cond: Vec<f32>) -> Result<()> {
        let shape = [self.cfg.codebook_size, self.cfg.latent_dim];
        *self.params.get_mut(self.cb_x) = Tensor::new(&shape, image)?;
        *self.params.get_mut(self.cb_c) = Tensor::new(&shape, cond)?;
        Ok(())
    }

    fn input(&self, g: &mut Graph<f32>, grid: &[f32]) -> Result<Var> {
        let patches = patchify(grid, self.cfg.side, self.cfg.patch)?;
        g.constant(&[self.cfg.tokens(), self.cfg.patch_pixels()], patches)
    }

    /// Encoder outputs `(Zx, Zc)`, each `[(H/F)·(W/F), d]`.
    pub fn encode_vars(&self, g: &mut Graph<f32>, p: &Bound, image: &[f32], cond: &[f32]) -> Result<(Var, Var)> {
        let xi = self.input(g, image)?;
        let ci = self.input(g, cond)?;
        let zx = self.enc_x.forward(g, p, xi)?;
        let zc = self.enc_c.forward(g, p, ci)?;
        Ok((zx, zc))
    }

    /// Nearest-codebook quantization inside a graph. Returns the
    /// straight-through features, the commitment loss and the indices.
    fn quantize_vars(&self, g: &mut Graph<f32>, p: &Bound, z: Var, book: ParamId) -> Result<(Var, Var, Vec<usize>)> {
        let d = self.cfg.latent_dim;
        let cb = Codebook::from_slice(g.value(p[book]), d)?;
        let idx = cb.nearest_all(g.value(z));
        let q = g.embedding(p[book], &idx)?;
        let z_sg = g.detach(z);
        let q_sg = g.detach(q);
        let codebook_term = g.mse(q, z_sg)?;
        let commit_term = g.mse(z, q_sg)?;
        let commit_term = g.scale(commit_term, self.cfg.commit_beta as f32)?;
        let loss = g.add(codebook_term, commit_term)?;
        let st = g.straight_through(q, z)?;
        Ok((st, loss, idx))
    }

    fn decode_image_vars(&self, g: &mut Graph<f32>, p: &Bound, zq_image: Var, z_cond: Var) -> Result<Var> {
        let h = g.concat(&[zq_image, z_cond], 1)?;
        let out = self.dec_x.forward(g, p, h)?;
        g.sigmoid(out)
    }

    fn decode_cond_vars(&self, g: &mut Graph<f32>, p: &Bound, zq_cond: Var) -> Result<Var> {
        let out = self.dec_c.forward(g, p, zq_cond)?;
        g.sigmoid(out)
    }

    /// Full forward pass for one sample with the composite loss
    /// `λ1·L_reg + λ2·L_recon + λ3·L_quan`.
    pub fn forward(
        &self,
        g: &mut Graph<f32>,
        p: &Bound,
        sample: &PairedSample,
        weights: &LossWeights,
        proj: &ProjectionSet,
    ) -> Result<ForwardVars> {
        let cond = sample.condition_unit();
        let (zx, zc) = self.encode_vars(g, p, &sample.image, &cond)?;
        let (qx, lqx, image_tokens) = self.quantize_vars(g, p, zx, self.cb_x)?;
        let (qc, lqc, cond_tokens) = self.quantize_vars(g, p, zc, self.cb_c)?;
        let recon_image = self.decode_image_vars(g, p, qx, zc)?;
        let recon_cond = self.decode_cond_vars(g, p, qc)?;

        let target_x = self.input(g, &sample.image)?;
        let target_c = self.input(g, &cond)?;
        let lrx = g.mse(recon_image, target_x)?;
        let lrc = g.mse(recon_cond, target_c)?;
        let l_recon = g.add(lrx, lrc)?;
        let l_quan = g.add(lqx, lqc)?;
        let l_reg = g.sliced_gw(zc, zx, proj)?;

        let a = g.scale(l_reg, weights.reg as f32)?;
        let b = g.scale(l_recon, weights.recon as f32)?;
        let c = g.scale(l_quan, weights.quan as f32)?;
        let ab = g.add(a, b)?;
        let total = g.add(ab, c)?;
        Ok(ForwardVars {
            z_image: zx,
            z_cond: zc,
            recon_image,
            recon_cond,
            l_reg,
            l_recon,
            l_quan,
            total,
            image_tokens,
            cond_tokens,
        })
    }

    /// Unquantized encoder features `(Zx, Zc)` as `[tokens, d]` tensors.
    pub fn encode(&self, image: &[f32], cond_unit: &[f32]) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let (zx, zc) = self.encode_vars(&mut g, &p, image, cond_unit)?;
        Ok((g.tensor(zx), g.tensor(zc)))
    }

    /// Token sequences `(condition, image)` for a sample.
    pub fn tokenize(&self, sample: &PairedSample) -> Result<(Vec<usize>, Vec<usize>)> {
        let (zx, zc) = self.encode(&sample.image, &sample.condition_unit())?;
        let cond = quantize(&zc, &self.cond_codebook(), self.cfg.commit_beta)?;
        let img = quantize(&zx, &self.image_codebook(), self.cfg.commit_beta)?;
        Ok((cond.indices, img.indices))
    }

    /// Condition features for decoding, from a condition map.
    pub fn condition_features(&self, cond_unit: &[f32]) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let ci = self.input(&mut g, cond_unit)?;
        let zc = self.enc_c.forward(&mut g, &p, ci)?;
        Ok(g.tensor(zc))
    }

    /// Decodes a quantized image grid together with condition features into
    /// a row-major `side x side` image in `[0, 1]`.
    pub fn decode(&self, zq_image: &Tensor, z_cond: &Tensor) -> Result<Vec<f32>> {
        if zq_image.shape() != z_cond.shape() {
            return Err(Error::shape(
                "decode",
                format!(
                    "image grid {:?} and condition grid {:?} are not aligned",
                    zq_image.shape(),
                    z_cond.shape()
                ),
            ));
        }
        let expected = [self.cfg.tokens(), self.cfg.latent_dim];
        if zq_image.shape() != expected {
            return Err(Error::shape(
                "decode",
                format!("expected grids of shape {expected:?}, got {:?}", zq_image.shape()),
            ));
        }
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let zi = g.leaf(zq_image);
        let zc = g.leaf(z_cond);
        let out = self.decode_image_vars(&mut g, &p, zi, zc)?;
        Ok(unpatchify(g.value(out), self.cfg.side, self.cfg.patch))
    }

    /// Image tokens plus a condition map to a decoded image.
    pub fn decode_tokens(&self, image_tokens: &[usize], cond_unit: &[f32]) -> Result<Vec<f32>> {
        let zq = dequantize(image_tokens, &self.image_codebook())?;
        let zc = self.condition_features(cond_unit)?;
        self.decode(&zq, &zc)
    }

    /// Encode, quantize and decode an image with its own condition.
    pub fn reconstruct(&self, sample: &PairedSample) -> Result<Vec<f32>> {
        let cond = sample.condition_unit();
        let (zx, zc) = self.encode(&sample.image, &cond)?;
        let q = quantize(&zx, &self.image_codebook(), self.cfg.commit_beta)?;
        self.decode(&q.quantized, &zc)
    }
}

/// Exposed for tests that need a zero final encoder layer.
#[doc(hidden)]
pub fn zero_encoder_outputs(model: &mut IqVae) {
    for enc in [model.enc_x, model.enc_c] {
        let last = enc.layers[2];
        model.params.get_mut(last.w).data_mut().fill(0.0);
        model.params.get_mut(last.b).data_mut().fill(0.0);
    }
}

#[cfg(test)]
mod tests;
