//! Run configuration: every tunable of both stages, evaluation and the
//! ablation grid, stored as TOML.
//!
//! Every section and key is optional; missing values take the defaults
//! below. Unknown keys and ill-typed values are rejected with their full
//! key path (for example `gumbel.every`).
//!
//! ```toml
//! seed = 0
//!
//! [data]          # dataset generated by `gen-data`
//! n_samples = 512
//! seed = 0
//! mode = "edge"   # or "segmentation"
//!
//! [vae]           # patch = F, latent_dim = d, codebook_size = K
//! [vae_train]     # epochs, batch_size, projections, restart_dead_codes
//! [vae_train.weights]   # reg, recon, quan (perc and dis must stay 0)
//! [vae_train.optim]     # lr, beta1, beta2, eps, weight_decay
//! [ar]            # width, heads, blocks, mlp_ratio, init_std
//! [ar_train]      # steps, batch_size, [ar_train.optim]
//! [gumbel]        # enabled, tau_start, tau_end, threshold, every, mix_max
//! [sample]        # k, temperature, count
//! [eval]          # holdout, projections, projection_seed, conditions, diversity_samples
//! [ablate]        # seeds
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ar::{ArConfig, ArTrainConfig};
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::gumbel::GumbelConfig;
use crate::io::write_atomic;
use crate::vae::{VaeConfig, VaeTrainConfig};

/// Transformer shape; vocabularies and lengths follow the IQ-VAE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArSection {
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    pub init_std: f64,
}

impl Default for ArSection {
    fn default() -> Self {
        let d = ArConfig::default();
        ArSection {
            width: d.width,
            heads: d.heads,
            blocks: d.blocks,
            mlp_ratio: d.mlp_ratio,
            init_std: d.init_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub k: usize,
    pub temperature: f64,
    /// Images drawn per condition.
    pub count: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            k: 8,
            temperature: 1.0,
            count: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Trailing samples of the dataset kept out of both training stages.
    pub holdout: usize,
    /// Directions for the sliced metrics.
    pub projections: usize,
    pub projection_seed: u64,
    /// Held-out conditions used for generation metrics.
    pub conditions: usize,
    /// Samples per condition for the pairwise-MSE spread.
    pub diversity_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            holdout: 64,
            projections: 512,
            projection_seed: 0x5EED,
            conditions: 64,
            diversity_samples: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig { seeds: vec![0, 1, 2] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Training seed (model init, batching, projections, sampling).
    #[serde(with = "seed_serde")]
    pub seed: u64,
    pub data: DatasetSpec,
    pub vae: VaeConfig,
    pub vae_train: VaeTrainConfig,
    pub ar: ArSection,
    pub ar_train: ArTrainConfig,
    pub gumbel: GumbelConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: DatasetSpec::default(),
            vae: VaeConfig::default(),
            vae_train: VaeTrainConfig::default(),
            ar: ArSection::default(),
            ar_train: ArTrainConfig::default(),
            gumbel: GumbelConfig::default(),
            sample: SampleConfig::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

fn at(path: &str, e: Error) -> Error {
    Error::Config {
        path: path.to_string(),
        detail: e.to_string(),
    }
}

impl RunConfig {
    pub fn ar_config(&self) -> ArConfig {
        ArConfig {
            image_vocab: self.vae.codebook_size,
            cond_vocab: self.vae.codebook_size,
            cond_len: self.vae.tokens(),
            image_len: self.vae.tokens(),
            width: self.ar.width,
            heads: self.ar.heads,
            blocks: self.ar.blocks,
            mlp_ratio: self.ar.mlp_ratio,
            init_std: self.ar.init_std,
        }
    }

    /// Semantic checks; errors name the offending section.
    pub fn validate(&self) -> Result<()> {
        self.data.validate().map_err(|e| at("data", e))?;
        self.vae.validate().map_err(|e| at("vae", e))?;
        self.vae_train.validate().map_err(|e| at("vae_train", e))?;
        self.ar_config().validate().map_err(|e| at("ar", e))?;
        if self.ar_train.steps == 0 || self.ar_train.batch_size == 0 {
            return Err(at("ar_train", Error::invalid("steps and batch_size must be >= 1")));
        }
        self.gumbel.validate().map_err(|e| at("gumbel", e))?;
        let s = &self.sample;
        if s.k == 0 || s.k > self.vae.codebook_size || !(s.temperature > 0.0) || s.count == 0 {
            return Err(at(
                "sample",
                Error::invalid(format!(
                    "need 1 <= k <= {}, temperature > 0 and count >= 1",
                    self.vae.codebook_size
                )),
            ));
        }
        let e = &self.eval;
        if e.projections == 0 || e.conditions == 0 || e.diversity_samples < 2 {
            return Err(at(
                "eval",
                Error::invalid("projections and conditions must be >= 1, diversity_samples >= 2"),
            ));
        }
        if e.holdout == 0 || e.holdout >= self.data.n_samples {
            return Err(at(
                "eval.holdout",
                Error::invalid(format!(
                    "holdout {} must be in 1..{} (data.n_samples)",
                    e.holdout, self.data.n_samples
                )),
            ));
        }
        if self.ablate.seeds.is_empty() {
            return Err(at("ablate.seeds", Error::invalid("need at least one seed")));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Config {
            path: "<document>".into(),
            detail: e.message().to_string(),
        })?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config {
                path,
                detail: e.into_inner().message().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config {
            path: "<document>".into(),
            detail: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::from_toml(&text).map_err(|e| match e {
            Error::Config { path: key, detail } => Error::Config {
                path: format!("{}: {key}", path.display()),
                detail,
            },
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_toml()?.as_bytes())
    }
}

/// TOML integers are signed 64-bit; seeds above `i64::MAX` are written as
/// strings. Both forms are accepted on input.
pub mod seed_serde {
    use serde::de::{self, Visitor};
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        match i64::try_from(*v) {
            Ok(i) => s.serialize_i64(i),
            Err(_) => s.serialize_str(&v.to_string()),
        }
    }

    struct SeedVisitor;

    impl Visitor<'_> for SeedVisitor {
        type Value = u64;

        fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
            f.write_str("a non-negative integer seed")
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> Result<u64, E> {
            u64::try_from(v).map_err(|_| E::custom(format!("seed {v} is negative")))
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> Result<u64, E> {
            Ok(v)
        }

        fn visit_str<E: de::Error>(self, v: &str) -> Result<u64, E> {
            v.parse().map_err(|_| E::custom(format!("`{v}` is not a u64 seed")))
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        d.deserialize_any(SeedVisitor)
    }
}
