//! Run directories and the stage-level operations behind the CLI.
//!
//! ```text
//! <iqvae run>/config.toml  metrics.jsonl  iqvae.ckpt
//! <ar run>/   config.toml  metrics.jsonl  iqvae.ckpt  ar.ckpt
//! ```
//!
//! A run's `config.toml` is the fully resolved [`RunConfig`]; feeding it
//! back reproduces `metrics.jsonl` byte for byte.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ar::{train_ar, ArModel, TokenPair};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::data::{generate_dataset, load_dataset, PairedSample, SIDE};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::ot::{gw_bruteforce, sample_directions, sliced_gw, sliced_wasserstein, Domain, PointSet, ProjectionSet};
use crate::par;
use crate::rng::Rng;
use crate::vae::{evaluate_iqvae, train_iqvae, IqVae};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const IQVAE_CKPT: &str = "iqvae.ckpt";
pub const AR_CKPT: &str = "ar.ckpt";

const FREE_RUN_STREAM: u64 = 21;
const GENERATE_STREAM: u64 = 22;
const DIVERSITY_STREAM: u64 = 23;

/// Appends one JSON object per line, flushing as it goes.
pub struct JsonLines {
    out: BufWriter<File>,
}

impl JsonLines {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(JsonLines {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn write<T: Serialize>(&mut self, value: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, value).map_err(|e| Error::format("metrics", e.to_string()))?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format("json", e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Dataset from `path`, or generated from `cfg.data` when no path is given.
pub fn load_or_generate(cfg: &RunConfig, path: Option<&Path>) -> Result<Vec<PairedSample>> {
    match path {
        Some(p) => load_dataset(p),
        None => generate_dataset(&cfg.data),
    }
}

/// Leading samples train, the last `eval.holdout` are held out.
pub fn split<'a>(cfg: &RunConfig, data: &'a [PairedSample]) -> Result<(&'a [PairedSample], &'a [PairedSample])> {
    let h = cfg.eval.holdout;
    if data.len() <= h {
        return Err(Error::Config {
            path: "eval.holdout".into(),
            detail: format!("dataset has {} samples, cannot hold out {h}", data.len()),
        });
    }
    Ok(data.split_at(data.len() - h))
}

fn require(path: PathBuf, stage: &'static str) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::MissingStage {
            stage,
            path: path.display().to_string(),
        })
    }
}

fn prepare_run(cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    cfg.save(&out.join(CONFIG_FILE))
}

/// Stage 1 into `out`: resolved config, per-epoch metrics, checkpoint.
pub fn run_train_iqvae(cfg: &RunConfig, data: &[PairedSample], out: &Path) -> Result<IqVae> {
    cfg.validate()?;
    prepare_run(cfg, out)?;
    let (train, _) = split(cfg, data)?;
    let mut metrics = JsonLines::create(&out.join(METRICS_FILE))?;
    let (model, _) = train_iqvae(train, &cfg.vae, &cfg.vae_train, cfg.seed, |m| metrics.write(m))?;
    save_checkpoint(&out.join(IQVAE_CKPT), &model.to_records())?;
    Ok(model)
}

/// Loads the config and IQ-VAE of a stage-1 (or stage-2) run directory.
pub fn load_iqvae(run: &Path) -> Result<(RunConfig, IqVae)> {
    let ckpt = require(run.join(IQVAE_CKPT), "train-iqvae")?;
    let cfg = RunConfig::load(&require(run.join(CONFIG_FILE), "train-iqvae")?)?;
    let model = IqVae::from_records(cfg.vae.clone(), &load_checkpoint(&ckpt)?)?;
    Ok((cfg, model))
}

pub fn tokenize_all(vae: &IqVae, samples: &[PairedSample]) -> Result<Vec<TokenPair>> {
    par::try_map_indexed(samples.len(), |i| {
        let (cond, image) = vae.tokenize(&samples[i])?;
        Ok(TokenPair { cond, image })
    })
}

/// Stage 2 into `out` on top of a trained IQ-VAE.
pub fn run_train_ar(cfg: &RunConfig, vae: &IqVae, data: &[PairedSample], out: &Path) -> Result<ArModel> {
    cfg.validate()?;
    if cfg.vae != *vae.config() {
        return Err(Error::Config {
            path: "vae".into(),
            detail: "section does not match the IQ-VAE checkpoint's configuration".into(),
        });
    }
    prepare_run(cfg, out)?;
    save_checkpoint(&out.join(IQVAE_CKPT), &vae.to_records())?;
    let (train, _) = split(cfg, data)?;
    let pairs = tokenize_all(vae, train)?;
    let mut metrics = JsonLines::create(&out.join(METRICS_FILE))?;
    let (model, _) = train_ar(
        &pairs,
        &cfg.ar_config(),
        &cfg.ar_train,
        &cfg.gumbel,
        &vae.image_codebook(),
        cfg.seed,
        |m| metrics.write(m),
    )?;
    save_checkpoint(&out.join(AR_CKPT), &model.to_records())?;
    Ok(model)
}

/// Loads config, IQ-VAE and transformer from a stage-2 run directory.
pub fn load_ar(run: &Path) -> Result<(RunConfig, IqVae, ArModel)> {
    let ar_ckpt = require(run.join(AR_CKPT), "train-ar")?;
    let (cfg, vae) = load_iqvae(run)?;
    let ar = ArModel::from_records(cfg.ar_config(), &load_checkpoint(&ar_ckpt)?)?;
    Ok((cfg, vae, ar))
}

/// `count` images for the condition of `sample`: tokens and decoded pixels.
pub fn sample_images(
    cfg: &RunConfig,
    vae: &IqVae,
    ar: &ArModel,
    sample: &PairedSample,
    count: usize,
    seed: u64,
) -> Result<Vec<(Vec<usize>, Vec<f32>)>> {
    let cond_unit = sample.condition_unit();
    let (cond, _) = vae.tokenize(sample)?;
    par::try_map_indexed(count, |i| {
        let mut rng = Rng::for_stream(seed, i as u64);
        let tokens = ar.generate(&cond, cfg.sample.k, cfg.sample.temperature, &mut rng)?;
        let image = vae.decode_tokens(&tokens, &cond_unit)?;
        Ok((tokens, image))
    })
}

/// 8-bit binary PGM of a `[0, 1]` grid.
pub fn encode_pgm(image: &[f32], side: usize) -> Vec<u8> {
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    out.extend(image.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn encode_f32(image: &[f32]) -> Vec<u8> {
    image.iter().flat_map(|v| v.to_le_bytes()).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub tokens: Vec<usize>,
    pub raw: String,
    pub pgm: String,
}

/// Writes samples for dataset item `index` into `out`.
pub fn run_sample(cfg: &RunConfig, vae: &IqVae, ar: &ArModel, data: &[PairedSample], index: usize, out: &Path) -> Result<Vec<SampleRecord>> {
    let sample = data.get(index).ok_or_else(|| {
        Error::invalid(format!("sample index {index} out of range for {} samples", data.len()))
    })?;
    std::fs::create_dir_all(out)?;
    write_atomic(&out.join("condition.pgm"), &encode_pgm(&sample.condition_unit(), SIDE))?;
    let seed = Rng::for_stream(cfg.seed ^ GENERATE_STREAM, index as u64).next_u64();
    let images = sample_images(cfg, vae, ar, sample, cfg.sample.count, seed)?;
    let mut records = Vec::with_capacity(images.len());
    for (i, (tokens, image)) in images.into_iter().enumerate() {
        let raw = format!("sample_{i:02}.f32");
        let pgm = format!("sample_{i:02}.pgm");
        write_atomic(&out.join(&raw), &encode_f32(&image))?;
        write_atomic(&out.join(&pgm), &encode_pgm(&image, SIDE))?;
        records.push(SampleRecord {
            index: i,
            tokens,
            raw,
            pgm,
        });
    }
    write_json(&out.join("samples.json"), &records)?;
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub heldout: usize,
    pub teacher_forced_nll: f64,
    /// NLL of gold tokens under distributions conditioned on the model's
    /// own top-k samples.
    pub free_running_nll: f64,
    pub recon_mse: f64,
    /// Mean sliced GW between condition and image latents.
    pub latent_sgw: f64,
    /// Generated images vs held-out images of the same conditions.
    pub sliced_wasserstein: f64,
    /// Mean pairwise MSE among samples drawn for one condition.
    pub diversity: f64,
    pub image_codebook_usage: f64,
    pub cond_codebook_usage: f64,
}

fn eval_projections(cfg: &RunConfig, dim: usize) -> Result<ProjectionSet> {
    sample_directions(dim, cfg.eval.projections, cfg.eval.projection_seed)
}

fn image_set(images: &[Vec<f32>]) -> Result<PointSet> {
    let flat: Vec<f32> = images.concat();
    PointSet::from_f32(&flat, images.len(), images[0].len(), Domain::Image)
}

pub fn evaluate(cfg: &RunConfig, vae: &IqVae, ar: &ArModel, held: &[PairedSample]) -> Result<EvalReport> {
    if held.is_empty() {
        return Err(Error::invalid("no held-out samples to evaluate"));
    }
    let vae_eval = evaluate_iqvae(vae, held, &eval_projections(cfg, cfg.vae.latent_dim)?)?;
    let pairs = tokenize_all(vae, held)?;
    let (k, temp) = (cfg.sample.k, cfg.sample.temperature);
    let per = par::try_map_indexed(pairs.len(), |i| -> Result<(f64, f64)> {
        let p = &pairs[i];
        let mut rng = Rng::for_stream(cfg.seed ^ FREE_RUN_STREAM, i as u64);
        Ok((ar.nll(&p.cond, &p.image)?, ar.free_running_nll(&p.cond, &p.image, k, temp, &mut rng)?))
    })?;
    let n = per.len() as f64;
    let teacher_forced_nll = per.iter().map(|v| v.0).sum::<f64>() / n;
    let free_running_nll = per.iter().map(|v| v.1).sum::<f64>() / n;

    let m = cfg.eval.conditions.min(held.len());
    let generated = par::try_map_indexed(m, |i| {
        let mut rng = Rng::for_stream(cfg.seed ^ GENERATE_STREAM, i as u64);
        let tokens = ar.generate(&pairs[i].cond, k, temp, &mut rng)?;
        vae.decode_tokens(&tokens, &held[i].condition_unit())
    })?;
    let gold: Vec<Vec<f32>> = held[..m].iter().map(|s| s.image.clone()).collect();
    let sw = if m >= 1 {
        sliced_wasserstein(&image_set(&generated)?, &image_set(&gold)?, &eval_projections(cfg, gold[0].len())?)?
    } else {
        0.0
    };

    let d = cfg.eval.diversity_samples;
    let spreads = (0..m.min(8))
        .map(|i| {
            let seed = Rng::for_stream(cfg.seed ^ DIVERSITY_STREAM, i as u64).next_u64();
            let imgs = sample_images(cfg, vae, ar, &held[i], d, seed)?;
            let mut total = 0.0;
            let mut count = 0;
            for a in 0..imgs.len() {
                for b in a + 1..imgs.len() {
                    total += mse(&imgs[a].1, &imgs[b].1);
                    count += 1;
                }
            }
            Ok(total / count.max(1) as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let diversity = spreads.iter().sum::<f64>() / spreads.len().max(1) as f64;

    Ok(EvalReport {
        heldout: held.len(),
        teacher_forced_nll,
        free_running_nll,
        recon_mse: vae_eval.recon_mse,
        latent_sgw: vae_eval.latent_sgw,
        sliced_wasserstein: sw,
        diversity,
        image_codebook_usage: vae_eval.image_usage,
        cond_codebook_usage: vae_eval.cond_usage,
    })
}

fn mse(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / a.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub regularizer: bool,
    pub gumbel: bool,
    /// Seed-averaged metrics.
    pub mean: EvalReport,
    pub per_seed: Vec<(u64, EvalReport)>,
}

/// Directional comparison across seeds. The first three are the
/// ablation's headline claims; later entries are supplementary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub claim: String,
    pub metric: String,
    pub better: Vec<f64>,
    pub worse: Vec<f64>,
    /// Seeds on which `better <= worse` (strictly `<` for latent_sgw).
    pub holds: usize,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub comparisons: Vec<Comparison>,
}

fn mean_report(reports: &[EvalReport]) -> EvalReport {
    let n = reports.len() as f64;
    let avg = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    EvalReport {
        heldout: reports[0].heldout,
        teacher_forced_nll: avg(|r| r.teacher_forced_nll),
        free_running_nll: avg(|r| r.free_running_nll),
        recon_mse: avg(|r| r.recon_mse),
        latent_sgw: avg(|r| r.latent_sgw),
        sliced_wasserstein: avg(|r| r.sliced_wasserstein),
        diversity: avg(|r| r.diversity),
        image_codebook_usage: avg(|r| r.image_codebook_usage),
        cond_codebook_usage: avg(|r| r.cond_codebook_usage),
    }
}

const ARMS: [(&str, bool, bool); 4] = [
    ("baseline", false, false),
    ("gumbel_only", false, true),
    ("regularizer", true, false),
    ("regularizer_gumbel", true, true),
];

/// The 2x2 grid {regularizer off/on} x {Gumbel sampling off/on} over
/// `cfg.ablate.seeds`. Each arm runs in `out/<arm>/seed<s>`; the IQ-VAE is
/// shared between the two Gumbel arms of a seed.
pub fn run_ablation(cfg: &RunConfig, data: &[PairedSample], out: &Path) -> Result<AblationReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    cfg.save(&out.join(CONFIG_FILE))?;
    let reg_on = if cfg.vae_train.weights.reg > 0.0 { cfg.vae_train.weights.reg } else { 1.0 };
    let (_, held) = split(cfg, data)?;
    let mut results: Vec<Vec<(u64, EvalReport)>> = vec![Vec::new(); ARMS.len()];
    for &seed in &cfg.ablate.seeds {
        for reg in [false, true] {
            let mut base = cfg.clone();
            base.seed = seed;
            base.vae_train.weights.reg = if reg { reg_on } else { 0.0 };
            let vae_dir = out.join(format!("iqvae_reg{}", reg as u8)).join(format!("seed{seed}"));
            let vae = run_train_iqvae(&base, data, &vae_dir)?;
            for (arm, &(name, r, gumbel)) in ARMS.iter().enumerate() {
                if r != reg {
                    continue;
                }
                let mut run = base.clone();
                run.gumbel.enabled = gumbel;
                let dir = out.join(name).join(format!("seed{seed}"));
                let ar = run_train_ar(&run, &vae, data, &dir)?;
                let report = evaluate(&run, &vae, &ar, held)?;
                write_json(&dir.join("eval.json"), &report)?;
                results[arm].push((seed, report));
            }
        }
    }
    let rows: Vec<AblationRow> = ARMS
        .iter()
        .zip(results)
        .map(|(&(name, regularizer, gumbel), per_seed)| AblationRow {
            name: name.to_string(),
            regularizer,
            gumbel,
            mean: mean_report(&per_seed.iter().map(|(_, r)| r.clone()).collect::<Vec<_>>()),
            per_seed,
        })
        .collect();
    let compare = |claim: &str, metric: &str, better: usize, worse: usize, f: fn(&EvalReport) -> f64, strict: bool| {
        let b: Vec<f64> = rows[better].per_seed.iter().map(|(_, r)| f(r)).collect();
        let w: Vec<f64> = rows[worse].per_seed.iter().map(|(_, r)| f(r)).collect();
        let holds = b.iter().zip(&w).filter(|(x, y)| if strict { x < y } else { x <= y }).count();
        Comparison {
            claim: claim.to_string(),
            metric: metric.to_string(),
            seeds: b.len(),
            better: b,
            worse: w,
            holds,
        }
    };
    let comparisons = vec![
        compare(
            "regularizer lowers latent sliced GW",
            "latent_sgw",
            2,
            0,
            |r| r.latent_sgw,
            true,
        ),
        compare(
            "gumbel sampling does not raise free-running NLL",
            "free_running_nll",
            3,
            2,
            |r| r.free_running_nll,
            false,
        ),
        compare(
            "full method does not raise generated-vs-held-out sliced Wasserstein",
            "sliced_wasserstein",
            3,
            0,
            |r| r.sliced_wasserstein,
            false,
        ),
        compare(
            "gumbel sampling does not raise free-running NLL without the regularizer",
            "free_running_nll",
            1,
            0,
            |r| r.free_running_nll,
            false,
        ),
    ];
    let report = AblationReport { rows, comparisons };
    write_json(&out.join("ablation.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OtMetric {
    GwBruteforce,
    SlicedGw,
    SlicedW,
}

impl std::str::FromStr for OtMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gw-bruteforce" => Ok(OtMetric::GwBruteforce),
            "sliced-gw" => Ok(OtMetric::SlicedGw),
            "sliced-w" => Ok(OtMetric::SlicedW),
            _ => Err(Error::invalid(format!(
                "unknown metric {s:?}, expected gw-bruteforce, sliced-gw or sliced-w"
            ))),
        }
    }
}

/// Samples `start..end` of a dataset, each one point of 256 coordinates
/// taken from its image or its unit-scaled condition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub start: usize,
    pub end: usize,
    pub domain: Domain,
}

impl std::str::FromStr for Selection {
    type Err = Error;

    /// `START..END[:image|condition]`, image by default.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("bad selection {s:?}, expected START..END[:image|condition]"));
        let (range, domain) = match s.split_once(':') {
            Some((r, "image")) => (r, Domain::Image),
            Some((r, "condition" | "cond")) => (r, Domain::Condition),
            Some(_) => return Err(bad()),
            None => (s, Domain::Image),
        };
        let (a, b) = range.split_once("..").ok_or_else(bad)?;
        let start: usize = a.parse().map_err(|_| bad())?;
        let end: usize = b.parse().map_err(|_| bad())?;
        if end <= start {
            return Err(bad());
        }
        Ok(Selection { start, end, domain })
    }
}

impl Selection {
    pub fn points(&self, data: &[PairedSample]) -> Result<PointSet> {
        if self.end > data.len() {
            return Err(Error::invalid(format!(
                "selection {}..{} exceeds dataset of {} samples",
                self.start,
                self.end,
                data.len()
            )));
        }
        let mut flat = Vec::with_capacity((self.end - self.start) * SIDE * SIDE);
        for s in &data[self.start..self.end] {
            match self.domain {
                Domain::Condition => flat.extend(s.condition_unit()),
                _ => flat.extend_from_slice(&s.image),
            }
        }
        PointSet::from_f32(&flat, self.end - self.start, SIDE * SIDE, self.domain)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OtReport {
    pub metric: OtMetric,
    pub a: Selection,
    pub b: Selection,
    pub value: f64,
    /// Matched index of each `a` point, brute force only.
    pub permutation: Option<Vec<usize>>,
    pub projections: Option<usize>,
}

pub fn run_ot(
    data: &[PairedSample],
    a: &Selection,
    b: &Selection,
    metric: OtMetric,
    projections: usize,
    seed: u64,
) -> Result<OtReport> {
    let (pa, pb) = (a.points(data)?, b.points(data)?);
    let (value, permutation, projections) = match metric {
        OtMetric::GwBruteforce => {
            let (v, coupling) = gw_bruteforce(&pa, &pb)?;
            (v, coupling.as_permutation(), None)
        }
        OtMetric::SlicedGw => {
            let proj = sample_directions(pa.dim(), projections, seed)?;
            (sliced_gw(&pa, &pb, &proj)?, None, Some(projections))
        }
        OtMetric::SlicedW => {
            let proj = sample_directions(pa.dim(), projections, seed)?;
            (sliced_wasserstein(&pa, &pb, &proj)?, None, Some(projections))
        }
    };
    Ok(OtReport {
        metric,
        a: a.clone(),
        b: b.clone(),
        value,
        permutation,
        projections,
    })
}
