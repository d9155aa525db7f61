//! `iqvae` command-line front end.
//!
//! Every subcommand prints a JSON summary on stdout. Failures exit with a
//! nonzero status and a `{"kind", "message"}` object on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use iqvae::config::RunConfig;
use iqvae::data::{save_dataset, Mode, PairedSample};
use iqvae::pipeline::{self, OtMetric, Selection};
use iqvae::{par, Error};

#[derive(Parser)]
#[command(name = "iqvae", version, about = "IQ-VAE + transformer generation on synthetic paired data")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults are used for missing keys
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (gen-data also accepts a .iqds file path)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the run seed
    #[arg(long)]
    seed: Option<u64>,
    /// Run on a single thread
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct DataArg {
    /// .iqds dataset; generated from the config's [data] section when absent
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Edge,
    Segmentation,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic paired dataset
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Stage 1: train the IQ-VAE
    TrainIqvae {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Stage 2: train the transformer on a trained IQ-VAE's tokens
    TrainAr {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// train-iqvae run directory
        #[arg(long)]
        run: PathBuf,
    },
    /// Draw images for one condition of the dataset
    Sample {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// train-ar run directory
        #[arg(long)]
        run: PathBuf,
        /// Dataset index of the condition
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// Held-out metrics of a train-ar run
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        run: PathBuf,
    },
    /// Transport distances between two sample sets of a dataset
    Ot {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// START..END[:image|condition]
        #[arg(long)]
        a: Selection,
        #[arg(long)]
        b: Selection,
        #[arg(long, default_value = "sliced-gw")]
        metric: OtMetric,
        /// Number of directions; defaults to eval.projections
        #[arg(long)]
        projections: Option<usize>,
    },
    /// The regularizer x Gumbel-sampling grid over the configured seeds
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
}

fn fail(kind: &str, message: impl std::fmt::Display) -> ExitCode {
    eprintln!("{}", json!({ "kind": kind, "message": message.to_string() }));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            return fail("usage", e.render().to_string().trim_end());
        }
    };
    match run(cli.cmd) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.kind(), &e),
    }
}

fn load_config(common: &Common, fallback: Option<&Path>) -> iqvae::Result<RunConfig> {
    par::set_parallel(!common.sequential);
    let mut cfg = match (&common.config, fallback) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(run)) => RunConfig::load(&run.join(pipeline::CONFIG_FILE))?,
        (None, None) => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common) -> iqvae::Result<&Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| Error::Invalid("--out is required".into()))
}

fn dataset(cfg: &RunConfig, data: &DataArg) -> iqvae::Result<Vec<PairedSample>> {
    pipeline::load_or_generate(cfg, data.data.as_deref())
}

fn run(cmd: Cmd) -> iqvae::Result<serde_json::Value> {
    match cmd {
        Cmd::GenData { common, n, mode } => {
            let mut cfg = load_config(&common, None)?;
            if let Some(seed) = common.seed {
                cfg.data.seed = seed;
            }
            if let Some(n) = n {
                cfg.data.n_samples = n;
            }
            if let Some(m) = mode {
                cfg.data.mode = match m {
                    ModeArg::Edge => Mode::Edge,
                    ModeArg::Segmentation => Mode::Segmentation,
                };
            }
            let out = out_dir(&common)?;
            let path = if out.extension().is_some_and(|e| e == "iqds") {
                out.to_path_buf()
            } else {
                std::fs::create_dir_all(out)?;
                out.join("data.iqds")
            };
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            let samples = iqvae::data::generate_dataset(&cfg.data)?;
            save_dataset(&path, &samples)?;
            Ok(json!({ "path": path, "samples": samples.len(), "data": cfg.data }))
        }
        Cmd::TrainIqvae { common, data } => {
            let cfg = load_config(&common, None)?;
            let out = out_dir(&common)?;
            let samples = dataset(&cfg, &data)?;
            pipeline::run_train_iqvae(&cfg, &samples, out)?;
            Ok(json!({ "run": out, "checkpoint": out.join(pipeline::IQVAE_CKPT) }))
        }
        Cmd::TrainAr { common, data, run } => {
            let (_, vae) = pipeline::load_iqvae(&run)?;
            let cfg = load_config(&common, Some(&run))?;
            let out = out_dir(&common)?;
            let samples = dataset(&cfg, &data)?;
            pipeline::run_train_ar(&cfg, &vae, &samples, out)?;
            Ok(json!({ "run": out, "checkpoint": out.join(pipeline::AR_CKPT) }))
        }
        Cmd::Sample {
            common,
            data,
            run,
            index,
            k,
            count,
            temperature,
        } => {
            let (_, vae, ar) = pipeline::load_ar(&run)?;
            let mut cfg = load_config(&common, Some(&run))?;
            cfg.sample.k = k.unwrap_or(cfg.sample.k);
            cfg.sample.count = count.unwrap_or(cfg.sample.count);
            cfg.sample.temperature = temperature.unwrap_or(cfg.sample.temperature);
            cfg.validate()?;
            let out = out_dir(&common)?;
            let samples = dataset(&cfg, &data)?;
            let records = pipeline::run_sample(&cfg, &vae, &ar, &samples, index, out)?;
            Ok(json!({ "out": out, "index": index, "samples": records }))
        }
        Cmd::Eval { common, data, run } => {
            let (_, vae, ar) = pipeline::load_ar(&run)?;
            let cfg = load_config(&common, Some(&run))?;
            let samples = dataset(&cfg, &data)?;
            let (_, held) = pipeline::split(&cfg, &samples)?;
            let report = pipeline::evaluate(&cfg, &vae, &ar, held)?;
            if let Some(out) = &common.out {
                std::fs::create_dir_all(out)?;
                pipeline::write_json(&out.join("eval.json"), &report)?;
            }
            Ok(serde_json::to_value(report).expect("report serializes"))
        }
        Cmd::Ot {
            common,
            data,
            a,
            b,
            metric,
            projections,
        } => {
            let cfg = load_config(&common, None)?;
            let samples = dataset(&cfg, &data)?;
            let l = projections.unwrap_or(cfg.eval.projections);
            let seed = common.seed.unwrap_or(cfg.eval.projection_seed);
            let report = pipeline::run_ot(&samples, &a, &b, metric, l, seed)?;
            if let Some(out) = &common.out {
                std::fs::create_dir_all(out)?;
                pipeline::write_json(&out.join("ot.json"), &report)?;
            }
            Ok(serde_json::to_value(report).expect("report serializes"))
        }
        Cmd::Ablate { common, data } => {
            let mut cfg = load_config(&common, None)?;
            if let Some(seed) = common.seed {
                cfg.ablate.seeds = (0..cfg.ablate.seeds.len().max(1) as u64).map(|i| seed.wrapping_add(i)).collect();
            }
            let out = out_dir(&common)?;
            let samples = dataset(&cfg, &data)?;
            let report = pipeline::run_ablation(&cfg, &samples, out)?;
            Ok(serde_json::to_value(report).expect("report serializes"))
        }
    }
}
