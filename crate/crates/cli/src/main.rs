//! `mrc`: encode, decode, evaluate, train and plot.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error (unreadable input,
//! corrupt or foreign bitstream, missing files), 1 anything else.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use candle_core::Device;
use clap::{Parser, Subcommand};
use mrc_core::checkpoint::{resolve_checkpoint, Checkpoint};
use mrc_core::codec::{compress, decode_latent, reconstruct};
use mrc_core::conditioning::RealismWeight;
use mrc_core::data::{list_pngs, load_image, Dataset};
use mrc_core::metrics::{self, cap_psnr, emit_rd_curves, psnr, write_rd_csv, FeatureExtractor, RdPoint};
use mrc_core::trainer::{preset, run_experiment, TrainConfig, PRESET_NAMES};
use mrc_core::Error;

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;

#[derive(Parser)]
#[command(name = "mrc", version, about = "Multi-realism image codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compress a PNG into a bitstream file.
    Encode {
        #[arg(long)]
        input: PathBuf,
        /// Checkpoint file or run directory (default: $MRC_MODEL_DIR).
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        /// Rate label stored in the header (default: the checkpoint's).
        #[arg(long)]
        lambda_label: Option<u8>,
    },
    /// Reconstruct a PNG from a bitstream at realism weight β.
    Decode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, allow_negative_numbers = true)]
        beta: f64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Measure PSNR (and optionally FID) for paired directories, or sweep β
    /// through a model over a directory of originals.
    Eval {
        /// Directory of original PNGs.
        #[arg(long)]
        real: PathBuf,
        /// Directory of reconstructions with matching file names.
        #[arg(long, conflicts_with = "model", required_unless_present = "model")]
        recon: Option<PathBuf>,
        /// Encode `real` with this checkpoint and decode at every `--betas` value.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.64,1.28,2.56")]
        betas: Vec<f64>,
        /// Model name written to the CSV (sweep mode).
        #[arg(long, default_value = "model")]
        name: String,
        /// Also compute FID over patches of this side.
        #[arg(long)]
        fid_patch: Option<u32>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train a preset or a TOML configuration on a directory of PNGs.
    Train {
        #[arg(long, conflicts_with = "config", required_unless_present = "config")]
        preset: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "runs")]
        runs: PathBuf,
        /// Override the number of steps.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Plot distortion/realism curves from an eval CSV.
    Curves {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output_dir: PathBuf,
    },
}

/// Errors that should map to the usage exit code.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return EXIT_USAGE;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::OutOfRange(_)) => EXIT_USAGE,
        Some(
            Error::Io(_)
            | Error::Image(_)
            | Error::UnsupportedBitDepth(_)
            | Error::Bitstream(_)
            | Error::Truncated
            | Error::ModelMismatch { .. }
            | Error::Checkpoint(_)
            | Error::Data(_)
            | Error::Csv(_)
            | Error::Serde(_)
            | Error::Shape(_),
        ) => EXIT_DATA,
        Some(_) => 1,
        None if err.downcast_ref::<std::io::Error>().is_some() => EXIT_DATA,
        None => 1,
    }
}

fn load_checkpoint(arg: Option<&Path>, device: &Device) -> anyhow::Result<Checkpoint> {
    let path = resolve_checkpoint(arg)?;
    log::info!("model {}", path.display());
    Ok(Checkpoint::load(&path, device)?)
}

fn infer_beta(beta: f64) -> anyhow::Result<RealismWeight> {
    RealismWeight::infer(beta).map_err(|e| usage(format!("--beta: {e}")))
}

fn encode(input: &Path, model: Option<&Path>, output: &Path, label: Option<u8>) -> anyhow::Result<()> {
    let device = Device::Cpu;
    let ck = load_checkpoint(model, &device)?;
    let label = label.or(ck.rate_label()).unwrap_or(0);
    let model = ck.build_model(false, &device)?;
    let img = load_image(input)?;
    let c = compress(&img, &model, label)?;
    fs::write(output, &c.bytes).with_context(|| format!("writing {}", output.display()))?;
    println!(
        "{} bytes, {:.4} bpp, {}x{}, y_hash {}",
        c.bytes.len(),
        c.bpp,
        img.width(),
        img.height(),
        c.y_hash
    );
    Ok(())
}

fn decode(input: &Path, model: Option<&Path>, beta: f64, output: &Path) -> anyhow::Result<()> {
    let beta = infer_beta(beta)?;
    let device = Device::Cpu;
    let model = load_checkpoint(model, &device)?.build_model(false, &device)?;
    let bytes = fs::read(input).with_context(|| format!("reading {}", input.display()))?;
    let latent = decode_latent(&bytes, &model)?;
    let img = reconstruct(&latent, beta, &model)?;
    img.save_png(output)?;
    println!("{}x{}, y_hash {}", img.width(), img.height(), latent.y_hash);
    Ok(())
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

fn eval_paired(real: &Path, recon: &Path, fid_patch: Option<u32>, output: &Path) -> anyhow::Result<()> {
    let rows = metrics::paired_psnr(real, recon)?;
    let mut w = csv::Writer::from_path(output)?;
    w.write_record(["file", "psnr_db"])?;
    for (name, db) in &rows {
        w.write_record([name.as_str(), &format!("{:.6}", cap_psnr(*db))])?;
    }
    let mean_db = mean(rows.iter().map(|(_, d)| cap_psnr(*d)));
    w.write_record(["mean", &format!("{mean_db:.6}")])?;
    if let Some(p) = fid_patch {
        let ex = FeatureExtractor::new()?;
        let load = |d: &Path| -> anyhow::Result<Vec<_>> {
            Ok(list_pngs(d)?.iter().map(load_image).collect::<Result<Vec<_>, _>>()?)
        };
        let fid = metrics::fid_over_patches(&load(real)?, &load(recon)?, p, &ex)?;
        w.write_record(["fid", &format!("{fid:.6}")])?;
        println!("fid {fid:.4}");
    }
    w.flush()?;
    println!("{} images, mean psnr {mean_db:.4} dB", rows.len());
    Ok(())
}

fn eval_sweep(
    real: &Path,
    model: Option<&Path>,
    betas: &[f64],
    name: &str,
    fid_patch: Option<u32>,
    output: &Path,
) -> anyhow::Result<()> {
    let weights = betas.iter().map(|&b| infer_beta(b)).collect::<anyhow::Result<Vec<_>>>()?;
    if weights.is_empty() {
        return Err(usage("--betas is empty"));
    }
    let device = Device::Cpu;
    let ck = load_checkpoint(model, &device)?;
    let label = ck.rate_label().unwrap_or(0);
    let model = ck.build_model(false, &device)?;
    let originals = list_pngs(real)?.iter().map(load_image).collect::<Result<Vec<_>, _>>()?;
    if originals.is_empty() {
        return Err(Error::Data(format!("no PNG files in {}", real.display())).into());
    }
    let mut latents = Vec::new();
    let mut bpp = Vec::new();
    for img in &originals {
        let c = compress(img, &model, label)?;
        bpp.push(c.bpp);
        latents.push(decode_latent(&c.bytes, &model)?);
    }
    let ex = fid_patch.map(|_| FeatureExtractor::new()).transpose()?;
    let mut points = Vec::new();
    for beta in weights {
        let recon = latents
            .iter()
            .map(|l| reconstruct(l, beta, &model))
            .collect::<Result<Vec<_>, _>>()?;
        let psnrs = originals
            .iter()
            .zip(&recon)
            .map(|(a, b)| psnr(a, b).map(cap_psnr))
            .collect::<Result<Vec<_>, _>>()?;
        let fid = match (fid_patch, &ex) {
            (Some(p), Some(ex)) => Some(metrics::fid_over_patches(&originals, &recon, p, ex)?),
            _ => None,
        };
        let pt = RdPoint {
            model: name.to_string(),
            rate_label: label.to_string(),
            bpp: mean(bpp.iter().copied()),
            beta: beta.value(),
            psnr_db: mean(psnrs.into_iter()),
            fid,
        };
        println!("beta {:.2}: bpp {:.4} psnr {:.4} fid {:?}", pt.beta, pt.bpp, pt.psnr_db, pt.fid);
        points.push(pt);
    }
    write_rd_csv(output, &points)?;
    Ok(())
}

fn train(
    preset_name: Option<&str>,
    config: Option<&Path>,
    data: &Path,
    runs: &Path,
    steps: Option<u64>,
) -> anyhow::Result<()> {
    let mut cfg = match (preset_name, config) {
        (Some(p), _) => preset(p).ok_or_else(|| {
            usage(format!("unknown preset {p}; expected one of {} or an ablation run", PRESET_NAMES.join(", ")))
        })?,
        (None, Some(path)) => TrainConfig::from_toml(
            &fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
        )?,
        (None, None) => return Err(usage("one of --preset or --config is required")),
    };
    if let Some(t) = steps {
        cfg.total_steps = t;
        cfg.validate()?;
    }
    let dataset = Dataset::from_dir(data)?;
    let out = run_experiment(&cfg, &dataset, runs, &Device::Cpu)?;
    println!("{} steps run, checkpoint {}", out.records.len(), out.checkpoint.display());
    Ok(())
}

fn curves(input: &Path, output_dir: &Path) -> anyhow::Result<()> {
    let points = metrics::read_rd_csv(input)?;
    if points.is_empty() {
        return Err(Error::Data(format!("{} has no rows", input.display())).into());
    }
    for p in emit_rd_curves(&points, output_dir)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Encode { input, model, output, lambda_label } => {
            encode(&input, model.as_deref(), &output, lambda_label)
        }
        Command::Decode { input, model, beta, output } => decode(&input, model.as_deref(), beta, &output),
        Command::Eval { real, recon, model, betas, name, fid_patch, output } => match recon {
            Some(recon) => eval_paired(&real, &recon, fid_patch, &output),
            None => eval_sweep(&real, model.as_deref(), &betas, &name, fid_patch, &output),
        },
        Command::Train { preset, config, data, runs, steps } => {
            train(preset.as_deref(), config.as_deref(), &data, &runs, steps)
        }
        Command::Curves { input, output_dir } => curves(&input, &output_dir),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
