//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::eval_io::image::{load_image, save_image};
use crate::eval_io::report::{evaluate_model, rd_curve_csv, Report};
use crate::losses::FeatureExtractor;
use crate::training::{run_training, steps_per_epoch, Dataset, Phase, Preset, TrainConfig, Trainer};

const EXIT_CODES: &str = "Exit codes:
  0  success
  1  other failure
  2  usage error (bad flags, invalid config)
  3  file could not be read or written
  4  checkpoint invalid or does not match the configuration
  5  corrupt or mismatched bitstream
  6  unusable input data (images, datasets, reports)";

#[derive(Parser, Debug)]
#[command(name = "poelic", version, about = "Perception-oriented learned image codec", after_help = EXIT_CODES)]
struct Cli {
    /// Training configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Rate-distortion pretraining with an MSE distortion.
    #[command(after_help = EXIT_CODES)]
    Pretrain(TrainArgs),
    /// Perceptual finetuning with the adversarial, perceptual and style terms.
    #[command(after_help = EXIT_CODES)]
    Finetune(TrainArgs),
    /// Encode an image into a bitstream.
    #[command(after_help = EXIT_CODES)]
    Compress {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Codec checkpoint.
        #[arg(short, long)]
        model: PathBuf,
    },
    /// Decode a bitstream into a PNG image.
    #[command(after_help = EXIT_CODES)]
    Decompress {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(short, long)]
        model: PathBuf,
    },
    /// Score a codec on a directory of images and write a CSV report.
    #[command(after_help = EXIT_CODES)]
    Eval {
        #[arg(short = 'd', long)]
        data: PathBuf,
        #[arg(short, long)]
        model: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Feature network weights for the perceptual score; the built-in
        /// seeded network otherwise.
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Turn evaluation reports into rate-distortion points.
    #[command(after_help = EXIT_CODES)]
    Plot {
        /// Report CSVs, one point each.
        #[arg(short, long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory of training images.
    #[arg(short = 'd', long)]
    data: PathBuf,
    /// Run directory for checkpoints and the loss log.
    #[arg(short, long)]
    out: PathBuf,
    /// Named rate target: q075, q150 or q300.
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
    /// Starting codec checkpoint (finetuning).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Continue a run from one of its checkpoints.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

fn parse_preset(s: &str) -> std::result::Result<Preset, String> {
    Preset::parse(s).ok_or_else(|| format!("unknown preset `{s}` (expected q075, q150 or q300)"))
}

/// Run the command line `argv` (program name first) and return the exit
/// code. Errors are reported on stderr.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn train_config(cli: &Cli, phase: Phase, args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    cfg.phase = phase;
    if let Some(p) = args.preset {
        cfg = cfg.with_preset(p);
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(init) = &args.init {
        cfg.init_checkpoint = Some(init.clone());
    }
    if phase == Phase::PerceptualFinetune && cfg.init_checkpoint.is_none() && args.resume.is_none() {
        return Err(Error::Usage("finetuning needs --init or init_checkpoint".into()));
    }
    Ok(cfg.normalized())
}

fn train(cli: &Cli, phase: Phase, args: &TrainArgs) -> Result<()> {
    let cfg = train_config(cli, phase, args)?;
    cfg.validate()?;
    let data = Dataset::from_dir(&args.data)?;
    let trainer = match &args.resume {
        Some(path) => Trainer::resume(cfg, &crate::checkpoint::Checkpoint::load(path)?)?,
        None => Trainer::new(cfg.clone(), steps_per_epoch(data.len(), cfg.batch_size))?,
    };
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let cfg_path = args.out.join("config.toml");
    std::fs::write(&cfg_path, trainer.cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    let outcome = run_training(trainer, &data, &args.out)?;
    if let Some(last) = outcome.reports.last() {
        println!(
            "{} steps, final loss {:.4}, rate {:.4} bpp; checkpoint {}",
            outcome.trainer.step,
            last.total,
            last.rate_bpp,
            args.out.join("final.safetensors").display()
        );
    }
    Ok(())
}

fn features(cli: &Cli, weights: Option<&Path>) -> Result<FeatureExtractor> {
    if let Some(path) = weights {
        return FeatureExtractor::load(path);
    }
    let cfg = match &cli.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    match &cfg.feature_weights {
        Some(path) => FeatureExtractor::load(path),
        None => Ok(FeatureExtractor::random(cfg.feature_seed, cfg.feature_activation)),
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Pretrain(args) => train(&cli, Phase::MsePretrain, args),
        Command::Finetune(args) => train(&cli, Phase::PerceptualFinetune, args),
        Command::Compress { input, output, model } => {
            let codec = Codec::load(model)?;
            let img = load_image(input)?;
            let c = codec.compress(&img)?;
            std::fs::write(output, &c.bytes).map_err(|e| Error::io(output, e))?;
            let (h, w) = (img.shape()[1], img.shape()[2]);
            println!("{} bytes, {:.4} bpp", c.bytes.len(), (c.bytes.len() * 8) as f64 / (h * w) as f64);
            Ok(())
        }
        Command::Decompress { input, output, model } => {
            let codec = Codec::load(model)?;
            let bytes = std::fs::read(input).map_err(|e| Error::io(input, e))?;
            save_image(&codec.decompress(&bytes)?, output)
        }
        Command::Eval {
            data,
            model,
            output,
            features: weights,
        } => {
            let codec = Codec::load(model)?;
            let fe = features(&cli, weights.as_deref())?;
            let report = evaluate_model(&codec, data, &fe, &[])?;
            report.save(output)?;
            let m = &report.mean;
            println!(
                "{} images: {:.4} bpp, {:.2} dB, MS-SSIM {:.4}, LPIPS {:.4}",
                report.rows.len(),
                m.bpp,
                m.psnr_db,
                m.ms_ssim,
                m.lpips
            );
            Ok(())
        }
        Command::Plot { input, output } => {
            let reports = input
                .iter()
                .map(|p| {
                    let name = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                    Ok((name, Report::load(p)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let text = rd_curve_csv(&reports)?;
            std::fs::write(output, text).map_err(|e| Error::io(output, e))
        }
    }
}
