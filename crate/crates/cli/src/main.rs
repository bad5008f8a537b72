//! `dualharmony` command-line front end.
//!
//! Exit codes: 0 on success, 1 for usage errors and unusable inputs, 2 when
//! a command fails while running.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use dualharmony::btrank::{self, FitOptions, PairwiseTally};
use dualharmony::data::{self, synth, BuildOptions, Manifest};
use dualharmony::generator::harmonize_image;
use dualharmony::imaging::{load_mask_png, save_mask_png, ImageTensor};
use dualharmony::spectral::log_magnitude_map;
use dualharmony::trainer::{self, load_checkpoint, Preset, TrainConfig, FINAL_CHECKPOINT};

/// Checkpoint used by `harmonize` when `--checkpoint` is not given.
const CHECKPOINT_ENV: &str = "DUALHARMONY_CHECKPOINT_DIR";

#[derive(Parser)]
#[command(name = "dualharmony", version, about = "Painterly image harmonization in the spatial and frequency domains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build composite datasets
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train a generator/discriminator pair
    Train(TrainArgs),
    /// Harmonize one composite with a trained checkpoint
    Harmonize(HarmonizeArgs),
    /// Write the centered log-magnitude spectrum of an image
    Freqmap(FreqmapArgs),
    /// Bradley-Terry scores from pairwise preferences
    #[command(subcommand)]
    Btrank(BtrankCommand),
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Generate synthetic photos (with masks) and paintings
    Synth(SynthArgs),
    /// Pair photos with paintings into a composite manifest
    Build(BuildArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory; receives photos/ and paintings/
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    photos: usize,
    #[arg(long, default_value_t = 16)]
    paintings: usize,
    /// Side length of the generated images
    #[arg(long, default_value_t = 256)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BuildArgs {
    /// Directory of photos, each with a `<name>.mask.png` beside it
    #[arg(long)]
    photos: PathBuf,
    /// Directory of paintings
    #[arg(long)]
    paintings: PathBuf,
    /// Output directory for manifest.jsonl
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of records tagged as the test split
    #[arg(long, default_value_t = 0.0)]
    test_fraction: f64,
    /// Also write the composites as PNGs for inspection
    #[arg(long)]
    previews: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML training config
    #[arg(long)]
    config: PathBuf,
    /// Ablation preset; overrides the config's ablation flags
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
    /// Continue from a checkpoint directory
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct HarmonizeArgs {
    /// Composite image, any size
    #[arg(long)]
    composite: PathBuf,
    /// Foreground mask; white marks the pasted object
    #[arg(long)]
    mask: PathBuf,
    /// The painting the object was pasted into
    #[arg(long)]
    background: PathBuf,
    /// Checkpoint directory [default: $DUALHARMONY_CHECKPOINT_DIR]
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output PNG
    #[arg(long)]
    out: PathBuf,
    /// Also write the learned blending mask
    #[arg(long)]
    soft_mask_out: Option<PathBuf>,
    /// Re-read the written output and fail unless it matches the composite's size
    #[arg(long)]
    size_check: bool,
}

#[derive(Args)]
struct FreqmapArgs {
    /// Input image
    #[arg(long)]
    image: PathBuf,
    /// Output PNG
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum BtrankCommand {
    /// Fit scores to a tally and print them ranked
    Fit(FitArgs),
}

#[derive(Args)]
struct FitArgs {
    /// CSV tally: `method,<names...>` matrix or `winner,loser,count` records
    #[arg(long)]
    tally: PathBuf,
    #[arg(long, default_value_t = FitOptions::default().max_iter)]
    max_iter: usize,
    #[arg(long, default_value_t = FitOptions::default().tol)]
    tol: f64,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: dualharmony::Error| e.to_string())
}

/// A failure and the exit code it maps to.
enum Failure {
    Input(anyhow::Error),
    Runtime(anyhow::Error),
}

trait Classify<T> {
    fn input(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn input(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Input(e.into()))
    }

    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Dataset(DatasetCommand::Synth(a)) => synth_cmd(a),
        Command::Dataset(DatasetCommand::Build(a)) => build_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Harmonize(a) => harmonize_cmd(a),
        Command::Freqmap(a) => freqmap_cmd(a),
        Command::Btrank(BtrankCommand::Fit(a)) => btrank_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn synth_cmd(a: SynthArgs) -> Result<(), Failure> {
    if a.size == 0 || a.photos == 0 || a.paintings == 0 {
        return Err(Failure::Input(anyhow!("--size, --photos and --paintings must be positive")));
    }
    let layout = synth::write_corpus(&a.out, a.photos, a.paintings, a.size, a.seed).runtime()?;
    println!("photos: {}", layout.photos.display());
    println!("paintings: {}", layout.paintings.display());
    Ok(())
}

fn build_cmd(a: BuildArgs) -> Result<(), Failure> {
    if !(0.0..=1.0).contains(&a.test_fraction) {
        return Err(Failure::Input(anyhow!("--test-fraction must lie in [0, 1], got {}", a.test_fraction)));
    }
    for dir in [&a.photos, &a.paintings] {
        if !dir.is_dir() {
            return Err(Failure::Input(anyhow!("{} is not a directory", dir.display())));
        }
    }
    let opts = BuildOptions {
        seed: a.seed,
        test_fraction: a.test_fraction,
        write_previews: a.previews,
    };
    let summary = data::build_manifest(&a.photos, &a.paintings, &a.out, &opts).runtime()?;
    println!(
        "{} composites written to {} ({} rejected)",
        summary.accepted,
        summary.manifest_path.display(),
        summary.rejected.len()
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<(), Failure> {
    let mut config = TrainConfig::load(&a.config).input()?;
    if let Some(preset) = a.preset {
        config = config.with_preset(preset);
        config.validate().input()?;
    }
    let manifest_path = config
        .manifest
        .clone()
        .ok_or_else(|| Failure::Input(anyhow!("{}: `manifest` is not set", a.config.display())))?;
    let manifest = Manifest::load(&manifest_path).input()?.split(data::Split::Train);
    let mut dataset = data::Dataset::new(manifest, config.image_size).input()?;
    let mut state = match &a.resume {
        Some(dir) => trainer::resume(dir, &config).input()?,
        None => trainer::TrainState::new(config.clone(), dataset.len()).input()?,
    };
    let start = state.iteration;
    let log_every = (config.iterations / 20).max(1);
    let reports = trainer::run(&mut state, &mut dataset, &config.output_dir, |i, r| {
        if i % log_every == 0 || i == config.iterations {
            log::info!("iteration {i}: total_g {:.4} style {:.4} content {:.4}", r.total_g, r.style, r.content);
        }
    })
    .runtime()?;
    println!("trained iterations {}..{}", start, state.iteration);
    if let (Some(first), Some(last)) = (reports.first(), reports.last()) {
        println!("total_g {:.4} -> {:.4}", first.total_g, last.total_g);
    }
    println!("final checkpoint: {}", config.output_dir.join(FINAL_CHECKPOINT).display());
    Ok(())
}

fn checkpoint_path(arg: Option<PathBuf>) -> Result<PathBuf, Failure> {
    arg.or_else(|| std::env::var_os(CHECKPOINT_ENV).map(PathBuf::from))
        .ok_or_else(|| Failure::Input(anyhow!("no --checkpoint given and {CHECKPOINT_ENV} is not set")))
}

fn harmonize_cmd(a: HarmonizeArgs) -> Result<(), Failure> {
    let checkpoint = checkpoint_path(a.checkpoint)?;
    let composite = ImageTensor::load_png(&a.composite).input()?;
    let background = ImageTensor::load_png(&a.background).input()?;
    let mask = load_mask_png(&a.mask).input()?;
    let (h, w) = (composite.height(), composite.width());
    if mask.dim() != (h, w) {
        return Err(Failure::Input(anyhow!(
            "mask {} is {}x{} but composite {} is {w}x{h}",
            a.mask.display(),
            mask.dim().1,
            mask.dim().0,
            a.composite.display()
        )));
    }
    let state = load_checkpoint(&checkpoint).input()?;
    let out = harmonize_image(&state.generator, &state.config.generator(), &composite, &background, &mask).runtime()?;
    out.image.save_png(&a.out).runtime()?;
    if let Some(path) = &a.soft_mask_out {
        save_mask_png(&out.soft_mask, path).runtime()?;
    }
    if a.size_check {
        let written = ImageTensor::load_png(&a.out).runtime()?;
        if (written.height(), written.width()) != (h, w) {
            return Err(Failure::Runtime(anyhow!(
                "output is {}x{}, expected {w}x{h}",
                written.width(),
                written.height()
            )));
        }
    }
    println!("{}", a.out.display());
    Ok(())
}

fn freqmap_cmd(a: FreqmapArgs) -> Result<(), Failure> {
    let image = ImageTensor::load_png(&a.image).input()?;
    log_magnitude_map(&image).save_png(&a.out).runtime()?;
    println!("{}", a.out.display());
    Ok(())
}

fn btrank_cmd(a: FitArgs) -> Result<(), Failure> {
    if a.max_iter == 0 || !(a.tol > 0.0) {
        return Err(Failure::Input(anyhow!("--max-iter and --tol must be positive")));
    }
    let tally = PairwiseTally::read(&a.tally).input()?;
    let opts = FitOptions {
        max_iter: a.max_iter,
        tol: a.tol,
    };
    let scores = btrank::fit(&tally, &opts)
        .with_context(|| format!("fitting {}", a.tally.display()))
        .input()?;
    print!("{}", scores.to_ranked_csv());
    Ok(())
}
