use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use lddmm_cli::config::{JobConfig, MatcherChoice};
use lddmm_cli::evaluate::{evaluate, EvaluateJob, REPORT_SCHEMA};
use lddmm_cli::phantom::{phantom, PhantomJob, PhantomKind, Shape};
use lddmm_cli::register::{register, RegisterJob};
use lddmm_cli::transform::{transform, Interpolation, TransformJob};

#[derive(Parser)]
#[command(name = "lddmm", version, about = "Diffeomorphic image registration")]
struct Cli {
    /// Worker threads; 1 makes runs bit-reproducible.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Recorded in the manifest; drives random phantoms.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Affine pre-alignment followed by deformable registration.
    Register(RegisterArgs),
    /// Apply a computed transform to a volume or a landmark CSV.
    Transform(TransformArgs),
    /// Landmark errors, Jacobian range and final energy of a run.
    Evaluate(EvaluateArgs),
    /// Write a synthetic template/target pair with ground truth.
    Phantom(PhantomArgs),
    /// Print the JSON schema of the evaluation report.
    Schema,
}

#[derive(Args)]
struct RegisterArgs {
    /// Template volume header (`.json`); the moving image.
    #[arg(long)]
    template: PathBuf,
    /// Target volume header; its grid is the output grid.
    #[arg(long)]
    target: PathBuf,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// Job configuration JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's `sigma`.
    #[arg(long)]
    sigma: Option<f64>,
    /// Overrides the config's `matcher`: ssd, mi or mask.
    #[arg(long)]
    matcher: Option<MatcherChoice>,
    /// One threshold, or `template,target`.
    #[arg(long, value_delimiter = ',')]
    mask_threshold: Option<Vec<f64>>,
    /// Template landmark CSV to carry into target space.
    #[arg(long)]
    landmarks: Option<PathBuf>,
}

#[derive(Args)]
struct TransformArgs {
    /// A volume header (`.json`) or a landmark file (`.csv`).
    #[arg(long)]
    input: PathBuf,
    /// Output volume header or landmark CSV.
    #[arg(long)]
    out: PathBuf,
    /// Registration output directory; supplies affine, image map and point map.
    #[arg(long)]
    run: Option<PathBuf>,
    /// Pullback map, used to resample volumes.
    #[arg(long)]
    image_map: Option<PathBuf>,
    /// Point map, used to move landmarks.
    #[arg(long)]
    point_map: Option<PathBuf>,
    /// Affine JSON, applied before the deformation.
    #[arg(long)]
    affine: Option<PathBuf>,
    /// Output grid for affine-only volume transforms.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Defaults to nearest, which is right for label images.
    #[arg(long, value_enum)]
    interpolation: Option<Interpolation>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Finished registration directory.
    #[arg(long)]
    run: PathBuf,
    /// Report path.
    #[arg(long)]
    out: PathBuf,
    /// Template landmark CSV.
    #[arg(long)]
    landmarks: Option<PathBuf>,
    /// Target landmark CSV.
    #[arg(long)]
    target_landmarks: Option<PathBuf>,
    /// Target volume for the checkerboard; defaults to the run's input.
    #[arg(long)]
    target: Option<PathBuf>,
    /// Write a checkerboard of deformed template and target with this tile.
    #[arg(long)]
    checkerboard: Option<usize>,
    /// Write a deformation-grid image with this line spacing.
    #[arg(long)]
    grid_stride: Option<usize>,
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long, value_enum)]
    kind: PhantomKind,
    /// Grid dimensions, e.g. `128,128`.
    #[arg(long, value_delimiter = ',', required = true)]
    size: Vec<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "structured")]
    shape: Shape,
    /// Voxel spacing, the same on every axis.
    #[arg(long, default_value_t = 1.0)]
    spacing: f64,
    /// Translation in voxels.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    offset: Option<Vec<f64>>,
    /// Peak swirl angle in radians.
    #[arg(long, default_value_t = 0.8, allow_hyphen_values = true)]
    angle: f64,
    /// Swirl width relative to the half extent.
    #[arg(long, default_value_t = 0.5)]
    radius: f64,
    /// Largest warp displacement speed in voxels.
    #[arg(long, default_value_t = 4.0)]
    amplitude: f64,
    /// Gaussian velocity bumps in a warp.
    #[arg(long, default_value_t = 4)]
    bumps: usize,
    /// Amplitude of the smooth texture inside the structured phantom.
    #[arg(long, default_value_t = 0.0)]
    texture: f64,
    /// Invert the target contrast.
    #[arg(long)]
    invert: bool,
    /// Time slices of the generating velocity.
    #[arg(long, default_value_t = 10)]
    time_steps: usize,
}

fn run(cli: Cli) -> Result<()> {
    lddmm_cli::set_threads(cli.threads)?;
    match cli.command {
        Command::Register(a) => {
            let mut config = match (&a.config, a.sigma) {
                (Some(p), _) => JobConfig::read(p)?,
                (None, Some(s)) => JobConfig::with_sigma(s),
                (None, None) => bail!("register needs --config or --sigma"),
            };
            if let Some(s) = a.sigma {
                config.sigma = s;
            }
            if let Some(m) = a.matcher {
                config.matcher = m;
            }
            if a.mask_threshold.is_some() {
                config.mask_threshold = a.mask_threshold;
            }
            let manifest = register(&RegisterJob {
                template: a.template,
                target: a.target,
                out: a.out,
                config,
                landmarks: a.landmarks,
                threads: cli.threads,
                seed: cli.seed,
            })?;
            println!("{}", manifest.display());
        }
        Command::Transform(a) => {
            let written = transform(&TransformJob {
                input: a.input,
                out: a.out,
                run: a.run,
                image_map: a.image_map,
                point_map: a.point_map,
                affine: a.affine,
                reference: a.reference,
                interpolation: a.interpolation,
            })?;
            for p in written {
                println!("{}", p.display());
            }
        }
        Command::Evaluate(a) => {
            evaluate(&EvaluateJob {
                run: a.run,
                out: a.out.clone(),
                landmarks: a.landmarks,
                target_landmarks: a.target_landmarks,
                target: a.target,
                checkerboard: a.checkerboard,
                grid_stride: a.grid_stride,
            })?;
            println!("{}", a.out.display());
        }
        Command::Phantom(a) => {
            let mut job = PhantomJob::new(a.kind, &a.size, a.out);
            job.shape = a.shape;
            job.spacing = a.spacing;
            if let Some(o) = a.offset {
                job.offset = o;
            }
            job.angle = a.angle;
            job.radius = a.radius;
            job.amplitude = a.amplitude;
            job.bumps = a.bumps;
            job.texture = a.texture;
            job.invert = a.invert;
            job.seed = cli.seed.unwrap_or(0);
            job.time_steps = a.time_steps;
            let manifest = phantom(&job)?;
            println!("{}", manifest.display());
        }
        Command::Schema => println!("{REPORT_SCHEMA}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
