//! Command-line front end for the patch-wise editing pipeline.
//!
//! Exit codes: 0 on success, 1 on configuration errors and bad flags,
//! 2 on numeric divergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand, ValueEnum};

use hiresedit::inversion::{fit_corrections, invert, reverse, CorrectionMode};
use hiresedit::io::{self, BitDepth, RunDir};
use hiresedit::metrics::{self, RegionMask};
use hiresedit::pipeline::{
    ablate_sync, ablate_tau, ablation_table, generate_assets, run_edit, write_assets, AssetSpec, EditInputs, EditJob,
    EditTransform, Family, TAU_SWEEP,
};
use hiresedit::{DenoiserKind, DenoiserSpec, NoiseSchedule};

#[derive(Parser)]
#[command(name = "hiresedit", version, about = "Patch-wise high-resolution image editing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedural source, its low-resolution version, an edited reference and a mask.
    GenerateAssets(AssetArgs),
    /// Invert an image and report the reconstruction error.
    Invert(InvertArgs),
    /// Run an edit job.
    Edit {
        #[arg(long)]
        job: PathBuf,
        /// Overrides `io.output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare two images; with a mask, also over the masked region.
    Metrics {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Run a job with synchronization on and off and compare.
    AblateSync {
        #[arg(long)]
        job: PathBuf,
    },
    /// Run a job for several transfer cutoffs and compare.
    AblateTau {
        #[arg(long)]
        job: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = TAU_SWEEP)]
        taus: Vec<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Constant,
    Striped,
    Checker,
    GradientNoise,
    SplitTexture,
    Ramp,
}

impl From<FamilyArg> for Family {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Constant => Family::Constant,
            FamilyArg::Striped => Family::Striped,
            FamilyArg::Checker => Family::Checker,
            FamilyArg::GradientNoise => Family::GradientNoise,
            FamilyArg::SplitTexture => Family::SplitTexture,
            FamilyArg::Ramp => Family::Ramp,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TransformArg {
    Identity,
    HueRotation,
    PatternSubstitution,
}

#[derive(clap::Args)]
struct AssetArgs {
    /// Asset spec file (TOML); overrides the individual flags.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "checker")]
    family: FamilyArg,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 2)]
    factor: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    period: usize,
    #[arg(long, value_enum, default_value = "identity")]
    transform: TransformArg,
    /// Rotation angle for `hue-rotation`.
    #[arg(long, default_value_t = 90.0)]
    degrees: f64,
    /// Replacement family for `pattern-substitution`.
    #[arg(long, value_enum, default_value = "striped")]
    substitute: FamilyArg,
    /// Edit region `y0,x0,h,w` in high-resolution pixels.
    #[arg(long, value_delimiter = ',', num_args = 4)]
    region: Option<Vec<usize>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct InvertArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "analytic")]
    kind: KindArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "steps", default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 0.0)]
    correlation_length: f64,
    /// Fit closed-form corrections so the reverse process retraces the inversion.
    #[arg(long)]
    nulltext: bool,
    /// Write every latent of the trajectory.
    #[arg(long)]
    save_trajectory: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Analytic,
    Tinyconv,
}

fn asset_spec(a: &AssetArgs) -> Result<AssetSpec> {
    if let Some(p) = &a.spec {
        return Ok(AssetSpec::load(p)?);
    }
    let transform = match a.transform {
        TransformArg::Identity => EditTransform::Identity,
        TransformArg::HueRotation => EditTransform::HueRotation { degrees: a.degrees },
        TransformArg::PatternSubstitution => EditTransform::PatternSubstitution {
            family: a.substitute.into(),
        },
    };
    let region = a.region.as_ref().map(|r| [r[0], r[1], r[2], r[3]]);
    Ok(AssetSpec {
        family: a.family.into(),
        height: a.height,
        width: a.width,
        factor: a.factor,
        seed: a.seed,
        transform,
        period: a.period,
        region,
    })
}

fn load_job(path: &Path) -> Result<(EditJob, EditInputs)> {
    let job = EditJob::load(path)?;
    let inputs = EditInputs::load(&job)?;
    Ok((job, inputs))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateAssets(a) => {
            let spec = asset_spec(&a)?;
            let assets = generate_assets(&spec)?;
            for p in write_assets(&assets, &a.out)? {
                println!("{}", p.display());
            }
        }
        Command::Invert(a) => {
            let img = io::read_image(&a.image)?;
            let s = NoiseSchedule::cosine(a.steps, 0.008)?;
            let spec = DenoiserSpec {
                kind: match a.kind {
                    KindArg::Analytic => DenoiserKind::Analytic,
                    KindArg::Tinyconv => DenoiserKind::Tinyconv,
                },
                seed: a.seed,
                correlation_length: a.correlation_length,
                ..DenoiserSpec::default()
            };
            let d = spec.build(img.shape(), &s)?;
            let traj = invert(d.as_ref(), &img, &s)?;
            let corr = if a.nulltext {
                let (c, report) = fit_corrections(d.as_ref(), &traj, &s, CorrectionMode::ClosedForm)?;
                println!("max correction residual rms: {:.3e}", report.max_residual());
                Some(c)
            } else {
                None
            };
            let rec = reverse(d.as_ref(), traj.at(a.steps), &s, corr.as_ref())?;
            let mut dir = RunDir::create(&a.out)?;
            dir.write_tensor("terminal.tgd", traj.at(a.steps))?;
            let ext = if img.channels() == 3 { "ppm" } else { "pgm" };
            if img.channels() == 1 || img.channels() == 3 {
                dir.write_image(&format!("reconstruction.{ext}"), rec.at(0), BitDepth::Sixteen)?;
            }
            dir.write_tensor("reconstruction.tgd", rec.at(0))?;
            if a.save_trajectory {
                for (t, x) in traj.latents().iter().enumerate() {
                    dir.write_tensor(&format!("trajectory/t{t:03}.tgd"), x)?;
                }
            }
            dir.write_manifest(a.seed)?;
            println!("reconstruction rms: {:.6e}", rec.at(0).rms_diff(&img)?);
        }
        Command::Edit { job, out } => {
            let mut job = EditJob::load(&job)?;
            if let Some(o) = out {
                job.io.output_dir = o;
            }
            let report = run_edit(&job)?;
            println!("run directory: {}", report.run_dir.display());
            print!("{report}");
        }
        Command::Metrics { a, b, mask } => {
            let (a, b) = (io::read_image(&a)?, io::read_image(&b)?);
            let mask = match mask {
                Some(m) => Some(RegionMask::from_tensor(&io::read_image(&m)?)?),
                None => None,
            };
            print!("{}", metrics::compare(&a, &b, mask.as_ref())?);
        }
        Command::AblateSync { job } => {
            let (job, inputs) = load_job(&job)?;
            print!("{}", ablation_table(&ablate_sync(&job, &inputs)?));
        }
        Command::AblateTau { job, taus } => {
            let (job, inputs) = load_job(&job)?;
            if let Some(&t) = taus.iter().find(|&&t| t > job.schedule.total_steps) {
                bail!(hiresedit::Error::Config(format!(
                    "tau {t} exceeds T = {}",
                    job.schedule.total_steps
                )));
            }
            print!("{}", ablation_table(&ablate_tau(&job, &inputs, &taus)?));
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<hiresedit::Error>() {
        Some(e) if e.is_numeric() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
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
