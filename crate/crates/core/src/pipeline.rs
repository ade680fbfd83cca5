//! End-to-end patch-wise editing and the procedural asset generator.
//!
//! Stages of [`edit`]:
//! 1. derive the low-resolution source by box downsampling;
//! 2. upsample both low-resolution inputs to canvas size and split all three
//!    images into the patch grid;
//! 3. per patch, invert every input, fit source corrections when enabled, and
//!    fit the transfer function against the high-resolution source;
//! 4. sample the reference from its own terminal latent with the transfer
//!    injected, synchronizing neighbours for `t < tau` when enabled;
//! 5. merge the patches and score the result.
//!
//! Diffusion runs directly in pixel space (identity codec).

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserSpec};
use crate::error::{Error, Result};
use crate::inversion::{fit_corrections, invert, reverse, CorrectionMode, CorrectionReport, Trajectory};
use crate::io::{self, BitDepth, RunDir};
use crate::metrics::{self, MetricRow, MetricsTable, RegionMask};
use crate::patchgrid::{downsample, upsample_to_canvas, PatchGrid};
use crate::schedule::NoiseSchedule;
use crate::sync::{sync_reverse_step, PatchState, SyncPlan};
use crate::tensor::{Latent, SplitMix64, Tensor};
use crate::transfer::{fit_transfer, inject_reverse_step, LossLog, OptimizerConfig, TransferFunction};

/// Default transfer cutoff for `T = 50`.
pub const DEFAULT_TAU: usize = 15;
/// Alternative cutoff preset; the sweep covers both and the midpoint.
pub const ALT_TAU: usize = 35;
pub const TAU_SWEEP: [usize; 3] = [15, 25, 35];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoConfig {
    pub source_high: PathBuf,
    pub reference_low: PathBuf,
    #[serde(default)]
    pub mask: Option<PathBuf>,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub patch_height: usize,
    pub patch_width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub total_steps: usize,
    #[serde(default = "default_offset")]
    pub s: f64,
}

fn default_offset() -> f64 {
    0.008
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            total_steps: 50,
            s: default_offset(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferConfig {
    pub tau: usize,
    pub lr: f64,
    pub iters: usize,
    pub backtracking: bool,
    pub constant_only: bool,
    /// `false` skips transfer fitting and injection entirely.
    pub enabled: bool,
}

impl Default for TransferConfig {
    fn default() -> Self {
        let o = OptimizerConfig::default();
        TransferConfig {
            tau: DEFAULT_TAU,
            lr: o.lr,
            iters: o.iters,
            backtracking: o.backtracking,
            constant_only: o.constant_only,
            enabled: true,
        }
    }
}

impl TransferConfig {
    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            iters: self.iters,
            lr: self.lr,
            backtracking: self.backtracking,
            constant_only: self.constant_only,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyncConfig {
    pub enabled: bool,
}

impl Default for SyncConfig {
    fn default() -> Self {
        SyncConfig { enabled: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NullTextConfig {
    pub enabled: bool,
    /// `[nulltext.correction]` table; `mode = "closed_form"` or `"gradient"`.
    pub correction: CorrectionMode,
}

impl Default for NullTextConfig {
    fn default() -> Self {
        NullTextConfig {
            enabled: true,
            correction: CorrectionMode::ClosedForm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Persist every patch trajectory as tensor files.
    pub save_trajectories: bool,
    /// Worker threads for the patch loop; `None` uses one per patch.
    pub threads: Option<usize>,
}

/// A job file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditJob {
    #[serde(default)]
    pub seed: u64,
    pub io: IoConfig,
    pub grid: GridConfig,
    pub denoiser: DenoiserSpec,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub transfer: TransferConfig,
    #[serde(default)]
    pub sync: SyncConfig,
    #[serde(default)]
    pub nulltext: NullTextConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl EditJob {
    /// Parses a job; relative paths resolve against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut job: EditJob = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        fix(&mut job.io.source_high);
        fix(&mut job.io.reference_low);
        fix(&mut job.io.output_dir);
        if let Some(m) = job.io.mask.as_mut() {
            fix(m);
        }
        job.validate()?;
        Ok(job)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("job serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.transfer.tau > self.schedule.total_steps {
            return Err(Error::Config(format!(
                "transfer.tau = {} exceeds schedule.T = {}",
                self.transfer.tau, self.schedule.total_steps
            )));
        }
        if self.grid.patch_height == 0 || self.grid.patch_width == 0 {
            return Err(Error::Config("grid patch dims must be positive".into()));
        }
        if !(self.transfer.lr > 0.0 && self.transfer.lr.is_finite()) {
            return Err(Error::Config(format!(
                "transfer.lr must be positive, got {}",
                self.transfer.lr
            )));
        }
        if self.output.threads == Some(0) {
            return Err(Error::Config("output.threads must be at least 1".into()));
        }
        Ok(())
    }
}

/// Loaded input images.
#[derive(Debug, Clone)]
pub struct EditInputs {
    pub source_high: Latent,
    pub reference_low: Latent,
    /// Region scored by the masked metrics.
    pub mask: Option<RegionMask>,
}

impl EditInputs {
    pub fn load(job: &EditJob) -> Result<Self> {
        let mask = match &job.io.mask {
            Some(p) => Some(RegionMask::from_tensor(&io::read_image(p)?)?),
            None => None,
        };
        Ok(EditInputs {
            source_high: io::read_image(&job.io.source_high)?,
            reference_low: io::read_image(&job.io.reference_low)?,
            mask,
        })
    }
}

/// Per-patch state produced by stage 3.
#[derive(Debug, Clone)]
pub struct PatchFit {
    pub transfer: TransferFunction,
    pub ledger: Vec<LossLog>,
    pub source_high: Trajectory,
    pub source_low: Trajectory,
    pub reference_low: Trajectory,
    pub corrections: Option<CorrectionReport>,
    /// Reverse process from the source's terminal latent, corrected when enabled.
    pub reconstruction: Latent,
    /// `||reverse(x_high_T) - x_high_0||_RMS` using the fitted corrections if any.
    pub reconstruction_rms: f64,
}

/// Everything [`edit`] computes.
#[derive(Debug, Clone)]
pub struct EditResult {
    pub output: Latent,
    pub reconstruction: Latent,
    pub grid: (usize, usize),
    pub patches: Vec<PatchFit>,
    pub seam_score: Option<f64>,
    pub metrics: MetricsTable,
}

impl EditResult {
    pub fn ledger(&self) -> impl Iterator<Item = &LossLog> {
        self.patches.iter().flat_map(|p| p.ledger.iter())
    }

    pub fn reconstruction_rms(&self) -> f64 {
        self.patches.iter().map(|p| p.reconstruction_rms).fold(0.0, f64::max)
    }
}

fn factor(high: usize, low: usize, axis: &str) -> Result<usize> {
    if low == 0 || !high.is_multiple_of(low) {
        return Err(Error::Config(format!(
            "reference {axis} {low} does not divide source {axis} {high}"
        )));
    }
    Ok(high / low)
}

fn fit_patch(
    d: &dyn Denoiser,
    s: &NoiseSchedule,
    job: &EditJob,
    i: usize,
    high: &Latent,
    low: &Latent,
    reference: &Latent,
) -> Result<PatchFit> {
    let stage = |e: Error| e.at_stage("invert", Some(i), None);
    let x_high = invert(d, high, s).map_err(stage)?;
    let x_low = invert(d, low, s).map_err(stage)?;
    let y_low = invert(d, reference, s).map_err(stage)?;

    // corrections only steer the source reconstruction; transfer fitting walks
    // the uncorrected low trajectory so that reference sampling, which is
    // uncorrected, replays the same maps
    let (high_corr, report) = if job.nulltext.enabled {
        let (hc, hr) = fit_corrections(d, &x_high, s, job.nulltext.correction)
            .map_err(|e| e.at_stage("corrections", Some(i), None))?;
        (Some(hc), Some(hr))
    } else {
        (None, None)
    };
    let total = s.total_steps();
    let recon = reverse(d, x_high.at(total), s, high_corr.as_ref()).map_err(stage)?;
    let reconstruction = recon.at(0).clone();
    let reconstruction_rms = reconstruction.rms_diff(high)?;

    let tau = if job.transfer.enabled { job.transfer.tau } else { 0 };
    let fit = fit_transfer(d, &x_high, &x_low, s, tau, &job.transfer.optimizer(), None, i)?;
    log::info!("patch {i}: inverted and fitted, reconstruction rms {reconstruction_rms:.3e}");
    Ok(PatchFit {
        transfer: fit.transfer,
        ledger: fit.ledger,
        source_high: x_high,
        source_low: x_low,
        reference_low: y_low,
        corrections: report,
        reconstruction,
        reconstruction_rms,
    })
}

/// Stage 4: injected, optionally synchronized, reference sampling.
fn sample(d: &dyn Denoiser, s: &NoiseSchedule, fits: &[PatchFit], plan: Option<&SyncPlan>) -> Result<Vec<Latent>> {
    let total = s.total_steps();
    let mut ys: Vec<Latent> = fits.iter().map(|f| f.reference_low.at(total).clone()).collect();
    for t in (1..=total).rev() {
        let stepped: Vec<Latent> = ys
            .par_iter()
            .zip(fits.par_iter())
            .enumerate()
            .map(|(i, (y, f))| {
                inject_reverse_step(&f.transfer, d, y, t, s).map_err(|e| e.at_stage("sample", Some(i), Some(t)))
            })
            .collect::<Result<_>>()?;
        ys = match plan {
            Some(p) if p.lambda(t) > 0.0 => {
                let states: Vec<PatchState> = stepped.into_iter().map(|latent| PatchState { latent, t }).collect();
                sync_reverse_step(d, &states, p, t, s).map_err(|e| e.at_stage("sync", None, Some(t)))?
            }
            _ => stepped,
        };
        if let Some(i) = ys.iter().position(|y| !y.is_finite()) {
            return Err(Error::NumericDivergence {
                t: t - 1,
                what: "reference latent".into(),
            }
            .at_stage("sample", Some(i), Some(t)));
        }
    }
    Ok(ys)
}

/// Runs stages 1 to 5 in memory.
pub fn edit(job: &EditJob, inputs: &EditInputs) -> Result<EditResult> {
    job.validate()?;
    let src = &inputs.source_high;
    let reference = &inputs.reference_low;
    if src.channels() != reference.channels() {
        return Err(Error::Config(format!(
            "source has {} channels, reference {}",
            src.channels(),
            reference.channels()
        )));
    }
    let fy = factor(src.height(), reference.height(), "height")?;
    let fx = factor(src.width(), reference.width(), "width")?;
    if fy != fx {
        return Err(Error::Config(format!("anisotropic scale {fy}x{fx}")));
    }
    let (h, w) = (src.height(), src.width());
    let source_low = downsample(src, fy).map_err(|e| e.at_stage("downsample", None, None))?;
    let up = |x: &Latent| upsample_to_canvas(x, h, w).map_err(|e| e.at_stage("upsample", None, None));
    let (ph, pw) = (job.grid.patch_height, job.grid.patch_width);
    let split = |x: &Latent| PatchGrid::split(x, ph, pw).map_err(|e| e.at_stage("split", None, None));
    let g_high = split(src)?;
    let g_low = split(&up(&source_low)?)?;
    let g_ref = split(&up(reference)?)?;

    let s = NoiseSchedule::cosine(job.schedule.total_steps, job.schedule.s)?;
    let d = job.denoiser.build([src.channels(), ph, pw], &s)?;
    let d = d.as_ref();
    log::info!("{} x {} patches, T = {}", g_high.rows(), g_high.cols(), s.total_steps());

    let fits: Vec<PatchFit> = (0..g_high.len())
        .into_par_iter()
        .map(|i| fit_patch(d, &s, job, i, g_high.patch(i), g_low.patch(i), g_ref.patch(i)))
        .collect::<Result<_>>()?;

    let tau = if job.transfer.enabled { job.transfer.tau } else { 0 };
    let plan = if job.sync.enabled {
        Some(SyncPlan::new(g_high.rows(), g_high.cols(), ph, pw, tau).map_err(|e| e.at_stage("sync", None, None))?)
    } else {
        None
    };
    let ys = sample(d, &s, &fits, plan.as_ref())?;
    log::info!("sampled {} patches (sync {})", ys.len(), plan.is_some());
    let output = PatchGrid::from_patches(g_high.rows(), g_high.cols(), ys)?.merge()?;
    let recon = fits.iter().map(|f| f.reconstruction.clone()).collect();
    let reconstruction = PatchGrid::from_patches(g_high.rows(), g_high.cols(), recon)?.merge()?;

    let seam_score = metrics::seam_score(&output, g_high.rows(), g_high.cols())?;
    let mut table = metrics::compare(&output, src, inputs.mask.as_ref())?;
    table.push(MetricRow::new("seam_score", "output", seam_score));
    Ok(EditResult {
        output,
        reconstruction,
        grid: (g_high.rows(), g_high.cols()),
        patches: fits,
        seam_score,
        metrics: table,
    })
}

/// Summary of a completed run.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub result: EditResult,
    pub run_dir: PathBuf,
    pub manifest: String,
    pub seed: u64,
}

impl RunReport {
    /// Tab-separated per-step loss table: `patch  t  iter  loss`.
    pub fn loss_table(&self) -> String {
        loss_table(&self.result)
    }
}

pub fn loss_table(result: &EditResult) -> String {
    let mut out = String::from("patch\tt\titer\tloss\n");
    for log in result.ledger() {
        for (k, l) in log.losses.iter().enumerate() {
            let _ = writeln!(out, "{}\t{}\t{}\t{:.9e}", log.patch_id, log.t, k, l);
        }
    }
    out
}

impl fmt::Display for RunReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = &self.result;
        writeln!(f, "seed: {}", self.seed)?;
        writeln!(f, "grid: {} x {} patches", r.grid.0, r.grid.1)?;
        writeln!(
            f,
            "output: {} x {} x {}",
            r.output.channels(),
            r.output.height(),
            r.output.width()
        )?;
        writeln!(
            f,
            "source reconstruction rms (max over patches): {:.6e}",
            r.reconstruction_rms()
        )?;
        let logs: Vec<&LossLog> = r.ledger().collect();
        if !logs.is_empty() {
            let initial: f64 = logs.iter().map(|l| l.losses[0]).sum();
            let fin: f64 = logs.iter().map(|l| *l.losses.last().unwrap()).sum();
            let monotone = logs.iter().all(|l| l.is_monotone());
            writeln!(
                f,
                "transfer loss summed over steps: {initial:.6e} -> {fin:.6e} (monotone: {monotone})"
            )?;
        }
        writeln!(f, "seam score: {}", metrics::format_value(r.seam_score))?;
        writeln!(f)?;
        write!(f, "{}", r.metrics)
    }
}

/// Loads the job's inputs, runs [`edit`], and writes the run directory.
///
/// The run directory is written even when a stage fails: it then holds
/// `job.toml` and `error.txt` with the full error chain.
pub fn run_edit(job: &EditJob) -> Result<RunReport> {
    let inputs = EditInputs::load(job)?;
    run_edit_with(job, &inputs)
}

pub fn run_edit_with(job: &EditJob, inputs: &EditInputs) -> Result<RunReport> {
    let mut dir = RunDir::create(&job.io.output_dir)?;
    dir.write_bytes("job.toml", job.to_toml().as_bytes())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(job.output.threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let result = match pool.install(|| edit(job, inputs)) {
        Ok(r) => r,
        Err(e) => {
            let mut chain = e.to_string();
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                chain.push_str(&format!(": {s}"));
                src = s.source();
            }
            // best effort; the stage error is what the caller needs
            let _ = dir.write_bytes("error.txt", format!("{chain}\n").as_bytes());
            return Err(e);
        }
    };

    let ext = if result.output.channels() == 3 { "ppm" } else { "pgm" };
    dir.write_image(&format!("output.{ext}"), &result.output, BitDepth::Sixteen)?;
    dir.write_tensor("output.tgd", &result.output)?;
    dir.write_image(
        &format!("source_reconstruction.{ext}"),
        &result.reconstruction,
        BitDepth::Sixteen,
    )?;
    for p in &result.patches {
        dir.write_transfer(&p.transfer)?;
        if job.output.save_trajectories {
            let id = p.transfer.patch_id();
            for (name, traj) in [
                ("source_high", &p.source_high),
                ("source_low", &p.source_low),
                ("reference_low", &p.reference_low),
            ] {
                for (t, x) in traj.latents().iter().enumerate() {
                    dir.write_tensor(&format!("trajectories/patch{id:03}/{name}_t{t:03}.tgd"), x)?;
                }
            }
        }
    }
    dir.write_bytes("losses.tsv", loss_table(&result).as_bytes())?;
    dir.write_bytes("metrics.tsv", result.metrics.to_string().as_bytes())?;
    let mut report = RunReport {
        result,
        run_dir: dir.root().to_path_buf(),
        manifest: String::new(),
        seed: job.seed,
    };
    dir.write_bytes("report.txt", report.to_string().as_bytes())?;
    report.manifest = dir.write_manifest(job.seed)?;
    Ok(report)
}

/// One row of an ablation comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub seam_score: Option<f64>,
    pub metrics: MetricsTable,
}

/// Tab-separated: `variant  seam_score  mse  psnr  ssim` (full-image metrics).
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant\tseam_score\tmse\tpsnr\tssim\n");
    for r in rows {
        let v = |m: &str| metrics::format_value(r.metrics.get(m, "full"));
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            r.label,
            metrics::format_value(r.seam_score),
            v("mse"),
            v("psnr"),
            v("ssim")
        );
    }
    out
}

fn ablation_row(label: String, r: &EditResult) -> AblationRow {
    AblationRow {
        label,
        seam_score: r.seam_score,
        metrics: r.metrics.clone(),
    }
}

/// The same job with synchronization on, then off.
pub fn ablate_sync(job: &EditJob, inputs: &EditInputs) -> Result<Vec<AblationRow>> {
    [true, false]
        .into_iter()
        .map(|on| {
            let mut j = job.clone();
            j.sync.enabled = on;
            let r = edit(&j, inputs)?;
            Ok(ablation_row(format!("sync={}", if on { "on" } else { "off" }), &r))
        })
        .collect()
}

/// The same job for every cutoff in `taus`.
pub fn ablate_tau(job: &EditJob, inputs: &EditInputs, taus: &[usize]) -> Result<Vec<AblationRow>> {
    taus.iter()
        .map(|&tau| {
            let mut j = job.clone();
            j.transfer.tau = tau;
            let r = edit(&j, inputs).map_err(|e| e.at_stage("tau sweep", None, Some(tau)))?;
            Ok(ablation_row(format!("tau={tau}"), &r))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Procedural assets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Constant,
    Striped,
    Checker,
    GradientNoise,
    /// Sinusoidal texture whose period halves below the horizontal midline.
    SplitTexture,
    /// Smooth vertical ramp.
    Ramp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum EditTransform {
    Identity,
    /// Rotation of the colour vector about the grey axis by `degrees`.
    HueRotation {
        degrees: f64,
    },
    /// Replaces the pattern inside the edit region with another family.
    PatternSubstitution {
        family: Family,
    },
}

/// Procedural asset description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssetSpec {
    pub family: Family,
    pub height: usize,
    pub width: usize,
    /// High-to-low resolution factor.
    pub factor: usize,
    #[serde(default)]
    pub seed: u64,
    pub transform: EditTransform,
    /// Pattern period in high-resolution pixels.
    #[serde(default = "default_period")]
    pub period: usize,
    /// Edit region `[y0, x0, h, w]` at high resolution; defaults to the
    /// central half of the canvas.
    #[serde(default)]
    pub region: Option<[usize; 4]>,
}

fn default_period() -> usize {
    4
}

impl AssetSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }
}

/// Generated images, all with values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Assets {
    pub source_high: Latent,
    pub source_low: Latent,
    pub reference_low: Latent,
    /// Active outside the edit region: the part an edit must preserve.
    pub mask: Latent,
}

const PALETTE: [[f32; 3]; 2] = [[0.65, 0.35, 0.45], [0.35, 0.6, 0.55]];

fn pattern(family: Family, h: usize, w: usize, period: usize, rng: &mut SplitMix64) -> Latent {
    let p = period.max(1);
    match family {
        Family::Constant => Tensor::from_fn([3, h, w], |c, _, _| PALETTE[0][c]),
        Family::Striped => Tensor::from_fn([3, h, w], |c, y, _| PALETTE[(y / p) % 2][c]),
        Family::Checker => Tensor::from_fn([3, h, w], |c, y, x| PALETTE[(y / p + x / p) % 2][c]),
        Family::GradientNoise => {
            let noise: Vec<f32> = (0..3 * h * w).map(|_| rng.uniform(-0.08, 0.08)).collect();
            Tensor::from_fn([3, h, w], |c, y, x| {
                let g = 0.3 + 0.4 * (y as f32 / h.max(2) as f32 * 0.6 + x as f32 / w.max(2) as f32 * 0.4);
                let tint = [0.0, 0.05, -0.05][c];
                g + tint + noise[(c * h + y) * w + x]
            })
        }
        Family::SplitTexture => Tensor::from_fn([3, h, w], |c, y, x| {
            let period = if y < h / 2 { 2 * p } else { p } as f32;
            let tau = 2.0 * std::f32::consts::PI / period;
            let v = (tau * x as f32).sin() * (tau * y as f32).cos();
            0.5 + [0.0, 0.03, -0.03][c] + 0.3 * v
        }),
        Family::Ramp => Tensor::from_fn([3, h, w], |c, y, _| {
            let r = y as f32 / (h.max(2) - 1) as f32;
            0.7 + [0.0, -0.05, 0.05][c] + 0.1 * r
        }),
    }
}

/// Rotation about the grey axis; preserves the channel mean exactly in exact arithmetic.
fn hue_matrix(degrees: f64) -> [[f64; 3]; 3] {
    let th = degrees.to_radians();
    let (c, s) = (th.cos(), th.sin());
    let a = (1.0 - c) / 3.0;
    let b = s / 3f64.sqrt();
    [[c + a, a - b, a + b], [a + b, c + a, a - b], [a - b, a + b, c + a]]
}

fn rotate_hue(img: &Latent, degrees: f64, inside: impl Fn(usize, usize) -> bool) -> Latent {
    let m = hue_matrix(degrees);
    Tensor::from_fn(img.shape(), |c, y, x| {
        if !inside(y, x) {
            return img.get(c, y, x);
        }
        let v: f64 = (0..3).map(|k| m[c][k] * img.get(k, y, x) as f64).sum();
        v as f32
    })
}

/// Builds the source, its downsampled version, the edited low-resolution
/// reference, and the preservation mask. Deterministic in the seed.
pub fn generate_assets(spec: &AssetSpec) -> Result<Assets> {
    let (h, w, k) = (spec.height, spec.width, spec.factor);
    if h == 0 || w == 0 || k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::Config(format!("{h}x{w} canvas is not divisible by factor {k}")));
    }
    let [ry, rx, rh, rw] = spec.region.unwrap_or([h / 4, w / 4, h / 2, w / 2]);
    if ry + rh > h || rx + rw > w {
        return Err(Error::Config("edit region exceeds the canvas".into()));
    }
    let mut rng = SplitMix64::new(spec.seed);
    let source_high = pattern(spec.family, h, w, spec.period, &mut rng);
    let source_low = downsample(&source_high, k)?;
    let (lh, lw) = (h / k, w / k);
    // low-resolution pixel is edited when its block centre lies in the region
    let inside = |y: usize, x: usize| {
        let (cy, cx) = (y * k + k / 2, x * k + k / 2);
        cy >= ry && cy < ry + rh && cx >= rx && cx < rx + rw
    };
    let reference_low = match spec.transform {
        EditTransform::Identity => source_low.clone(),
        EditTransform::HueRotation { degrees } => rotate_hue(&source_low, degrees, inside),
        EditTransform::PatternSubstitution { family } => {
            let other = downsample(&pattern(family, h, w, spec.period, &mut rng), k)?;
            Tensor::from_fn([3, lh, lw], |c, y, x| {
                if inside(y, x) {
                    other.get(c, y, x)
                } else {
                    source_low.get(c, y, x)
                }
            })
        }
    };
    let mask = Tensor::from_fn([1, h, w], |_, y, x| {
        let edited = y >= ry && y < ry + rh && x >= rx && x < rx + rw;
        if edited {
            0.0
        } else {
            1.0
        }
    });
    Ok(Assets {
        source_high,
        source_low,
        reference_low,
        mask,
    })
}

/// Writes the assets as 16-bit NetPBM files and returns their paths.
pub fn write_assets(assets: &Assets, dir: &Path) -> Result<Vec<PathBuf>> {
    let files = [
        ("source_high.ppm", &assets.source_high),
        ("source_low.ppm", &assets.source_low),
        ("reference_low.ppm", &assets.reference_low),
        ("mask.pgm", &assets.mask),
    ];
    files
        .iter()
        .map(|(name, img)| {
            let p = dir.join(name);
            io::write_image(img, &p, BitDepth::Sixteen)?;
            Ok(p)
        })
        .collect()
}
