//! DDIM inversion trajectories and per-timestep reverse-trajectory corrections.
//!
//! A correction `delta_t` is an eps-space offset added to the noise
//! prediction inside the reverse step from `t`. Since the reverse step is
//! affine in eps, the offset that lands exactly on the forward latent
//! `x_{t-1}` has the closed form `(x_{t-1} - f_rev(x_t)) / c_t` with
//! `c_t = NoiseSchedule::reverse_eps_gain(t)`.

use serde::{Deserialize, Serialize};

use crate::denoiser::{predict_eps, Denoiser};
use crate::error::{Error, Result};
use crate::schedule::{ddim_forward_step, ddim_reverse_step, NoiseSchedule};
use crate::tensor::{Latent, Tensor};

/// Below this `|c_t|` a correction step is skipped and `delta_t` stays zero.
pub const MIN_EPS_GAIN: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Reverse,
}

/// Latents `x_0 .. x_T`, indexed by schedule timestep.
#[derive(Debug, Clone)]
pub struct Trajectory {
    latents: Vec<Latent>,
    direction: Direction,
}

impl Trajectory {
    pub fn new(latents: Vec<Latent>, direction: Direction) -> Result<Self> {
        let first = latents
            .first()
            .ok_or_else(|| Error::Config("empty trajectory".into()))?
            .shape();
        for l in &latents {
            l.ensure_shape(first)?;
        }
        Ok(Trajectory { latents, direction })
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn total_steps(&self) -> usize {
        self.latents.len() - 1
    }

    pub fn at(&self, t: usize) -> &Latent {
        &self.latents[t]
    }

    pub fn latents(&self) -> &[Latent] {
        &self.latents
    }

    pub fn shape(&self) -> [usize; 3] {
        self.latents[0].shape()
    }
}

fn finite_or_diverged(x: Latent, t: usize, what: &str) -> Result<Latent> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NumericDivergence {
            t,
            what: what.to_string(),
        })
    }
}

/// Runs the deterministic forward process from `x_0` up to `x_T`.
pub fn invert(d: &dyn Denoiser, x0: &Latent, s: &NoiseSchedule) -> Result<Trajectory> {
    if !x0.is_finite() {
        return Err(Error::NumericDivergence {
            t: 0,
            what: "non-finite input latent".into(),
        });
    }
    let mut latents = Vec::with_capacity(s.total_steps() + 1);
    latents.push(x0.clone());
    for t in 0..s.total_steps() {
        let cur = &latents[t];
        let eps = predict_eps(d, cur, t)?.eps;
        let next = ddim_forward_step(cur, t, &eps, s)?;
        latents.push(finite_or_diverged(next, t + 1, "inversion produced NaN/Inf")?);
    }
    Trajectory::new(latents, Direction::Forward)
}

/// One reverse step with an optional eps-space correction.
pub fn corrected_reverse_step(
    d: &dyn Denoiser,
    x_t: &Latent,
    t: usize,
    correction: Option<&Tensor>,
    s: &NoiseSchedule,
) -> Result<Latent> {
    let eps = predict_eps(d, x_t, t)?.eps;
    let eps = match correction {
        Some(c) => eps.zip_map(c, |e, o| (e as f64 + o as f64) as f32)?,
        None => eps,
    };
    ddim_reverse_step(x_t, t, &eps, s)
}

/// Runs the reverse process from `x_T` down to `x_0`, applying corrections when given.
pub fn reverse(
    d: &dyn Denoiser,
    x_t: &Latent,
    s: &NoiseSchedule,
    corrections: Option<&CorrectionSet>,
) -> Result<Trajectory> {
    let total = s.total_steps();
    let mut latents = vec![Tensor::zeros(x_t.shape()); total + 1];
    latents[total] = x_t.clone();
    for t in (1..=total).rev() {
        let delta = corrections.and_then(|c| c.get(t));
        let prev = corrected_reverse_step(d, &latents[t], t, delta, s)?;
        latents[t - 1] = finite_or_diverged(prev, t - 1, "reverse process produced NaN/Inf")?;
    }
    Trajectory::new(latents, Direction::Reverse)
}

/// Per-timestep eps-space offsets `delta_1 .. delta_T`; `None` means zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionSet {
    offsets: Vec<Option<Tensor>>,
}

impl CorrectionSet {
    /// All-zero set, as used when correction is disabled.
    pub fn disabled(total_steps: usize) -> Self {
        CorrectionSet {
            offsets: vec![None; total_steps + 1],
        }
    }

    pub fn get(&self, t: usize) -> Option<&Tensor> {
        self.offsets.get(t).and_then(|o| o.as_ref())
    }

    pub fn is_zero(&self) -> bool {
        self.offsets
            .iter()
            .flatten()
            .all(|o| o.data().iter().all(|&v| v == 0.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum CorrectionMode {
    ClosedForm,
    /// Gradient descent on the per-step squared error. The first step uses
    /// `step`; later steps use the Barzilai-Borwein step length.
    Gradient {
        iters: usize,
        step: f64,
        tol: f64,
    },
}

impl CorrectionMode {
    pub fn gradient() -> Self {
        CorrectionMode::Gradient {
            iters: 50,
            step: 1.0,
            tol: 1e-7,
        }
    }
}

/// Outcome of [`fit_corrections`]: per-timestep residual RMS measured while
/// walking the corrected reverse process (index 0 unused).
#[derive(Debug, Clone)]
pub struct CorrectionReport {
    pub residuals: Vec<f64>,
    pub iterations: Vec<usize>,
    pub converged: bool,
}

impl CorrectionReport {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().copied().fold(0.0, f64::max)
    }
}

/// Fits corrections so the reverse process from `fwd.at(T)` retraces `fwd`.
///
/// Step `t` is anchored at the forward latent `x_t` and targets `x_{t-1}`, so
/// each offset depends only on its own pair of forward latents. Gradient mode
/// that misses `tol` within its budget is reported, not raised.
pub fn fit_corrections(
    d: &dyn Denoiser,
    fwd: &Trajectory,
    s: &NoiseSchedule,
    mode: CorrectionMode,
) -> Result<(CorrectionSet, CorrectionReport)> {
    if fwd.direction() != Direction::Forward {
        return Err(Error::Config("corrections are fit against a forward trajectory".into()));
    }
    if fwd.total_steps() != s.total_steps() {
        return Err(Error::Config(format!(
            "trajectory has {} steps, schedule {}",
            fwd.total_steps(),
            s.total_steps()
        )));
    }
    let total = s.total_steps();
    let mut set = CorrectionSet::disabled(total);
    let mut iterations = vec![0; total + 1];
    #[allow(clippy::needless_range_loop)]
    for t in 1..=total {
        let gain = s.reverse_eps_gain(t)?;
        if gain.abs() < MIN_EPS_GAIN {
            continue;
        }
        let x_t = fwd.at(t);
        let target = fwd.at(t - 1);
        let base = corrected_reverse_step(d, x_t, t, None, s)?;
        let delta = match mode {
            CorrectionMode::ClosedForm => target.zip_map(&base, |tg, b| ((tg as f64 - b as f64) / gain) as f32)?,
            CorrectionMode::Gradient { iters, step, tol } => {
                let (delta, n) = gradient_fit(d, x_t, t, target, s, gain, iters, step, tol)?;
                iterations[t] = n;
                delta
            }
        };
        set.offsets[t] = Some(delta);
    }

    // walk the corrected reverse process to measure what was achieved
    let mut residuals = vec![0.0; total + 1];
    let mut cur = fwd.at(total).clone();
    for t in (1..=total).rev() {
        cur = corrected_reverse_step(d, &cur, t, set.get(t), s)?;
        cur = finite_or_diverged(cur, t - 1, "corrected reverse produced NaN/Inf")?;
        residuals[t] = cur.rms_diff(fwd.at(t - 1))?;
    }
    let converged = match mode {
        CorrectionMode::ClosedForm => true,
        CorrectionMode::Gradient { tol, .. } => residuals.iter().all(|&r| r <= tol.max(1e-4)),
    };
    Ok((
        set,
        CorrectionReport {
            residuals,
            iterations,
            converged,
        },
    ))
}

#[allow(clippy::too_many_arguments)]
fn gradient_fit(
    d: &dyn Denoiser,
    x_t: &Latent,
    t: usize,
    target: &Latent,
    s: &NoiseSchedule,
    gain: f64,
    iters: usize,
    step: f64,
    tol: f64,
) -> Result<(Tensor, usize)> {
    let eps = predict_eps(d, x_t, t)?.eps;
    let grad_at = |delta: &Tensor| -> Result<(Vec<f64>, f64)> {
        let e = eps.zip_map(delta, |a, b| (a as f64 + b as f64) as f32)?;
        let out = ddim_reverse_step(x_t, t, &e, s)?;
        let rms = target.rms_diff(&out)?;
        // dL/d delta = -2 c_t (target - f_rev(delta))
        let g = target
            .data()
            .iter()
            .zip(out.data())
            .map(|(&tg, &o)| -2.0 * gain * (tg as f64 - o as f64))
            .collect();
        Ok((g, rms))
    };
    let mut delta: Vec<f64> = vec![0.0; eps.len()];
    let to_tensor = |v: &[f64]| Tensor::from_vec(eps.shape(), v.iter().map(|&x| x as f32).collect());
    let (mut g, mut rms) = grad_at(&to_tensor(&delta)?)?;
    let mut lr = step;
    let mut n = 0;
    while n < iters && rms > tol {
        let next: Vec<f64> = delta.iter().zip(&g).map(|(d, g)| d - lr * g).collect();
        let (g_next, rms_next) = grad_at(&to_tensor(&next)?)?;
        // Barzilai-Borwein: |dx|^2 / <dx, dg>
        let (mut ss, mut sy) = (0.0, 0.0);
        for i in 0..delta.len() {
            let dx = next[i] - delta[i];
            ss += dx * dx;
            sy += dx * (g_next[i] - g[i]);
        }
        if sy > 0.0 {
            lr = ss / sy;
        }
        delta = next;
        g = g_next;
        rms = rms_next;
        n += 1;
    }
    Ok((to_tensor(&delta)?, n))
}
