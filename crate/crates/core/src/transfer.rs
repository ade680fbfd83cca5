//! Per-timestep feature transfer functions.
//!
//! For `t < tau` a transfer function maps the site feature `h` to
//! `delta_h = W_t h + b_t`, a 1x1 convolution applied at every pixel. The
//! parameters are fit at test time so that the reverse trajectory started
//! from the low-resolution source latent follows the high-resolution one,
//! then replayed while sampling the reference.

use serde::{Deserialize, Serialize};

use crate::denoiser::{inject, Denoiser};
use crate::error::{Error, Result};
use crate::inversion::{CorrectionSet, Direction, Trajectory};
use crate::schedule::{ddim_reverse_step, NoiseSchedule};
use crate::tensor::{FeatureTensor, Latent, Tensor};

/// `W` (row-major `out x in`) and `b` for one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferParams {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl TransferParams {
    pub fn zeros(channels: usize) -> Self {
        TransferParams {
            weight: vec![0.0; channels * channels],
            bias: vec![0.0; channels],
        }
    }

    pub fn identity(channels: usize) -> Self {
        let mut p = Self::zeros(channels);
        for c in 0..channels {
            p.weight[c * channels + c] = 1.0;
        }
        p
    }

    pub fn channels(&self) -> usize {
        self.bias.len()
    }

    fn is_zero(&self) -> bool {
        self.weight.iter().chain(&self.bias).all(|&v| v == 0.0)
    }

    /// `W h + b` at every pixel, accumulated in f64.
    pub fn apply(&self, h: &FeatureTensor) -> Result<FeatureTensor> {
        let c = self.channels();
        if h.channels() != c {
            return Err(Error::dims(&[c], &[h.channels()]));
        }
        let n = h.height() * h.width();
        let mut out = Tensor::zeros(h.shape());
        for o in 0..c {
            let row = &self.weight[o * c..(o + 1) * c];
            let dst = out.plane_mut(o);
            for (p, d) in dst.iter_mut().enumerate().take(n) {
                let mut acc = self.bias[o] as f64;
                for (i, &w) in row.iter().enumerate() {
                    acc += w as f64 * h.data()[i * n + p] as f64;
                }
                *d = acc as f32;
            }
        }
        Ok(out)
    }
}

/// Transfer parameters for timesteps `1 .. tau`; zero at and beyond `tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferFunction {
    patch_id: usize,
    cutoff: usize,
    channels: usize,
    /// Indexed by timestep; `None` means zero parameters.
    params: Vec<Option<TransferParams>>,
}

impl TransferFunction {
    /// Zero-initialised transfer function for a site with `channels` channels.
    pub fn new(patch_id: usize, cutoff: usize, channels: usize) -> Self {
        TransferFunction {
            patch_id,
            cutoff,
            channels,
            params: vec![None; cutoff.max(1)],
        }
    }

    pub fn patch_id(&self) -> usize {
        self.patch_id
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn params(&self, t: usize) -> Option<&TransferParams> {
        if t >= self.cutoff {
            return None;
        }
        self.params.get(t).and_then(|p| p.as_ref())
    }

    /// Timesteps that carry parameters, ascending.
    pub fn active_steps(&self) -> impl Iterator<Item = (usize, &TransferParams)> {
        self.params
            .iter()
            .enumerate()
            .filter_map(|(t, p)| p.as_ref().map(|p| (t, p)))
    }

    /// Sets the parameters of timestep `t`; rejected for `t >= tau` or `t == 0`.
    pub fn set_params(&mut self, t: usize, p: TransferParams) -> Result<()> {
        if t == 0 || t >= self.cutoff {
            return Err(Error::TimestepRange {
                op: "transfer.set_params",
                t,
                total: self.cutoff,
            });
        }
        if p.channels() != self.channels || p.weight.len() != self.channels * self.channels {
            return Err(Error::dims(&[self.channels], &[p.channels()]));
        }
        self.params[t] = Some(p);
        Ok(())
    }

    /// `delta_h_t` for the current feature `h`; all zeros for `t >= tau`.
    pub fn apply(&self, h: &FeatureTensor, t: usize) -> Result<FeatureTensor> {
        if h.channels() != self.channels {
            return Err(Error::dims(&[self.channels], &[h.channels()]));
        }
        match self.params(t) {
            Some(p) if !p.is_zero() => p.apply(h),
            _ => Ok(Tensor::zeros(h.shape())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    /// Gradient-descent iterations per (patch, timestep).
    pub iters: usize,
    /// Step length relative to the inverse Gauss-Newton curvature measured
    /// along the first gradient.
    pub lr: f64,
    /// Halve the step and retry whenever an update would raise the loss.
    pub backtracking: bool,
    /// Keep `W = 0` and fit only `b`: the constant-vector transfer baseline.
    pub constant_only: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            iters: 100,
            lr: 1.0,
            backtracking: true,
            constant_only: false,
        }
    }
}

/// Everything needed to evaluate the per-step objective
/// `|| target - f_rev(x_t, t; W h + b) ||^2`.
struct StepProblem<'a> {
    d: &'a dyn Denoiser,
    s: &'a NoiseSchedule,
    x_t: &'a Latent,
    t: usize,
    target: &'a Latent,
    feature: FeatureTensor,
    correction: Option<&'a Tensor>,
    gain: f64,
}

impl StepProblem<'_> {
    fn eps(&self, delta_h: &FeatureTensor) -> Result<Latent> {
        let eps = self
            .d
            .downstream(self.x_t, self.t, &inject(&self.feature, Some(delta_h))?)?;
        match self.correction {
            Some(c) => eps.zip_map(c, |e, o| (e as f64 + o as f64) as f32),
            None => Ok(eps),
        }
    }

    fn step(&self, p: &TransferParams) -> Result<(Latent, FeatureTensor)> {
        let delta_h = p.apply(&self.feature)?;
        let out = ddim_reverse_step(self.x_t, self.t, &self.eps(&delta_h)?, self.s)?;
        Ok((out, delta_h))
    }

    fn loss(&self, out: &Latent) -> Result<f64> {
        let r = self.target.sub(out)?;
        Ok(r.sq_norm())
    }

    /// Loss and gradient with respect to `(W, b)`.
    fn loss_grad(&self, p: &TransferParams) -> Result<(f64, TransferParams)> {
        let (loss, grad, _) = self.loss_grad_out(p)?;
        Ok((loss, grad))
    }

    /// As [`Self::loss_grad`], also returning `f_rev` at `p`.
    fn loss_grad_out(&self, p: &TransferParams) -> Result<(f64, TransferParams, Latent)> {
        let (out, delta_h) = self.step(p)?;
        let loss = self.loss(&out)?;
        // dL/d eps = -2 c_t (target - f_rev)
        let gain = self.gain;
        let cot = self
            .target
            .zip_map(&out, |tg, o| (-2.0 * gain * (tg as f64 - o as f64)) as f32)?;
        let g = self.d.vjp_injection(self.x_t, self.t, Some(&delta_h), &cot)?;
        let c = p.channels();
        let n = g.height() * g.width();
        let mut grad = TransferParams::zeros(c);
        for o in 0..c {
            let go = g.plane(o);
            grad.bias[o] = go.iter().map(|&v| v as f64).sum::<f64>() as f32;
            for i in 0..c {
                let hi = self.feature.plane(i);
                let mut acc = 0.0f64;
                for q in 0..n {
                    acc += go[q] as f64 * hi[q] as f64;
                }
                grad.weight[o * c + i] = acc as f32;
            }
        }
        Ok((loss, grad, out))
    }
}

/// Per-step transfer loss `|| target_prev - f_rev(x_t, t; W h + b) ||^2` and
/// its gradient with respect to `(W, b)`.
pub fn objective_and_gradient(
    params: &TransferParams,
    d: &dyn Denoiser,
    x_t: &Latent,
    target_prev: &Latent,
    t: usize,
    s: &NoiseSchedule,
) -> Result<(f64, TransferParams)> {
    x_t.ensure_same_shape(target_prev)?;
    let problem = StepProblem {
        d,
        s,
        x_t,
        t,
        target: target_prev,
        feature: d.site_feature(x_t, t)?,
        correction: None,
        gain: s.reverse_eps_gain(t)?,
    };
    if problem.feature.channels() != params.channels() {
        return Err(Error::dims(&[problem.feature.channels()], &[params.channels()]));
    }
    problem.loss_grad(params)
}

/// Result of one per-timestep optimization.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub params: TransferParams,
    /// Loss at initialization followed by the loss after every accepted update.
    pub losses: Vec<f64>,
}

impl StepOutcome {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().unwrap()
    }
}

fn axpy(p: &TransferParams, g: &TransferParams, step: f64, constant_only: bool) -> TransferParams {
    let upd = |a: &[f32], b: &[f32]| -> Vec<f32> {
        a.iter()
            .zip(b)
            .map(|(&x, &g)| (x as f64 - step * g as f64) as f32)
            .collect()
    };
    TransferParams {
        weight: if constant_only {
            p.weight.clone()
        } else {
            upd(&p.weight, &g.weight)
        },
        bias: upd(&p.bias, &g.bias),
    }
}

fn grad_norm_sq(g: &TransferParams, constant_only: bool) -> f64 {
    let b: f64 = g.bias.iter().map(|&v| (v as f64).powi(2)).sum();
    if constant_only {
        b
    } else {
        b + g.weight.iter().map(|&v| (v as f64).powi(2)).sum::<f64>()
    }
}

/// Relative size of the predicted decrease at which the optimizer stops.
pub const CONVERGED_RTOL: f64 = 1e-10;
/// Backtracking gives up after this many halvings of one step.
pub const MAX_HALVINGS: usize = 30;

/// Gradient descent on `(W_t, b_t)` from `init`.
///
/// Each iteration steps `cfg.lr / kappa` along the negative gradient, where
/// `kappa` is the Gauss-Newton curvature of the objective along that gradient,
/// measured with one extra downstream pass. For the affine built-in denoisers
/// `lr = 1` is an exact line search. With backtracking, updates that do not
/// lower the loss halve the step and the recorded losses strictly decrease.
/// Iteration stops early once the predicted decrease drops below
/// [`CONVERGED_RTOL`] of the current loss.
// `!(a < b)` on purpose: a NaN loss never counts as a decrease
#[allow(clippy::too_many_arguments, clippy::neg_cmp_op_on_partial_ord)]
pub fn optimize_step(
    init: &TransferParams,
    d: &dyn Denoiser,
    x_t: &Latent,
    target_prev: &Latent,
    t: usize,
    s: &NoiseSchedule,
    correction: Option<&Tensor>,
    cfg: &OptimizerConfig,
) -> Result<StepOutcome> {
    x_t.ensure_same_shape(target_prev)?;
    let problem = StepProblem {
        d,
        s,
        x_t,
        t,
        target: target_prev,
        feature: d.site_feature(x_t, t)?,
        correction,
        gain: s.reverse_eps_gain(t)?,
    };
    if problem.feature.channels() != init.channels() {
        return Err(Error::dims(&[problem.feature.channels()], &[init.channels()]));
    }
    let mut params = init.clone();
    let (mut loss, mut grad) = problem.loss_grad(&params)?;
    let initial = loss;
    let mut losses = vec![loss];
    if cfg.iters == 0 || loss == 0.0 {
        return Ok(StepOutcome { params, losses });
    }

    let mut out = problem.step(&params)?.0;
    for _ in 0..cfg.iters {
        let gn = grad_norm_sq(&grad, cfg.constant_only);
        if gn == 0.0 {
            break;
        }
        // J v for the unit descent direction v, from the response of f_rev
        let probe = problem
            .step(&axpy(&params, &grad, 1.0 / gn.sqrt(), cfg.constant_only))?
            .0;
        let jv = probe.sub(&out)?.sq_norm();
        if jv == 0.0 {
            break;
        }
        // the exact line-search decrease; below the loss's rounding noise there is nothing left to gain
        if gn / (4.0 * jv) <= CONVERGED_RTOL * loss {
            break;
        }
        let mut step = cfg.lr / (2.0 * jv);
        let mut candidate = axpy(&params, &grad, step, cfg.constant_only);
        let (mut cand_loss, mut cand_grad, mut cand_out) = problem.loss_grad_out(&candidate)?;
        if cfg.backtracking {
            let mut halvings = 0;
            while !(cand_loss < loss) && halvings < MAX_HALVINGS {
                step *= 0.5;
                halvings += 1;
                candidate = axpy(&params, &grad, step, cfg.constant_only);
                (cand_loss, cand_grad, cand_out) = problem.loss_grad_out(&candidate)?;
            }
            if !(cand_loss < loss) {
                break;
            }
        } else if !(cand_loss <= 10.0 * initial) {
            return Err(Error::OptimizerDivergence {
                t,
                loss: cand_loss,
                initial,
            });
        }
        params = candidate;
        loss = cand_loss;
        grad = cand_grad;
        out = cand_out;
        losses.push(loss);
        if loss == 0.0 {
            break;
        }
    }
    Ok(StepOutcome { params, losses })
}

/// Per-timestep loss record of one fit.
#[derive(Debug, Clone, PartialEq)]
pub struct LossLog {
    pub patch_id: usize,
    pub t: usize,
    pub losses: Vec<f64>,
}

impl LossLog {
    pub fn is_monotone(&self) -> bool {
        self.losses.windows(2).all(|w| w[1] <= w[0])
    }
}

#[derive(Debug, Clone)]
pub struct TransferFit {
    pub transfer: TransferFunction,
    /// The aligned trajectory `x~_T .. x~_0` produced while fitting.
    pub aligned: Trajectory,
    pub ledger: Vec<LossLog>,
}

/// One reverse step of the aligned low-resolution trajectory.
fn aligned_step(
    d: &dyn Denoiser,
    tf: &TransferFunction,
    x_t: &Latent,
    t: usize,
    s: &NoiseSchedule,
    correction: Option<&Tensor>,
) -> Result<Latent> {
    let h = d.site_feature(x_t, t)?;
    let delta_h = tf.apply(&h, t)?;
    let eps = d.downstream(x_t, t, &inject(&h, Some(&delta_h))?)?;
    let eps = match correction {
        Some(c) => eps.zip_map(c, |e, o| (e as f64 + o as f64) as f32)?,
        None => eps,
    };
    ddim_reverse_step(x_t, t, &eps, s)
}

/// Fits the transfer function of one patch.
///
/// Starts from `x~_T = x_low_T`, steps down with zero injection for `t >= tau`,
/// then for `t = tau - 1 .. 1` optimizes `(W_t, b_t)` against `x_high_{t-1}`
/// and advances with the fitted parameters. `corrections`, when given, are the
/// low-resolution source's eps offsets and enter every reverse step.
#[allow(clippy::too_many_arguments)]
pub fn fit_transfer(
    d: &dyn Denoiser,
    x_high: &Trajectory,
    x_low: &Trajectory,
    s: &NoiseSchedule,
    tau: usize,
    cfg: &OptimizerConfig,
    corrections: Option<&CorrectionSet>,
    patch_id: usize,
) -> Result<TransferFit> {
    if x_high.shape() != x_low.shape() {
        return Err(Error::dims(&x_high.shape(), &x_low.shape()));
    }
    let total = s.total_steps();
    if tau > total {
        return Err(Error::Config(format!("tau = {tau} exceeds T = {total}")));
    }
    if x_high.total_steps() != total || x_low.total_steps() != total {
        return Err(Error::Config("trajectory length does not match the schedule".into()));
    }
    let site = d.site(x_low.shape())?;
    let mut tf = TransferFunction::new(patch_id, tau, site.channels);
    let mut ledger = Vec::new();
    let mut latents = vec![Tensor::zeros(x_low.shape()); total + 1];
    latents[total] = x_low.at(total).clone();
    for t in (1..=total).rev() {
        let corr = corrections.and_then(|c| c.get(t));
        if t < tau {
            let out = optimize_step(
                &TransferParams::zeros(site.channels),
                d,
                &latents[t],
                x_high.at(t - 1),
                t,
                s,
                corr,
                cfg,
            )
            .map_err(|e| e.at_stage("transfer", Some(patch_id), Some(t)))?;
            ledger.push(LossLog {
                patch_id,
                t,
                losses: out.losses,
            });
            tf.set_params(t, out.params)?;
        }
        let next = aligned_step(d, &tf, &latents[t], t, s, corr)?;
        if !next.is_finite() {
            return Err(Error::NumericDivergence {
                t: t - 1,
                what: format!("aligned trajectory of patch {patch_id}"),
            });
        }
        latents[t - 1] = next;
    }
    Ok(TransferFit {
        transfer: tf,
        aligned: Trajectory::new(latents, Direction::Reverse)?,
        ledger,
    })
}

/// One reverse step with the frozen transfer applied to the current feature.
pub fn inject_reverse_step(
    tf: &TransferFunction,
    d: &dyn Denoiser,
    y_t: &Latent,
    t: usize,
    s: &NoiseSchedule,
) -> Result<Latent> {
    aligned_step(d, tf, y_t, t, s, None)
}
