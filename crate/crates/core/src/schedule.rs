//! Noise schedule and the three primitive deterministic diffusion maps.
//!
//! Every map is elementwise affine in the latent. Coefficients are computed
//! in f64 from the cumulative schedule and each output element is evaluated
//! in f64 before a single rounding to f32.

use crate::error::{Error, Result};
use crate::tensor::Latent;

/// Lower clamp applied to cumulative alphas.
pub const ALPHA_FLOOR: f64 = 1e-5;

/// Decreasing cumulative signal-retention coefficients `alpha_0 .. alpha_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine cumulative schedule normalised so that `alpha_0 = 1`.
    pub fn cosine(total_steps: usize, offset: f64) -> Result<Self> {
        if total_steps < 2 {
            return Err(Error::ScheduleConfig(format!(
                "need at least 2 steps, got {total_steps}"
            )));
        }
        if !(offset > 0.0 && offset < 0.1) {
            return Err(Error::ScheduleConfig(format!(
                "cosine offset must lie in (0, 0.1), got {offset}"
            )));
        }
        let f = |t: f64| {
            let a = ((t / total_steps as f64 + offset) / (1.0 + offset)) * std::f64::consts::FRAC_PI_2;
            a.cos().powi(2)
        };
        let f0 = f(0.0);
        let n = total_steps as f64;
        // The floor itself decreases (2e-5 at t = 0 down to 1e-5 at t = T) so that
        // clamped tails stay strictly decreasing.
        let alphas = (0..=total_steps)
            .map(|t| {
                let floor = ALPHA_FLOOR * (1.0 + (n - t as f64) / n);
                (f(t as f64) / f0).min(1.0).max(floor)
            })
            .collect();
        Self::from_alphas(alphas)
    }

    /// Builds a schedule from explicit cumulative alphas, validating the invariants.
    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        if alphas.len() < 2 {
            return Err(Error::ScheduleConfig("need at least alpha_0 and alpha_1".into()));
        }
        if alphas[0] < 0.999 {
            return Err(Error::ScheduleConfig(format!(
                "alpha_0 must be >= 0.999, got {}",
                alphas[0]
            )));
        }
        for (t, &a) in alphas.iter().enumerate() {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::ScheduleConfig(format!("alpha_{t} = {a} outside (0, 1]")));
            }
        }
        if let Some(t) = alphas.windows(2).position(|w| w[0] <= w[1]) {
            return Err(Error::ScheduleConfig(format!(
                "schedule not strictly decreasing at t = {t}"
            )));
        }
        Ok(NoiseSchedule { alphas })
    }

    /// The number of steps `T`.
    pub fn total_steps(&self) -> usize {
        self.alphas.len() - 1
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    fn check(&self, op: &'static str, t: usize, ok: bool) -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(Error::TimestepRange {
                op,
                t,
                total: self.total_steps(),
            })
        }
    }

    /// Coefficient of an eps-space offset inside one reverse step from `t`:
    /// `sqrt(1 - a_{t-1}) - sqrt(a_{t-1}) * sqrt(1 - a_t) / sqrt(a_t)`.
    pub fn reverse_eps_gain(&self, t: usize) -> Result<f64> {
        self.check("reverse_eps_gain", t, t >= 1 && t <= self.total_steps())?;
        let (a, ap) = (self.alphas[t], self.alphas[t - 1]);
        Ok((1.0 - ap).sqrt() - ap.sqrt() * (1.0 - a).sqrt() / a.sqrt())
    }
}

/// Moves a latent from noise level `from` to level `to` with a fixed eps:
/// Tweedie estimate at `from`, re-noised at `to`.
fn ddim_transfer(x: &Latent, eps: &Latent, s: &NoiseSchedule, from: usize, to: usize) -> Result<Latent> {
    x.ensure_same_shape(eps)?;
    let (af, at) = (s.alpha(from), s.alpha(to));
    let (sa_f, sn_f) = (af.sqrt(), (1.0 - af).sqrt());
    let (sa_t, sn_t) = (at.sqrt(), (1.0 - at).sqrt());
    x.zip_map(eps, |xv, ev| {
        let (xv, ev) = (xv as f64, ev as f64);
        let x0 = (xv - sn_f * ev) / sa_f;
        (sa_t * x0 + sn_t * ev) as f32
    })
}

/// Tweedie clean-image estimate `(x_t - sqrt(1 - a_t) eps) / sqrt(a_t)`.
pub fn tweedie(x_t: &Latent, t: usize, eps: &Latent, s: &NoiseSchedule) -> Result<Latent> {
    if t == 0 {
        return Err(Error::Domain("no Tweedie estimate at t = 0".into()));
    }
    s.check("tweedie", t, t <= s.total_steps())?;
    x_t.ensure_same_shape(eps)?;
    let a = s.alpha(t);
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    x_t.zip_map(eps, |xv, ev| ((xv as f64 - sn * ev as f64) / sa) as f32)
}

/// Deterministic reverse step `t -> t - 1`.
pub fn ddim_reverse_step(x_t: &Latent, t: usize, eps: &Latent, s: &NoiseSchedule) -> Result<Latent> {
    if t == 0 {
        return Err(Error::Domain("no reverse step from t = 0".into()));
    }
    s.check("ddim_reverse_step", t, t <= s.total_steps())?;
    ddim_transfer(x_t, eps, s, t, t - 1)
}

/// Deterministic forward (inversion) step `t -> t + 1`.
pub fn ddim_forward_step(x_t: &Latent, t: usize, eps: &Latent, s: &NoiseSchedule) -> Result<Latent> {
    s.check("ddim_forward_step", t, t < s.total_steps())?;
    ddim_transfer(x_t, eps, s, t, t + 1)
}

/// Reverse step assembled from an explicit clean estimate:
/// `sqrt(a_{t-1}) x0 + sqrt(1 - a_{t-1}) eps`.
pub fn reverse_from_estimate(x0: &Latent, t: usize, eps: &Latent, s: &NoiseSchedule) -> Result<Latent> {
    s.check("reverse_from_estimate", t, t >= 1 && t <= s.total_steps())?;
    let ap = s.alpha(t - 1);
    let (sa, sn) = (ap.sqrt(), (1.0 - ap).sqrt());
    x0.zip_map(eps, |x, e| (sa * x as f64 + sn * e as f64) as f32)
}
