//! Noise-prediction networks with a named feature-injection site.
//!
//! A [`Denoiser`] maps `(x_t, t)` to a noise prediction and exposes one
//! intermediate feature `h` (the injection site). Callers may add `delta_h`
//! to that feature before the downstream layers run, and can pull a
//! cotangent on the noise prediction back onto `delta_h`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::{FeatureTensor, Latent, SplitMix64, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InjectionSite {
    pub id: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InjectionSite {
    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

/// Noise prediction together with the un-modified feature captured at the site.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub eps: Latent,
    pub feature: FeatureTensor,
}

pub trait Denoiser: Send + Sync {
    fn name(&self) -> &str;

    /// Injection sites available for an input of the given shape. Never empty.
    fn sites(&self, input: [usize; 3]) -> Result<Vec<InjectionSite>>;

    /// Default injection site.
    fn site(&self, input: [usize; 3]) -> Result<InjectionSite> {
        Ok(self.sites(input)?.remove(0))
    }

    /// Computes the network up to the injection site.
    fn site_feature(&self, x: &Latent, t: usize) -> Result<FeatureTensor>;

    /// Runs the layers downstream of the site on an (already modified) feature.
    fn downstream(&self, x: &Latent, t: usize, feature: &FeatureTensor) -> Result<Latent>;

    /// Forward pass. With `delta_h` the site feature is replaced by `h + delta_h`
    /// before the downstream layers; `feature` always reports the original `h`.
    fn forward(&self, x: &Latent, t: usize, delta_h: Option<&FeatureTensor>) -> Result<Prediction> {
        let feature = self.site_feature(x, t)?;
        let eps = match delta_h {
            Some(d) => self.downstream(x, t, &inject(&feature, Some(d))?)?,
            None => self.downstream(x, t, &feature)?,
        };
        Ok(Prediction { eps, feature })
    }

    /// `d <cotangent, eps> / d delta_h` at `(x, t, delta_h)`.
    fn vjp_injection(
        &self,
        x: &Latent,
        t: usize,
        delta_h: Option<&FeatureTensor>,
        cotangent: &Latent,
    ) -> Result<FeatureTensor>;
}

pub fn predict_eps(d: &dyn Denoiser, x: &Latent, t: usize) -> Result<Prediction> {
    d.forward(x, t, None)
}

pub fn predict_eps_injected(d: &dyn Denoiser, x: &Latent, t: usize, delta_h: &FeatureTensor) -> Result<Latent> {
    Ok(d.forward(x, t, Some(delta_h))?.eps)
}

pub fn vjp_injection(
    d: &dyn Denoiser,
    x: &Latent,
    t: usize,
    delta_h: &FeatureTensor,
    cotangent: &Latent,
) -> Result<FeatureTensor> {
    d.vjp_injection(x, t, Some(delta_h), cotangent)
}

/// `h + delta_h`, leaving entries untouched where `delta_h` is exactly zero so a
/// zero injection is bit-identical to no injection.
pub fn inject(h: &Tensor, delta_h: Option<&Tensor>) -> Result<Tensor> {
    match delta_h {
        None => Ok(h.clone()),
        Some(d) => h.zip_map(d, |a, b| if b == 0.0 { a } else { a + b }),
    }
}

fn check_timestep(s: &NoiseSchedule, t: usize) -> Result<()> {
    if t > s.total_steps() {
        return Err(Error::TimestepRange {
            op: "denoiser",
            t,
            total: s.total_steps(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Analytic Gaussian-prior denoiser
// ---------------------------------------------------------------------------

/// Lower bound on the relative prior variance of any DCT mode; keeps the
/// `t = 0` filter finite when the Gaussian spectrum underflows.
pub const SPECTRUM_FLOOR: f64 = 1e-12;

/// Exact noise predictor for Gaussian data `x_0 ~ N(mu, sigma^2 K)`.
///
/// With `correlation_length == 0` the prior is isotropic (`K = I`) and
/// `eps(x_t) = sqrt(1 - a) (x_t - sqrt(a) mu) / (a sigma^2 + 1 - a)`.
/// A positive correlation length gives `K` a Gaussian spectrum in the
/// per-channel 2-D DCT-II basis, so the posterior mean smooths spatially.
///
/// The injection site is the filter input `h = x_t - sqrt(a) mu`; the noise
/// prediction is linear in `h + delta_h`.
#[derive(Debug, Clone)]
pub struct AnalyticLinearDenoiser {
    mean: Tensor,
    variance: f64,
    correlation_length: f64,
    schedule: NoiseSchedule,
}

pub const ANALYTIC_SITE: &str = "linear_tap";

impl AnalyticLinearDenoiser {
    pub fn new(mean: Tensor, variance: f64, schedule: NoiseSchedule) -> Result<Self> {
        Self::with_correlation(mean, variance, 0.0, schedule)
    }

    pub fn with_correlation(
        mean: Tensor,
        variance: f64,
        correlation_length: f64,
        schedule: NoiseSchedule,
    ) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::Config(format!("analytic variance must be > 0, got {variance}")));
        }
        if !(correlation_length >= 0.0 && correlation_length.is_finite()) {
            return Err(Error::Config(format!(
                "correlation length must be >= 0, got {correlation_length}"
            )));
        }
        if !mean.is_finite() {
            return Err(Error::Config("analytic mean must be finite".into()));
        }
        Ok(AnalyticLinearDenoiser {
            mean,
            variance,
            correlation_length,
            schedule,
        })
    }

    pub fn mean(&self) -> &Tensor {
        &self.mean
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn correlation_length(&self) -> f64 {
        self.correlation_length
    }

    /// Prior variance of DCT coefficient `(p, q)` on an `h x w` plane.
    fn spectrum(&self, p: usize, q: usize, h: usize, w: usize) -> f64 {
        if self.correlation_length == 0.0 {
            return self.variance;
        }
        let wp = std::f64::consts::PI * p as f64 / h as f64;
        let wq = std::f64::consts::PI * q as f64 / w as f64;
        let l2 = self.correlation_length * self.correlation_length;
        self.variance * (-0.5 * l2 * (wp * wp + wq * wq)).exp().max(SPECTRUM_FLOOR)
    }

    /// Applies the symmetric noise-prediction filter of timestep `t` to `v`.
    fn filter(&self, v: &Tensor, t: usize) -> Tensor {
        let a = self.schedule.alpha(t);
        let sn = (1.0 - a).sqrt();
        if self.correlation_length == 0.0 {
            let k = sn / (a * self.variance + 1.0 - a);
            return v.map(|x| (k * x as f64) as f32);
        }
        let [c, h, w] = v.shape();
        let dh = dct_matrix(h);
        let dw = dct_matrix(w);
        let mut out = Tensor::zeros(v.shape());
        for ci in 0..c {
            let mut coef = separable(v.plane(ci), h, w, &dh, &dw, false);
            for p in 0..h {
                for q in 0..w {
                    coef[p * w + q] *= sn / (a * self.spectrum(p, q, h, w) + 1.0 - a);
                }
            }
            let back = separable_f64(&coef, h, w, &dh, &dw, true);
            for (o, b) in out.plane_mut(ci).iter_mut().zip(back) {
                *o = b as f32;
            }
        }
        out
    }

    /// Closed-form posterior mean `E[x_0 | x_t]`.
    pub fn posterior_mean(&self, x_t: &Latent, t: usize) -> Result<Latent> {
        x_t.ensure_shape(self.mean.shape())?;
        check_timestep(&self.schedule, t)?;
        let a = self.schedule.alpha(t);
        if self.correlation_length == 0.0 {
            let s2 = self.variance;
            return x_t.zip_map(&self.mean, |x, m| {
                (((1.0 - a) * m as f64 + a.sqrt() * s2 * x as f64) / (a * s2 + 1.0 - a)) as f32
            });
        }
        // mu + sqrt(a) K (a K + (1 - a) I)^-1 (x - sqrt(a) mu), diagonal in the DCT basis
        let [c, h, w] = x_t.shape();
        let (dh, dw) = (dct_matrix(h), dct_matrix(w));
        let mut out = Tensor::zeros(x_t.shape());
        for ci in 0..c {
            let r: Vec<f32> = x_t
                .plane(ci)
                .iter()
                .zip(self.mean.plane(ci))
                .map(|(&x, &m)| (x as f64 - a.sqrt() * m as f64) as f32)
                .collect();
            let mut coef = separable(&r, h, w, &dh, &dw, false);
            for p in 0..h {
                for q in 0..w {
                    let lam = self.spectrum(p, q, h, w);
                    coef[p * w + q] *= a.sqrt() * lam / (a * lam + 1.0 - a);
                }
            }
            let back = separable_f64(&coef, h, w, &dh, &dw, true);
            for ((o, b), &m) in out.plane_mut(ci).iter_mut().zip(back).zip(self.mean.plane(ci)) {
                *o = (m as f64 + b) as f32;
            }
        }
        Ok(out)
    }
}

impl Denoiser for AnalyticLinearDenoiser {
    fn name(&self) -> &str {
        "analytic"
    }

    fn sites(&self, input: [usize; 3]) -> Result<Vec<InjectionSite>> {
        if input != self.mean.shape() {
            return Err(Error::dims(&self.mean.shape(), &input));
        }
        let [channels, height, width] = input;
        Ok(vec![InjectionSite {
            id: ANALYTIC_SITE.into(),
            channels,
            height,
            width,
        }])
    }

    fn site_feature(&self, x: &Latent, t: usize) -> Result<FeatureTensor> {
        x.ensure_shape(self.mean.shape())?;
        check_timestep(&self.schedule, t)?;
        let sa = self.schedule.alpha(t).sqrt();
        x.zip_map(&self.mean, |x, m| (x as f64 - sa * m as f64) as f32)
    }

    fn downstream(&self, x: &Latent, t: usize, feature: &FeatureTensor) -> Result<Latent> {
        x.ensure_shape(self.mean.shape())?;
        feature.ensure_shape(self.mean.shape())?;
        check_timestep(&self.schedule, t)?;
        Ok(self.filter(feature, t))
    }

    fn vjp_injection(
        &self,
        x: &Latent,
        t: usize,
        delta_h: Option<&FeatureTensor>,
        cotangent: &Latent,
    ) -> Result<FeatureTensor> {
        x.ensure_shape(self.mean.shape())?;
        cotangent.ensure_shape(self.mean.shape())?;
        if let Some(d) = delta_h {
            d.ensure_shape(self.mean.shape())?;
        }
        check_timestep(&self.schedule, t)?;
        Ok(self.filter(cotangent, t))
    }
}

/// Orthonormal DCT-II matrix, row `k` = basis function `k`.
fn dct_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for k in 0..n {
        let s = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for i in 0..n {
            m[k * n + i] = s * (std::f64::consts::PI * (i as f64 + 0.5) * k as f64 / n as f64).cos();
        }
    }
    m
}

fn separable(plane: &[f32], h: usize, w: usize, dh: &[f64], dw: &[f64], inverse: bool) -> Vec<f64> {
    let v: Vec<f64> = plane.iter().map(|&x| x as f64).collect();
    separable_f64(&v, h, w, dh, dw, inverse)
}

/// `D_h X D_w^T` (forward) or `D_h^T X D_w` (inverse) on a row-major `h x w` plane.
fn separable_f64(v: &[f64], h: usize, w: usize, dh: &[f64], dw: &[f64], inverse: bool) -> Vec<f64> {
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for q in 0..w {
            let mut s = 0.0;
            for x in 0..w {
                let m = if inverse { dw[x * w + q] } else { dw[q * w + x] };
                s += v[y * w + x] * m;
            }
            tmp[y * w + q] = s;
        }
    }
    let mut out = vec![0.0; h * w];
    for p in 0..h {
        for q in 0..w {
            let mut s = 0.0;
            for y in 0..h {
                let m = if inverse { dh[y * h + p] } else { dh[p * h + y] };
                s += m * tmp[y * w + q];
            }
            out[p * w + q] = s;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Tiny convolutional denoiser
// ---------------------------------------------------------------------------

/// 3x3 convolution with zero padding, bias and a timestep-scaled channel bias.
#[derive(Debug, Clone, PartialEq)]
struct Conv3x3 {
    cin: usize,
    cout: usize,
    /// `[cout][cin][3][3]`
    weight: Vec<f32>,
    bias: Vec<f32>,
    time_bias: Vec<f32>,
}

impl Conv3x3 {
    fn seeded(cin: usize, cout: usize, rng: &mut SplitMix64) -> Self {
        let mut draw = |n: usize| -> Vec<f32> {
            (0..n)
                .map(|_| rng.uniform(-TinyConvDenoiser::WEIGHT_RANGE, TinyConvDenoiser::WEIGHT_RANGE))
                .collect()
        };
        let weight = draw(cout * cin * 9);
        let bias = draw(cout);
        let time_bias = draw(cout);
        Conv3x3 {
            cin,
            cout,
            weight,
            bias,
            time_bias,
        }
    }

    fn forward(&self, x: &Tensor, tau: f64) -> Tensor {
        let (h, w) = (x.height(), x.width());
        let src = x.data();
        let mut out = Tensor::zeros([self.cout, h, w]);
        let dst = out.data_mut();
        for o in 0..self.cout {
            let base = self.bias[o] as f64 + tau * self.time_bias[o] as f64;
            for y in 0..h {
                // kernel rows that stay inside the image
                let (ky0, ky1) = (usize::from(y == 0), if y + 1 == h { 2 } else { 3 });
                for xx in 0..w {
                    let (kx0, kx1) = (usize::from(xx == 0), if xx + 1 == w { 2 } else { 3 });
                    let mut acc = base;
                    for i in 0..self.cin {
                        let kern = &self.weight[(o * self.cin + i) * 9..][..9];
                        let plane = &src[i * h * w..][..h * w];
                        for ky in ky0..ky1 {
                            let row = &plane[(y + ky - 1) * w..][..w];
                            for kx in kx0..kx1 {
                                acc += kern[ky * 3 + kx] as f64 * row[xx + kx - 1] as f64;
                            }
                        }
                    }
                    dst[(o * h + y) * w + xx] = acc as f32;
                }
            }
        }
        out
    }

    /// Adjoint of the linear part: pulls an output cotangent back to the input.
    fn backward_input(&self, g: &Tensor) -> Tensor {
        let (h, w) = (g.height(), g.width());
        let src = g.data();
        let mut out = Tensor::zeros([self.cin, h, w]);
        let dst = out.data_mut();
        for i in 0..self.cin {
            for y in 0..h {
                // input (y, xx) feeds output (y - ky + 1, xx - kx + 1)
                let (ky0, ky1) = (usize::from(y + 1 == h), if y == 0 { 2 } else { 3 });
                for xx in 0..w {
                    let (kx0, kx1) = (usize::from(xx + 1 == w), if xx == 0 { 2 } else { 3 });
                    let mut acc = 0.0f64;
                    for o in 0..self.cout {
                        let kern = &self.weight[(o * self.cin + i) * 9..][..9];
                        let plane = &src[o * h * w..][..h * w];
                        for ky in ky0..ky1 {
                            let row = &plane[(y + 1 - ky) * w..][..w];
                            for kx in kx0..kx1 {
                                acc += kern[ky * 3 + kx] as f64 * row[xx + 1 - kx] as f64;
                            }
                        }
                    }
                    dst[(i * h + y) * w + xx] = acc as f32;
                }
            }
        }
        out
    }
}

/// Three-layer convolutional noise predictor with seeded weights.
///
/// Layout `C -> 8 -> 8 -> C`, 3x3 kernels, zero padding, `tanh` after the
/// first two layers. Every layer adds `(t / T) * time_bias` per channel.
/// The injection site `post_layer2` is the 8-channel output of the second
/// activation, so the noise prediction is affine in `delta_h`.
///
/// Weights come from [`SplitMix64`] seeded with `seed`, drawn uniformly in
/// `[-0.2, 0.2)` as `-0.2 + 0.4 * u` with `u = (next_u64 >> 11) * 2^-53`,
/// rounded to f32. Draw order per layer (1, 2, 3): kernel in
/// `[cout][cin][ky][kx]` order, then bias, then time bias.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyConvDenoiser {
    seed: u64,
    channels: usize,
    total_steps: usize,
    layers: [Conv3x3; 3],
}

pub const TINYCONV_SITE: &str = "post_layer2";

impl TinyConvDenoiser {
    pub const HIDDEN: usize = 8;
    pub const WEIGHT_RANGE: f64 = 0.2;

    pub fn new(channels: usize, total_steps: usize, seed: u64) -> Result<Self> {
        if channels == 0 || total_steps == 0 {
            return Err(Error::Config("tinyconv needs channels >= 1 and T >= 1".into()));
        }
        let mut rng = SplitMix64::new(seed);
        let l1 = Conv3x3::seeded(channels, Self::HIDDEN, &mut rng);
        let l2 = Conv3x3::seeded(Self::HIDDEN, Self::HIDDEN, &mut rng);
        let l3 = Conv3x3::seeded(Self::HIDDEN, channels, &mut rng);
        Ok(TinyConvDenoiser {
            seed,
            channels,
            total_steps,
            layers: [l1, l2, l3],
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// All weights in generation order, for cross-implementation checks.
    pub fn flat_weights(&self) -> Vec<f32> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias).chain(&l.time_bias).copied())
            .collect()
    }

    fn check(&self, x: &Latent, t: usize) -> Result<()> {
        if x.channels() != self.channels || x.height() == 0 || x.width() == 0 {
            return Err(Error::dims(&[self.channels], &x.shape()));
        }
        if t > self.total_steps {
            return Err(Error::TimestepRange {
                op: "tinyconv",
                t,
                total: self.total_steps,
            });
        }
        Ok(())
    }

    fn tau(&self, t: usize) -> f64 {
        t as f64 / self.total_steps as f64
    }
}

impl Denoiser for TinyConvDenoiser {
    fn name(&self) -> &str {
        "tinyconv"
    }

    fn sites(&self, input: [usize; 3]) -> Result<Vec<InjectionSite>> {
        if input[0] != self.channels {
            return Err(Error::dims(&[self.channels], &input));
        }
        Ok(vec![InjectionSite {
            id: TINYCONV_SITE.into(),
            channels: Self::HIDDEN,
            height: input[1],
            width: input[2],
        }])
    }

    fn site_feature(&self, x: &Latent, t: usize) -> Result<FeatureTensor> {
        self.check(x, t)?;
        let tau = self.tau(t);
        let a1 = self.layers[0].forward(x, tau).map(f32::tanh);
        Ok(self.layers[1].forward(&a1, tau).map(f32::tanh))
    }

    fn downstream(&self, x: &Latent, t: usize, feature: &FeatureTensor) -> Result<Latent> {
        self.check(x, t)?;
        feature.ensure_shape([Self::HIDDEN, x.height(), x.width()])?;
        Ok(self.layers[2].forward(feature, self.tau(t)))
    }

    fn vjp_injection(
        &self,
        x: &Latent,
        t: usize,
        delta_h: Option<&FeatureTensor>,
        cotangent: &Latent,
    ) -> Result<FeatureTensor> {
        self.check(x, t)?;
        cotangent.ensure_shape(x.shape())?;
        if let Some(d) = delta_h {
            d.ensure_shape([Self::HIDDEN, x.height(), x.width()])?;
        }
        // eps is affine in the site feature, so the pullback ignores delta_h
        Ok(self.layers[2].backward_input(cotangent))
    }
}

// ---------------------------------------------------------------------------
// Constant predictor
// ---------------------------------------------------------------------------

/// Predicts the same eps for every input; its site is an additive eps offset.
/// Forward and reverse DDIM maps are exact affine inverses under it.
#[derive(Debug, Clone)]
pub struct ConstantEpsDenoiser {
    eps: Tensor,
}

impl ConstantEpsDenoiser {
    pub fn new(eps: Tensor) -> Self {
        ConstantEpsDenoiser { eps }
    }
}

impl Denoiser for ConstantEpsDenoiser {
    fn name(&self) -> &str {
        "constant"
    }

    fn sites(&self, input: [usize; 3]) -> Result<Vec<InjectionSite>> {
        if input != self.eps.shape() {
            return Err(Error::dims(&self.eps.shape(), &input));
        }
        Ok(vec![InjectionSite {
            id: "eps_offset".into(),
            channels: input[0],
            height: input[1],
            width: input[2],
        }])
    }

    fn site_feature(&self, x: &Latent, _t: usize) -> Result<FeatureTensor> {
        x.ensure_shape(self.eps.shape())?;
        Ok(Tensor::zeros(self.eps.shape()))
    }

    fn downstream(&self, x: &Latent, _t: usize, feature: &FeatureTensor) -> Result<Latent> {
        x.ensure_shape(self.eps.shape())?;
        inject(&self.eps, Some(feature))
    }

    fn vjp_injection(
        &self,
        x: &Latent,
        _t: usize,
        _delta_h: Option<&FeatureTensor>,
        cotangent: &Latent,
    ) -> Result<FeatureTensor> {
        x.ensure_shape(self.eps.shape())?;
        cotangent.ensure_shape(self.eps.shape())?;
        Ok(cotangent.clone())
    }
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DenoiserKind {
    Analytic,
    Tinyconv,
}

/// Denoiser block of a job file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserSpec {
    pub kind: DenoiserKind,
    #[serde(default)]
    pub seed: u64,
    /// Per-channel prior mean (analytic); a single value broadcasts to all channels.
    #[serde(default = "default_mean")]
    pub mean: Vec<f64>,
    #[serde(default = "default_variance")]
    pub variance: f64,
    #[serde(default)]
    pub correlation_length: f64,
    /// Injection site id; must name one of the denoiser's sites when set.
    #[serde(default)]
    pub site: Option<String>,
}

fn default_mean() -> Vec<f64> {
    vec![0.5]
}

fn default_variance() -> f64 {
    1.0
}

impl Default for DenoiserSpec {
    fn default() -> Self {
        DenoiserSpec {
            kind: DenoiserKind::Analytic,
            seed: 0,
            mean: default_mean(),
            variance: default_variance(),
            correlation_length: 0.0,
            site: None,
        }
    }
}

impl DenoiserSpec {
    /// Instantiates the denoiser for patches of shape `patch`.
    pub fn build(&self, patch: [usize; 3], schedule: &NoiseSchedule) -> Result<Box<dyn Denoiser>> {
        let d: Box<dyn Denoiser> = match self.kind {
            DenoiserKind::Analytic => {
                let c = patch[0];
                let mean = match self.mean.len() {
                    1 => vec![self.mean[0]; c],
                    n if n == c => self.mean.clone(),
                    n => return Err(Error::Config(format!("denoiser.mean has {n} entries for {c} channels"))),
                };
                let mean = Tensor::from_fn(patch, |ci, _, _| mean[ci] as f32);
                Box::new(AnalyticLinearDenoiser::with_correlation(
                    mean,
                    self.variance,
                    self.correlation_length,
                    schedule.clone(),
                )?)
            }
            DenoiserKind::Tinyconv => Box::new(TinyConvDenoiser::new(patch[0], schedule.total_steps(), self.seed)?),
        };
        if let Some(site) = &self.site {
            if !d.sites(patch)?.iter().any(|s| &s.id == site) {
                return Err(Error::Config(format!(
                    "denoiser `{}` has no injection site `{site}`",
                    d.name()
                )));
            }
        }
        Ok(d)
    }
}
