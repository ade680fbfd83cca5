//! Dense `[C, H, W]` f32 tensors used for latents, features and images.

use std::fmt;

use crate::error::{Error, Result};

/// Row-major `[channels, height, width]` tensor of f32 values.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 3],
    data: Vec<f32>,
}

/// A diffusion latent (pixel space under the identity codec).
pub type Latent = Tensor;
/// A feature tensor captured at a denoiser injection site.
pub type FeatureTensor = Tensor;

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn zeros(shape: [usize; 3]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: [usize; 3], value: f32) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 3], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::dims(&[n], &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let [c, h, w] = shape;
        let mut data = Vec::with_capacity(c * h * w);
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(ci, y, x));
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn height(&self) -> usize {
        self.shape[1]
    }

    pub fn width(&self) -> usize {
        self.shape[2]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.shape[1] + y) * self.shape[2] + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    /// Contiguous `[H, W]` plane of one channel.
    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.shape[1] * self.shape[2];
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.shape[1] * self.shape[2];
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn ensure_shape(&self, expected: [usize; 3]) -> Result<()> {
        if self.shape != expected {
            return Err(Error::dims(&expected, &self.shape));
        }
        Ok(())
    }

    pub fn ensure_same_shape(&self, other: &Tensor) -> Result<()> {
        other.ensure_shape(self.shape)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two equally shaped tensors.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        self.ensure_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f32) -> Tensor {
        self.map(|v| v * s)
    }

    /// Sum of squares accumulated in f64.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    pub fn rms(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        (self.sq_norm() / self.data.len() as f64).sqrt()
    }

    /// Inner product accumulated in f64.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum())
    }

    /// Root-mean-square difference, accumulated in f64.
    pub fn rms_diff(&self, other: &Tensor) -> Result<f64> {
        self.ensure_same_shape(other)?;
        if self.data.is_empty() {
            return Ok(0.0);
        }
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum();
        Ok((s / self.data.len() as f64).sqrt())
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .fold(0.0, f64::max))
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN payloads.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Copies rows `[y0, y0 + h)` and columns `[x0, x0 + w)` into a new tensor.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor> {
        if y0 + h > self.height() || x0 + w > self.width() {
            return Err(Error::Geometry(format!(
                "crop [{y0}+{h}, {x0}+{w}] exceeds {}x{}",
                self.height(),
                self.width()
            )));
        }
        Ok(Tensor::from_fn([self.channels(), h, w], |c, y, x| {
            self.get(c, y0 + y, x0 + x)
        }))
    }

    /// Writes `src` into this tensor with its top-left corner at `(y0, x0)`.
    pub fn paste(&mut self, src: &Tensor, y0: usize, x0: usize) -> Result<()> {
        if src.channels() != self.channels() || y0 + src.height() > self.height() || x0 + src.width() > self.width() {
            return Err(Error::Geometry(format!(
                "paste {:?} at ({y0}, {x0}) into {:?}",
                src.shape, self.shape
            )));
        }
        for c in 0..src.channels() {
            for y in 0..src.height() {
                let s = src.index(c, y, 0);
                let d = self.index(c, y0 + y, x0);
                self.data[d..d + src.width()].copy_from_slice(&src.data[s..s + src.width()]);
            }
        }
        Ok(())
    }

    /// Swaps the two spatial axes.
    pub fn transpose_hw(&self) -> Tensor {
        Tensor::from_fn([self.channels(), self.width(), self.height()], |c, y, x| {
            self.get(c, x, y)
        })
    }
}

/// Deterministic SplitMix64 generator.
///
/// Used wherever values must be reproducible across implementations from a
/// 64-bit seed: denoiser weights, procedural assets and test fixtures.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(Self::GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` from the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`, rounded to f32.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f32 {
        (lo + (hi - lo) * self.next_f64()) as f32
    }

    /// Standard normal via Box-Muller (one draw per call, two uniforms consumed).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn tensor_uniform(&mut self, shape: [usize; 3], lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(shape, |_, _, _| self.uniform(lo, hi))
    }
}
