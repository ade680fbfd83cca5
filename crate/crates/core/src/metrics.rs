//! Image quality metrics, their masked variants, and the seam score.
//!
//! Images are `[C, H, W]` tensors with values in `[0, 1]`; a peak value of 1
//! is assumed by PSNR. Masked metrics only count pixels (or, for SSIM, window
//! centres) where the region mask is active. Metrics without a mask run the
//! same code path with every pixel active, so a full mask reproduces them
//! bit-exactly.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{Latent, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Floor on the seam-score denominator.
pub const SEAM_FLOOR: f64 = 1e-8;

/// Binary `[H, W]` region; never empty.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    height: usize,
    width: usize,
    active: Vec<bool>,
}

impl RegionMask {
    pub fn new(height: usize, width: usize, active: Vec<bool>) -> Result<Self> {
        if active.len() != height * width {
            return Err(Error::dims(&[height * width], &[active.len()]));
        }
        if !active.iter().any(|&a| a) {
            return Err(Error::Metric("region mask has no active pixel".into()));
        }
        Ok(RegionMask { height, width, active })
    }

    pub fn full(height: usize, width: usize) -> Self {
        RegionMask {
            height,
            width,
            active: vec![true; height * width],
        }
    }

    /// Pixels whose channel mean exceeds 0.5.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w, c) = (t.height(), t.width(), t.channels());
        let active = (0..h * w)
            .map(|p| {
                let s: f64 = (0..c).map(|ch| t.plane(ch)[p] as f64).sum();
                s / c as f64 > 0.5
            })
            .collect();
        Self::new(h, w, active)
    }

    /// Complement of this mask; fails when the mask covers everything.
    pub fn invert(&self) -> Result<Self> {
        Self::new(self.height, self.width, self.active.iter().map(|a| !a).collect())
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn is_active(&self, y: usize, x: usize) -> bool {
        self.active[y * self.width + x]
    }

    pub fn coverage(&self) -> f64 {
        self.active.iter().filter(|&&a| a).count() as f64 / self.active.len() as f64
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn([1, self.height, self.width], |_, y, x| {
            if self.is_active(y, x) {
                1.0
            } else {
                0.0
            }
        })
    }
}

fn check_pair(a: &Latent, b: &Latent, mask: Option<&RegionMask>) -> Result<RegionMask> {
    a.ensure_same_shape(b)?;
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::Metric("non-finite pixel values".into()));
    }
    match mask {
        Some(m) if m.dims() != (a.height(), a.width()) => {
            Err(Error::dims(&[a.height(), a.width()], &[m.height, m.width]))
        }
        Some(m) => Ok(m.clone()),
        None => Ok(RegionMask::full(a.height(), a.width())),
    }
}

/// Mean squared difference over active pixels and all channels.
pub fn mse(a: &Latent, b: &Latent, mask: Option<&RegionMask>) -> Result<f64> {
    let m = check_pair(a, b, mask)?;
    let (h, w) = (a.height(), a.width());
    let mut acc = 0.0f64;
    let mut n = 0usize;
    for c in 0..a.channels() {
        let (pa, pb) = (a.plane(c), b.plane(c));
        for p in 0..h * w {
            if m.active[p] {
                let d = pa[p] as f64 - pb[p] as f64;
                acc += d * d;
                n += 1;
            }
        }
    }
    Ok(acc / n as f64)
}

/// `10 log10(1 / mse)`; `+inf` for identical inputs.
pub fn psnr(a: &Latent, b: &Latent, mask: Option<&RegionMask>) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b, mask)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-region separable filtering of a `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Gaussian-window SSIM averaged over channels and over windows whose centre
/// is active.
pub fn ssim(a: &Latent, b: &Latent, mask: Option<&RegionMask>) -> Result<f64> {
    let m = check_pair(a, b, mask)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Metric(format!(
            "{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let g = gaussian_window();
    let r = SSIM_WINDOW / 2;
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let centres: Vec<usize> = (0..oh * ow).filter(|&q| m.is_active(q / ow + r, q % ow + r)).collect();
    if centres.is_empty() {
        return Err(Error::Metric("no SSIM window is centred on the active region".into()));
    }
    let mut total = 0.0f64;
    for c in 0..a.channels() {
        let pa: Vec<f64> = a.plane(c).iter().map(|&v| v as f64).collect();
        let pb: Vec<f64> = b.plane(c).iter().map(|&v| v as f64).collect();
        let sq = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
        let mu_a = filter_valid(&pa, h, w, &g);
        let mu_b = filter_valid(&pb, h, w, &g);
        let e_aa = filter_valid(&sq(&pa, &pa), h, w, &g);
        let e_bb = filter_valid(&sq(&pb, &pb), h, w, &g);
        let e_ab = filter_valid(&sq(&pa, &pb), h, w, &g);
        let mut acc = 0.0f64;
        for &q in &centres {
            let (ma, mb) = (mu_a[q], mu_b[q]);
            let va = e_aa[q] - ma * ma;
            let vb = e_bb[q] - mb * mb;
            let cov = e_ab[q] - ma * mb;
            acc += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
        total += acc / centres.len() as f64;
    }
    Ok(total / a.channels() as f64)
}

/// Boundary-to-interior discontinuity ratio for an `rows x cols` patch grid.
///
/// The numerator is the mean absolute difference across every pixel pair
/// straddling a patch boundary; the denominator is the same mean over the
/// adjacent pairs inside patches, taken along the same axes. `None` for a
/// single-patch grid.
pub fn seam_score(img: &Latent, rows: usize, cols: usize) -> Result<Option<f64>> {
    let (h, w) = (img.height(), img.width());
    if rows == 0 || cols == 0 || h % rows != 0 || w % cols != 0 {
        return Err(Error::Metric(format!(
            "{rows}x{cols} grid does not divide a {h}x{w} image"
        )));
    }
    if rows == 1 && cols == 1 {
        return Ok(None);
    }
    let (ph, pw) = (h / rows, w / cols);
    let (mut bsum, mut bn, mut isum, mut inn) = (0.0f64, 0usize, 0.0f64, 0usize);
    for c in 0..img.channels() {
        let p = img.plane(c);
        if rows > 1 {
            for y in 0..h - 1 {
                let boundary = (y + 1) % ph == 0;
                for x in 0..w {
                    let d = (p[(y + 1) * w + x] as f64 - p[y * w + x] as f64).abs();
                    if boundary {
                        bsum += d;
                        bn += 1;
                    } else {
                        isum += d;
                        inn += 1;
                    }
                }
            }
        }
        if cols > 1 {
            for y in 0..h {
                for x in 0..w - 1 {
                    let d = (p[y * w + x + 1] as f64 - p[y * w + x] as f64).abs();
                    if (x + 1) % pw == 0 {
                        bsum += d;
                        bn += 1;
                    } else {
                        isum += d;
                        inn += 1;
                    }
                }
            }
        }
    }
    let interior = if inn == 0 { 0.0 } else { isum / inn as f64 };
    Ok(Some((bsum / bn as f64) / interior.max(SEAM_FLOOR)))
}

/// One line of the metrics table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub region: String,
    pub value: Option<f64>,
}

impl MetricRow {
    pub fn new(metric: &str, region: &str, value: Option<f64>) -> Self {
        MetricRow {
            metric: metric.into(),
            region: region.into(),
            value,
        }
    }
}

/// `inf` for infinite values, `n/a` when undefined.
pub fn format_value(v: Option<f64>) -> String {
    match v {
        None => "n/a".into(),
        Some(v) if v.is_infinite() && v > 0.0 => "inf".into(),
        Some(v) => format!("{v:.9}"),
    }
}

/// Tab-separated table with the header `metric  region  value`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<MetricRow>,
}

impl MetricsTable {
    pub fn push(&mut self, row: MetricRow) {
        self.rows.push(row);
    }

    pub fn get(&self, metric: &str, region: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && r.region == region)
            .and_then(|r| r.value)
    }
}

impl fmt::Display for MetricsTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "metric\tregion\tvalue")?;
        for r in &self.rows {
            writeln!(f, "{}\t{}\t{}", r.metric, r.region, format_value(r.value))?;
        }
        Ok(())
    }
}

/// MSE, PSNR and SSIM over the full image and, when given, the masked region.
pub fn compare(a: &Latent, b: &Latent, mask: Option<&RegionMask>) -> Result<MetricsTable> {
    let mut table = MetricsTable::default();
    let mut regions = vec![("full", None)];
    if let Some(m) = mask {
        regions.push(("masked", Some(m)));
    }
    for (region, m) in regions {
        let e = mse(a, b, m)?;
        table.push(MetricRow::new("mse", region, Some(e)));
        table.push(MetricRow::new("psnr", region, Some(psnr_from_mse(e))));
        let s = match ssim(a, b, m) {
            Ok(v) => Some(v),
            Err(Error::Metric(_)) => None,
            Err(e) => return Err(e),
        };
        table.push(MetricRow::new("ssim", region, s));
    }
    Ok(table)
}
