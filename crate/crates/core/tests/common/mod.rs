//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use hiresedit::inversion::invert;
use hiresedit::transfer::{inject_reverse_step, objective_and_gradient};
use hiresedit::{
    Denoiser, Direction, NoiseSchedule, SplitMix64, Tensor, TinyConvDenoiser, Trajectory, TransferFunction,
    TransferParams,
};

pub fn cosine50() -> NoiseSchedule {
    NoiseSchedule::cosine(50, 0.008).unwrap()
}

/// Dense Gaussian elimination with partial pivoting.
pub fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            let pivot_row = a[col].clone();
            for (dst, src) in a[row][col..].iter_mut().zip(&pivot_row[col..]) {
                *dst -= f * src;
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row][row];
    }
    x
}

/// Least-squares optimum of the per-step objective for the isotropic
/// analytic denoiser, written out from the DDIM and Gaussian-score formulas.
pub fn normal_equations_minimum(
    x: &Tensor,
    target: &Tensor,
    mean: f64,
    variance: f64,
    s: &NoiseSchedule,
    t: usize,
) -> f64 {
    let (a, ap) = (s.alpha(t), s.alpha(t - 1));
    let k = (1.0 - a).sqrt() / (a * variance + 1.0 - a);
    let c = (1.0 - ap).sqrt() - ap.sqrt() * (1.0 - a).sqrt() / a.sqrt();
    let scale = ap.sqrt() / a.sqrt();
    let [ch, h, w] = x.shape();
    let n = h * w;
    let feat = |ci: usize, p: usize| x.plane(ci)[p] as f64 - a.sqrt() * mean;
    let mut total = 0.0;
    for o in 0..ch {
        // regress r_o on [c k h_0 .. c k h_{C-1}, c k]
        let row = |p: usize| -> Vec<f64> {
            let mut r: Vec<f64> = (0..ch).map(|i| c * k * feat(i, p)).collect();
            r.push(c * k);
            r
        };
        let resid = |p: usize| target.plane(o)[p] as f64 - scale * x.plane(o)[p] as f64 - c * k * feat(o, p);
        let m = ch + 1;
        let mut ata = vec![vec![0.0; m]; m];
        let mut atb = vec![0.0; m];
        for p in 0..n {
            let r = row(p);
            for i in 0..m {
                atb[i] += r[i] * resid(p);
                for j in 0..m {
                    ata[i][j] += r[i] * r[j];
                }
            }
        }
        let theta = solve(ata, atb);
        for p in 0..n {
            let fit: f64 = row(p).iter().zip(&theta).map(|(a, b)| a * b).sum();
            total += (resid(p) - fit).powi(2);
        }
    }
    total
}

/// Reverse trajectory from `x_T` driven by a planted transfer function, so every
/// per-step target is exactly reachable.
pub fn planted_trajectory(d: &dyn Denoiser, x_t: &Tensor, tf: &TransferFunction, s: &NoiseSchedule) -> Trajectory {
    let total = s.total_steps();
    let mut latents = vec![Tensor::zeros(x_t.shape()); total + 1];
    latents[total] = x_t.clone();
    for t in (1..=total).rev() {
        latents[t - 1] = inject_reverse_step(tf, d, &latents[t], t, s).unwrap();
    }
    Trajectory::new(latents, Direction::Reverse).unwrap()
}

pub fn laplacian_rms(img: &Tensor) -> f64 {
    let [c, h, w] = img.shape();
    let mut acc = 0.0;
    let mut n = 0usize;
    for ci in 0..c {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let v = 4.0 * img.get(ci, y, x) as f64
                    - img.get(ci, y - 1, x) as f64
                    - img.get(ci, y + 1, x) as f64
                    - img.get(ci, y, x - 1) as f64
                    - img.get(ci, y, x + 1) as f64;
                acc += v * v;
                n += 1;
            }
        }
    }
    (acc / n as f64).sqrt()
}

pub const K: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const C1: f64 = 1e-4;
pub const C2: f64 = 9e-4;

pub fn ref_mse(a: &Tensor, b: &Tensor, active: &[bool]) -> f64 {
    let [c, h, w] = a.shape();
    let mut acc = 0.0;
    let mut n = 0.0;
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                if active[y * w + x] {
                    acc += (a.get(ci, y, x) as f64 - b.get(ci, y, x) as f64).powi(2);
                    n += 1.0;
                }
            }
        }
    }
    acc / n
}

/// Full 2-D Gaussian window, normalized over all 121 taps.
pub fn window() -> Vec<f64> {
    let r = (K / 2) as f64;
    let mut g = vec![0.0; K * K];
    for i in 0..K {
        for j in 0..K {
            let (di, dj) = (i as f64 - r, j as f64 - r);
            g[i * K + j] = (-(di * di + dj * dj) / (2.0 * SIGMA * SIGMA)).exp();
        }
    }
    let s: f64 = g.iter().sum();
    g.iter().map(|v| v / s).collect()
}

/// Per-window weighted moments computed directly (two-pass variance).
pub fn ref_ssim(a: &Tensor, b: &Tensor, active: &[bool]) -> f64 {
    let [c, h, w] = a.shape();
    let g = window();
    let r = K / 2;
    let mut total = 0.0;
    for ci in 0..c {
        let mut acc = 0.0;
        let mut n = 0.0;
        for y0 in 0..=h - K {
            for x0 in 0..=w - K {
                if !active[(y0 + r) * w + x0 + r] {
                    continue;
                }
                let tap = |i: usize, j: usize| {
                    (
                        g[i * K + j],
                        a.get(ci, y0 + i, x0 + j) as f64,
                        b.get(ci, y0 + i, x0 + j) as f64,
                    )
                };
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..K {
                    for j in 0..K {
                        let (wt, va, vb) = tap(i, j);
                        ma += wt * va;
                        mb += wt * vb;
                    }
                }
                let (mut sa, mut sb, mut sab) = (0.0, 0.0, 0.0);
                for i in 0..K {
                    for j in 0..K {
                        let (wt, va, vb) = tap(i, j);
                        sa += wt * (va - ma) * (va - ma);
                        sb += wt * (vb - mb) * (vb - mb);
                        sab += wt * (va - ma) * (vb - mb);
                    }
                }
                acc += (2.0 * ma * mb + C1) * (2.0 * sab + C2) / ((ma * ma + mb * mb + C1) * (sa + sb + C2));
                n += 1.0;
            }
        }
        total += acc / n;
    }
    total / c as f64
}

pub fn metric_fixture(seed: u64) -> (Tensor, Tensor, Vec<bool>) {
    let mut rng = SplitMix64::new(seed);
    let channels = if seed.is_multiple_of(2) { 3 } else { 1 };
    let a = rng.tensor_uniform([channels, 64, 64], 0.0, 1.0);
    // b is a noisy, partly correlated copy so SSIM lands away from 0 and 1
    let noise = rng.tensor_uniform([channels, 64, 64], -0.3, 0.3);
    let b = a.zip_map(&noise, |x, e| (0.7 * x + e + 0.1).clamp(0.0, 1.0)).unwrap();
    let (y0, x0) = (rng.next_u64() as usize % 32, rng.next_u64() as usize % 32);
    let active = (0..64 * 64usize)
        .map(|p| (p / 64).abs_diff(y0 + 16) < 16 && (p % 64).abs_diff(x0 + 16) < 20)
        .collect();
    (a, b, active)
}

/// TinyConv regression fixture: the high-resolution trajectory is sampled from
/// the low one's terminal latent under a planted transfer, so every per-step
/// target is reachable. Returns `(denoiser, high, low, tau)`.
pub fn planted_fixture() -> (TinyConvDenoiser, Trajectory, Trajectory, usize) {
    let s = cosine50();
    let d = TinyConvDenoiser::new(3, 50, 2).unwrap();
    let mut rng = SplitMix64::new(77);
    let x0 = rng.tensor_uniform([3, 8, 8], 0.0, 1.0);
    let low = invert(&d, &x0, &s).unwrap();
    let tau = 15;
    let mut planted = TransferFunction::new(0, tau, 8);
    for t in 1..tau {
        let mut p = TransferParams::zeros(8);
        for v in p.weight.iter_mut().chain(p.bias.iter_mut()) {
            *v = rng.uniform(-0.05, 0.05);
        }
        planted.set_params(t, p).unwrap();
    }
    let high = planted_trajectory(&d, low.at(50), &planted, &s);
    (d, high, low, tau)
}

/// Relative error of the analytic `dL/dW` against central differences, per
/// weight entry, on TinyConv's 8-channel site.
pub fn weight_gradient_errors() -> Vec<f64> {
    let s = cosine50();
    let d = TinyConvDenoiser::new(3, 50, 21).unwrap();
    let mut rng = SplitMix64::new(8);
    let x = rng.tensor_uniform([3, 8, 8], -1.0, 1.0);
    let target = rng.tensor_uniform([3, 8, 8], -1.0, 1.0);
    let t = 12;
    let mut p = TransferParams::zeros(8);
    for v in p.weight.iter_mut().chain(p.bias.iter_mut()) {
        *v = rng.uniform(-0.1, 0.1);
    }
    let loss = |q: &TransferParams| objective_and_gradient(q, &d, &x, &target, t, &s).unwrap().0;
    let (_, g) = objective_and_gradient(&p, &d, &x, &target, t, &s).unwrap();
    // The objective is exactly quadratic in (W, b) because the layers below the
    // site are linear, so a wide central step adds no truncation error and keeps
    // the f32 rounding of f_rev far below the difference being measured.
    let step = 0.5f32;
    (0..p.weight.len())
        .map(|i| {
            let mut plus = p.clone();
            plus.weight[i] += step;
            let mut minus = p.clone();
            minus.weight[i] -= step;
            let h = (plus.weight[i] as f64 - minus.weight[i] as f64) / 2.0;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let an = g.weight[i] as f64;
            (fd - an).abs() / fd.abs().max(an.abs())
        })
        .collect()
}
