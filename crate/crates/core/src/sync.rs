//! Patch synchronization through blended Tweedie estimates.
//!
//! For each pair of adjacent patches an auxiliary latent is assembled from
//! their facing halves. Its Tweedie estimate straddles the shared border, so
//! blending it back into both patches under linear ramp masks carries content
//! across the boundary without overlapping inference.
//!
//! Vertical pairs stack patch `i` above `j`; horizontal pairs place `i` left
//! of `j` and follow the same rules along columns.

use rayon::prelude::*;

use crate::denoiser::{predict_eps, Denoiser};
use crate::error::{Error, Result};
use crate::schedule::{ddim_forward_step, reverse_from_estimate, tweedie, NoiseSchedule};
use crate::tensor::{Latent, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Orientation {
    /// `i` above `j`; the shared border is horizontal.
    Vertical,
    /// `i` left of `j`; the shared border is vertical.
    Horizontal,
}

/// Which member of a pair a mask or translation serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    /// The top (or left) patch; blends over its far half.
    First,
    /// The bottom (or right) patch; blends over its near half.
    Second,
}

/// Translation operators between patch and auxiliary coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shift {
    /// Moves content forward by half a patch with zero fill (`T1`).
    Forward,
    /// Moves content back by half a patch with zero fill (`T2`).
    Backward,
}

fn axis_len(shape: [usize; 3], o: Orientation) -> usize {
    match o {
        Orientation::Vertical => shape[1],
        Orientation::Horizontal => shape[2],
    }
}

fn half(shape: [usize; 3], o: Orientation) -> Result<usize> {
    let n = axis_len(shape, o);
    if n == 0 || !n.is_multiple_of(2) {
        return Err(Error::Geometry(format!(
            "{o:?} synchronization needs an even extent, got {n}"
        )));
    }
    Ok(n / 2)
}

/// Spatial ramp mask of one side of a pair.
#[derive(Debug, Clone, PartialEq)]
pub struct RampMask {
    orientation: Orientation,
    side: Side,
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl RampMask {
    /// First side: 0 below the midline, then `(v - H/2) / (H/2)`.
    /// Second side: `(H/2 - v) / (H/2)` up to the midline, then 0.
    pub fn new(orientation: Orientation, side: Side, height: usize, width: usize) -> Result<Self> {
        let half = half([1, height, width], orientation)? as f64;
        let weight = |v: usize| -> f64 {
            let v = v as f64;
            match side {
                Side::First if v >= half => (v - half) / half,
                Side::Second if v <= half => (half - v) / half,
                _ => 0.0,
            }
        };
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                let v = match orientation {
                    Orientation::Vertical => y,
                    Orientation::Horizontal => x,
                };
                values.push(weight(v) as f32);
            }
        }
        Ok(RampMask {
            orientation,
            side,
            height,
            width,
            values,
        })
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// The translation that maps auxiliary coordinates onto this side.
    pub fn shift(&self) -> Shift {
        match self.side {
            Side::First => Shift::Forward,
            Side::Second => Shift::Backward,
        }
    }
}

/// Time modulation `max(0, 1 - t / tau)`; zero for every `t` when `tau = 0`.
pub fn lambda(t: usize, tau: usize) -> f64 {
    if tau == 0 {
        return 0.0;
    }
    (1.0 - t as f64 / tau as f64).max(0.0)
}

/// Facing halves of `y_i` and `y_j` joined into one patch-sized latent.
pub fn make_aux_latent(y_i: &Latent, y_j: &Latent, orientation: Orientation) -> Result<Latent> {
    y_i.ensure_same_shape(y_j)?;
    let h = half(y_i.shape(), orientation)?;
    Ok(Tensor::from_fn(y_i.shape(), |c, y, x| match orientation {
        Orientation::Vertical if y < h => y_i.get(c, y + h, x),
        Orientation::Vertical => y_j.get(c, y - h, x),
        Orientation::Horizontal if x < h => y_i.get(c, y, x + h),
        Orientation::Horizontal => y_j.get(c, y, x - h),
    }))
}

/// Half-patch shift with zero fill along the pair axis.
pub fn translate(f: &Latent, shift: Shift, orientation: Orientation) -> Result<Latent> {
    let h = half(f.shape(), orientation)?;
    let n = 2 * h;
    let src = |v: usize| -> Option<usize> {
        match shift {
            Shift::Forward => v.checked_sub(h),
            Shift::Backward => (v + h < n).then_some(v + h),
        }
    };
    Ok(Tensor::from_fn(f.shape(), |c, y, x| match orientation {
        Orientation::Vertical => src(y).map_or(0.0, |sy| f.get(c, sy, x)),
        Orientation::Horizontal => src(x).map_or(0.0, |sx| f.get(c, y, sx)),
    }))
}

/// `(1 - lambda M) x0_self + lambda M T x0_aux`, evaluated as a lerp so
/// that entries with zero effective weight, or equal operands, are returned
/// bit-exactly.
pub fn blend_tweedie(x0_self: &Latent, x0_aux: &Latent, mask: &RampMask, lambda_t: f64) -> Result<Latent> {
    x0_self.ensure_same_shape(x0_aux)?;
    if mask.dims() != (x0_self.height(), x0_self.width()) {
        return Err(Error::dims(
            &[mask.height, mask.width],
            &[x0_self.height(), x0_self.width()],
        ));
    }
    if !(0.0..=1.0).contains(&lambda_t) {
        return Err(Error::Domain(format!("lambda {lambda_t} outside [0, 1]")));
    }
    let moved = translate(x0_aux, mask.shift(), mask.orientation())?;
    Ok(Tensor::from_fn(x0_self.shape(), |c, y, x| {
        let w = lambda_t * mask.at(y, x) as f64;
        let s = x0_self.get(c, y, x);
        if w == 0.0 {
            return s;
        }
        let s = s as f64;
        (s + w * (moved.get(c, y, x) as f64 - s)) as f32
    }))
}

/// Plain forward step from `t - 1` back to `t`, without any transfer.
pub fn resample_forward(d: &dyn Denoiser, y_prev: &Latent, t: usize, s: &NoiseSchedule) -> Result<Latent> {
    if t == 0 {
        return Err(Error::TimestepRange {
            op: "resample_forward",
            t,
            total: s.total_steps(),
        });
    }
    let eps = predict_eps(d, y_prev, t - 1)?.eps;
    ddim_forward_step(y_prev, t - 1, &eps, s)
}

/// One adjacency of the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub first: usize,
    pub second: usize,
    pub orientation: Orientation,
}

/// Adjacency, masks and time modulation for a row-major patch grid.
#[derive(Debug, Clone)]
pub struct SyncPlan {
    rows: usize,
    cols: usize,
    tau: usize,
    edges: Vec<Edge>,
    vertical: Option<(RampMask, RampMask)>,
    horizontal: Option<(RampMask, RampMask)>,
}

impl SyncPlan {
    pub fn new(rows: usize, cols: usize, patch_h: usize, patch_w: usize, tau: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Geometry("empty grid".into()));
        }
        let mut edges = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                if r + 1 < rows {
                    edges.push(Edge {
                        first: i,
                        second: i + cols,
                        orientation: Orientation::Vertical,
                    });
                }
                if c + 1 < cols {
                    edges.push(Edge {
                        first: i,
                        second: i + 1,
                        orientation: Orientation::Horizontal,
                    });
                }
            }
        }
        let pair = |o| -> Result<(RampMask, RampMask)> {
            Ok((
                RampMask::new(o, Side::First, patch_h, patch_w)?,
                RampMask::new(o, Side::Second, patch_h, patch_w)?,
            ))
        };
        let vertical = if rows > 1 {
            Some(pair(Orientation::Vertical)?)
        } else {
            None
        };
        let horizontal = if cols > 1 {
            Some(pair(Orientation::Horizontal)?)
        } else {
            None
        };
        Ok(SyncPlan {
            rows,
            cols,
            tau,
            edges,
            vertical,
            horizontal,
        })
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn tau(&self) -> usize {
        self.tau
    }

    pub fn patch_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn lambda(&self, t: usize) -> f64 {
        lambda(t, self.tau)
    }

    pub fn mask(&self, orientation: Orientation, side: Side) -> Option<&RampMask> {
        let pair = match orientation {
            Orientation::Vertical => self.vertical.as_ref(),
            Orientation::Horizontal => self.horizontal.as_ref(),
        }?;
        Some(match side {
            Side::First => &pair.0,
            Side::Second => &pair.1,
        })
    }

    /// Edges touching patch `i` in composition order: vertical before
    /// horizontal, and within an orientation the edge where `i` is first.
    fn edges_of(&self, i: usize) -> Vec<(usize, Side)> {
        let mut out = Vec::new();
        for o in [Orientation::Vertical, Orientation::Horizontal] {
            for (k, e) in self.edges.iter().enumerate() {
                if e.orientation != o {
                    continue;
                }
                if e.first == i {
                    out.push((k, Side::First));
                }
            }
            for (k, e) in self.edges.iter().enumerate() {
                if e.orientation == o && e.second == i {
                    out.push((k, Side::Second));
                }
            }
        }
        out
    }
}

/// A patch latent `y'_{t-1}` produced by the injected reverse step at `t`.
#[derive(Debug, Clone)]
pub struct PatchState {
    pub latent: Latent,
    pub t: usize,
}

/// Synchronized update of all patches at timestep `t`.
///
/// Every estimate is taken from the pre-update resampled latents, then all
/// patches update together. Pixels whose blended estimate equals their own
/// estimate keep the unsynchronized value, so patches without neighbours, or
/// steps with `lambda = 0`, pass through unchanged.
pub fn sync_reverse_step(
    d: &dyn Denoiser,
    states: &[PatchState],
    plan: &SyncPlan,
    t: usize,
    s: &NoiseSchedule,
) -> Result<Vec<Latent>> {
    if states.len() != plan.patch_count() {
        return Err(Error::SyncBarrier(format!(
            "{} patch states for a plan of {} patches",
            states.len(),
            plan.patch_count()
        )));
    }
    if let Some((i, st)) = states.iter().enumerate().find(|(_, st)| st.t != t) {
        return Err(Error::SyncBarrier(format!(
            "patch {i} is at timestep {} while the step expects {t}",
            st.t
        )));
    }
    let lam = plan.lambda(t);
    if lam == 0.0 || plan.edges.is_empty() {
        return Ok(states.iter().map(|st| st.latent.clone()).collect());
    }

    let resampled: Vec<Latent> = states
        .par_iter()
        .map(|st| resample_forward(d, &st.latent, t, s))
        .collect::<Result<_>>()?;
    let own: Vec<(Latent, Latent)> = resampled
        .par_iter()
        .map(|r| {
            let eps = predict_eps(d, r, t)?.eps;
            let x0 = tweedie(r, t, &eps, s)?;
            Ok((eps, x0))
        })
        .collect::<Result<_>>()?;
    let aux: Vec<Latent> = plan
        .edges
        .par_iter()
        .map(|e| {
            let a = make_aux_latent(&resampled[e.first], &resampled[e.second], e.orientation)?;
            let eps = predict_eps(d, &a, t)?.eps;
            tweedie(&a, t, &eps, s)
        })
        .collect::<Result<_>>()?;

    (0..states.len())
        .into_par_iter()
        .map(|i| {
            let (eps, x0) = &own[i];
            let mut blended = x0.clone();
            for (k, side) in plan.edges_of(i) {
                let mask = plan
                    .mask(plan.edges[k].orientation, side)
                    .expect("masks exist for every edge orientation");
                blended = blend_tweedie(&blended, &aux[k], mask, lam)?;
            }
            let stepped = reverse_from_estimate(&blended, t, eps, s)?;
            let prev = &states[i].latent;
            let out = Tensor::from_fn(prev.shape(), |c, y, x| {
                let j = prev.index(c, y, x);
                if blended.data()[j].to_bits() == x0.data()[j].to_bits() {
                    prev.data()[j]
                } else {
                    stepped.data()[j]
                }
            });
            if !out.is_finite() {
                return Err(Error::NumericDivergence {
                    t: t - 1,
                    what: format!("synchronized latent of patch {i}"),
                });
            }
            Ok(out)
        })
        .collect()
}
