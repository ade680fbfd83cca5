//! Non-overlapping patch tiling and the conditioning-image resize kernels.
//!
//! Patches are indexed row-major: patch `i` sits at grid row `i / cols`,
//! column `i % cols`.

use crate::error::{Error, Result};
use crate::tensor::{Latent, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    rows: usize,
    cols: usize,
    patch_dims: (usize, usize),
    patches: Vec<Latent>,
}

impl PatchGrid {
    /// Tiles `canvas` into `patch_h x patch_w` patches.
    pub fn split(canvas: &Latent, patch_h: usize, patch_w: usize) -> Result<Self> {
        if patch_h == 0 || patch_w == 0 {
            return Err(Error::Tiling("patch dims must be positive".into()));
        }
        let (h, w) = (canvas.height(), canvas.width());
        if h % patch_h != 0 || w % patch_w != 0 {
            let pad_h = (patch_h - h % patch_h) % patch_h;
            let pad_w = (patch_w - w % patch_w) % patch_w;
            return Err(Error::Tiling(format!(
                "canvas {h}x{w} is not divisible by patch {patch_h}x{patch_w}; \
                 it would need {pad_h} rows and {pad_w} columns of padding"
            )));
        }
        let (rows, cols) = (h / patch_h, w / patch_w);
        let mut patches = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                patches.push(canvas.crop(r * patch_h, c * patch_w, patch_h, patch_w)?);
            }
        }
        Ok(PatchGrid {
            rows,
            cols,
            patch_dims: (patch_h, patch_w),
            patches,
        })
    }

    /// Builds a grid from row-major patches, checking every invariant.
    pub fn from_patches(rows: usize, cols: usize, patches: Vec<Latent>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Tiling("grid must have at least one row and column".into()));
        }
        if patches.len() != rows * cols {
            return Err(Error::Tiling(format!(
                "{} patches for a {rows}x{cols} grid",
                patches.len()
            )));
        }
        let shape = patches[0].shape();
        if let Some((i, p)) = patches.iter().enumerate().find(|(_, p)| p.shape() != shape) {
            return Err(Error::Tiling(format!(
                "patch {i} has shape {:?}, expected {shape:?}",
                p.shape()
            )));
        }
        Ok(PatchGrid {
            rows,
            cols,
            patch_dims: (shape[1], shape[2]),
            patches,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn patch_dims(&self) -> (usize, usize) {
        self.patch_dims
    }

    pub fn canvas_dims(&self) -> (usize, usize) {
        (self.rows * self.patch_dims.0, self.cols * self.patch_dims.1)
    }

    pub fn patches(&self) -> &[Latent] {
        &self.patches
    }

    pub fn into_patches(self) -> Vec<Latent> {
        self.patches
    }

    pub fn patch(&self, i: usize) -> &Latent {
        &self.patches[i]
    }

    /// Reassembles the canvas.
    pub fn merge(&self) -> Result<Latent> {
        let shape = self.patches[0].shape();
        if shape[1] != self.patch_dims.0 || shape[2] != self.patch_dims.1 {
            return Err(Error::Tiling("patch dims disagree with the grid geometry".into()));
        }
        if let Some(i) = self.patches.iter().position(|p| p.shape() != shape) {
            return Err(Error::Tiling(format!("patch {i} breaks the common patch shape")));
        }
        let (h, w) = self.canvas_dims();
        let mut canvas = Tensor::zeros([shape[0], h, w]);
        for (i, p) in self.patches.iter().enumerate() {
            let (r, c) = self.position(i);
            canvas.paste(p, r * self.patch_dims.0, c * self.patch_dims.1)?;
        }
        Ok(canvas)
    }

    /// `(row, col)` of patch `i`.
    pub fn position(&self, i: usize) -> (usize, usize) {
        (i / self.cols, i % self.cols)
    }

    pub fn right_of(&self, i: usize) -> Option<usize> {
        let (_, c) = self.position(i);
        (i < self.len() && c + 1 < self.cols).then(|| i + 1)
    }

    pub fn left_of(&self, i: usize) -> Option<usize> {
        let (_, c) = self.position(i);
        (i < self.len() && c > 0).then(|| i - 1)
    }

    pub fn below(&self, i: usize) -> Option<usize> {
        let (r, _) = self.position(i);
        (i < self.len() && r + 1 < self.rows).then(|| i + self.cols)
    }

    pub fn above(&self, i: usize) -> Option<usize> {
        let (r, _) = self.position(i);
        (i < self.len() && r > 0).then(|| i - self.cols)
    }
}

fn integer_scale(from: usize, to: usize) -> Option<usize> {
    (from > 0 && to >= from && to.is_multiple_of(from)).then(|| to / from)
}

/// Corner-aligned bilinear upsampling by an integer factor per axis.
pub fn upsample_to_canvas(img: &Latent, height: usize, width: usize) -> Result<Latent> {
    let (h, w) = (img.height(), img.width());
    if integer_scale(h, height).is_none() || integer_scale(w, width).is_none() {
        return Err(Error::Resize(format!(
            "{h}x{w} -> {height}x{width} is not an integer upscale"
        )));
    }
    if (h, w) == (height, width) {
        return Ok(img.clone());
    }
    // source coordinate of output index i along an axis of n_in -> n_out samples
    let coords = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|i| {
                if n_out == 1 || n_in == 1 {
                    return (0, 0, 0.0);
                }
                let pos = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
                let lo = (pos.floor() as usize).min(n_in - 1);
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let ys = coords(h, height);
    let xs = coords(w, width);
    Ok(Tensor::from_fn([img.channels(), height, width], |c, y, x| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let p = |yy, xx| img.get(c, yy, xx) as f64;
        let top = p(y0, x0) + fx * (p(y0, x1) - p(y0, x0));
        let bot = p(y1, x0) + fx * (p(y1, x1) - p(y1, x0));
        (top + fy * (bot - top)) as f32
    }))
}

/// `factor x factor` box-mean reduction.
pub fn downsample(img: &Latent, factor: usize) -> Result<Latent> {
    let (h, w) = (img.height(), img.width());
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Resize(format!("{h}x{w} is not divisible by factor {factor}")));
    }
    if factor == 1 {
        return Ok(img.clone());
    }
    let n = (factor * factor) as f64;
    Ok(Tensor::from_fn([img.channels(), h / factor, w / factor], |c, y, x| {
        let mut acc = 0.0f64;
        for dy in 0..factor {
            for dx in 0..factor {
                acc += img.get(c, y * factor + dy, x * factor + dx) as f64;
            }
        }
        (acc / n) as f32
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SplitMix64;

    #[test]
    fn split_counts_and_round_trip() {
        let x = SplitMix64::new(1).tensor_uniform([3, 16, 24], 0.0, 1.0);
        let g = PatchGrid::split(&x, 4, 8).unwrap();
        assert_eq!((g.rows(), g.cols(), g.len()), (4, 3, 12));
        assert!(g.merge().unwrap().bit_eq(&x));
        assert!(g.patch(4).bit_eq(&x.crop(4, 8, 4, 8).unwrap()));
    }

    #[test]
    fn full_size_grid_counts() {
        // 2048^2 canvas cut into 512^2 patches, checked on geometry alone
        let x = Tensor::zeros([1, 2048, 2048]);
        let g = PatchGrid::split(&x, 512, 512).unwrap();
        assert_eq!((g.rows(), g.cols(), g.len()), (4, 4, 16));
    }

    #[test]
    fn single_patch_grid() {
        let x = SplitMix64::new(2).tensor_uniform([1, 8, 8], 0.0, 1.0);
        let g = PatchGrid::split(&x, 8, 8).unwrap();
        assert_eq!(g.len(), 1);
        assert!(g.patch(0).bit_eq(&x));
        assert_eq!(g.right_of(0), None);
        assert_eq!(g.below(0), None);
    }

    #[test]
    fn non_divisible_names_padding() {
        let err = PatchGrid::split(&Tensor::zeros([1, 10, 8]), 4, 4).unwrap_err();
        assert!(err.to_string().contains("2 rows and 0 columns"), "{err}");
    }

    #[test]
    fn inconsistent_patches_rejected() {
        let p = vec![Tensor::zeros([1, 4, 4]), Tensor::zeros([1, 4, 5])];
        assert!(matches!(PatchGrid::from_patches(1, 2, p), Err(Error::Tiling(_))));
        let p = vec![Tensor::zeros([1, 4, 4]); 3];
        assert!(matches!(PatchGrid::from_patches(2, 2, p), Err(Error::Tiling(_))));
    }

    #[test]
    fn neighbours_are_total() {
        let g = PatchGrid::split(&Tensor::zeros([1, 12, 8]), 4, 4).unwrap();
        assert_eq!(g.right_of(0), Some(1));
        assert_eq!(g.right_of(1), None);
        assert_eq!(g.below(0), Some(2));
        assert_eq!(g.below(4), None);
        assert_eq!(g.below(5), None);
        assert_eq!(g.above(2), Some(0));
        assert_eq!(g.left_of(3), Some(2));
        assert_eq!(g.left_of(2), None);
        assert_eq!(g.right_of(99), None);
    }

    #[test]
    fn checkerboard_upsample_stencil() {
        let x = Tensor::from_vec([1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let up = upsample_to_canvas(&x, 4, 4).unwrap();
        let third = 1.0f32 / 3.0;
        // row 1 samples source row 1/3
        let row1: Vec<f32> = (0..4).map(|c| up.get(0, 1, c)).collect();
        let expect = [third, 4.0 / 9.0, 5.0 / 9.0, 2.0 * third];
        for (a, b) in row1.iter().zip(expect) {
            assert!((a - b).abs() < 1e-6, "{row1:?}");
        }
        assert!((up.get(0, 0, 1) - third).abs() < 1e-6);
        assert!((up.get(0, 0, 2) - 2.0 * third).abs() < 1e-6);
        assert_eq!(up.get(0, 3, 0), 1.0);
    }

    #[test]
    fn resize_identities() {
        let x = SplitMix64::new(3).tensor_uniform([2, 6, 6], 0.0, 1.0);
        assert!(upsample_to_canvas(&x, 6, 6).unwrap().bit_eq(&x));
        assert!(downsample(&x, 1).unwrap().bit_eq(&x));
        let c = Tensor::filled([2, 3, 5], 0.3);
        let up = upsample_to_canvas(&c, 12, 20).unwrap();
        assert!(up.data().iter().all(|&v| v == 0.3));
        assert!(downsample(&up, 4).unwrap().max_abs_diff(&c).unwrap() <= 1e-6);
        let b = Tensor::from_vec([1, 2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(downsample(&b, 2).unwrap().data(), &[0.5]);
    }

    #[test]
    fn corner_aligned_upsample_is_not_box_inverse_on_ramps() {
        let ramp = Tensor::from_fn([1, 4, 4], |_, y, _| y as f32);
        let back = downsample(&upsample_to_canvas(&ramp, 8, 8).unwrap(), 2).unwrap();
        assert!(back.max_abs_diff(&ramp).unwrap() > 1e-3);
    }

    #[test]
    fn resize_errors() {
        let x = Tensor::zeros([1, 4, 4]);
        assert!(matches!(upsample_to_canvas(&x, 6, 8), Err(Error::Resize(_))));
        assert!(matches!(upsample_to_canvas(&x, 2, 2), Err(Error::Resize(_))));
        assert!(matches!(downsample(&x, 3), Err(Error::Resize(_))));
    }
}
