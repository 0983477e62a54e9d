//! Pixel-adaptive refinement of pseudo labels with multi-dilation affinity
//! kernels built from color and position differences.

use serde::{Deserialize, Serialize};

use crate::decoder::{normalize_pixels, PseudoLabelMask};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Floor applied to local standard deviations before dividing.
pub const SIGMA_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParParams {
    pub dilation_list: Vec<usize>,
    pub w1: f64,
    pub w2: f64,
    pub omega3: f64,
    pub iterations: usize,
}

impl Default for ParParams {
    fn default() -> Self {
        Self {
            dilation_list: vec![1, 2, 4, 8],
            w1: 0.3,
            w2: 0.01,
            omega3: 0.01,
            iterations: 10,
        }
    }
}

impl ParParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.dilation_list.is_empty() || self.dilation_list.contains(&0) {
            return bad(format!("dilations must be non-empty and positive, got {:?}", self.dilation_list));
        }
        if !(self.w1 > 0.0 && self.w1.is_finite() && self.w2 > 0.0 && self.w2.is_finite()) {
            return bad(format!("bandwidths must be positive, got w1={} w2={}", self.w1, self.w2));
        }
        if !(self.omega3 >= 0.0 && self.omega3.is_finite()) {
            return bad(format!("omega3 must be non-negative, got {}", self.omega3));
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        Ok(())
    }
}

const RING: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

/// The 8-ring at each dilation around `(i, j)`, clipped to the grid.
pub fn neighbor_set(pos: (usize, usize), h: usize, w: usize, dilations: &[usize]) -> Vec<(usize, usize)> {
    let (i, j) = (pos.0 as isize, pos.1 as isize);
    let mut out = Vec::with_capacity(8 * dilations.len());
    for &d in dilations {
        let d = d as isize;
        for (di, dj) in RING {
            let (k, l) = (i + di * d, j + dj * d);
            if k >= 0 && l >= 0 && (k as usize) < h && (l as usize) < w {
                out.push((k as usize, l as usize));
            }
        }
    }
    out
}

/// Sparse per-pixel weights over each pixel's neighbor set.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityKernel {
    height: usize,
    width: usize,
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    weights: Vec<f64>,
}

impl AffinityKernel {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(flat neighbor index, weight)` pairs for flat pixel `px`.
    pub fn pixel(&self, px: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.offsets[px]..self.offsets[px + 1];
        self.neighbors[r.clone()].iter().copied().zip(self.weights[r].iter().copied())
    }

    pub fn max_sum_error(&self) -> f64 {
        (0..self.height * self.width)
            .map(|px| (self.pixel(px).map(|(_, w)| w).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// One propagation step `P'(ij) = sum_kl k(ij,kl) P(kl)` for every channel.
    pub fn propagate(&self, probs: &Tensor) -> Tensor {
        let hw = self.height * self.width;
        let c = probs.len() / hw;
        let src = probs.data();
        let mut out = vec![0.0; probs.len()];
        for px in 0..hw {
            for (n, w) in self.pixel(px) {
                for k in 0..c {
                    out[k * hw + px] += w * src[k * hw + n];
                }
            }
        }
        Tensor::new(probs.shape().to_vec(), out).expect("same shape")
    }
}

fn population_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    for x in xs.iter_mut() {
        *x /= z;
    }
}

/// Builds the mixed color/position kernel
/// `(softmax(k_rgb) + omega3 * softmax(k_pos)) / (1 + omega3)`.
pub fn affinity_kernel(image: &Tensor, params: &ParParams) -> Result<AffinityKernel> {
    params.validate()?;
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(shape_err("affinity_kernel", format!("expected [3, H, W], got {:?}", image.shape())));
    }
    if !image.all_finite() {
        return Err(Error::NonFinite { op: "affinity_kernel" });
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let hw = h * w;
    let d = image.data();
    let color = |px: usize, ch: usize| d[ch * hw + px];

    let mut offsets = vec![0];
    let mut neighbors = Vec::new();
    let mut weights = Vec::new();
    let (mut rgb, mut pos, mut sums_rgb, mut sums_pos) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for i in 0..h {
        for j in 0..w {
            let px = i * w + j;
            let nbrs = neighbor_set((i, j), h, w, &params.dilation_list);
            rgb.clear();
            pos.clear();
            sums_rgb.clear();
            sums_pos.clear();
            for &(k, l) in &nbrs {
                let q = k * w + l;
                let diffs = [0, 1, 2].map(|ch| color(px, ch) - color(q, ch));
                rgb.push(diffs.iter().map(|x| x * x).sum::<f64>());
                sums_rgb.push(diffs.iter().sum::<f64>());
                let (di, dj) = (i as f64 - k as f64, j as f64 - l as f64);
                pos.push(di * di + dj * dj);
                sums_pos.push(di + dj);
            }
            if !nbrs.is_empty() {
                let s_rgb = population_std(&sums_rgb).max(SIGMA_FLOOR);
                let s_pos = population_std(&sums_pos).max(SIGMA_FLOOR);
                for v in rgb.iter_mut() {
                    *v = -*v / (params.w1 * s_rgb * s_rgb);
                }
                for v in pos.iter_mut() {
                    *v = -*v / (params.w2 * s_pos * s_pos);
                }
                softmax_in_place(&mut rgb);
                softmax_in_place(&mut pos);
            }
            for (n, &(k, l)) in nbrs.iter().enumerate() {
                neighbors.push(k * w + l);
                weights.push((rgb[n] + params.omega3 * pos[n]) / (1.0 + params.omega3));
            }
            if nbrs.is_empty() {
                // 1x1 grid: the pixel keeps its own distribution
                neighbors.push(px);
                weights.push(1.0);
            }
            offsets.push(neighbors.len());
        }
    }
    Ok(AffinityKernel { height: h, width: w, offsets, neighbors, weights })
}

/// Runs `params.iterations` propagation steps, renormalizing each pixel after
/// every step. Never differentiated.
pub fn par_refine(mask: &PseudoLabelMask, image: &Tensor, params: &ParParams) -> Result<PseudoLabelMask> {
    let kernel = affinity_kernel(image, params)?;
    if (mask.height(), mask.width()) != (kernel.height, kernel.width) {
        return Err(shape_err(
            "par_refine",
            format!("mask {:?} vs image {:?}", mask.probs().shape(), image.shape()),
        ));
    }
    refine_with_kernel(mask, &kernel, params.iterations)
}

pub fn refine_with_kernel(mask: &PseudoLabelMask, kernel: &AffinityKernel, iterations: usize) -> Result<PseudoLabelMask> {
    let mut p = mask.probs().clone();
    for _ in 0..iterations {
        p = kernel.propagate(&p);
        normalize_pixels(&mut p);
    }
    PseudoLabelMask::new(p)
}
