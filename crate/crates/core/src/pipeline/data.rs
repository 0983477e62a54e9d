//! Seeded synthetic scenes: colored disks and rectangles on a textured gray
//! background. Class 0 is background; class `k >= 1` owns one hue family.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_FOREGROUND: f64 = 0.05;
pub const MAX_FOREGROUND: f64 = 0.6;
const HUE_JITTER: f64 = 20.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, H, W]`, values in [0, 1].
    pub image: Tensor,
    /// Row-major ground-truth labels.
    pub labels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_images: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { n_images: 64, height: 32, width: 32 }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Center hue (degrees) of the color family for foreground class `k >= 1`.
pub fn class_hue(k: usize, classes: usize) -> f64 {
    360.0 * (k - 1) as f64 / (classes - 1) as f64
}

fn scene(rng: &mut ChaCha8Rng, h: usize, w: usize, classes: usize) -> Sample {
    let hw = h * w;
    let base = rng.random_range(0.35..0.6);
    let (fx, fy, phase) = (rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.0..6.3));
    let mut image = vec![0.0; 3 * hw];
    for i in 0..h {
        for j in 0..w {
            let t = base + 0.04 * (fx * j as f64 + fy * i as f64 + phase).sin() + rng.random_range(-0.03..0.03);
            for c in 0..3 {
                image[c * hw + i * w + j] = t + rng.random_range(-0.01..0.01);
            }
        }
    }
    let mut labels = vec![0u8; hw];
    let shapes = rng.random_range(1..=3);
    let side = h.min(w) as f64;
    for _ in 0..shapes {
        let class = rng.random_range(1..classes);
        let hue = class_hue(class, classes) + rng.random_range(-HUE_JITTER..HUE_JITTER);
        let rgb = hsv_to_rgb(hue, rng.random_range(0.7..1.0), rng.random_range(0.65..0.95));
        let (ci, cj) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        let disk = rng.random_bool(0.5);
        let (a, b) = (rng.random_range(0.1..0.3) * side, rng.random_range(0.1..0.3) * side);
        for i in 0..h {
            for j in 0..w {
                let (di, dj) = (i as f64 + 0.5 - ci, j as f64 + 0.5 - cj);
                let inside = if disk { di * di + dj * dj <= a * a } else { di.abs() <= a && dj.abs() <= b };
                if inside {
                    let px = i * w + j;
                    labels[px] = class as u8;
                    for c in 0..3 {
                        image[c * hw + px] = (rgb[c] + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    Sample { image: Tensor::new(vec![3, h, w], image).expect("shape"), labels }
}

pub fn foreground_fraction(labels: &[u8]) -> f64 {
    labels.iter().filter(|&&l| l != 0).count() as f64 / labels.len() as f64
}

/// `n_images` scenes, each redrawn until its foreground fraction lies in
/// [`MIN_FOREGROUND`, `MAX_FOREGROUND`].
pub fn synth_dataset(seed: u64, n_images: usize, h: usize, w: usize, classes: usize) -> Result<Vec<Sample>> {
    if !(2..=256).contains(&classes) {
        return Err(Error::InvalidArgument(format!("need 2..=256 classes, got {classes}")));
    }
    if h < 16 || w < 16 {
        return Err(Error::InvalidArgument(format!("images must be at least 16x16, got {h}x{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_images)
        .map(|_| loop {
            let s = scene(&mut rng, h, w, classes);
            if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&foreground_fraction(&s.labels)) {
                break s;
            }
        })
        .collect())
}
