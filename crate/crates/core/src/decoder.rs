//! Class-mask decoding, class activation maps and pseudo-label fusion.

use crate::aspp::grid_side;
use crate::error::{shape_err, Error, Result};
use crate::kernels;
use crate::params::{join, ParamTree};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One learned embedding per class, `[C, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassEmbeddings<T = Tensor>(pub T);

impl ClassEmbeddings<Tensor> {
    pub fn new(c: Tensor) -> Result<Self> {
        if c.rank() != 2 || c.shape()[0] < 2 {
            return Err(shape_err(
                "class_embeddings",
                format!("expected [C >= 2, D], got {:?}", c.shape()),
            ));
        }
        Ok(Self(c.check_finite("class_embeddings")?))
    }

    pub fn num_classes(&self) -> usize {
        self.0.shape()[0]
    }
}

impl<T> ParamTree<T> for ClassEmbeddings<T> {
    type Mapped<U> = ClassEmbeddings<U>;

    fn try_map<U>(&self, f: &mut dyn FnMut(&T) -> Result<U>) -> Result<ClassEmbeddings<U>> {
        Ok(ClassEmbeddings(f(&self.0)?))
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        f(&mut self.0);
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((join(prefix, "class_embeddings"), &self.0));
    }
}

/// Per-pixel class distribution, `[C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelMask {
    probs: Tensor,
}

pub const SIMPLEX_TOL: f64 = 1e-6;

impl PseudoLabelMask {
    /// Validates that every pixel is a distribution within [`SIMPLEX_TOL`].
    pub fn new(probs: Tensor) -> Result<Self> {
        if probs.rank() != 3 {
            return Err(shape_err("pseudo_label_mask", format!("expected [C, H, W], got {:?}", probs.shape())));
        }
        let mask = Self { probs };
        let err = mask.max_simplex_error();
        if !(err <= SIMPLEX_TOL) || mask.probs.data().iter().any(|&p| !(-SIMPLEX_TOL..=1.0 + SIMPLEX_TOL).contains(&p)) {
            return Err(Error::InvalidArgument(format!(
                "mask pixels are not distributions (max sum error {err:e})"
            )));
        }
        Ok(mask)
    }

    /// One-hot mask from integer labels.
    pub fn one_hot(labels: &[u8], height: usize, width: usize, classes: usize) -> Result<Self> {
        if labels.len() != height * width {
            return Err(shape_err("one_hot", format!("{} labels for {height}x{width}", labels.len())));
        }
        let mut probs = Tensor::zeros(&[classes, height, width]);
        for (px, &l) in labels.iter().enumerate() {
            let l = l as usize;
            if l >= classes {
                return Err(Error::LabelOutOfRange { label: l, classes });
            }
            probs.data_mut()[l * height * width + px] = 1.0;
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn into_probs(self) -> Tensor {
        self.probs
    }

    pub fn classes(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.probs.shape()[2]
    }

    pub fn max_simplex_error(&self) -> f64 {
        let (c, hw) = (self.classes(), self.height() * self.width());
        let d = self.probs.data();
        (0..hw)
            .map(|px| ((0..c).map(|k| d[k * hw + px]).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Per-pixel argmax, lowest class index on ties.
    pub fn argmax(&self) -> Vec<u8> {
        argmax_channels(&self.probs)
    }
}

pub(crate) fn argmax_channels(t: &Tensor) -> Vec<u8> {
    let (c, hw) = (t.shape()[0], t.shape()[1] * t.shape()[2]);
    let d = t.data();
    (0..hw)
        .map(|px| {
            let mut best = 0;
            for k in 1..c {
                if d[k * hw + px] > d[best * hw + px] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}

/// Divides every pixel of a `[C, H, W]` tensor by its channel sum.
pub(crate) fn normalize_pixels(t: &mut Tensor) {
    let (c, hw) = (t.shape()[0], t.shape()[1] * t.shape()[2]);
    let d = t.data_mut();
    for px in 0..hw {
        let s: f64 = (0..c).map(|k| d[k * hw + px]).sum();
        if s > 0.0 {
            for k in 0..c {
                d[k * hw + px] /= s;
            }
        } else {
            for k in 0..c {
                d[k * hw + px] = 1.0 / c as f64;
            }
        }
    }
}

/// Class logits `z c^T / sqrt(D)` for patch tokens `z: [N, D]`.
pub fn decode_logits_tape(tape: &mut Tape, z: Var, c: Var) -> Result<Var> {
    let (zs, cs) = (tape.value(z).shape().to_vec(), tape.value(c).shape().to_vec());
    if zs.len() != 2 || cs.len() != 2 || zs[1] != cs[1] {
        return Err(shape_err(
            "decode_masks",
            format!("tokens {zs:?} and class embeddings {cs:?} disagree on D"),
        ));
    }
    let ct = tape.transpose(c)?;
    let logits = tape.matmul(z, ct)?;
    tape.scale(logits, 1.0 / (zs[1] as f64).sqrt())
}

/// Per-token class distributions `softmax(z c^T / sqrt(D))`, `[N, C]`.
pub fn decode_masks_tape(tape: &mut Tape, z: Var, c: Var) -> Result<Var> {
    let logits = decode_logits_tape(tape, z, c)?;
    tape.softmax(logits, 1)
}

pub fn decode_masks(z: &Tensor, c: &ClassEmbeddings) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (zv, cv) = (tape.constant(z.clone())?, tape.constant(c.0.clone())?);
    let out = decode_masks_tape(&mut tape, zv, cv)?;
    Ok(tape.value(out).clone())
}

/// `[N, C]` token masks to a renormalized `[C, H, W]` field by bilinear
/// upsampling of the `sqrt(N) x sqrt(N)` grid.
pub fn masks_to_full_res_tape(tape: &mut Tape, token_masks: Var, h: usize, w: usize) -> Result<Var> {
    let s = tape.value(token_masks).shape().to_vec();
    if s.len() != 2 {
        return Err(shape_err("masks_to_full_res", format!("expected [N, C], got {s:?}")));
    }
    let (n, c) = (s[0], s[1]);
    let side = grid_side(n)?;
    let t = tape.transpose(token_masks)?;
    let grid = tape.reshape(t, &[c, side, side])?;
    let up = tape.bilinear_upsample(grid, h, w)?;
    let sums = tape.sum_axis(up, 0)?;
    let sums = tape.broadcast(sums, &[c, h, w])?;
    tape.div(up, sums)
}

pub fn masks_to_full_res(token_masks: &Tensor, h: usize, w: usize) -> Result<PseudoLabelMask> {
    let mut tape = Tape::new();
    let x = tape.constant(token_masks.clone())?;
    let out = masks_to_full_res_tape(&mut tape, x, h, w)?;
    PseudoLabelMask::new(tape.value(out).clone())
}

/// `relu(sum_k alpha[c,k] * A[k])`, then each class map divided by its
/// maximum when that maximum is positive.
pub fn cam(features: &Tensor, alpha: &Tensor) -> Result<Tensor> {
    features.expect_rank("cam", 3)?;
    alpha.expect_rank("cam", 2)?;
    let (k, h, w) = (features.shape()[0], features.shape()[1], features.shape()[2]);
    if alpha.shape()[1] != k {
        return Err(shape_err(
            "cam",
            format!("alpha {:?} for {k} feature channels", alpha.shape()),
        ));
    }
    let flat = features.clone().reshape(&[k, h * w])?;
    let mut maps = kernels::matmul(alpha, &flat)?.map(|v| v.max(0.0));
    let c = alpha.shape()[0];
    for class in maps.data_mut().chunks_mut(h * w) {
        let max = class.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            for v in class {
                *v /= max;
            }
        }
    }
    maps.reshape(&[c, h, w])
}

/// Initial pseudo labels from CAM activations: pixels whose strongest
/// activation is below `threshold` go to the background class 0, the rest
/// get a softmax over the activations.
pub fn cam_to_initial_labels(cam_maps: &Tensor, threshold: f64) -> Result<PseudoLabelMask> {
    cam_maps.expect_rank("cam_to_initial_labels", 3)?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "background threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let soft = kernels::softmax(cam_maps, 0)?;
    let (c, hw) = (cam_maps.shape()[0], cam_maps.shape()[1] * cam_maps.shape()[2]);
    let d = cam_maps.data();
    let mut out = soft.into_data();
    for px in 0..hw {
        let max = (0..c).map(|k| d[k * hw + px]).fold(f64::NEG_INFINITY, f64::max);
        if max < threshold {
            for k in 0..c {
                out[k * hw + px] = if k == 0 { 1.0 } else { 0.0 };
            }
        }
    }
    PseudoLabelMask::new(Tensor::new(cam_maps.shape().to_vec(), out)?)
}

/// Per-pixel `beta * cam + (1 - beta) * teacher`, renormalized.
pub fn fuse_masks(cam_mask: &PseudoLabelMask, teacher_mask: &PseudoLabelMask, beta: f64) -> Result<PseudoLabelMask> {
    if cam_mask.probs.shape() != teacher_mask.probs.shape() {
        return Err(shape_err(
            "fuse_masks",
            format!("{:?} vs {:?}", cam_mask.probs.shape(), teacher_mask.probs.shape()),
        ));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!("beta must lie in [0, 1], got {beta}")));
    }
    let mut fused = Tensor::from_fn(cam_mask.probs.shape(), |i| {
        beta * cam_mask.probs.data()[i] + (1.0 - beta) * teacher_mask.probs.data()[i]
    });
    normalize_pixels(&mut fused);
    PseudoLabelMask::new(fused)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn equal_embeddings_split_evenly() {
        let mut r = rng(0);
        let row = Tensor::uniform(&[1, 4], -1.0, 1.0, &mut r);
        let c = ClassEmbeddings::new(Tensor::from_fn(&[2, 4], |i| row.data()[i % 4])).unwrap();
        let z = Tensor::uniform(&[5, 4], -2.0, 2.0, &mut r);
        let m = decode_masks(&z, &c).unwrap();
        assert!(m.data().iter().all(|&p| (p - 0.5).abs() < 1e-15));
    }

    #[test]
    fn large_margin_concentrates_mass() {
        let c = ClassEmbeddings::new(Tensor::eye(3)).unwrap();
        let z = Tensor::new(vec![1, 3], vec![0.0, 200.0, 0.0]).unwrap();
        let m = decode_masks(&z, &c).unwrap();
        assert!((m.get(&[0, 1]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn decode_matches_loops() {
        let mut r = rng(1);
        let z = Tensor::uniform(&[4, 5], -2.0, 2.0, &mut r);
        let c = ClassEmbeddings::new(Tensor::uniform(&[3, 5], -2.0, 2.0, &mut r)).unwrap();
        let m = decode_masks(&z, &c).unwrap();
        for n in 0..4 {
            let logits: Vec<f64> = (0..3)
                .map(|k| (0..5).map(|d| z.get(&[n, d]) * c.0.get(&[k, d])).sum::<f64>() / 5f64.sqrt())
                .collect();
            let zsum: f64 = logits.iter().map(|l| l.exp()).sum();
            for k in 0..3 {
                assert!((m.get(&[n, k]) - logits[k].exp() / zsum).abs() < 1e-14);
            }
            assert!((m.data()[n * 3..n * 3 + 3].iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let bad = Tensor::zeros(&[4, 6]);
        assert!(decode_masks(&bad, &c).is_err());
    }

    #[test]
    fn decode_gradcheck() {
        let mut r = rng(2);
        let z = Tensor::uniform(&[4, 6], -2.0, 2.0, &mut r);
        let c = Tensor::uniform(&[3, 6], -2.0, 2.0, &mut r);
        let w = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut r);
        let weighted = |t: &mut Tape, m: Var| -> Result<Var> {
            let wv = t.constant(w.clone())?;
            let p = t.mul(m, wv)?;
            t.sum(p)
        };
        let ez = grad_check(|t, zv| {
            let cv = t.constant(c.clone())?;
            let m = decode_masks_tape(t, zv, cv)?;
            weighted(t, m)
        }, &z, 1e-5).unwrap();
        let ec = grad_check(|t, cv| {
            let zv = t.constant(z.clone())?;
            let m = decode_masks_tape(t, zv, cv)?;
            weighted(t, m)
        }, &c, 1e-5).unwrap();
        assert!(ez <= 1e-7 && ec <= 1e-7, "{ez} {ec}");
    }

    #[test]
    fn full_res_constant_and_identity() {
        let tokens = Tensor::from_fn(&[16, 3], |i| [0.2, 0.3, 0.5][i % 3]);
        let m = masks_to_full_res(&tokens, 12, 12).unwrap();
        for k in 0..3 {
            for px in 0..144 {
                assert!((m.probs().data()[k * 144 + px] - [0.2, 0.3, 0.5][k]).abs() < 1e-15);
            }
        }
        let mut r = rng(3);
        let raw = Tensor::uniform(&[16, 2], 0.0, 1.0, &mut r);
        let tokens = crate::kernels::softmax(&raw, 1).unwrap();
        let m = masks_to_full_res(&tokens, 4, 4).unwrap();
        for n in 0..16 {
            for k in 0..2 {
                assert!((m.probs().get(&[k, n / 4, n % 4]) - tokens.get(&[n, k])).abs() < 1e-15);
            }
        }
        assert!(matches!(
            masks_to_full_res(&Tensor::full(&[15, 2], 0.5), 4, 4),
            Err(Error::NotSquare { .. })
        ));
    }

    #[test]
    fn one_hot_constant_upsamples_to_constant_label() {
        let tokens = Tensor::from_fn(&[64, 4], |i| if i % 4 == 2 { 1.0 } else { 0.0 });
        let m = masks_to_full_res(&tokens, 32, 32).unwrap();
        assert!(m.argmax().iter().all(|&l| l == 2));
    }

    #[test]
    fn cam_cases() {
        let mut r = rng(4);
        let a = Tensor::uniform(&[3, 4, 4], -1.0, 1.0, &mut r);
        assert_eq!(cam(&a, &Tensor::zeros(&[2, 3])).unwrap(), Tensor::zeros(&[2, 4, 4]));

        let a = Tensor::uniform(&[1, 4, 4], 0.0, 2.0, &mut r);
        let max = a.data().iter().copied().fold(0.0, f64::max);
        let got = cam(&a, &Tensor::ones(&[1, 1])).unwrap();
        assert!(got.max_abs_diff(&a.map(|v| v / max).reshape(&[1, 4, 4]).unwrap()).unwrap() < 1e-15);

        let a = Tensor::uniform(&[3, 2, 2], -1.0, 1.0, &mut r);
        let alpha = Tensor::uniform(&[2, 3], -1.0, 1.0, &mut r);
        let got = cam(&a, &alpha).unwrap();
        for c in 0..2 {
            let raw: Vec<f64> = (0..4)
                .map(|px| (0..3).map(|k| alpha.get(&[c, k]) * a.data()[k * 4 + px]).sum::<f64>().max(0.0))
                .collect();
            let max = raw.iter().copied().fold(0.0, f64::max);
            for px in 0..4 {
                let expect = if max > 0.0 { raw[px] / max } else { 0.0 };
                assert!((got.data()[c * 4 + px] - expect).abs() < 1e-15);
                assert!((0.0..=1.0).contains(&got.data()[c * 4 + px]));
            }
        }
        assert!(cam(&a, &Tensor::zeros(&[2, 4])).is_err());
    }

    #[test]
    fn initial_labels() {
        let zero = Tensor::zeros(&[3, 4, 4]);
        let m = cam_to_initial_labels(&zero, 0.2).unwrap();
        assert!(m.argmax().iter().all(|&l| l == 0));
        assert!(m.probs().data()[..16].iter().all(|&p| p == 1.0));

        let sat = Tensor::from_fn(&[3, 4, 4], |i| if i / 16 == 2 { 1.0 } else { 0.0 });
        let m = cam_to_initial_labels(&sat, 0.25).unwrap();
        assert!(m.argmax().iter().all(|&l| l == 2));

        let mut r = rng(5);
        let mixed = Tensor::uniform(&[3, 5, 5], 0.0, 0.6, &mut r);
        let m = cam_to_initial_labels(&mixed, 0.3).unwrap();
        for px in 0..25 {
            let acts: Vec<f64> = (0..3).map(|k| mixed.data()[k * 25 + px]).collect();
            let (mut best, mut max) = (0, acts[0]);
            for (k, &a) in acts.iter().enumerate() {
                if a > max {
                    best = k;
                    max = a;
                }
            }
            let expect = if max < 0.3 { 0 } else { best };
            assert_eq!(m.argmax()[px] as usize, expect);
        }
        assert!(m.max_simplex_error() < 1e-12);
        assert!(cam_to_initial_labels(&mixed, 1.0).is_err());
    }

    fn random_mask(c: usize, h: usize, w: usize, r: &mut ChaCha8Rng) -> PseudoLabelMask {
        let raw = Tensor::uniform(&[c, h, w], -2.0, 2.0, r);
        PseudoLabelMask::new(crate::kernels::softmax(&raw, 0).unwrap()).unwrap()
    }

    #[test]
    fn fusion() {
        let mut r = rng(6);
        let a = random_mask(3, 4, 4, &mut r);
        let b = random_mask(3, 4, 4, &mut r);
        assert!(fuse_masks(&a, &b, 1.0).unwrap().probs().max_abs_diff(a.probs()).unwrap() < 1e-15);
        assert!(fuse_masks(&a, &b, 0.0).unwrap().probs().max_abs_diff(b.probs()).unwrap() < 1e-15);
        for beta in [0.0, 0.3, 0.5, 1.0] {
            let f = fuse_masks(&a, &a, beta).unwrap();
            assert!(f.probs().max_abs_diff(a.probs()).unwrap() < 1e-15);
        }
        let one = PseudoLabelMask::one_hot(&[0], 1, 1, 2).unwrap();
        let other = PseudoLabelMask::one_hot(&[1], 1, 1, 2).unwrap();
        assert_eq!(fuse_masks(&one, &other, 0.5).unwrap().probs().data(), &[0.5, 0.5]);
        assert!(fuse_masks(&a, &random_mask(3, 4, 5, &mut r), 0.5).is_err());
    }

    #[test]
    fn mask_validation() {
        assert!(PseudoLabelMask::new(Tensor::full(&[2, 2, 2], 0.6)).is_err());
        assert!(PseudoLabelMask::one_hot(&[0, 3], 1, 2, 3).is_err());
    }
}
