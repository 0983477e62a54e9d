//! Teacher-student training: teacher and CAM masks are fused, refined with
//! PAR and used as targets for the student, whose weights then flow back into
//! the teacher by EMA.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{self, PseudoLabelMask};
use crate::error::{Error, Result};
use crate::kernels;
use crate::loss::{self, LossParts, LossWeights};
use crate::par::par_refine;
use crate::params::{bind, collect_grads, ParamTree};
use crate::pipeline::checkpoint;
use crate::pipeline::config::TrainConfig;
use crate::pipeline::data::{synth_dataset, Sample};
use crate::pipeline::eval::{evaluate, EvalReport};
use crate::pipeline::model::{ema_update, forward_tape, infer, Injection, ModelParams, ModelState};
use crate::pipeline::netpbm::{write_pgm, LabelImage};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const CSV_HEADER: &str = "step,epoch,seg,ce,un,cls,total,miou,acc";

/// One CSV row. `miou` and `acc` score the student's batch predictions after
/// Hungarian matching.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub seg: f64,
    pub ce: f64,
    pub un: f64,
    pub cls: f64,
    pub total: f64,
    pub miou: f64,
    pub acc: f64,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step, self.epoch, self.seg, self.ce, self.un, self.cls, self.total, self.miou, self.acc
        )
    }
}

pub fn injection(cfg: &TrainConfig, epoch: u64) -> Option<Injection> {
    cfg.aspp_on.then(|| Injection { rates: cfg.schedule.rates(epoch), residual: cfg.aspp_residual })
}

/// CAM feature channels `[D, g, g]`: each token's absolute deviation from the
/// globally average-pooled token, so the channels are non-negative and
/// vanish on tokens that look like the image as a whole.
pub fn cam_features(tokens: &Tensor, grid: usize) -> Result<Tensor> {
    let (n, d) = (tokens.shape()[0], tokens.shape()[1]);
    let t = tokens.data();
    let pooled: Vec<f64> = (0..d).map(|k| (0..n).map(|i| t[i * d + k]).sum::<f64>() / n as f64).collect();
    Tensor::from_fn(&[d, n], |i| (t[(i % n) * d + i / n] - pooled[i / n]).abs()).reshape(&[d, grid, grid])
}

/// CAM channel weights `[C, D]` read off the class embeddings: class 0 gets
/// none (background comes from the threshold), class `k` weights channel `j`
/// by `|c_kj|`, normalized to unit sum.
pub fn cam_weights(classes: &Tensor) -> Tensor {
    let (c, d) = (classes.shape()[0], classes.shape()[1]);
    let mut alpha = Tensor::zeros(&[c, d]);
    for k in 1..c {
        let row = &classes.data()[k * d..(k + 1) * d];
        let l1 = row.iter().map(|v| v.abs()).sum::<f64>();
        if l1 > 0.0 {
            for (a, v) in alpha.data_mut()[k * d..(k + 1) * d].iter_mut().zip(row) {
                *a = v.abs() / l1;
            }
        }
    }
    alpha
}

/// Class activation maps on the token grid, `[C, g, g]`.
pub fn token_cam(tokens: &Tensor, classes: &Tensor, grid: usize) -> Result<Tensor> {
    decoder::cam(&cam_features(tokens, grid)?, &cam_weights(classes))
}

/// Teacher mask fused with CAM seeds, then PAR-refined when enabled and
/// optionally hardened to one-hot labels.
pub fn pseudo_label(image: &Tensor, teacher: &ModelParams<Tensor>, state: &ModelState, cfg: &TrainConfig) -> Result<PseudoLabelMask> {
    let mc = &state.config;
    let out = infer(image, mc, teacher, injection(cfg, state.epoch))?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let cam = token_cam(&out.tokens, &teacher.classes.0, mc.encoder.grid())?;
    let cam = kernels::bilinear_upsample(&cam, h, w)?;
    let seeds = decoder::cam_to_initial_labels(&cam, cfg.background_threshold)?;
    let fused = decoder::fuse_masks(&seeds, &out.mask, cfg.beta)?;
    let refined = if cfg.par_on { par_refine(&fused, image, &cfg.par)? } else { fused };
    if cfg.hard_labels {
        let (c, h, w) = (refined.classes(), refined.height(), refined.width());
        PseudoLabelMask::one_hot(&refined.argmax(), h, w, c)
    } else {
        Ok(refined)
    }
}

fn flip_image(t: &Tensor) -> Tensor {
    let w = t.shape()[t.rank() - 1];
    Tensor::from_fn(t.shape(), |i| t.data()[i - i % w + (w - 1 - i % w)])
}

fn flip_labels(l: &[u8], w: usize) -> Vec<u8> {
    (0..l.len()).map(|i| l[i - i % w + (w - 1 - i % w)]).collect()
}

fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
    let s = parts[0].shape();
    let (c, w) = (s[0], s[2]);
    let total_h: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut out = Vec::with_capacity(c * total_h * w);
    for ch in 0..c {
        for p in parts {
            let hw = p.shape()[1] * w;
            out.extend_from_slice(&p.data()[ch * hw..(ch + 1) * hw]);
        }
    }
    Tensor::new(vec![c, total_h, w], out)
}

/// One optimizer step on `batch`; advances `state.step` and `state.epoch`.
pub fn train_step(batch: &[&Sample], state: &mut ModelState, cfg: &TrainConfig) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mc = state.config.clone();
    let inj = injection(cfg, state.epoch);

    let mut images = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    let mut gt = Vec::new();
    for (i, s) in batch.iter().enumerate() {
        let pseudo = pseudo_label(&s.image, &state.teacher, state, cfg)?.into_probs();
        let w = s.image.shape()[2];
        if cfg.flip_augment && i % 2 == 1 {
            images.push(flip_image(&s.image));
            targets.push(flip_image(&pseudo));
            gt.extend(flip_labels(&s.labels, w));
        } else {
            images.push(s.image.clone());
            targets.push(pseudo);
            gt.extend_from_slice(&s.labels);
        }
    }
    let target = PseudoLabelMask::new(concat_rows(&targets)?)?;

    let mut tape = Tape::new();
    let bound = bind(&mut tape, &state.student, true)?;
    let mut probs = Vec::with_capacity(batch.len());
    let mut logits = Vec::with_capacity(batch.len());
    for img in &images {
        let p = forward_tape(&mut tape, img, &mc, &bound, inj)?;
        probs.push(p.probs);
        logits.push(p.logits);
    }
    let probs = tape.concat(&probs, 1)?;
    let logits = tape.concat(&logits, 1)?;
    let parts = LossParts {
        seg: loss::seg_loss_tape(&mut tape, probs, &target)?,
        ce: loss::ce_loss_tape(&mut tape, probs, &target)?,
        un: loss::uncertainty_loss_tape(&mut tape, logits)?,
        cls: loss::cls_loss_tape(&mut tape, probs)?,
    };
    let weights = if cfg.losses_on {
        cfg.loss_weights
    } else {
        LossWeights { seg: 0.0, ce: cfg.loss_weights.ce, un: 0.0, cls: 0.0 }
    };
    let total = loss::total_loss_tape(&mut tape, &parts, &weights)?;
    let value = |v| tape.value(v).item();
    let (seg, ce, un, cls, total_value) = (value(parts.seg), value(parts.ce), value(parts.un), value(parts.cls), value(total));
    let pred = decoder::argmax_channels(tape.value(probs));

    let grads = tape.backward(total)?;
    let grads = collect_grads(&bound, &grads)?;
    let g = grads.leaves();
    let (lr, m) = (cfg.learning_rate, cfg.sgd_momentum);
    let mut i = 0;
    state.velocity.visit_mut(&mut |v| {
        for (a, &b) in v.data_mut().iter_mut().zip(g[i].data()) {
            *a = m * *a + b;
        }
        i += 1;
    });
    let vel = state.velocity.leaves();
    let mut i = 0;
    state.student.visit_mut(&mut |p| {
        for (a, &b) in p.data_mut().iter_mut().zip(vel[i].data()) {
            *a -= lr * b;
        }
        i += 1;
    });
    if state.student.leaves().iter().any(|t| !t.all_finite()) {
        return Err(Error::NonFinite { op: "sgd update" });
    }
    ema_update(&mut state.teacher, &state.student, cfg.ema_momentum)?;

    let report = evaluate(&pred, &gt, mc.num_classes, true)?;
    let metrics = StepMetrics {
        step: state.step + 1,
        epoch: state.epoch,
        seg,
        ce,
        un,
        cls,
        total: total_value,
        miou: report.miou,
        acc: report.acc,
    };
    state.step += 1;
    state.epoch = state.step / cfg.steps_per_epoch() + 1;
    Ok(metrics)
}

/// Owns the dataset and model state for a configured run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub data: Vec<Sample>,
    pub state: ModelState,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let d = &cfg.dataset;
        let data = synth_dataset(cfg.seed, d.n_images, d.height, d.width, cfg.num_classes)?;
        let state = ModelState::new(cfg.model_config(), cfg.seed)?;
        Ok(Self { cfg, data, state })
    }

    /// Resumes from a saved state; the dataset is regenerated from the seed.
    pub fn with_state(cfg: TrainConfig, state: ModelState) -> Result<Self> {
        if state.config != cfg.model_config() {
            return Err(Error::Config("checkpoint model does not match the config".into()));
        }
        let mut t = Self::new(cfg)?;
        t.state = state;
        Ok(t)
    }

    /// Dataset order for `epoch`, a pure function of seed and epoch.
    fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.shuffle(&mut rng);
        order
    }

    pub fn step(&mut self) -> Result<StepMetrics> {
        let spe = self.cfg.steps_per_epoch();
        let within = (self.state.step % spe) as usize;
        let order = self.epoch_order(self.state.epoch);
        let bs = self.cfg.batch_size;
        let idx = &order[within * bs..((within + 1) * bs).min(order.len())];
        let batch: Vec<&Sample> = idx.iter().map(|&i| &self.data[i]).collect();
        train_step(&batch, &mut self.state, &self.cfg)
    }

    /// Argmax labels of the student (or teacher) for every dataset image.
    pub fn predict(&self, use_teacher: bool) -> Result<Vec<Vec<u8>>> {
        let params = if use_teacher { &self.state.teacher } else { &self.state.student };
        let inj = injection(&self.cfg, self.state.epoch);
        self.data
            .iter()
            .map(|s| Ok(infer(&s.image, &self.state.config, params, inj)?.mask.argmax()))
            .collect()
    }

    /// Dataset-level scores with one matching shared by all images.
    pub fn evaluate(&self, use_teacher: bool) -> Result<EvalReport> {
        let pred: Vec<u8> = self.predict(use_teacher)?.concat();
        let gt: Vec<u8> = self.data.iter().flat_map(|s| s.labels.iter().copied()).collect();
        evaluate(&pred, &gt, self.cfg.num_classes, true)
    }

    /// Runs `cfg.steps` steps, writing `metrics.csv`, and at the end of every
    /// epoch a checkpoint and the student's masks for the first two images.
    pub fn run_to_dir(&mut self, out: &Path) -> Result<Vec<StepMetrics>> {
        fs::create_dir_all(out)?;
        let mut csv = fs::File::create(out.join("metrics.csv"))?;
        writeln!(csv, "{CSV_HEADER}")?;
        let mut history = Vec::new();
        while self.state.step < self.cfg.steps {
            let m = self.step()?;
            writeln!(csv, "{}", m.csv_row())?;
            history.push(m);
            let epoch_done = self.state.step % self.cfg.steps_per_epoch() == 0;
            if epoch_done || self.state.step == self.cfg.steps {
                self.write_epoch_artifacts(out, m.epoch)?;
            }
        }
        csv.flush()?;
        Ok(history)
    }

    fn write_epoch_artifacts(&self, out: &Path, epoch: u64) -> Result<()> {
        checkpoint::save(&self.state, out.join(format!("epoch_{epoch:03}.dmsa")))?;
        let inj = injection(&self.cfg, self.state.epoch);
        for (i, s) in self.data.iter().take(2).enumerate() {
            let labels = infer(&s.image, &self.state.config, &self.state.student, inj)?.mask.argmax();
            let (h, w) = (s.image.shape()[1], s.image.shape()[2]);
            let mask = LabelImage::new(labels, w, h, self.cfg.num_classes)?;
            write_pgm(out.join(format!("epoch_{epoch:03}_sample{i}.pgm")), &mask)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::data::DatasetSpec;
    use crate::vit::EncoderConfig;

    fn tiny() -> TrainConfig {
        TrainConfig {
            encoder: EncoderConfig { image_size: 16, patch_size: 4, embed_dim: 8, num_heads: 2, num_blocks: 1, mlp_ratio: 2 },
            dataset: DatasetSpec { n_images: 4, height: 16, width: 16 },
            batch_size: 2,
            steps: 3,
            par: crate::par::ParParams { iterations: 2, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_student() {
        let cfg = TrainConfig { learning_rate: 0.0, ..tiny() };
        let mut t = Trainer::new(cfg).unwrap();
        let before = t.state.student.clone();
        t.step().unwrap();
        assert_eq!(t.state.student, before);
        assert_eq!(t.state.teacher, before);
    }

    #[test]
    fn counters_and_epochs() {
        let mut t = Trainer::new(tiny()).unwrap();
        let epochs: Vec<u64> = (0..5).map(|_| t.step().unwrap().epoch).collect();
        assert_eq!(epochs, vec![1, 1, 2, 2, 3]);
        assert_eq!(t.state.step, 5);
        assert_ne!(t.state.student, t.state.teacher);
    }

    #[test]
    fn par_off_uses_fused_mask() {
        let cfg = TrainConfig { hard_labels: false, ..tiny() };
        let t = Trainer::new(cfg.clone()).unwrap();
        let img = &t.data[0].image;
        let on = pseudo_label(img, &t.state.teacher, &t.state, &cfg).unwrap();
        let off_cfg = TrainConfig { par_on: false, ..cfg.clone() };
        let off = pseudo_label(img, &t.state.teacher, &t.state, &off_cfg).unwrap();
        let refined = par_refine(&off, img, &cfg.par).unwrap();
        assert_eq!(on, refined);
    }

    #[test]
    fn ablations_complete() {
        for (aspp_on, par_on, losses_on) in [(false, true, true), (true, false, true), (true, true, false), (false, false, false)] {
            let cfg = TrainConfig { aspp_on, par_on, losses_on, flip_augment: true, ..tiny() };
            let mut t = Trainer::new(cfg).unwrap();
            for _ in 0..2 {
                let m = t.step().unwrap();
                assert!(m.total.is_finite() && (0.0..=1.0).contains(&m.miou));
            }
        }
    }

    #[test]
    fn flips() {
        let t = Tensor::from_fn(&[1, 2, 3], |i| i as f64);
        assert_eq!(flip_image(&t).data(), &[2.0, 1.0, 0.0, 5.0, 4.0, 3.0]);
        assert_eq!(flip_labels(&[0, 1, 2, 3], 2), vec![1, 0, 3, 2]);
    }

    #[test]
    fn cam_on_token_grid() {
        let tokens = Tensor::from_fn(&[4, 2], |i| if i % 2 == 0 { (i / 2) as f64 } else { 0.0 });
        let classes = Tensor::new(vec![2, 2], vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        // channel 0 deviates by 1.5, 0.5, 0.5, 1.5 from its mean; channel 1 is flat
        let cam = token_cam(&tokens, &classes, 2).unwrap();
        assert_eq!(cam.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0 / 3.0, 1.0 / 3.0, 1.0]);
        let alpha = cam_weights(&Tensor::new(vec![3, 2], vec![5.0, 5.0, 1.0, -3.0, 0.0, 0.0]).unwrap());
        assert_eq!(alpha.data(), &[0.0, 0.0, 0.25, 0.75, 0.0, 0.0]);
    }
}
