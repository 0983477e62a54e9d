//! Segmentation network: ViT encoder with ASPP-refined last-block attention
//! and a class-embedding mask decoder, plus the teacher/student state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aspp::{AsppParams, Rates};
use crate::decoder::{self, ClassEmbeddings, PseudoLabelMask};
use crate::error::{Error, Result};
use crate::params::{bind, join, ParamTree};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vit::{encoder_forward_tape, AsppInjection, EncoderConfig, EncoderParams};

/// Noise on the identity ASPP initialization.
pub const ASPP_INIT_NOISE: f64 = 0.01;

/// Class embeddings start small so the initial masks are near uniform.
pub const CLASS_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if !(2..=256).contains(&self.num_classes) {
            return Err(Error::Config(format!("num_classes must be in 2..=256, got {}", self.num_classes)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub encoder: EncoderParams<T>,
    pub aspp: AsppParams<T>,
    pub classes: ClassEmbeddings<T>,
}

impl<T> ParamTree<T> for ModelParams<T> {
    type Mapped<U> = ModelParams<U>;

    fn try_map<U>(&self, f: &mut dyn FnMut(&T) -> Result<U>) -> Result<ModelParams<U>> {
        Ok(ModelParams {
            encoder: self.encoder.try_map(f)?,
            aspp: self.aspp.try_map(f)?,
            classes: self.classes.try_map(f)?,
        })
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        self.encoder.visit_mut(f);
        self.aspp.visit_mut(f);
        self.classes.visit_mut(f);
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        self.encoder.named(&join(prefix, "encoder"), out);
        self.aspp.named(&join(prefix, "aspp"), out);
        self.classes.named(&join(prefix, "decoder"), out);
    }
}

impl ModelParams<Tensor> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderParams::init(&cfg.encoder, &mut rng);
        let aspp = AsppParams::init(cfg.encoder.num_patches(), ASPP_INIT_NOISE, &mut rng);
        let classes = ClassEmbeddings::new(Tensor::normal(&[cfg.num_classes, cfg.encoder.embed_dim], CLASS_INIT_STD, &mut rng))?;
        Ok(Self { encoder, aspp, classes })
    }

    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        let mut p = Self::init(cfg, 0)?;
        p.visit_mut(&mut |t| *t = Tensor::zeros(t.shape()));
        Ok(p)
    }
}

/// Elementwise `teacher = mu * teacher + (1 - mu) * student`.
pub fn ema_update(teacher: &mut ModelParams<Tensor>, student: &ModelParams<Tensor>, mu: f64) -> Result<()> {
    if !(0.0..1.0).contains(&mu) {
        return Err(Error::InvalidArgument(format!("EMA momentum must lie in [0, 1), got {mu}")));
    }
    let src = student.leaves();
    let shapes_match = {
        let dst = teacher.leaves();
        dst.len() == src.len() && dst.iter().zip(&src).all(|(a, b)| a.shape() == b.shape())
    };
    if !shapes_match {
        return Err(crate::error::shape_err("ema_update", "teacher and student trees differ"));
    }
    let mut i = 0;
    teacher.visit_mut(&mut |t| {
        if mu == 0.0 {
            t.data_mut().copy_from_slice(src[i].data());
        } else {
            // a + (1 - mu)(b - a) leaves a unchanged exactly when a == b
            for (a, &b) in t.data_mut().iter_mut().zip(src[i].data()) {
                *a += (1.0 - mu) * (b - *a);
            }
        }
        i += 1;
    });
    Ok(())
}

/// Student, EMA teacher, momentum buffers and counters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub student: ModelParams<Tensor>,
    pub teacher: ModelParams<Tensor>,
    pub velocity: ModelParams<Tensor>,
    /// 1-based epoch of the next step.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
}

impl ModelState {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let student = ModelParams::init(&config, seed)?;
        Ok(Self {
            teacher: student.clone(),
            velocity: ModelParams::zeros(&config)?,
            student,
            config,
            epoch: 1,
            step: 0,
        })
    }
}

/// Tape outputs of one forward pass over a single image.
pub struct Prediction {
    /// Final-layer patch tokens, `[N, D]`.
    pub tokens: Var,
    /// Class logits per token laid out on the patch grid, `[C, g, g]`.
    pub logits: Var,
    /// Full-resolution class distribution, `[C, H, W]`.
    pub probs: Var,
}

/// ASPP rates and residual flag for the attention injection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Injection {
    pub rates: Rates,
    pub residual: bool,
}

pub fn forward_tape(
    tape: &mut Tape,
    image: &Tensor,
    cfg: &ModelConfig,
    params: &ModelParams<Var>,
    injection: Option<Injection>,
) -> Result<Prediction> {
    let inj = injection.map(|i| AsppInjection { params: &params.aspp, rates: i.rates, residual: i.residual });
    let out = encoder_forward_tape(tape, image, &cfg.encoder, &params.encoder, inj.as_ref())?;
    let n = cfg.encoder.num_patches();
    let g = cfg.encoder.grid();
    let tokens = tape.narrow(out.tokens, 0, 1, n)?;
    let logits = decoder::decode_logits_tape(tape, tokens, params.classes.0)?;
    let token_probs = tape.softmax(logits, 1)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let probs = decoder::masks_to_full_res_tape(tape, token_probs, h, w)?;
    let logits = tape.transpose(logits)?;
    let logits = tape.reshape(logits, &[cfg.num_classes, g, g])?;
    Ok(Prediction { tokens, logits, probs })
}

/// Gradient-free forward pass.
#[derive(Clone, Debug)]
pub struct Inference {
    /// `[N, D]`
    pub tokens: Tensor,
    pub mask: PseudoLabelMask,
}

pub fn infer(
    image: &Tensor,
    cfg: &ModelConfig,
    params: &ModelParams<Tensor>,
    injection: Option<Injection>,
) -> Result<Inference> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params, false)?;
    let p = forward_tape(&mut tape, image, cfg, &bound, injection)?;
    Ok(Inference {
        tokens: tape.value(p.tokens).clone(),
        mask: PseudoLabelMask::new(tape.value(p.probs).clone())?,
    })
}
