//! Tiny pre-norm vision transformer.
//!
//! Tokens are `[N+1, D]` with the class token first and patches in row-major
//! grid order. The last block can route its per-head attention weights
//! through the ASPP block before they are applied to the values.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aspp::{inject_head, AsppParams, Rates};
use crate::error::{shape_err, Error, Result};
use crate::params::{bind, join, ParamTree};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            embed_dim: 64,
            num_heads: 4,
            num_blocks: 4,
            mlp_ratio: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.image_size,
            self.patch_size,
            self.embed_dim,
            self.num_heads,
            self.num_blocks,
            self.mlp_ratio,
        ];
        if fields.contains(&0) {
            return Err(Error::Config(format!("encoder extents must be positive: {self:?}")));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub ln1_gamma: T,
    pub ln1_beta: T,
    pub qkv_weight: T,
    pub qkv_bias: T,
    pub proj_weight: T,
    pub proj_bias: T,
    pub ln2_gamma: T,
    pub ln2_beta: T,
    pub fc1_weight: T,
    pub fc1_bias: T,
    pub fc2_weight: T,
    pub fc2_bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub patch_weight: T,
    pub patch_bias: T,
    pub class_token: T,
    pub pos_embed: T,
    pub blocks: Vec<BlockParams<T>>,
    pub norm_gamma: T,
    pub norm_beta: T,
}

impl<T> BlockParams<T> {
    fn fields(&self) -> [(&'static str, &T); 12] {
        [
            ("ln1_gamma", &self.ln1_gamma),
            ("ln1_beta", &self.ln1_beta),
            ("qkv_weight", &self.qkv_weight),
            ("qkv_bias", &self.qkv_bias),
            ("proj_weight", &self.proj_weight),
            ("proj_bias", &self.proj_bias),
            ("ln2_gamma", &self.ln2_gamma),
            ("ln2_beta", &self.ln2_beta),
            ("fc1_weight", &self.fc1_weight),
            ("fc1_bias", &self.fc1_bias),
            ("fc2_weight", &self.fc2_weight),
            ("fc2_bias", &self.fc2_bias),
        ]
    }

    fn try_map<U>(&self, f: &mut dyn FnMut(&T) -> Result<U>) -> Result<BlockParams<U>> {
        Ok(BlockParams {
            ln1_gamma: f(&self.ln1_gamma)?,
            ln1_beta: f(&self.ln1_beta)?,
            qkv_weight: f(&self.qkv_weight)?,
            qkv_bias: f(&self.qkv_bias)?,
            proj_weight: f(&self.proj_weight)?,
            proj_bias: f(&self.proj_bias)?,
            ln2_gamma: f(&self.ln2_gamma)?,
            ln2_beta: f(&self.ln2_beta)?,
            fc1_weight: f(&self.fc1_weight)?,
            fc1_bias: f(&self.fc1_bias)?,
            fc2_weight: f(&self.fc2_weight)?,
            fc2_bias: f(&self.fc2_bias)?,
        })
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        for t in [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.qkv_weight,
            &mut self.qkv_bias,
            &mut self.proj_weight,
            &mut self.proj_bias,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.fc1_weight,
            &mut self.fc1_bias,
            &mut self.fc2_weight,
            &mut self.fc2_bias,
        ] {
            f(t);
        }
    }
}

impl<T> ParamTree<T> for EncoderParams<T> {
    type Mapped<U> = EncoderParams<U>;

    fn try_map<U>(&self, f: &mut dyn FnMut(&T) -> Result<U>) -> Result<EncoderParams<U>> {
        let patch_weight = f(&self.patch_weight)?;
        let patch_bias = f(&self.patch_bias)?;
        let class_token = f(&self.class_token)?;
        let pos_embed = f(&self.pos_embed)?;
        let blocks = self
            .blocks
            .iter()
            .map(|b| b.try_map(f))
            .collect::<Result<Vec<_>>>()?;
        Ok(EncoderParams {
            patch_weight,
            patch_bias,
            class_token,
            pos_embed,
            blocks,
            norm_gamma: f(&self.norm_gamma)?,
            norm_beta: f(&self.norm_beta)?,
        })
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        f(&mut self.patch_weight);
        f(&mut self.patch_bias);
        f(&mut self.class_token);
        f(&mut self.pos_embed);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        f(&mut self.norm_gamma);
        f(&mut self.norm_beta);
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((join(prefix, "patch_weight"), &self.patch_weight));
        out.push((join(prefix, "patch_bias"), &self.patch_bias));
        out.push((join(prefix, "class_token"), &self.class_token));
        out.push((join(prefix, "pos_embed"), &self.pos_embed));
        for (i, b) in self.blocks.iter().enumerate() {
            let p = join(prefix, &format!("block{i}"));
            for (name, t) in b.fields() {
                out.push((join(&p, name), t));
            }
        }
        out.push((join(prefix, "norm_gamma"), &self.norm_gamma));
        out.push((join(prefix, "norm_beta"), &self.norm_beta));
    }
}

impl EncoderParams<Tensor> {
    /// Gaussian init scaled by fan-in; small positional and class embeddings.
    pub fn init<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        let hidden = d * cfg.mlp_ratio;
        let fan = |n: usize| (1.0 / n as f64).sqrt();
        let blocks = (0..cfg.num_blocks)
            .map(|_| BlockParams {
                ln1_gamma: Tensor::ones(&[d]),
                ln1_beta: Tensor::zeros(&[d]),
                qkv_weight: Tensor::normal(&[d, 3 * d], fan(d), rng),
                qkv_bias: Tensor::zeros(&[3 * d]),
                proj_weight: Tensor::normal(&[d, d], 0.5 * fan(d), rng),
                proj_bias: Tensor::zeros(&[d]),
                ln2_gamma: Tensor::ones(&[d]),
                ln2_beta: Tensor::zeros(&[d]),
                fc1_weight: Tensor::normal(&[d, hidden], fan(d), rng),
                fc1_bias: Tensor::zeros(&[hidden]),
                fc2_weight: Tensor::normal(&[hidden, d], 0.5 * fan(hidden), rng),
                fc2_bias: Tensor::zeros(&[d]),
            })
            .collect();
        Self {
            patch_weight: Tensor::normal(&[cfg.patch_dim(), d], fan(cfg.patch_dim()), rng),
            patch_bias: Tensor::zeros(&[d]),
            class_token: Tensor::normal(&[1, d], 0.02, rng),
            pos_embed: Tensor::normal(&[cfg.num_tokens(), d], 0.02, rng),
            blocks,
            norm_gamma: Tensor::ones(&[d]),
            norm_beta: Tensor::zeros(&[d]),
        }
    }

    /// Shapes implied by `cfg`, with every tensor zero.
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        let mut p = Self::init(cfg, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0));
        p.visit_mut(&mut |t| *t = Tensor::zeros(t.shape()));
        p
    }
}

/// Last-block attention weights, `[heads, N+1, N+1]`, rows summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub weights: Tensor,
}

impl AttentionMap {
    pub fn new(weights: Tensor) -> Result<Self> {
        let s = weights.shape();
        if s.len() != 3 || s[1] != s[2] {
            return Err(shape_err("attention_map", format!("expected [h, T, T], got {s:?}")));
        }
        Ok(Self { weights })
    }

    pub fn heads(&self) -> usize {
        self.weights.shape()[0]
    }

    /// Largest deviation of any row sum from one.
    pub fn max_row_error(&self) -> f64 {
        let t = self.weights.shape()[2];
        self.weights
            .data()
            .chunks(t)
            .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Flattens non-overlapping patches of a `[3, H, W]` image into rows of a
/// `[N, 3 * P * P]` matrix, patches in row-major grid order and features
/// ordered (channel, row, column).
pub fn patch_matrix(image: &Tensor, cfg: &EncoderConfig) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 || s[1] != cfg.image_size || s[2] != cfg.image_size {
        return Err(shape_err(
            "patchify",
            format!("expected [3, {0}, {0}], got {s:?}", cfg.image_size),
        ));
    }
    let (p, g, size) = (cfg.patch_size, cfg.grid(), cfg.image_size);
    let d = image.data();
    let mut out = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
    for gy in 0..g {
        for gx in 0..g {
            for c in 0..3 {
                for y in 0..p {
                    let row = (c * size + gy * p + y) * size + gx * p;
                    out.extend_from_slice(&d[row..row + p]);
                }
            }
        }
    }
    Tensor::new(vec![cfg.num_patches(), cfg.patch_dim()], out)
}

/// Linear patch embedding, prepended class token and positional embedding.
pub fn patchify(
    tape: &mut Tape,
    image: &Tensor,
    cfg: &EncoderConfig,
    params: &EncoderParams<Var>,
) -> Result<Var> {
    cfg.validate()?;
    let patches = tape.constant(patch_matrix(image, cfg)?)?;
    let emb = tape.matmul(patches, params.patch_weight)?;
    let emb = tape.add_row_bias(emb, params.patch_bias)?;
    let tokens = tape.concat(&[params.class_token, emb], 0)?;
    tape.add(tokens, params.pos_embed)
}

/// Scaled dot-product attention: `softmax(Q K^T / sqrt(d_k)) V`.
/// Returns the output and the weight matrix.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (qs, ks, vs) = (
        tape.value(q).shape().to_vec(),
        tape.value(k).shape().to_vec(),
        tape.value(v).shape().to_vec(),
    );
    if qs.len() != 2 || qs != ks || ks[0] != vs.first().copied().unwrap_or(0) {
        return Err(shape_err(
            "attention",
            format!("q {qs:?}, k {ks:?}, v {vs:?}"),
        ));
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (qs[1] as f64).sqrt())?;
    let weights = tape.softmax(scores, 1)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

/// ASPP settings applied to the last block's attention weights.
pub struct AsppInjection<'a, T> {
    pub params: &'a AsppParams<T>,
    pub rates: Rates,
    pub residual: bool,
}

pub struct EncoderOutput {
    /// Final normalized tokens, `[N+1, D]`.
    pub tokens: Var,
    /// Per-head last-block attention weights, each `[N+1, N+1]`.
    pub attention: Vec<Var>,
}

fn block_forward(
    tape: &mut Tape,
    x: Var,
    cfg: &EncoderConfig,
    p: &BlockParams<Var>,
    inject: Option<&AsppInjection<'_, Var>>,
) -> Result<(Var, Vec<Var>)> {
    let d = cfg.embed_dim;
    let dk = cfg.head_dim();
    let h = tape.layer_norm(x, p.ln1_gamma, p.ln1_beta)?;
    let qkv = tape.matmul(h, p.qkv_weight)?;
    let qkv = tape.add_row_bias(qkv, p.qkv_bias)?;
    let mut heads = Vec::with_capacity(cfg.num_heads);
    let mut maps = Vec::with_capacity(cfg.num_heads);
    for head in 0..cfg.num_heads {
        let q = tape.narrow(qkv, 1, head * dk, dk)?;
        let k = tape.narrow(qkv, 1, d + head * dk, dk)?;
        let v = tape.narrow(qkv, 1, 2 * d + head * dk, dk)?;
        let (out, weights) = match inject {
            None => attention(tape, q, k, v)?,
            Some(inj) => {
                let (_, weights) = attention(tape, q, k, v)?;
                let refined = inject_head(tape, weights, &inj.rates, inj.params, inj.residual)?;
                (tape.matmul(refined, v)?, refined)
            }
        };
        heads.push(out);
        maps.push(weights);
    }
    let attn = tape.concat(&heads, 1)?;
    let attn = tape.matmul(attn, p.proj_weight)?;
    let attn = tape.add_row_bias(attn, p.proj_bias)?;
    let x = tape.add(x, attn)?;

    let h = tape.layer_norm(x, p.ln2_gamma, p.ln2_beta)?;
    let h = tape.matmul(h, p.fc1_weight)?;
    let h = tape.add_row_bias(h, p.fc1_bias)?;
    let h = tape.gelu(h)?;
    let h = tape.matmul(h, p.fc2_weight)?;
    let h = tape.add_row_bias(h, p.fc2_bias)?;
    Ok((tape.add(x, h)?, maps))
}

pub fn encoder_forward_tape(
    tape: &mut Tape,
    image: &Tensor,
    cfg: &EncoderConfig,
    params: &EncoderParams<Var>,
    inject: Option<&AsppInjection<'_, Var>>,
) -> Result<EncoderOutput> {
    if params.blocks.is_empty() {
        return Err(Error::Config("encoder needs at least one block".into()));
    }
    let mut x = patchify(tape, image, cfg, params)?;
    let last = params.blocks.len() - 1;
    let mut attention = Vec::new();
    for (i, block) in params.blocks.iter().enumerate() {
        let inj = if i == last { inject } else { None };
        let (nx, maps) = block_forward(tape, x, cfg, block, inj)?;
        x = nx;
        attention = maps;
    }
    let tokens = tape.layer_norm(x, params.norm_gamma, params.norm_beta)?;
    Ok(EncoderOutput { tokens, attention })
}

/// Runs the encoder without gradients. `inject` enables ASPP refinement of
/// the last block with the given rates.
pub fn encoder_forward(
    image: &Tensor,
    cfg: &EncoderConfig,
    params: &EncoderParams<Tensor>,
    inject: Option<AsppInjection<'_, Tensor>>,
) -> Result<(Tensor, AttentionMap)> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params, false)?;
    let bound_aspp = match &inject {
        Some(inj) => {
            inj.params.validate()?;
            Some(bind(&mut tape, inj.params, false)?)
        }
        None => None,
    };
    let inj = match (&inject, &bound_aspp) {
        (Some(i), Some(p)) => Some(AsppInjection {
            params: p,
            rates: i.rates,
            residual: i.residual,
        }),
        _ => None,
    };
    let out = encoder_forward_tape(&mut tape, image, cfg, &bound, inj.as_ref())?;
    let t = cfg.num_tokens();
    let mut weights = Vec::with_capacity(cfg.num_heads * t * t);
    for &w in &out.attention {
        weights.extend_from_slice(tape.value(w).data());
    }
    let map = AttentionMap::new(Tensor::new(vec![cfg.num_heads, t, t], weights)?)?;
    Ok((tape.value(out.tokens).clone(), map))
}
