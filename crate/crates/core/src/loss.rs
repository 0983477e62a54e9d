//! Training losses over per-pixel class distributions: cross-entropy against
//! pseudo labels, soft Dice, a top-2 margin uncertainty term and a
//! class-usage regularizer, plus their weighted total.

use serde::{Deserialize, Serialize};

use crate::decoder::PseudoLabelMask;
use crate::error::{shape_err, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LOG_EPS: f64 = 1e-12;
pub const DICE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub seg: f64,
    pub ce: f64,
    pub un: f64,
    pub cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { seg: 1.0, ce: 1.0, un: 0.1, cls: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("seg", self.seg), ("ce", self.ce), ("un", self.un), ("cls", self.cls)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// The four loss terms, as tape vars or plain values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts<T> {
    pub seg: T,
    pub ce: T,
    pub un: T,
    pub cls: T,
}

fn dims(tape: &Tape, x: Var, op: &'static str) -> Result<(usize, usize)> {
    let s = tape.value(x).shape();
    if s.len() != 3 {
        return Err(shape_err(op, format!("expected [C, H, W], got {s:?}")));
    }
    Ok((s[0], s[1] * s[2]))
}

fn pseudo_const(tape: &mut Tape, student: Var, pseudo: &PseudoLabelMask, op: &'static str) -> Result<Var> {
    if tape.value(student).shape() != pseudo.probs().shape() {
        return Err(shape_err(
            op,
            format!("student {:?} vs pseudo {:?}", tape.value(student).shape(), pseudo.probs().shape()),
        ));
    }
    tape.constant(pseudo.probs().clone())
}

/// Mean over pixels of `-sum_c p_c log(s_c + 1e-12)`.
pub fn ce_loss_tape(tape: &mut Tape, student: Var, pseudo: &PseudoLabelMask) -> Result<Var> {
    let (_, hw) = dims(tape, student, "ce_loss")?;
    let p = pseudo_const(tape, student, pseudo, "ce_loss")?;
    let shifted = tape.add_scalar(student, LOG_EPS)?;
    let logs = tape.log(shifted)?;
    let prod = tape.mul(p, logs)?;
    let total = tape.sum(prod)?;
    tape.scale(total, -1.0 / hw as f64)
}

/// Soft Dice: `1 - mean_c (2 sum s p + eps) / (sum s^2 + sum p^2 + eps)`.
pub fn seg_loss_tape(tape: &mut Tape, student: Var, pseudo: &PseudoLabelMask) -> Result<Var> {
    let (c, hw) = dims(tape, student, "seg_loss")?;
    let p = pseudo_const(tape, student, pseudo, "seg_loss")?;
    let s = tape.reshape(student, &[c, hw])?;
    let p = tape.reshape(p, &[c, hw])?;
    let sp = tape.mul(s, p)?;
    let inter = tape.sum_axis(sp, 1)?;
    let numer = tape.scale(inter, 2.0)?;
    let numer = tape.add_scalar(numer, DICE_EPS)?;
    let ss = tape.mul(s, s)?;
    let ss = tape.sum_axis(ss, 1)?;
    let pp = tape.mul(p, p)?;
    let pp = tape.sum_axis(pp, 1)?;
    let denom = tape.add(ss, pp)?;
    let denom = tape.add_scalar(denom, DICE_EPS)?;
    let ratio = tape.div(numer, denom)?;
    let mean = tape.mean(ratio)?;
    let neg = tape.scale(mean, -1.0)?;
    tape.add_scalar(neg, 1.0)
}

/// Top-two class indices per pixel; ties go to the lower index.
fn top2(probs: &Tensor) -> Vec<(usize, usize)> {
    let (c, hw) = (probs.shape()[0], probs.shape()[1] * probs.shape()[2]);
    let d = probs.data();
    (0..hw)
        .map(|px| {
            let mut order: Vec<usize> = (0..c).collect();
            order.sort_by(|&a, &b| d[b * hw + px].total_cmp(&d[a * hw + px]).then(a.cmp(&b)));
            (order[0], order[1])
        })
        .collect()
}

/// Mean over pixels of `-(p(1) - p(2))` on `softmax(logits)` over classes.
pub fn uncertainty_loss_tape(tape: &mut Tape, logits: Var) -> Result<Var> {
    let (c, hw) = dims(tape, logits, "uncertainty_loss")?;
    if c < 2 {
        return Err(Error::InvalidArgument(format!("uncertainty loss needs at least 2 classes, got {c}")));
    }
    let probs = tape.softmax(logits, 0)?;
    let picks = top2(tape.value(probs));
    let first: Vec<usize> = picks.iter().enumerate().map(|(px, &(a, _))| a * hw + px).collect();
    let second: Vec<usize> = picks.iter().enumerate().map(|(px, &(_, b))| b * hw + px).collect();
    let p1 = tape.gather(probs, &first)?;
    let p2 = tape.gather(probs, &second)?;
    let gap = tape.sub(p2, p1)?;
    tape.mean(gap)
}

/// `KL(q || uniform)` of the mean class usage `q`.
pub fn cls_loss_tape(tape: &mut Tape, student: Var) -> Result<Var> {
    let (c, hw) = dims(tape, student, "cls_loss")?;
    let flat = tape.reshape(student, &[c, hw])?;
    let usage = tape.sum_axis(flat, 1)?;
    let q = tape.scale(usage, 1.0 / hw as f64)?;
    let qc = tape.scale(q, c as f64)?;
    let qc = tape.add_scalar(qc, LOG_EPS)?;
    let logs = tape.log(qc)?;
    let prod = tape.mul(q, logs)?;
    tape.sum(prod)
}

pub fn total_loss_tape(tape: &mut Tape, parts: &LossParts<Var>, w: &LossWeights) -> Result<Var> {
    w.validate()?;
    for v in [parts.seg, parts.ce, parts.un, parts.cls] {
        let t = tape.value(v);
        if !t.is_scalar() {
            return Err(Error::NotScalar(t.shape().to_vec()));
        }
    }
    let a = tape.scale(parts.seg, w.seg)?;
    let b = tape.scale(parts.ce, w.ce)?;
    let c = tape.scale(parts.un, w.un)?;
    let d = tape.scale(parts.cls, w.cls)?;
    let ab = tape.add(a, b)?;
    let cd = tape.add(c, d)?;
    tape.add(ab, cd)
}

fn eval1(x: &Tensor, f: impl FnOnce(&mut Tape, Var) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone())?;
    let out = f(&mut tape, v)?;
    Ok(tape.value(out).item())
}

pub fn ce_loss(student: &Tensor, pseudo: &PseudoLabelMask) -> Result<f64> {
    eval1(student, |t, s| ce_loss_tape(t, s, pseudo))
}

pub fn seg_loss(student: &Tensor, pseudo: &PseudoLabelMask) -> Result<f64> {
    eval1(student, |t, s| seg_loss_tape(t, s, pseudo))
}

pub fn uncertainty_loss(logits: &Tensor) -> Result<f64> {
    eval1(logits, uncertainty_loss_tape)
}

pub fn cls_loss(student: &Tensor) -> Result<f64> {
    eval1(student, cls_loss_tape)
}

pub fn total_loss(parts: &LossParts<f64>, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    for (op, v) in [
        ("total_loss(seg)", parts.seg),
        ("total_loss(ce)", parts.ce),
        ("total_loss(un)", parts.un),
        ("total_loss(cls)", parts.cls),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite { op });
        }
    }
    Ok(w.seg * parts.seg + w.ce * parts.ce + w.un * parts.un + w.cls * parts.cls)
}
