//! Segmentation losses and their gradients with respect to logits.
//!
//! Logits are laid out `[B, K, P]` (P pixels per image), targets `[B, P]`.
//! Binary targets are 0/1 masks; multi-class targets are class indices.
//! Dice terms are computed over the batch-flattened pixels.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::sigmoid;

pub const DICE_SMOOTH: f64 = 1e-5;
pub const PROB_CLAMP: f64 = 1e-7;
pub const CE_WEIGHT: f64 = 0.4;
pub const MDICE_WEIGHT: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    BceDice,
    CeMdice,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::BceDice => "bce_dice",
            LossKind::CeMdice => "ce_mdice",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bce_dice" => Ok(LossKind::BceDice),
            "ce_mdice" => Ok(LossKind::CeMdice),
            other => Err(Error::Parse(format!("unknown loss kind {other:?}"))),
        }
    }
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(a.len(), b.len()));
    }
    Ok(())
}

/// Soft Dice loss `1 - (2 sum(pt) + s) / (sum(p) + sum(t) + s)`.
pub fn dice_loss(probs: &[f64], target: &[f64], smooth: f64) -> Result<f64> {
    same_len(probs, target)?;
    let (mut inter, mut total) = (0.0, 0.0);
    for (p, t) in probs.iter().zip(target) {
        inter += p * t;
        total += p + t;
    }
    Ok(1.0 - (2.0 * inter + smooth) / (total + smooth))
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce(probs: &[f64], target: &[f64]) -> Result<f64> {
    same_len(probs, target)?;
    if probs.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = probs
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(sum / probs.len() as f64)
}

pub fn bce_dice_loss(probs: &[f64], target: &[f64]) -> Result<f64> {
    Ok(bce(probs, target)? + dice_loss(probs, target, DICE_SMOOTH)?)
}

/// Cross-entropy and mean foreground Dice, reported separately.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CeMdiceParts {
    pub ce: f64,
    pub mdice: f64,
}

impl CeMdiceParts {
    pub fn total(&self) -> f64 {
        CE_WEIGHT * self.ce + MDICE_WEIGHT * self.mdice
    }
}

fn class_index(t: f64, classes: usize) -> Result<usize> {
    if t < 0.0 || t.fract() != 0.0 || t as usize >= classes {
        return Err(Error::InvalidClass {
            class: t as i64,
            classes,
        });
    }
    Ok(t as usize)
}

/// Per-pixel softmax of `[B, K, P]` logits, same layout.
pub fn softmax_channels(logits: &[f64], classes: usize, pixels: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    let per = classes * pixels;
    for b in 0..logits.len() / per.max(1) {
        let base = b * per;
        for i in 0..pixels {
            let mut max = f64::NEG_INFINITY;
            for c in 0..classes {
                max = max.max(logits[base + c * pixels + i]);
            }
            let mut z = 0.0;
            for c in 0..classes {
                let e = (logits[base + c * pixels + i] - max).exp();
                out[base + c * pixels + i] = e;
                z += e;
            }
            for c in 0..classes {
                out[base + c * pixels + i] /= z;
            }
        }
    }
    out
}

fn check_layout(logits: &[f64], target: &[f64], classes: usize, pixels: usize) -> Result<usize> {
    if classes == 0 || pixels == 0 || !target.len().is_multiple_of(pixels) {
        return Err(Error::shape(format!("[B, {pixels}]"), target.len()));
    }
    let batch = target.len() / pixels;
    if logits.len() != batch * classes * pixels {
        return Err(Error::shape(batch * classes * pixels, logits.len()));
    }
    Ok(batch)
}

pub fn ce_mdice_parts(logits: &[f64], target: &[f64], classes: usize, pixels: usize) -> Result<CeMdiceParts> {
    ce_mdice_with_grad(logits, target, classes, pixels).map(|(parts, _)| parts)
}

pub fn ce_mdice_loss(logits: &[f64], target: &[f64], classes: usize, pixels: usize) -> Result<f64> {
    ce_mdice_parts(logits, target, classes, pixels).map(|p| p.total())
}

/// Loss parts and d(total)/d(logits).
pub fn ce_mdice_with_grad(
    logits: &[f64],
    target: &[f64],
    classes: usize,
    pixels: usize,
) -> Result<(CeMdiceParts, Vec<f64>)> {
    let batch = check_layout(logits, target, classes, pixels)?;
    let labels: Vec<usize> = target.iter().map(|&t| class_index(t, classes)).collect::<Result<_>>()?;
    let q = softmax_channels(logits, classes, pixels);
    let m = (batch * pixels) as f64;
    let at = |b: usize, c: usize, i: usize| (b * classes + c) * pixels + i;

    let mut ce = 0.0;
    let mut inter = vec![0.0; classes];
    let mut total = vec![0.0; classes];
    for b in 0..batch {
        for i in 0..pixels {
            let label = labels[b * pixels + i];
            // log-softmax directly from logits avoids log(0)
            let mut max = f64::NEG_INFINITY;
            for c in 0..classes {
                max = max.max(logits[at(b, c, i)]);
            }
            let lse = max
                + (0..classes)
                    .map(|c| (logits[at(b, c, i)] - max).exp())
                    .sum::<f64>()
                    .ln();
            ce -= logits[at(b, label, i)] - lse;
            for c in 1..classes {
                let p = q[at(b, c, i)];
                total[c] += p;
                if label == c {
                    inter[c] += p;
                    total[c] += 1.0;
                }
            }
        }
    }
    ce /= m;
    let fg = (classes - 1).max(1) as f64;
    let mut dice_sum = 0.0;
    for c in 1..classes {
        dice_sum += (2.0 * inter[c] + DICE_SMOOTH) / (total[c] + DICE_SMOOTH);
    }
    let mdice = 1.0 - dice_sum / fg;
    let parts = CeMdiceParts { ce, mdice };

    let mut grad = vec![0.0; logits.len()];
    let mut gq = vec![0.0; classes];
    for b in 0..batch {
        for i in 0..pixels {
            let label = labels[b * pixels + i];
            let mut dot = 0.0;
            for c in 0..classes {
                gq[c] = 0.0;
                if c > 0 {
                    let den = total[c] + DICE_SMOOTH;
                    let num = 2.0 * inter[c] + DICE_SMOOTH;
                    let t = if label == c { 1.0 } else { 0.0 };
                    gq[c] = -MDICE_WEIGHT / fg * (2.0 * t * den - num) / (den * den);
                }
                dot += q[at(b, c, i)] * gq[c];
            }
            for c in 0..classes {
                let p = q[at(b, c, i)];
                let onehot = if label == c { 1.0 } else { 0.0 };
                grad[at(b, c, i)] = CE_WEIGHT * (p - onehot) / m + p * (gq[c] - dot);
            }
        }
    }
    Ok((parts, grad))
}

/// BCE + Dice on sigmoid(logits) and its gradient with respect to the logits.
pub fn bce_dice_with_grad(logits: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    same_len(logits, target)?;
    let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let loss = bce_dice_loss(&probs, target)?;
    let m = probs.len().max(1) as f64;
    let (mut inter, mut total) = (0.0, 0.0);
    for (p, t) in probs.iter().zip(target) {
        inter += p * t;
        total += p + t;
    }
    let den = total + DICE_SMOOTH;
    let num = 2.0 * inter + DICE_SMOOTH;
    let grad = probs
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let g_bce = if p > PROB_CLAMP && p < 1.0 - PROB_CLAMP {
                -(t / p - (1.0 - t) / (1.0 - p)) / m
            } else {
                0.0
            };
            let g_dice = -(2.0 * t * den - num) / (den * den);
            (g_bce + g_dice) * p * (1.0 - p)
        })
        .collect();
    Ok((loss, grad))
}

/// Loss value and logit gradient for either loss family.
pub fn loss_with_grad(
    kind: LossKind,
    logits: &[f64],
    target: &[f64],
    classes: usize,
    pixels: usize,
) -> Result<(f64, Vec<f64>)> {
    match kind {
        LossKind::BceDice => {
            if classes != 1 {
                return Err(Error::InvalidConfig(format!(
                    "bce_dice needs a single output channel, got {classes}"
                )));
            }
            check_layout(logits, target, 1, pixels)?;
            bce_dice_with_grad(logits, target)
        }
        LossKind::CeMdice => ce_mdice_with_grad(logits, target, classes, pixels).map(|(p, g)| (p.total(), g)),
    }
}
