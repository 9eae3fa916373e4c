//! Overlap metrics on thresholded predictions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel counts behind Dice and IoU.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overlap {
    pub intersection: u64,
    pub predicted: u64,
    pub target: u64,
}

impl Overlap {
    pub fn from_masks(pred: &[bool], target: &[bool]) -> Self {
        let mut o = Overlap::default();
        for (&p, &t) in pred.iter().zip(target) {
            o.add(p, t);
        }
        o
    }

    pub fn add(&mut self, pred: bool, target: bool) {
        self.predicted += pred as u64;
        self.target += target as u64;
        self.intersection += (pred && target) as u64;
    }

    pub fn merge(&mut self, other: &Overlap) {
        self.intersection += other.intersection;
        self.predicted += other.predicted;
        self.target += other.target;
    }

    pub fn dice(&self) -> f64 {
        let denom = self.predicted + self.target;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.intersection as f64 / denom as f64
        }
    }

    pub fn iou(&self) -> f64 {
        let union = self.predicted + self.target - self.intersection;
        if union == 0 {
            1.0
        } else {
            self.intersection as f64 / union as f64
        }
    }
}

pub fn dice_metric(pred: &[bool], target: &[bool]) -> f64 {
    Overlap::from_masks(pred, target).dice()
}

pub fn miou_metric(pred: &[bool], target: &[bool]) -> f64 {
    Overlap::from_masks(pred, target).iou()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Sum counts over every pixel of the split, then take ratios.
    #[default]
    Global,
    /// Ratio per image, then average over images.
    PerSlice,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationScore {
    pub dice: f64,
    pub miou: f64,
}

/// Per-class overlaps of one image. Binary logits (`classes == 1`) are
/// thresholded at 0 (sigmoid 0.5); multi-class ones use argmax, and only
/// classes `1..K` are scored.
fn image_overlaps(logits: &[f64], target: &[f64], classes: usize, pixels: usize) -> Result<Vec<Overlap>> {
    if classes == 1 {
        let mut o = Overlap::default();
        for i in 0..pixels {
            o.add(logits[i] >= 0.0, target[i] >= 0.5);
        }
        return Ok(vec![o]);
    }
    let mut out = vec![Overlap::default(); classes - 1];
    for i in 0..pixels {
        let mut best = 0;
        for c in 1..classes {
            if logits[c * pixels + i] > logits[best * pixels + i] {
                best = c;
            }
        }
        let label = target[i];
        if label < 0.0 || label as usize >= classes {
            return Err(Error::InvalidClass {
                class: label as i64,
                classes,
            });
        }
        for c in 1..classes {
            out[c - 1].add(best == c, label as usize == c);
        }
    }
    Ok(out)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Dice and mIoU of `[B, K, P]` logits against `[B, P]` targets.
pub fn score_logits(
    logits: &[f64],
    target: &[f64],
    classes: usize,
    pixels: usize,
    aggregation: Aggregation,
) -> Result<SegmentationScore> {
    if pixels == 0 || classes == 0 || !target.len().is_multiple_of(pixels) {
        return Err(Error::shape(format!("[B, {pixels}]"), target.len()));
    }
    let batch = target.len() / pixels;
    if logits.len() != batch * classes * pixels {
        return Err(Error::shape(batch * classes * pixels, logits.len()));
    }
    let per_image: Vec<Vec<Overlap>> = (0..batch)
        .map(|b| {
            image_overlaps(
                &logits[b * classes * pixels..(b + 1) * classes * pixels],
                &target[b * pixels..(b + 1) * pixels],
                classes,
                pixels,
            )
        })
        .collect::<Result<_>>()?;
    let scored = per_image.first().map_or(0, Vec::len);
    Ok(match aggregation {
        Aggregation::Global => {
            let mut totals = vec![Overlap::default(); scored];
            for img in &per_image {
                for (t, o) in totals.iter_mut().zip(img) {
                    t.merge(o);
                }
            }
            SegmentationScore {
                dice: mean(totals.iter().map(Overlap::dice)),
                miou: mean(totals.iter().map(Overlap::iou)),
            }
        }
        Aggregation::PerSlice => SegmentationScore {
            dice: mean(per_image.iter().map(|img| mean(img.iter().map(Overlap::dice)))),
            miou: mean(per_image.iter().map(|img| mean(img.iter().map(Overlap::iou)))),
        },
    })
}
