//! Preprocessing, case-level splitting, the synthetic phantom and the
//! on-disk dataset layout.
//!
//! ```text
//! <root>/split.csv                 case_id,split
//! <root>/cases/<id>/image.mstn     "image" [C_in, S, S]
//! <root>/cases/<id>/mask.mstn      "mask"  [S, S]
//! ```

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{rng, standard_normal, substream};
use crate::tensor::Tensor;
use crate::tensor_io::{read_tensors, write_tensors};

/// A multi-slice, multi-modality scan `[D, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub case_id: String,
    pub slices: Tensor,
}

/// Rescales the nonzero voxels to `[0, 1]` using their own min and max;
/// zero voxels stay zero.
pub fn minmax_normalize_values(values: &mut [f64]) -> Result<()> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in values.iter() {
        if !v.is_finite() {
            return Err(Error::NonFinite("intensity".into()));
        }
        if v != 0.0 {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if lo > hi {
        return Err(Error::EmptyVolume);
    }
    let range = hi - lo;
    for v in values.iter_mut() {
        if *v != 0.0 {
            *v = if range > 0.0 { (*v - lo) / range } else { 0.0 };
        }
    }
    Ok(())
}

pub fn minmax_normalize(v: &Volume) -> Result<Volume> {
    let mut out = v.clone();
    minmax_normalize_values(out.slices.data_mut())?;
    Ok(out)
}

/// Corner-aligned source coordinate and weight for each output index.
fn corner_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|o| {
            let src = if n_out > 1 {
                o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
            } else {
                0.0
            };
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Separable bilinear resize of a `[C, H, W]` slice with corner-aligned sampling.
pub fn resize_bilinear(slice: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = slice.shape();
    if s.len() != 3 || s[1] == 0 || s[2] == 0 {
        return Err(Error::shape("[C, H>=1, W>=1]", format!("{s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if (h, w) == (out_h, out_w) {
        return Ok(slice.clone());
    }
    let ry = corner_taps(h, out_h);
    let rx = corner_taps(w, out_w);
    let x = slice.data();
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for (r, &(y0, y1, wy)) in ry.iter().enumerate() {
            for (col, &(x0, x1, wx)) in rx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
                let bottom = src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
                out[(ch * out_h + r) * out_w + col] = top * (1.0 - wy) + bottom * wy;
            }
        }
    }
    Tensor::from_vec(&[c, out_h, out_w], out)
}

/// Nearest-neighbor resize of an `[H, W]` mask, re-binarized at 0.5.
pub fn resize_mask_nearest(mask: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = mask.shape();
    if s.len() != 2 || s[0] == 0 || s[1] == 0 {
        return Err(Error::shape("[H>=1, W>=1]", format!("{s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    let pick = |o: usize, n_in: usize, n_out: usize| {
        if n_out > 1 {
            ((o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64).round() as usize).min(n_in - 1)
        } else {
            0
        }
    };
    let mut out = vec![0.0; out_h * out_w];
    for r in 0..out_h {
        let sr = pick(r, h, out_h);
        for c in 0..out_w {
            let v = mask.data()[sr * w + pick(c, w, out_w)];
            out[r * out_w + c] = if v >= 0.5 { 1.0 } else { 0.0 };
        }
    }
    Tensor::from_vec(&[out_h, out_w], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Parse(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitAssignment {
    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("case_id,split\n");
        for split in [Split::Train, Split::Val, Split::Test] {
            for id in self.get(split) {
                out.push_str(&format!("{id},{split}\n"));
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut out = SplitAssignment::default();
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("case_id,split") {
            return Err(Error::Parse("split.csv header must be case_id,split".into()));
        }
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let (id, split) = line
                .split_once(',')
                .ok_or_else(|| Error::Parse(format!("bad split row {line:?}")))?;
            match split.trim().parse()? {
                Split::Train => out.train.push(id.to_string()),
                Split::Val => out.val.push(id.to_string()),
                Split::Test => out.test.push(id.to_string()),
            }
        }
        Ok(out)
    }
}

pub const MIN_SPLIT_CASES: usize = 3;

/// Seeded 70/15/15 case-level split. Validation and test each get
/// `round(0.15 n)` cases (at least one); train takes the rest.
pub fn subject_split(case_ids: &[String], seed: u64) -> Result<SplitAssignment> {
    let n = case_ids.len();
    if n < MIN_SPLIT_CASES {
        return Err(Error::TooFewCases {
            needed: MIN_SPLIT_CASES,
            got: n,
        });
    }
    let mut ids = case_ids.to_vec();
    ids.shuffle(&mut rng(seed));
    let held = ((n as f64 * 0.15).round() as usize).max(1);
    let test = ids.split_off(n - held);
    let val = ids.split_off(n - 2 * held);
    Ok(SplitAssignment { train: ids, val, test })
}

/// Synthetic brain-like slices with oriented texture and elliptical lesions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub n_cases: usize,
    pub size: usize,
    pub lesions_min: usize,
    pub lesions_max: usize,
    /// Upper bound on lesion eccentricity, in `[0, 1)`.
    pub eccentricity: f64,
    /// Direction (radians, `[0, pi)`) along which the texture oscillates.
    /// Stripes, and the lesions' major axes, run perpendicular to it.
    pub theta: f64,
    /// Texture amplitude relative to the tissue baseline, in `[0, 1]`.
    pub anisotropy: f64,
    /// Lesion intensity offset over the surrounding tissue.
    pub contrast: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            n_cases: 60,
            size: 32,
            lesions_min: 1,
            lesions_max: 3,
            eccentricity: 0.8,
            theta: PI / 6.0,
            anisotropy: 0.5,
            contrast: 0.3,
            noise_sigma: 0.03,
            seed: 0,
        }
    }
}

const TISSUE_LEVEL: f64 = 0.35;
const TEXTURE_SCALE: f64 = 0.15;
const STRIPE_PERIOD: f64 = 6.0;

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("phantom: {m}")));
        if self.size < 8 {
            return bad("size must be at least 8");
        }
        if self.lesions_min == 0 || self.lesions_min > self.lesions_max {
            return bad("need 1 <= lesions_min <= lesions_max");
        }
        if !(0.0..1.0).contains(&self.eccentricity) {
            return bad("eccentricity must be in [0, 1)");
        }
        if !(0.0..PI).contains(&self.theta) {
            return bad("theta must be in [0, pi)");
        }
        if !(0.0..=1.0).contains(&self.anisotropy) {
            return bad("anisotropy must be in [0, 1]");
        }
        if !(self.contrast > 0.0 && self.contrast <= 0.5) {
            return bad("contrast must be in (0, 0.5]");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and nonnegative");
        }
        Ok(())
    }

    pub fn brain_radius(&self) -> f64 {
        0.45 * self.size as f64
    }
}

/// One image with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[C_in, S, S]`
    pub image: Tensor,
    /// `[S, S]`; 0/1 for binary tasks, class indices otherwise.
    pub mask: Tensor,
}

pub fn case_id(index: usize) -> String {
    format!("case{index:04}")
}

/// Noise-free oscillating tissue intensity at pixel center `(r, c)`.
pub fn texture_value(spec: &PhantomSpec, r: f64, c: f64, phase: f64) -> f64 {
    let along = c * spec.theta.cos() + r * spec.theta.sin();
    TISSUE_LEVEL + spec.anisotropy * TEXTURE_SCALE * (2.0 * PI * along / STRIPE_PERIOD + phase).sin()
}

struct Lesion {
    row: f64,
    col: f64,
    major: f64,
    minor: f64,
    angle: f64,
}

impl Lesion {
    /// Normalized squared elliptical radius.
    fn rho2(&self, r: f64, c: f64) -> f64 {
        let (dy, dx) = (r - self.row, c - self.col);
        let (s, co) = self.angle.sin_cos();
        let u = dx * co + dy * s;
        let v = -dx * s + dy * co;
        (u / self.major).powi(2) + (v / self.minor).powi(2)
    }
}

/// Generates case `index` alone; identical to that case of a full run.
pub fn generate_case(spec: &PhantomSpec, index: usize) -> Result<Sample> {
    spec.validate()?;
    let n = spec.size;
    let mut r = substream(spec.seed, index as u64);
    let phase = r.random_range(0.0..2.0 * PI);
    let center = (n as f64 - 1.0) / 2.0;
    let radius = spec.brain_radius();

    let count = r.random_range(spec.lesions_min..=spec.lesions_max);
    let lesions: Vec<Lesion> = (0..count)
        .map(|_| {
            let major = r.random_range(0.12..0.22) * n as f64;
            let e = r.random_range(0.0..=spec.eccentricity);
            let minor = (major * (1.0 - e * e).sqrt()).max(1.0);
            let jitter = r.random_range(-PI / 12.0..PI / 12.0);
            let reach = (radius - major - 1.0).max(0.0);
            let dist = reach * r.random_range(0.0f64..1.0).sqrt();
            let dir = r.random_range(0.0..2.0 * PI);
            Lesion {
                row: (center + dist * dir.sin()).round(),
                col: (center + dist * dir.cos()).round(),
                major,
                minor,
                angle: spec.theta + PI / 2.0 + jitter,
            }
        })
        .collect();

    let raw_noise: Vec<f64> = (0..n * n).map(|_| standard_normal(&mut r)).collect();
    // smooth along the stripes so the noise shares the texture orientation
    let (sr, sc) = (spec.theta.cos(), -spec.theta.sin());
    let noise_at = |row: usize, col: usize| -> f64 {
        let mut acc = 0.0;
        for k in -2i32..=2 {
            let rr = (row as f64 + k as f64 * sr).round().clamp(0.0, (n - 1) as f64) as usize;
            let cc = (col as f64 + k as f64 * sc).round().clamp(0.0, (n - 1) as f64) as usize;
            acc += raw_noise[rr * n + cc];
        }
        acc / 5f64.sqrt()
    };

    let mut image = vec![0.0; n * n];
    let mut mask = vec![0.0; n * n];
    for row in 0..n {
        for col in 0..n {
            let (y, x) = (row as f64, col as f64);
            if (y - center).hypot(x - center) > radius {
                continue;
            }
            let mut v = texture_value(spec, y, x, phase) + spec.noise_sigma * noise_at(row, col);
            let bump = lesions
                .iter()
                .map(|l| l.rho2(y, x))
                .filter(|&q| q <= 1.0)
                .map(|q| 1.0 - q)
                .fold(None, |m: Option<f64>, b| Some(m.map_or(b, |m| m.max(b))));
            if let Some(b) = bump {
                v += spec.contrast * (1.0 + 0.2 * b);
                mask[row * n + col] = 1.0;
            }
            image[row * n + col] = v.max(1e-3);
        }
    }
    minmax_normalize_values(&mut image)?;
    Ok(Sample {
        id: case_id(index),
        image: Tensor::from_vec(&[1, n, n], image)?,
        mask: Tensor::from_vec(&[n, n], mask)?,
    })
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Vec<Sample>> {
    use rayon::prelude::*;
    (0..spec.n_cases)
        .into_par_iter()
        .map(|i| generate_case(spec, i))
        .collect()
}

/// Resizes a sample to `size x size`: bilinear image, nearest-neighbor mask.
pub fn resize_sample(s: &Sample, size: usize) -> Result<Sample> {
    Ok(Sample {
        id: s.id.clone(),
        image: resize_bilinear(&s.image, size, size)?,
        mask: resize_mask_nearest(&s.mask, size, size)?,
    })
}

pub fn write_dataset(root: &Path, samples: &[Sample], split: &SplitAssignment) -> Result<()> {
    for s in samples {
        let dir = root.join("cases").join(&s.id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_tensors(&dir.join("image.mstn"), &[("image".into(), s.image.clone())])?;
        write_tensors(&dir.join("mask.mstn"), &[("mask".into(), s.mask.clone())])?;
    }
    let path = root.join("split.csv");
    std::fs::write(&path, split.to_csv()).map_err(|e| Error::io(&path, e))
}

fn read_single(path: &Path, name: &str) -> Result<Tensor> {
    read_tensors(path)?
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Parse(format!("{}: no tensor named {name:?}", path.display())))
}

/// Dataset loaded from disk, grouped by split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn from_samples(samples: Vec<Sample>, split: &SplitAssignment) -> Result<Self> {
        let mut by_id: std::collections::HashMap<String, Sample> =
            samples.into_iter().map(|s| (s.id.clone(), s)).collect();
        let mut take = |ids: &[String]| -> Result<Vec<Sample>> {
            ids.iter()
                .map(|id| {
                    by_id
                        .remove(id)
                        .ok_or_else(|| Error::Parse(format!("case {id} missing or listed twice")))
                })
                .collect()
        };
        Ok(Dataset {
            train: take(&split.train)?,
            val: take(&split.val)?,
            test: take(&split.test)?,
        })
    }
}

pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let path = root.join("split.csv");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let split = SplitAssignment::from_csv(&text)?;
    let load = |ids: &[String]| -> Result<Vec<Sample>> {
        ids.iter()
            .map(|id| {
                let dir = root.join("cases").join(id);
                Ok(Sample {
                    id: id.clone(),
                    image: read_single(&dir.join("image.mstn"), "image")?,
                    mask: read_single(&dir.join("mask.mstn"), "mask")?,
                })
            })
            .collect()
    };
    Ok(Dataset {
        train: load(&split.train)?,
        val: load(&split.val)?,
        test: load(&split.test)?,
    })
}
