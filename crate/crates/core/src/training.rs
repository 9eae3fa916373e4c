//! Gradient computation over a batch, evaluation, checkpoints and the
//! epoch loop with best-validation-loss selection.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::init::substream;
use crate::losses::{loss_with_grad, LossKind};
use crate::metrics::{score_logits, Aggregation, SegmentationScore};
use crate::optim::{adamw_step, cosine_lr, AdamWConfig, AdamWState};
use crate::params::Parameterized;
use crate::segnet::{backward_sample, build_model, forward_sample, ModelConfig, ModelParams};
use crate::tensor::Tensor;
use crate::tensor_io::{read_tensors, write_tensors};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss_kind: LossKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-3,
            lr_min: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-2,
            batch_size: 8,
            epochs: 30,
            loss_kind: LossKind::BceDice,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_min.partial_cmp(&self.lr0) != Some(std::cmp::Ordering::Less) {
            return Err(Error::InvalidConfig("lr_min must be below lr0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dice: f64,
    pub val_miou: f64,
}

pub fn curve_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,val_dice,val_miou\n");
    for r in records {
        out.push_str(&format!(
            "{},{:.8},{:.8},{:.6},{:.6}\n",
            r.epoch, r.train_loss, r.val_loss, r.val_dice, r.val_miou
        ));
    }
    out
}

fn check_sample(cfg: &ModelConfig, s: &Sample) -> Result<()> {
    let n = cfg.img_size;
    if s.image.shape() != [cfg.in_channels, n, n] {
        return Err(Error::shape(
            format!("image [{}, {n}, {n}]", cfg.in_channels),
            format!("{} {:?}", s.id, s.image.shape()),
        ));
    }
    if s.mask.shape() != [n, n] {
        return Err(Error::shape(
            format!("mask [{n}, {n}]"),
            format!("{} {:?}", s.id, s.mask.shape()),
        ));
    }
    Ok(())
}

/// Logits for every sample, concatenated as `[B, K, S, S]`.
pub fn predict(m: &ModelParams, samples: &[&Sample]) -> Result<Vec<f64>> {
    let out: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|s| {
            check_sample(&m.config, s)?;
            forward_sample(m, s.image.data()).map(|(y, _)| y)
        })
        .collect::<Result<_>>()?;
    Ok(out.concat())
}

fn targets(samples: &[&Sample]) -> Vec<f64> {
    samples.iter().flat_map(|s| s.mask.data().iter().copied()).collect()
}

/// Batch loss and its exact gradient with respect to every parameter.
/// Per-sample gradients are summed in batch order, so the result does not
/// depend on thread scheduling.
pub fn loss_and_grad(m: &ModelParams, batch: &[&Sample], kind: LossKind) -> Result<(f64, ModelParams)> {
    let cfg = &m.config;
    let pixels = cfg.img_size * cfg.img_size;
    let k = cfg.out_classes;
    let runs: Vec<_> = batch
        .par_iter()
        .map(|s| {
            check_sample(cfg, s)?;
            forward_sample(m, s.image.data())
        })
        .collect::<Result<_>>()?;
    let logits: Vec<f64> = runs.iter().flat_map(|(y, _)| y.iter().copied()).collect();
    let (loss, g_logits) = loss_with_grad(kind, &logits, &targets(batch), k, pixels)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss {loss}")));
    }
    let per = k * pixels;
    let grads: Vec<ModelParams> = runs
        .par_iter()
        .enumerate()
        .map(|(b, (_, cache))| {
            let mut g = m.zeroed();
            backward_sample(m, cache, &g_logits[b * per..(b + 1) * per], &mut g)?;
            Ok(g)
        })
        .collect::<Result<_>>()?;
    let mut iter = grads.into_iter();
    let mut total = iter.next().unwrap_or_else(|| m.zeroed());
    for g in iter {
        total.accumulate(&g);
    }
    Ok((loss, total))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub dice: f64,
    pub miou: f64,
}

/// Loss over the whole split as one batch, plus thresholded metrics.
pub fn evaluate(m: &ModelParams, samples: &[Sample], kind: LossKind, aggregation: Aggregation) -> Result<Evaluation> {
    let refs: Vec<&Sample> = samples.iter().collect();
    let cfg = &m.config;
    let pixels = cfg.img_size * cfg.img_size;
    let logits = predict(m, &refs)?;
    let target = targets(&refs);
    let (loss, _) = loss_with_grad(kind, &logits, &target, cfg.out_classes, pixels)?;
    let SegmentationScore { dice, miou } = score_logits(&logits, &target, cfg.out_classes, pixels, aggregation)?;
    Ok(Evaluation { loss, dice, miou })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: ModelParams,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub last: ModelParams,
    pub curve: Vec<MetricsRecord>,
}

/// Runs `cfg.epochs` epochs and keeps the parameters with the lowest
/// validation loss (earliest epoch on ties).
pub fn train(
    model: ModelParams,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidConfig(
            "train and validation sets must be nonempty".into(),
        ));
    }
    for s in train_set {
        if val_set.iter().any(|v| v.id == s.id) {
            return Err(Error::InvalidConfig(format!("case {} is in both train and val", s.id)));
        }
    }
    let adamw = cfg.adamw();
    let mut m = model;
    let mut state = AdamWState::new();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(ModelParams, usize, f64)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr0, cfg.lr_min);
        order.shuffle(&mut substream(cfg.seed, epoch as u64));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, grads) = loss_and_grad(&m, &batch, cfg.loss_kind)?;
            if !grads.all_finite() {
                return Err(Error::NonFinite(format!("gradient at epoch {epoch}")));
            }
            adamw_step(&mut m, &grads, &mut state, lr, &adamw);
            loss_sum += loss * batch.len() as f64;
        }
        let val = evaluate(&m, val_set, cfg.loss_kind, Aggregation::Global)?;
        let record = MetricsRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / train_set.len() as f64,
            val_loss: val.loss,
            val_dice: val.dice,
            val_miou: val.miou,
        };
        on_epoch(&record);
        curve.push(record);
        if best.as_ref().is_none_or(|(_, _, l)| val.loss < *l) {
            best = Some((m.clone(), epoch + 1, val.loss));
        }
    }
    let (best, best_epoch, best_val_loss) = match best {
        Some(b) => b,
        None => (m.clone(), 0, f64::INFINITY),
    };
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_loss,
        last: m,
        curve,
    })
}

fn scalar(v: usize) -> Tensor {
    Tensor::from_vec(&[], vec![v as f64]).expect("scalar")
}

fn list(v: &[usize]) -> Tensor {
    Tensor::from_vec(&[v.len()], v.iter().map(|&x| x as f64).collect()).expect("list")
}

/// Config echo under `config.*` followed by every named parameter. Values
/// are stored as f32.
pub fn checkpoint_entries(m: &ModelParams) -> Vec<(String, Tensor)> {
    let c = &m.config;
    let mut out = vec![
        ("config.img_size".to_string(), scalar(c.img_size)),
        ("config.in_channels".into(), scalar(c.in_channels)),
        ("config.patch_size".into(), scalar(c.patch_size)),
        ("config.embed_dim".into(), scalar(c.embed_dim)),
        ("config.encoder_depths".into(), list(&c.encoder_depths)),
        ("config.bottleneck_depth".into(), scalar(c.bottleneck_depth)),
        ("config.decoder_depths".into(), list(&c.decoder_depths)),
        ("config.state_dim".into(), scalar(c.state_dim)),
        ("config.out_classes".into(), scalar(c.out_classes)),
        ("config.experiment_id".into(), scalar(c.experiment_id)),
    ];
    for (name, t) in m.named_tensors() {
        out.push((name, t.clone()));
    }
    out
}

pub fn save_checkpoint(m: &ModelParams, path: &Path) -> Result<()> {
    write_tensors(path, &checkpoint_entries(m))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let entries = read_tensors(path)?;
    let get = |name: &str| -> Result<&Tensor> {
        entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Parse(format!("checkpoint lacks {name}")))
    };
    let int = |name: &str| -> Result<usize> { Ok(get(name)?.data()[0] as usize) };
    let ints = |name: &str| -> Result<Vec<usize>> { Ok(get(name)?.data().iter().map(|&v| v as usize).collect()) };
    let cfg = ModelConfig {
        img_size: int("config.img_size")?,
        in_channels: int("config.in_channels")?,
        patch_size: int("config.patch_size")?,
        embed_dim: int("config.embed_dim")?,
        encoder_depths: ints("config.encoder_depths")?,
        bottleneck_depth: int("config.bottleneck_depth")?,
        decoder_depths: ints("config.decoder_depths")?,
        state_dim: int("config.state_dim")?,
        out_classes: int("config.out_classes")?,
        experiment_id: int("config.experiment_id")?,
    };
    let mut m = build_model(&cfg, 0)?;
    let mut failure = None;
    m.visit_mut("", &mut |name, t| {
        if failure.is_some() {
            return;
        }
        match get(name) {
            Ok(src) if src.shape() == t.shape() => t.data_mut().copy_from_slice(src.data()),
            Ok(src) => {
                failure = Some(Error::shape(
                    format!("{name} {:?}", t.shape()),
                    format!("{:?}", src.shape()),
                ))
            }
            Err(e) => failure = Some(e),
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(m),
    }
}
