//! Runs a set of scan experiments under one configuration and collects
//! their test scores.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::Aggregation;
use crate::scan_catalog::{experiment_streams, EXPERIMENT_COUNT};
use crate::segnet::{build_model, count_flops, count_params, ModelConfig};
use crate::stats::ScoreMatrix;
use crate::training::{curve_csv, evaluate, save_checkpoint, train, MetricsRecord, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Parity {
    pub params: usize,
    pub flops: u64,
}

/// Confirms every experiment yields the same parameter and operation count.
pub fn check_parity(base: &ModelConfig, experiments: &[usize]) -> Result<Parity> {
    let mut seen: Option<(usize, Parity)> = None;
    for &id in experiments {
        experiment_streams(id)?;
        let cfg = base.clone().with_experiment(id);
        let here = Parity {
            params: count_params(&build_model(&cfg, 0)?),
            flops: count_flops(&cfg)?,
        };
        match seen {
            None => seen = Some((id, here)),
            Some((first, p)) if p != here => {
                return Err(Error::ParityViolation(format!(
                    "experiment {id} has {} params / {} flops, experiment {first} has {} / {}",
                    here.params, here.flops, p.params, p.flops
                )))
            }
            Some(_) => {}
        }
    }
    seen.map(|(_, p)| p)
        .ok_or_else(|| Error::InvalidConfig("no experiments selected".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment: usize,
    pub label: String,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub test_dice: f64,
    pub test_miou: f64,
    pub checkpoint: Option<PathBuf>,
    pub curve: Vec<MetricsRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixResult {
    pub parity: Parity,
    pub scores: ScoreMatrix,
    pub runs: Vec<RunRecord>,
}

pub fn parse_experiment_list(text: &str) -> Result<Vec<usize>> {
    if text.trim() == "all" {
        return Ok((1..=EXPERIMENT_COUNT).collect());
    }
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let ids: Vec<usize> = match part.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (parse_id(a)?, parse_id(b)?);
                (a.min(b)..=a.max(b)).collect()
            }
            None => vec![parse_id(part)?],
        };
        for id in ids {
            experiment_streams(id)?;
            if !out.contains(&id) {
                out.push(id);
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Parse("empty experiment list".into()));
    }
    Ok(out)
}

fn parse_id(s: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("bad experiment id {s:?}")))
}

/// Trains and tests each experiment with identical seed and settings.
/// Runs execute concurrently on up to `jobs` threads; per-run outputs go to
/// `<out>/exp<NN>/` when `out` is given.
pub fn run_matrix(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    experiments: &[usize],
    data: &Dataset,
    dataset_label: &str,
    out: Option<&Path>,
    jobs: usize,
) -> Result<MatrixResult> {
    let parity = check_parity(base, experiments)?;
    if data.test.is_empty() {
        return Err(Error::InvalidConfig("dataset has no test cases".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let runs: Vec<RunRecord> = pool.install(|| {
        experiments
            .par_iter()
            .map(|&id| run_one(base, train_cfg, id, data, out))
            .collect::<Result<_>>()
    })?;
    let scores = ScoreMatrix::new(
        vec![dataset_label.to_string()],
        runs.iter().map(|r| format!("Exp{}", r.experiment)).collect(),
        vec![runs.iter().map(|r| r.test_dice).collect()],
    )?
    .with_miou(vec![runs.iter().map(|r| r.test_miou).collect()])?;
    Ok(MatrixResult { parity, scores, runs })
}

fn run_one(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    id: usize,
    data: &Dataset,
    out: Option<&Path>,
) -> Result<RunRecord> {
    let cfg = base.clone().with_experiment(id);
    let model = build_model(&cfg, train_cfg.seed)?;
    let outcome = train(model, &data.train, &data.val, train_cfg, |_| {})?;
    let test = evaluate(&outcome.best, &data.test, train_cfg.loss_kind, Aggregation::Global)?;
    let checkpoint = match out {
        Some(root) => {
            let dir = root.join(format!("exp{id:02}"));
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let ckpt = dir.join("best.mstn");
            save_checkpoint(&outcome.best, &ckpt)?;
            let curve = dir.join("curve.csv");
            std::fs::write(&curve, curve_csv(&outcome.curve)).map_err(|e| Error::io(&curve, e))?;
            Some(ckpt)
        }
        None => None,
    };
    Ok(RunRecord {
        experiment: id,
        label: experiment_streams(id)?.label(),
        best_epoch: outcome.best_epoch,
        best_val_loss: outcome.best_val_loss,
        test_dice: test.dice,
        test_miou: test.miou,
        checkpoint,
        curve: outcome.curve,
    })
}
