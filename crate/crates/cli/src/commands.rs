use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::json;

use ms2d_core::data::{generate_phantom, read_dataset, subject_split, write_dataset};
use ms2d_core::matrix::{parse_experiment_list, run_matrix};
use ms2d_core::scan_catalog::{catalogue_csv, experiment_streams};
use ms2d_core::segnet::{build_model, count_flops, count_params};
use ms2d_core::stats::{
    dice_by_experiment_csv, friedman, leaderboard_markdown, parse_scores_csv, scores_csv, summarize, table2_fixture,
    FriedmanResult, Summary, TABLE2_TIES,
};
use ms2d_core::training::{curve_csv, evaluate, save_checkpoint, train};
use ms2d_core::{
    Aggregation, FriedmanOptions, GridShape, LossKind, ModelConfig, PhantomSpec, ScoreMatrix, TieMethod, TrainConfig,
};

use crate::manifest::{emit, RunManifest};
use crate::settings::Settings;
use crate::{AnalyzeArgs, Cli, Command, GenDataArgs, MatrixArgs, ModelTrainArgs, ScanDumpArgs, TrainArgs};

pub fn dispatch(cli: Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::GenData(a) => gen_data(a, need_out(&cli.out)?, seed),
        Command::Train(a) => train_cmd(a, need_out(&cli.out)?, seed),
        Command::Matrix(a) => matrix_cmd(a, need_out(&cli.out)?, seed),
        Command::Analyze(a) => analyze(a, cli.out.as_deref(), seed),
        Command::ScanDump(a) => scan_dump(a, cli.out.as_deref(), seed),
    }
}

fn need_out(out: &Option<PathBuf>) -> Result<&Path> {
    out.as_deref().context("--out DIR is required for this command")
}

const PHANTOM_KEYS: [&str; 9] = [
    "cases",
    "size",
    "lesions_min",
    "lesions_max",
    "eccentricity",
    "theta",
    "anisotropy",
    "contrast",
    "noise",
];

fn gen_data(a: GenDataArgs, out: &Path, seed: u64) -> Result<()> {
    let file = Settings::load(a.config.as_deref())?;
    file.check_known(&PHANTOM_KEYS)?;
    let d = PhantomSpec::default();
    let spec = PhantomSpec {
        n_cases: file.pick(a.cases, "cases", d.n_cases)?,
        size: file.pick(a.size, "size", d.size)?,
        lesions_min: file.pick(a.lesions_min, "lesions_min", d.lesions_min)?,
        lesions_max: file.pick(a.lesions_max, "lesions_max", d.lesions_max)?,
        eccentricity: file.pick(a.eccentricity, "eccentricity", d.eccentricity)?,
        theta: file.pick(a.theta, "theta", d.theta)?,
        anisotropy: file.pick(a.anisotropy, "anisotropy", d.anisotropy)?,
        contrast: file.pick(a.contrast, "contrast", d.contrast)?,
        noise_sigma: file.pick(a.noise, "noise", d.noise_sigma)?,
        seed,
    };
    spec.validate()?;
    let mut manifest = RunManifest::start(out, "gen-data", seed, serde_json::to_value(&spec)?)?;
    let cases = generate_phantom(&spec)?;
    let ids: Vec<String> = cases.iter().map(|c| c.id.clone()).collect();
    let split = subject_split(&ids, seed)?;
    write_dataset(out, &cases, &split)?;
    manifest.record(&out.join("split.csv"));
    manifest.record(&out.join("cases"));
    println!(
        "wrote {} cases ({} train / {} val / {} test) to {}",
        cases.len(),
        split.train.len(),
        split.val.len(),
        split.test.len(),
        out.display()
    );
    manifest.finish()
}

const TRAIN_KEYS: [&str; 11] = [
    "img_size",
    "embed_dim",
    "state_dim",
    "classes",
    "epochs",
    "batch_size",
    "lr0",
    "lr_min",
    "weight_decay",
    "loss",
    "experiment",
];

fn resolve(a: &ModelTrainArgs, experiment: usize, seed: u64) -> Result<(ModelConfig, TrainConfig)> {
    let file = Settings::load(a.config.as_deref())?;
    file.check_known(&TRAIN_KEYS)?;
    let d = ModelConfig::desk();
    let classes = file.pick(a.classes, "classes", d.out_classes)?;
    let model = ModelConfig {
        img_size: file.pick(a.img_size, "img_size", d.img_size)?,
        embed_dim: file.pick(a.embed_dim, "embed_dim", d.embed_dim)?,
        state_dim: file.pick(a.state_dim, "state_dim", d.state_dim)?,
        out_classes: classes,
        experiment_id: file.pick(None, "experiment", experiment)?,
        ..d
    };
    model.validate()?;
    let t = TrainConfig::default();
    let default_loss = if classes == 1 {
        LossKind::BceDice
    } else {
        LossKind::CeMdice
    };
    let loss = match a.loss.clone() {
        Some(s) => s.parse()?,
        None => file.pick(None, "loss", default_loss)?,
    };
    let train = TrainConfig {
        lr0: file.pick(a.lr0, "lr0", t.lr0)?,
        lr_min: file.pick(a.lr_min, "lr_min", t.lr_min)?,
        weight_decay: file.pick(a.weight_decay, "weight_decay", t.weight_decay)?,
        batch_size: file.pick(a.batch_size, "batch_size", t.batch_size)?,
        epochs: file.pick(a.epochs, "epochs", t.epochs)?,
        loss_kind: loss,
        seed,
        ..t
    };
    train.validate()?;
    Ok((model, train))
}

fn train_cmd(a: TrainArgs, out: &Path, seed: u64) -> Result<()> {
    experiment_streams(a.experiment)?;
    let (model_cfg, train_cfg) = resolve(&a.common, a.experiment, seed)?;
    let data = read_dataset(&a.data).with_context(|| format!("loading dataset {}", a.data.display()))?;
    let mut manifest = RunManifest::start(
        out,
        "train",
        seed,
        json!({
            "data": a.data,
            "model": model_cfg,
            "train": train_cfg,
            "aggregation": if a.per_slice { "per_slice" } else { "global" },
        }),
    )?;
    let model = build_model(&model_cfg, seed)?;
    eprintln!(
        "experiment {} ({}) params {} flops/sample {}",
        model_cfg.experiment_id,
        experiment_streams(model_cfg.experiment_id)?.label(),
        count_params(&model),
        count_flops(&model_cfg)?
    );
    let outcome = train(model, &data.train, &data.val, &train_cfg, |r| {
        eprintln!(
            "epoch {:>3}  train {:.4}  val {:.4}  dice {:.4}  miou {:.4}",
            r.epoch, r.train_loss, r.val_loss, r.val_dice, r.val_miou
        )
    })?;
    let aggregation = if a.per_slice {
        Aggregation::PerSlice
    } else {
        Aggregation::Global
    };
    let test = evaluate(&outcome.best, &data.test, train_cfg.loss_kind, aggregation)?;

    let best = out.join("best.mstn");
    save_checkpoint(&outcome.best, &best)?;
    manifest.record(&best);
    let last = out.join("last.mstn");
    save_checkpoint(&outcome.last, &last)?;
    manifest.record(&last);
    emit(&mut manifest, out, "curve.csv", &curve_csv(&outcome.curve))?;
    let report = json!({
        "experiment": model_cfg.experiment_id,
        "best_epoch": outcome.best_epoch,
        "best_val_loss": outcome.best_val_loss,
        "best_val_dice": outcome.curve.get(outcome.best_epoch.saturating_sub(1)).map(|r| r.val_dice),
        "test": test,
    });
    emit(
        &mut manifest,
        out,
        "metrics.json",
        &serde_json::to_string_pretty(&report)?,
    )?;
    println!(
        "best epoch {} val_loss {:.4} | test dice {:.4} miou {:.4}",
        outcome.best_epoch, outcome.best_val_loss, test.dice, test.miou
    );
    manifest.finish()
}

fn family_means(s: &ScoreMatrix) -> Option<(f64, f64)> {
    let (mut diag, mut other) = (Vec::new(), Vec::new());
    for (j, t) in s.treatments.iter().enumerate() {
        let id: usize = t.trim_start_matches("Exp").parse().ok()?;
        let mean = s.scores.iter().map(|r| r[j]).sum::<f64>() / s.n_blocks() as f64;
        if experiment_streams(id).ok()?.is_diagonal() {
            diag.push(mean);
        } else {
            other.push(mean);
        }
    }
    if diag.is_empty() || other.is_empty() {
        return None;
    }
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Some((avg(&other), avg(&diag)))
}

fn matrix_cmd(a: MatrixArgs, out: &Path, seed: u64) -> Result<()> {
    let experiments = parse_experiment_list(&a.experiments)?;
    let (model_cfg, train_cfg) = resolve(&a.common, experiments[0], seed)?;
    let data = read_dataset(&a.data).with_context(|| format!("loading dataset {}", a.data.display()))?;
    let mut manifest = RunManifest::start(
        out,
        "matrix",
        seed,
        json!({
            "data": a.data,
            "experiments": experiments,
            "jobs": a.jobs,
            "model": model_cfg,
            "train": train_cfg,
        }),
    )?;
    let result = run_matrix(&model_cfg, &train_cfg, &experiments, &data, &a.label, Some(out), a.jobs)?;
    for r in &result.runs {
        if let Some(c) = &r.checkpoint {
            manifest.record(c);
            manifest.record(&c.with_file_name("curve.csv"));
        }
        println!(
            "Exp{:<2} {:<16} best epoch {:>3}  test dice {:.4}  miou {:.4}",
            r.experiment, r.label, r.best_epoch, r.test_dice, r.test_miou
        );
    }
    emit(&mut manifest, out, "scores.csv", &scores_csv(&result.scores))?;
    emit(
        &mut manifest,
        out,
        "dice_by_experiment.csv",
        &dice_by_experiment_csv(&result.scores),
    )?;
    let summary = summarize(&result.scores, TieMethod::Average);
    let mut md = leaderboard_markdown(&summary, None);
    md.push_str(&format!(
        "\nParity: {} parameters, {} FLOPs per sample for every experiment.\n",
        result.parity.params, result.parity.flops
    ));
    if let Some((contiguous, diagonal)) = family_means(&result.scores) {
        let line = format!(
            "Observational: mean test Dice {contiguous:.4} for raster/serpentine experiments vs {diagonal:.4} for diagonal ones."
        );
        println!("{line}");
        md.push_str(&format!("\n{line}\n"));
    }
    emit(&mut manifest, out, "leaderboard.md", &md)?;
    let runs: Vec<_> = result
        .runs
        .iter()
        .map(|r| {
            json!({
                "experiment": r.experiment,
                "label": r.label,
                "best_epoch": r.best_epoch,
                "best_val_loss": r.best_val_loss,
                "test_dice": r.test_dice,
                "test_miou": r.test_miou,
            })
        })
        .collect();
    emit(
        &mut manifest,
        out,
        "runs.json",
        &serde_json::to_string_pretty(&json!({ "parity": result.parity, "runs": runs }))?,
    )?;
    manifest.finish()
}

fn friedman_json(f: &FriedmanResult, s: &ScoreMatrix, opts: FriedmanOptions) -> serde_json::Value {
    let ranks: Vec<_> = s
        .treatments
        .iter()
        .zip(&f.mean_ranks)
        .map(|(t, r)| json!({ "experiment": t, "mean_rank": r }))
        .collect();
    json!({
        "chi2": f.chi2,
        "df": f.df,
        "p": f.p,
        "ties": opts.ties,
        "tie_correction": opts.tie_correction,
        "mean_ranks": ranks,
    })
}

fn print_analysis(s: &ScoreMatrix, f: Option<&FriedmanResult>, summary: &Summary, opts: FriedmanOptions) {
    println!(
        "blocks {}  treatments {}  ties {:?}  tie_correction {}",
        s.n_blocks(),
        s.n_treatments(),
        opts.ties,
        if opts.tie_correction { "on" } else { "off" }
    );
    match f {
        Some(f) => {
            println!("chi2 {:.4}", f.chi2);
            println!("df {}", f.df);
            println!("p {:.6}", f.p);
            println!("mean_ranks");
            for (t, r) in s.treatments.iter().zip(&f.mean_ranks) {
                println!("  {t} {r:.2}");
            }
        }
        None => println!("friedman not computed: need at least 2 datasets and 2 experiments"),
    }
    for b in &summary.blocks {
        println!(
            "delta {} {:.3} (best {} {:.3}, worst {} {:.3})",
            b.block, b.delta, b.best, b.best_score, b.worst, b.worst_score
        );
        if let Some(g) = b.duality_gap {
            println!("duality {} max_gap {g:.5}", b.block);
        }
    }
}

fn analyze(a: AnalyzeArgs, out: Option<&Path>, seed: u64) -> Result<()> {
    let (matrix, default_ties) = match a.fixture.as_deref() {
        Some("table2") => (table2_fixture(), TABLE2_TIES),
        Some(other) => bail!("unknown fixture {other:?} (available: table2)"),
        None => {
            let texts: Vec<String> = a
                .scores
                .iter()
                .map(|p| std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display())))
                .collect::<Result<_>>()?;
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            (parse_scores_csv(&refs)?, TieMethod::Average)
        }
    };
    let ties = match &a.ties {
        Some(t) => t.parse()?,
        None => default_ties,
    };
    let opts = FriedmanOptions {
        ties,
        tie_correction: a.tie_correction,
    };
    let test = if matrix.n_blocks() >= 2 && matrix.n_treatments() >= 2 {
        Some(friedman(&matrix, opts)?)
    } else {
        None
    };
    let summary = summarize(&matrix, ties);
    print_analysis(&matrix, test.as_ref(), &summary, opts);

    if let Some(out) = out {
        let config = json!({
            "fixture": a.fixture,
            "scores": a.scores,
            "ties": ties,
            "tie_correction": a.tie_correction,
        });
        let mut manifest = RunManifest::start(out, "analyze", seed, config)?;
        if let Some(f) = &test {
            emit(
                &mut manifest,
                out,
                "friedman.json",
                &serde_json::to_string_pretty(&friedman_json(f, &matrix, opts))?,
            )?;
        }
        emit(&mut manifest, out, "scores.csv", &scores_csv(&matrix))?;
        emit(
            &mut manifest,
            out,
            "dice_by_experiment.csv",
            &dice_by_experiment_csv(&matrix),
        )?;
        emit(
            &mut manifest,
            out,
            "leaderboard.md",
            &leaderboard_markdown(&summary, test.as_ref()),
        )?;
        manifest.finish()?;
    }
    Ok(())
}

fn scan_dump(a: ScanDumpArgs, out: Option<&Path>, seed: u64) -> Result<()> {
    let shape: GridShape = a.grid.parse()?;
    let csv = catalogue_csv(shape);
    print!("{csv}");
    if let Some(out) = out {
        let mut manifest = RunManifest::start(out, "scan-dump", seed, json!({ "grid": a.grid }))?;
        emit(&mut manifest, out, "catalogue.csv", &csv)?;
        manifest.finish()?;
    }
    Ok(())
}
