//! The five subcommands: generate, train, eval, ablate, predict.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use clap::Args;
use prose_fd::datagen::{build_dataset, load_dataset, BuildConfig, SplitFractions};
use prose_fd::model::{Model, SymbolBatch};
use prose_fd::patching::{denormalize, normalize, window_stats};
use prose_fd::symbolic::TokenSequence;
use prose_fd::tensor::{no_grad, Tensor};
use prose_fd::train::{
    evaluate, load_checkpoint, relative_l2, render_ablation_csv, render_ablation_text,
    render_eval_csv, render_eval_text, run_ablations, EvalMode, MetricConfig, RunSinks, TrainData,
    TrainError, Trainer,
};

use crate::config;
use crate::data::{load_split_map, parse_family};
use crate::errors::CliError;
use crate::manifest::{write_manifest, RunManifest};
use crate::pgm;

/// Worker-thread request, capped by the `PROSE_FD_THREADS` environment
/// variable when it is set.
fn effective_threads(requested: usize) -> usize {
    let requested = requested.max(1);
    match std::env::var("PROSE_FD_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(cap) => requested.min(cap.max(1)),
        None => requested,
    }
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Equation family: swe, ins, or ins-forced.
    #[arg(long)]
    pub family: String,
    /// Trajectories to generate (before splitting).
    #[arg(long)]
    pub n: usize,
    /// Grid resolution per side.
    #[arg(long, default_value_t = 32)]
    pub grid: usize,
    /// Recorded frames per trajectory.
    #[arg(long, default_value_t = 20)]
    pub frames: usize,
    /// Dataset seed; same seed, same bytes.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for the split files and sidecars.
    #[arg(long)]
    pub out: PathBuf,
    /// Validation fraction.
    #[arg(long, default_value_t = 0.1)]
    pub val_frac: f64,
    /// Test fraction.
    #[arg(long, default_value_t = 0.1)]
    pub test_frac: f64,
    /// Worker threads (capped by PROSE_FD_THREADS).
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Unstable draws tolerated before giving up (default: max(n, 8)).
    #[arg(long)]
    pub budget: Option<usize>,
}

pub fn generate(args: &GenerateArgs) -> Result<(), CliError> {
    let family = parse_family(&args.family)?;
    let mut cfg = BuildConfig::new(family, args.n, args.grid, args.frames, args.seed);
    cfg.fractions = SplitFractions {
        train: 1.0 - args.val_frac - args.test_frac,
        val: args.val_frac,
        test: args.test_frac,
    };
    if let Some(budget) = args.budget {
        cfg.rejection_budget = budget;
    }
    cfg.threads = effective_threads(args.threads);

    let mut manifest = RunManifest::new("generate", args.seed, &args.out, cfg.threads);
    manifest.generate = Some(cfg.clone());
    write_manifest(&args.out, &manifest)?;

    let report = build_dataset(&cfg, &args.out)?;
    for (split, count) in &report.written {
        println!("{split}: {count} samples");
    }
    println!("rejected: {}", report.rejected);
    for path in &report.paths {
        println!("wrote {}", path.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directories holding {family}_{split}.pfdd files; families may be
    /// spread across directories but not duplicated.
    #[arg(long, num_args = 1.., required = true)]
    pub data: Vec<PathBuf>,
    /// Built-in profile name (desk, paper) or a path to a flat JSON profile.
    #[arg(long)]
    pub profile: Option<String>,
    /// Flat JSON file of dotted-key overrides, applied after the profile.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Single dotted-key override, e.g. --set train.peak_lr=3e-4. Repeatable;
    /// applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory: manifest, NDJSON log, checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint; the run's configuration comes from the
    /// checkpoint itself and profile/override flags are rejected.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Override the training seed from the profile.
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let mut trainer = match &args.resume {
        Some(ckpt) => {
            if args.profile.is_some()
                || args.config.is_some()
                || !args.set.is_empty()
                || args.seed.is_some()
            {
                return Err(CliError::Config(
                    "--resume continues with the checkpoint's own configuration; \
                     profile/config/set/seed flags cannot apply"
                        .into(),
                ));
            }
            load_checkpoint(ckpt)?
        }
        None => {
            let profile = args.profile.as_deref().unwrap_or("desk");
            let resolved = config::resolve(profile, args.config.as_deref(), &args.set)?;
            let mut tcfg = resolved.train;
            if let Some(seed) = args.seed {
                tcfg.seed = seed;
            }
            let model = Model::init(resolved.model, tcfg.seed).map_err(TrainError::from)?;
            Trainer::new(model, tcfg)?
        }
    };

    let train_map = load_split_map(&args.data, "train", true)?;
    let val_map = load_split_map(&args.data, "val", false)?;
    let mut data = TrainData::new(train_map);
    if !val_map.is_empty() {
        data = data.with_val(val_map);
    }

    let mut manifest =
        RunManifest::new("train", trainer.cfg.seed, &args.out, effective_threads(1));
    manifest.model = Some(trainer.model.cfg.clone());
    manifest.train = Some(trainer.cfg.clone());
    write_manifest(&args.out, &manifest)?;

    let log_path = args.out.join("log.ndjson");
    let sinks = RunSinks { log: Some(&log_path), checkpoint_dir: Some(&args.out) };
    match trainer.run(&data, &sinks) {
        Ok(report) => {
            println!("completed {} steps", trainer.step);
            if let Some(last) = report.steps.last() {
                println!("final train loss {:.6e} (lr {:.3e})", last.loss, last.lr);
            }
            if let Some(val) = report.vals.last() {
                for (family, score) in &val.per_family {
                    println!("val {family}: rel_l2 {score:.4}");
                }
                println!("val average: {:.4}", val.average);
            }
            if report.stopped_early {
                println!("stopped early: validation under the configured threshold");
            }
            println!("checkpoint: {}", args.out.join("final.pfdw").display());
            Ok(())
        }
        Err(TrainError::NonFinite { step, lr, grad_norm, family, indices }) => {
            let diag = serde_json::json!({
                "step": step,
                "lr": lr,
                "grad_norm": grad_norm,
                "family": family,
                "indices": indices,
            });
            let text = serde_json::to_string_pretty(&diag)
                .map_err(|e| CliError::Io(e.to_string()))?;
            fs::write(args.out.join("abort.json"), text + "\n")?;
            Err(TrainError::NonFinite { step, lr, grad_norm, family, indices }.into())
        }
        Err(e) => Err(e.into()),
    }
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to score (.pfdw with its .json sidecar).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directories holding {family}_{split}.pfdd files.
    #[arg(long, num_args = 1.., required = true)]
    pub data: Vec<PathBuf>,
    /// Which split to score.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Report format on stdout.
    #[arg(long, default_value = "text", value_parser = ["text", "csv"])]
    pub report: String,
    /// Also write results.csv (and the manifest) here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Input frames per sample (default: the checkpoint's training t0).
    #[arg(long)]
    pub t0: Option<usize>,
    /// Score autoregressively, one frame at a time, instead of one shot.
    #[arg(long)]
    pub rollout: bool,
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let trainer = load_checkpoint(&args.checkpoint)?;
    let datasets = load_split_map(&args.data, &args.split, true)?;
    let t0 = args.t0.unwrap_or(trainer.cfg.t0);
    let mode = if args.rollout { EvalMode::Rollout } else { EvalMode::Direct };

    if let Some(out) = &args.out {
        let mut manifest = RunManifest::new("eval", trainer.cfg.seed, out, 1);
        manifest.model = Some(trainer.model.cfg.clone());
        manifest.train = Some(trainer.cfg.clone());
        write_manifest(out, &manifest)?;
    }

    let report = evaluate(&trainer.model, &datasets, &MetricConfig::default(), t0, mode)?;
    match args.report.as_str() {
        "csv" => print!("{}", render_eval_csv(&report)),
        _ => print!("{}", render_eval_text(&report)),
    }
    if let Some(out) = &args.out {
        fs::write(out.join("results.csv"), render_eval_csv(&report))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Directories holding {family}_{split}.pfdd files.
    #[arg(long, num_args = 1.., required = true)]
    pub data: Vec<PathBuf>,
    /// Profile the variants are derived from.
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Seeds per variant; reported as mean ± std.
    #[arg(long, default_value_t = 3)]
    pub seeds: usize,
    /// First seed; the run uses base_seed..base_seed+seeds.
    #[arg(long, default_value_t = 100)]
    pub base_seed: u64,
    /// Output directory for ablation.csv and the manifest.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn ablate(args: &AblateArgs) -> Result<(), CliError> {
    let profile = args.profile.as_deref().unwrap_or("desk");
    let resolved = config::resolve(profile, args.config.as_deref(), &args.set)?;
    if args.seeds == 0 {
        return Err(CliError::Config("--seeds must be at least 1".into()));
    }
    let seeds: Vec<u64> = (0..args.seeds as u64).map(|i| args.base_seed + i).collect();

    let train_map = load_split_map(&args.data, "train", true)?;
    let val_map = load_split_map(&args.data, "val", false)?;
    let mut data = TrainData::new(train_map);
    if !val_map.is_empty() {
        data = data.with_val(val_map);
    }

    let mut manifest = RunManifest::new("ablate", args.base_seed, &args.out, 1);
    manifest.model = Some(resolved.model.clone());
    manifest.train = Some(resolved.train.clone());
    write_manifest(&args.out, &manifest)?;

    let report =
        run_ablations(&resolved.model, &resolved.train, &data, &MetricConfig::default(), &seeds)?;
    fs::write(args.out.join("ablation.csv"), render_ablation_csv(&report))?;
    print!("{}", render_ablation_text(&report));
    Ok(())
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Checkpoint to predict with.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A single .pfdd split file.
    #[arg(long)]
    pub data: PathBuf,
    /// Sample index within the file.
    #[arg(long, default_value_t = 0)]
    pub sample: usize,
    /// Directory for the PGM frames, scales.json, and errors.csv.
    #[arg(long)]
    pub export: PathBuf,
    /// Input frames (default: the checkpoint's training t0).
    #[arg(long)]
    pub t0: Option<usize>,
    /// Frames to predict (default: up to 10, bounded by data and model).
    #[arg(long)]
    pub frames: Option<usize>,
}

#[derive(Debug, serde::Serialize)]
struct Scale {
    min: f64,
    max: f64,
}

pub fn predict(args: &PredictArgs) -> Result<(), CliError> {
    let trainer = load_checkpoint(&args.checkpoint)?;
    let model = &trainer.model;
    let ds = load_dataset(&args.data)?;
    if args.sample >= ds.len() {
        return Err(CliError::Config(format!(
            "sample {} is out of range: `{}` holds {} samples",
            args.sample,
            args.data.display(),
            ds.len()
        )));
    }

    let t0 = args.t0.unwrap_or(trainer.cfg.t0).min(model.cfg.t0_max);
    if ds.t_total <= t0 {
        return Err(CliError::Config(format!(
            "{} frames leave nothing to predict after a {t0}-frame input",
            ds.t_total
        )));
    }
    let available = ds.t_total - t0;
    let t_pred = args.frames.unwrap_or(10).min(available).min(model.cfg.t_max).max(1);

    let mut manifest = RunManifest::new("predict", trainer.cfg.seed, &args.export, 1);
    manifest.model = Some(model.cfg.clone());
    manifest.train = Some(trainer.cfg.clone());
    write_manifest(&args.export, &manifest)?;

    let sample = &ds.samples[args.sample];
    let frame = ds.c * ds.h * ds.w;
    let window = Tensor::from_vec(
        sample.field.values[..t0 * frame].to_vec(),
        &[1, t0, ds.c, ds.h, ds.w],
    )
    .map_err(TrainError::from)?;
    let symbols = if model.cfg.layers_sym_enc > 0 {
        Some(
            SymbolBatch::from_sequences(&[TokenSequence::new(sample.tokens.clone())])
                .map_err(TrainError::from)?,
        )
    } else {
        None
    };

    let stats = window_stats(&window).map_err(TrainError::from)?;
    let normalized = normalize(&window, &stats).map_err(TrainError::from)?;
    let raw = no_grad(|| model.forward(&normalized, symbols.as_ref(), t_pred, &mut None))
        .map_err(TrainError::from)?;
    let prediction = no_grad(|| denormalize(&raw, &stats)).map_err(TrainError::from)?;
    let pred = prediction.to_vec();
    let truth = &sample.field.values[t0 * frame..(t0 + t_pred) * frame];

    let family = ds.family.name();
    let plane = ds.h * ds.w;
    let mut scales: BTreeMap<String, Scale> = BTreeMap::new();
    for t in 0..t_pred {
        for ch in 0..ds.c {
            let offset = (t * ds.c + ch) * plane;
            for (kind, values) in
                [("gt", &truth[offset..offset + plane]), ("pred", &pred[offset..offset + plane])]
            {
                let name = format!("{family}_sample_t{t}_{}_{kind}.pgm", ds.channel_names[ch]);
                let (lo, hi) = pgm::value_range(values);
                pgm::write_pgm16(&args.export.join(&name), values, ds.w, ds.h, lo, hi)?;
                scales.insert(name, Scale { min: lo, max: hi });
            }
        }
    }

    let scales_text = serde_json::to_string_pretty(&scales)
        .map_err(|e| CliError::Io(format!("cannot encode scales: {e}")))?;
    fs::write(args.export.join("scales.json"), scales_text + "\n")?;

    let mut csv = String::from("frame,rel_l2\n");
    for t in 0..t_pred {
        let span = t * frame..(t + 1) * frame;
        let err = relative_l2(&pred[span.clone()], &truth[span], 1, MetricConfig::default().eps)?;
        csv.push_str(&format!("{t},{err}\n"));
    }
    fs::write(args.export.join("errors.csv"), &csv)?;

    println!(
        "exported {} images ({t_pred} frames x {} channels x gt/pred) to {}",
        t_pred * ds.c * 2,
        ds.c,
        args.export.display()
    );
    Ok(())
}
