//! Training loop, evaluation, checkpointing, and the ablation harness.
//!
//! Every step is a pure function of `(parameters, optimizer state, step
//! index, datasets, config)`: batch composition comes from the stream
//! `(seed, "step/{s}")` and dropout from `(seed, "drop/{s}")`, so runs are
//! bitwise reproducible and a checkpoint resume continues the exact same
//! trajectory.

pub mod ablate;
pub mod metrics;
pub mod optim;
pub mod schedule;

pub use ablate::{data_only_config, render_ablation_csv, render_ablation_text, run_ablations};
pub use ablate::{AblationReport, AblationRow, AblationVariant};
pub use metrics::{mse_loss, relative_l2, relative_l2_batch, MetricConfig};
pub use optim::{AdamW, AdamWConfig};
pub use schedule::wsd_schedule;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use crate::datagen::{Dataset, Family, GenError};
use crate::model::{Model, ModelConfig, ModelError, SymbolBatch};
use crate::patching::{denormalize, normalize, window_stats, PatchError};
use crate::rng::stream;
use crate::symbolic::TokenSequence;
use crate::tensor::{no_grad, ParameterStore, StoreError, Tensor, TensorError};
use rand::Rng;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error("loss became non-finite at step {step}: lr {lr:.3e}, grad norm {grad_norm:.3e}, batch from family {family}, samples {indices:?}")]
    NonFinite { step: usize, lr: f64, grad_norm: f64, family: String, indices: Vec<usize> },
    #[error("split `{0}` has no samples to evaluate")]
    EmptySplit(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub decay_frac: f64,
    /// Input frames per window.
    pub t0: usize,
    /// Predicted frames per window.
    pub t_out: usize,
    /// Relative sampling weight per family name; unlisted families get 1.
    pub family_weights: BTreeMap<String, f64>,
    pub seed: u64,
    /// Validation cadence in steps; 0 disables in-run validation.
    pub eval_every: usize,
    /// Checkpoint cadence in steps; 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
    /// NDJSON log cadence in steps.
    pub log_every: usize,
    /// Stop once the validation average drops below this.
    pub early_stop_below: Option<f64>,
}

impl TrainConfig {
    /// Laptop-scale defaults; the optimizer constants mirror the reference
    /// recipe (peak 1e-4, decay 1e-4, 10% warmup, 20% decay).
    pub fn desk() -> Self {
        Self {
            batch_size: 16,
            total_steps: 20_000,
            peak_lr: 1e-4,
            weight_decay: 1e-4,
            warmup_frac: 0.1,
            decay_frac: 0.2,
            t0: 10,
            t_out: 10,
            family_weights: BTreeMap::new(),
            seed: 0,
            eval_every: 1_000,
            checkpoint_every: 0,
            log_every: 50,
            early_stop_below: None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(TrainError::Config("batch size and total steps must be positive".into()));
        }
        if self.t0 == 0 || self.t_out == 0 {
            return Err(TrainError::Config("t0 and t_out must be at least 1".into()));
        }
        if !(self.peak_lr > 0.0) || self.weight_decay < 0.0 {
            return Err(TrainError::Config("need peak_lr > 0 and weight_decay ≥ 0".into()));
        }
        if self.warmup_frac < 0.0 || self.decay_frac < 0.0
            || self.warmup_frac + self.decay_frac >= 1.0
        {
            return Err(TrainError::Config(
                "warmup and decay fractions must be non-negative and sum below 1".into(),
            ));
        }
        if self.family_weights.values().any(|&w| !(w.is_finite() && w >= 0.0)) {
            return Err(TrainError::Config("family weights must be finite and ≥ 0".into()));
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig { weight_decay: self.weight_decay, ..AdamWConfig::default() }
    }
}

/// Train and (optionally) validation splits, one dataset per family.
pub struct TrainData {
    pub train: BTreeMap<Family, Dataset>,
    pub val: BTreeMap<Family, Dataset>,
}

impl TrainData {
    pub fn new(train: BTreeMap<Family, Dataset>) -> Self {
        Self { train, val: BTreeMap::new() }
    }

    pub fn with_val(mut self, val: BTreeMap<Family, Dataset>) -> Self {
        self.val = val;
        self
    }

    fn validate_for(&self, cfg: &TrainConfig, model: &ModelConfig) -> Result<(), TrainError> {
        if self.train.is_empty() {
            return Err(TrainError::EmptySplit("train".into()));
        }
        if cfg.t0 > model.t0_max || cfg.t_out > model.t_max {
            return Err(TrainError::Config(format!(
                "window ({}, {}) exceeds the model's limits ({}, {})",
                cfg.t0, cfg.t_out, model.t0_max, model.t_max
            )));
        }
        for (family, ds) in &self.train {
            if ds.is_empty() {
                return Err(TrainError::EmptySplit(format!("train/{family}")));
            }
            if ds.h != model.patch.h || ds.w != model.patch.h {
                return Err(TrainError::Config(format!(
                    "{family} grid {}×{} does not match the model's {}",
                    ds.h, ds.w, model.patch.h
                )));
            }
            if ds.c > model.patch.c_max {
                return Err(TrainError::Config(format!(
                    "{family} has {} channels, model supports {}",
                    ds.c, model.patch.c_max
                )));
            }
            if ds.t_total < cfg.t0 + cfg.t_out {
                return Err(TrainError::Config(format!(
                    "{family} trajectories have {} frames, windows need {}",
                    ds.t_total,
                    cfg.t0 + cfg.t_out
                )));
            }
            if model.layers_sym_enc > 0 && ds.samples.iter().any(|s| s.tokens.is_empty()) {
                return Err(TrainError::Config(format!(
                    "{family} contains samples without symbolic tokens"
                )));
            }
        }
        for (family, ds) in &self.val {
            if ds.is_empty() {
                return Err(TrainError::EmptySplit(format!("val/{family}")));
            }
            if ds.t_total < cfg.t0 + 1 {
                return Err(TrainError::Config(format!(
                    "val/{family} trajectories are too short to score"
                )));
            }
        }
        Ok(())
    }
}

/// Deterministic batch composition for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub family: Family,
    pub indices: Vec<usize>,
    pub starts: Vec<usize>,
}

/// Draws the step's family, sample indices, and window starts from the
/// step-local stream. Exposed so tests can replay a step exactly.
pub fn batch_plan(
    cfg: &TrainConfig,
    data: &TrainData,
    step: usize,
) -> Result<BatchPlan, TrainError> {
    let mut rng = stream(cfg.seed, &format!("step/{step}"));
    let families: Vec<(Family, f64)> = data
        .train
        .keys()
        .map(|&f| (f, cfg.family_weights.get(f.name()).copied().unwrap_or(1.0)))
        .collect();
    let total: f64 = families.iter().map(|(_, w)| w).sum();
    if !(total > 0.0) {
        return Err(TrainError::Config("all family weights are zero".into()));
    }
    let mut pick = rng.gen_range(0.0..total);
    let mut family = families[families.len() - 1].0;
    for &(f, w) in &families {
        if pick < w {
            family = f;
            break;
        }
        pick -= w;
    }
    let ds = &data.train[&family];
    let latest = ds.t_total - (cfg.t0 + cfg.t_out);
    let indices = (0..cfg.batch_size).map(|_| rng.gen_range(0..ds.len())).collect();
    let starts = (0..cfg.batch_size).map(|_| rng.gen_range(0..=latest)).collect();
    Ok(BatchPlan { family, indices, starts })
}

struct BatchTensors {
    window: Tensor,
    target: Tensor,
    symbols: Option<SymbolBatch>,
}

fn assemble_batch(
    ds: &Dataset,
    plan: &BatchPlan,
    t0: usize,
    t_out: usize,
    with_symbols: bool,
) -> Result<BatchTensors, TrainError> {
    let b = plan.indices.len();
    let frame = ds.c * ds.h * ds.w;
    let mut window = Vec::with_capacity(b * t0 * frame);
    let mut target = Vec::with_capacity(b * t_out * frame);
    let mut seqs = Vec::with_capacity(b);
    for (&idx, &start) in plan.indices.iter().zip(&plan.starts) {
        let s = &ds.samples[idx];
        window.extend_from_slice(&s.field.values[start * frame..(start + t0) * frame]);
        target.extend_from_slice(
            &s.field.values[(start + t0) * frame..(start + t0 + t_out) * frame],
        );
        seqs.push(TokenSequence::new(s.tokens.clone()));
    }
    let window = Tensor::from_vec(window, &[b, t0, ds.c, ds.h, ds.w])?;
    let target = Tensor::from_vec(target, &[b, t_out, ds.c, ds.h, ds.w])?;
    let symbols = if with_symbols { Some(SymbolBatch::from_sequences(&seqs)?) } else { None };
    Ok(BatchTensors { window, target, symbols })
}

/// One line of the training log.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
    pub family: String,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ValPoint {
    pub step: usize,
    pub per_family: BTreeMap<String, f64>,
    pub average: f64,
}

#[derive(Debug, Default)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub vals: Vec<ValPoint>,
    pub stopped_early: bool,
}

/// Where `Trainer::run` writes its artifacts; all optional.
#[derive(Default)]
pub struct RunSinks<'a> {
    /// NDJSON log, appended every `log_every` steps.
    pub log: Option<&'a Path>,
    /// Directory for periodic and final checkpoints.
    pub checkpoint_dir: Option<&'a Path>,
}

pub struct Trainer {
    pub model: Model,
    pub opt: AdamW,
    pub cfg: TrainConfig,
    /// Steps already completed.
    pub step: usize,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let opt = AdamW::new(cfg.adamw())?;
        Ok(Self { model, opt, cfg, step: 0 })
    }

    /// Runs exactly one optimization step at the current step index.
    pub fn train_step(&mut self, data: &TrainData) -> Result<StepRecord, TrainError> {
        let s = self.step;
        let clock = Instant::now();
        let lr = wsd_schedule(
            s,
            self.cfg.total_steps,
            self.cfg.peak_lr,
            self.cfg.warmup_frac,
            self.cfg.decay_frac,
        )?;
        let plan = batch_plan(&self.cfg, data, s)?;
        let ds = &data.train[&plan.family];
        let with_symbols = self.model.cfg.layers_sym_enc > 0;
        let batch = assemble_batch(ds, &plan, self.cfg.t0, self.cfg.t_out, with_symbols)?;

        let stats = window_stats(&batch.window)?;
        let window_n = normalize(&batch.window, &stats)?;
        let target_n = normalize(&batch.target, &stats)?;

        self.model.params.zero_grads();
        let mut drop_stream;
        let mut drop_rng = if self.model.cfg.dropout > 0.0 {
            drop_stream = stream(self.cfg.seed, &format!("drop/{s}"));
            Some(&mut drop_stream)
        } else {
            None
        };
        let pred = self.model.forward(
            &window_n,
            batch.symbols.as_ref(),
            self.cfg.t_out,
            &mut drop_rng,
        )?;
        let mask = vec![true; ds.c];
        let loss = mse_loss(&pred, &target_n, &mask)?;
        let loss_val = loss.item();
        loss.backward()?;
        let raw_norm = self.model.params.grad_global_norm();
        if !loss_val.is_finite() || !raw_norm.is_finite() {
            return Err(TrainError::NonFinite {
                step: s,
                lr,
                grad_norm: raw_norm,
                family: plan.family.name().to_string(),
                indices: plan.indices,
            });
        }
        let grad_norm = self.opt.step(&self.model.params, lr)?;
        self.step += 1;
        Ok(StepRecord {
            step: s,
            loss: loss_val,
            lr,
            grad_norm,
            wall_ms: clock.elapsed().as_secs_f64() * 1e3,
            family: plan.family.name().to_string(),
        })
    }

    /// Trains until `total_steps` (or early stop), logging and
    /// checkpointing per the config.
    pub fn run(&mut self, data: &TrainData, sinks: &RunSinks) -> Result<TrainReport, TrainError> {
        data.validate_for(&self.cfg, &self.model.cfg)?;
        let mut report = TrainReport::default();
        let val_metric = MetricConfig { t_default: self.cfg.t_out, ..MetricConfig::default() };
        while self.step < self.cfg.total_steps {
            let record = self.train_step(data)?;
            let done = self.step;
            let log_due = self.cfg.log_every > 0
                && (record.step % self.cfg.log_every == 0 || done == self.cfg.total_steps);
            if log_due {
                if let Some(path) = sinks.log {
                    append_ndjson(path, &record)?;
                }
            }
            report.steps.push(record);

            let eval_due = self.cfg.eval_every > 0
                && (done % self.cfg.eval_every == 0 || done == self.cfg.total_steps);
            if eval_due && !data.val.is_empty() {
                let ev = evaluate(&self.model, &data.val, &val_metric, self.cfg.t0, EvalMode::Direct)?;
                let point = ValPoint {
                    step: done,
                    per_family: ev.rows.iter().map(|r| (r.family.clone(), r.mean)).collect(),
                    average: ev.average,
                };
                let hit = self.cfg.early_stop_below.is_some_and(|th| point.average < th);
                report.vals.push(point);
                if hit {
                    report.stopped_early = true;
                    break;
                }
            }
            if self.cfg.checkpoint_every > 0 && done % self.cfg.checkpoint_every == 0 {
                if let Some(dir) = sinks.checkpoint_dir {
                    std::fs::create_dir_all(dir)?;
                    save_checkpoint(&dir.join(format!("ckpt_step{done}.pfdw")), self)?;
                }
            }
        }
        if let Some(dir) = sinks.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            save_checkpoint(&dir.join("final.pfdw"), self)?;
        }
        Ok(report)
    }
}

/// Appends one JSON object per line.
pub fn append_ndjson(path: &Path, record: &impl serde::Serialize) -> Result<(), TrainError> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(record)?)?;
    Ok(())
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub adamw: AdamWConfig,
    pub step: usize,
    pub opt_steps: u64,
}

/// Writes parameters and optimizer moments into one store file
/// (moments under `opt.m.` / `opt.v.`) plus a JSON sidecar with the
/// configs and step counters.
pub fn save_checkpoint(path: &Path, trainer: &Trainer) -> Result<(), TrainError> {
    let mut combined = ParameterStore::new();
    for (name, t) in trainer.model.params.iter() {
        combined.insert(name, Tensor::from_vec(t.to_vec(), t.shape())?);
    }
    for (name, m, v) in trainer.opt.moments() {
        combined.insert(format!("opt.m.{name}"), Tensor::from_vec(m.clone(), &[m.len()])?);
        combined.insert(format!("opt.v.{name}"), Tensor::from_vec(v.clone(), &[v.len()])?);
    }
    combined.save(path)?;
    let meta = CheckpointMeta {
        model: trainer.model.cfg.clone(),
        train: trainer.cfg.clone(),
        adamw: trainer.opt.cfg.clone(),
        step: trainer.step,
        opt_steps: trainer.opt.steps(),
    };
    std::fs::write(path.with_extension("json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

/// Restores a trainer mid-run; continuing from it reproduces the
/// uninterrupted run bitwise.
pub fn load_checkpoint(path: &Path) -> Result<Trainer, TrainError> {
    let meta: CheckpointMeta =
        serde_json::from_slice(&std::fs::read(path.with_extension("json"))?)?;
    let combined = ParameterStore::load(path)?;
    let mut params = ParameterStore::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for (name, t) in combined.iter() {
        if let Some(rest) = name.strip_prefix("opt.m.") {
            m.insert(rest.to_string(), t.to_vec());
        } else if let Some(rest) = name.strip_prefix("opt.v.") {
            v.insert(rest.to_string(), t.to_vec());
        } else {
            params.insert(name, Tensor::from_vec(t.to_vec(), t.shape())?.with_grad());
        }
    }
    let model = Model::from_parts(meta.model.clone(), params)?;
    let opt = AdamW::restore(meta.adamw.clone(), meta.opt_steps, m, v)?;
    Ok(Trainer { model, opt, cfg: meta.train, step: meta.step })
}

/// Loads just the model from a checkpoint, for inference.
pub fn load_model(path: &Path) -> Result<Model, TrainError> {
    Ok(load_checkpoint(path)?.model)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// The operator predicts all scored frames in one forward pass.
    Direct,
    /// The operator predicts one frame at a time, feeding predictions back.
    Rollout,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct FamilyScore {
    pub family: String,
    pub n_samples: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct EvalReport {
    pub rows: Vec<FamilyScore>,
    /// Unweighted mean over families.
    pub average: f64,
}

pub(crate) fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Scores a model on held-out trajectories: each sample's first `t0` frames
/// go in, the next `t_for(family)` frames are compared in physical space.
pub fn evaluate(
    model: &Model,
    datasets: &BTreeMap<Family, Dataset>,
    mcfg: &MetricConfig,
    t0: usize,
    mode: EvalMode,
) -> Result<EvalReport, TrainError> {
    mcfg.validate()?;
    if datasets.is_empty() {
        return Err(TrainError::EmptySplit("evaluation".into()));
    }
    let mut rows = Vec::new();
    for (&family, ds) in datasets {
        if ds.is_empty() {
            return Err(TrainError::EmptySplit(family.name().to_string()));
        }
        if ds.t_total <= t0 {
            return Err(TrainError::Config(format!(
                "{family} has {} frames, nothing left after a {t0}-frame input",
                ds.t_total
            )));
        }
        let t_use = mcfg.t_for(family.name()).min(ds.t_total - t0).min(model.cfg.t_max);
        let mut scores = Vec::with_capacity(ds.len());
        for chunk in (0..ds.len()).collect::<Vec<_>>().chunks(8) {
            let plan = BatchPlan {
                family,
                indices: chunk.to_vec(),
                starts: vec![0; chunk.len()],
            };
            let batch =
                assemble_batch(ds, &plan, t0, t_use, model.cfg.layers_sym_enc > 0)?;
            let pred_phys = match mode {
                EvalMode::Direct => {
                    let stats = window_stats(&batch.window)?;
                    let wn = normalize(&batch.window, &stats)?;
                    let pn = no_grad(|| model.forward(&wn, batch.symbols.as_ref(), t_use, &mut None))?;
                    denormalize(&pn, &stats)?
                }
                EvalMode::Rollout => {
                    model.forward_rollout(&batch.window, batch.symbols.as_ref(), t_use)?
                }
            };
            let truth = batch.target.to_vec();
            let per_sample = relative_l2_batch(
                &pred_phys.to_vec(),
                &truth,
                chunk.len(),
                t_use,
                t_use,
                mcfg.eps,
            )?;
            scores.extend(per_sample);
        }
        let (mean, std) = mean_std(&scores);
        rows.push(FamilyScore { family: family.name().to_string(), n_samples: scores.len(), mean, std });
    }
    let family_means: Vec<f64> = rows.iter().map(|r| r.mean).collect();
    let average = family_means.iter().sum::<f64>() / family_means.len() as f64;
    Ok(EvalReport { rows, average })
}

pub fn render_eval_text(report: &EvalReport) -> String {
    let mut out = String::from(format!(
        "{:<12} {:>9} {:>12} {:>12}\n",
        "family", "samples", "rel_l2_mean", "rel_l2_std"
    ));
    for r in &report.rows {
        out.push_str(&format!(
            "{:<12} {:>9} {:>12.5} {:>12.5}\n",
            r.family, r.n_samples, r.mean, r.std
        ));
    }
    out.push_str(&format!("{:<12} {:>9} {:>12.5}\n", "average", "-", report.average));
    out
}

pub fn render_eval_csv(report: &EvalReport) -> String {
    let mut out = String::from("family,n_samples,rel_l2_mean,rel_l2_std\n");
    for r in &report.rows {
        out.push_str(&format!("{},{},{},{}\n", r.family, r.n_samples, r.mean, r.std));
    }
    let total: usize = report.rows.iter().map(|r| r.n_samples).sum();
    let (_, spread) = mean_std(&report.rows.iter().map(|r| r.mean).collect::<Vec<_>>());
    out.push_str(&format!("average,{},{},{}\n", total, report.average, spread));
    out
}
