//! Ablation harness: trains and scores three architecture/objective
//! variants on identical data and seeds so the comparisons isolate one
//! design choice at a time.

use crate::model::{spec_param_count, Model, ModelConfig};

use super::{
    evaluate, mean_std, EvalMode, MetricConfig, RunSinks, TrainConfig, TrainData, TrainError,
    Trainer,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationVariant {
    /// Full model, trained to emit all target frames in one decode pass.
    Baseline,
    /// Full model, trained on single-step targets and evaluated by feeding
    /// its own predictions back (autoregressive rollout).
    Rollout,
    /// Symbol branch removed; the network is deepened and its feed-forward
    /// width retuned so the parameter count stays within 2% of baseline.
    DataOnly,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 3] =
        [AblationVariant::Baseline, AblationVariant::Rollout, AblationVariant::DataOnly];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Baseline => "baseline",
            AblationVariant::Rollout => "rollout",
            AblationVariant::DataOnly => "data_only",
        }
    }

    pub fn model_config(self, base: &ModelConfig) -> ModelConfig {
        match self {
            AblationVariant::Baseline | AblationVariant::Rollout => base.clone(),
            AblationVariant::DataOnly => data_only_config(base),
        }
    }

    pub fn train_t_out(self, base_t_out: usize) -> usize {
        match self {
            AblationVariant::Rollout => 1,
            _ => base_t_out,
        }
    }

    pub fn eval_mode(self) -> EvalMode {
        match self {
            AblationVariant::Rollout => EvalMode::Rollout,
            _ => EvalMode::Direct,
        }
    }
}

/// Removes the symbol branch and compensates: extra data-encoder and
/// decoder blocks are added while they bring the count closer to the
/// original, then the feed-forward width absorbs the remainder. The result
/// stays within 2% of the base parameter count for the shipped profiles.
pub fn data_only_config(base: &ModelConfig) -> ModelConfig {
    let target = spec_param_count(base) as i64;
    let mut cfg = base.clone();
    cfg.layers_sym_enc = 0;

    let mut add_to_decoder = false;
    loop {
        let current = spec_param_count(&cfg) as i64;
        if current >= target {
            break;
        }
        let mut candidate = cfg.clone();
        if add_to_decoder {
            candidate.layers_decoder += 1;
        } else {
            candidate.layers_data_enc += 1;
        }
        let grown = spec_param_count(&candidate) as i64;
        if grown - target > target - current {
            break; // adding another block overshoots more than it helps
        }
        cfg = candidate;
        add_to_decoder = !add_to_decoder;
    }

    // Each feed-forward unit costs 2·d_model + 1 parameters per block.
    let blocks = (cfg.layers_data_enc + cfg.layers_fusion + cfg.layers_decoder) as i64;
    let per_unit = (2 * cfg.d_model + 1) as i64 * blocks;
    let residual = target - spec_param_count(&cfg) as i64;
    let units = (residual as f64 / per_unit as f64).round() as i64;
    cfg.d_ffn = (cfg.d_ffn as i64 + units).max(8) as usize;
    cfg
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub param_count: usize,
    pub seeds: Vec<u64>,
    /// Per-seed evaluation averages (relative L²).
    pub scores: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

/// Trains each variant from scratch once per seed and scores it on the
/// validation split (train split when no validation data is supplied).
/// Differences are reported, not asserted: at small scale the ordering may
/// legitimately flip.
pub fn run_ablations(
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    data: &TrainData,
    mcfg: &MetricConfig,
    seeds: &[u64],
) -> Result<AblationReport, TrainError> {
    if seeds.is_empty() {
        return Err(TrainError::Config("ablations need at least one seed".into()));
    }
    let mut rows = Vec::with_capacity(AblationVariant::ALL.len());
    for variant in AblationVariant::ALL {
        let model_cfg = variant.model_config(base_model);
        let param_count = spec_param_count(&model_cfg);
        let mut scores = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut tcfg = base_train.clone();
            tcfg.seed = seed;
            tcfg.t_out = variant.train_t_out(base_train.t_out);
            tcfg.eval_every = 0;
            tcfg.early_stop_below = None;
            let model = Model::init(model_cfg.clone(), seed)?;
            let mut trainer = Trainer::new(model, tcfg)?;
            trainer.run(data, &RunSinks::default())?;
            let eval_on = if data.val.is_empty() { &data.train } else { &data.val };
            let report =
                evaluate(&trainer.model, eval_on, mcfg, base_train.t0, variant.eval_mode())?;
            scores.push(report.average);
        }
        let (mean, std) = mean_std(&scores);
        rows.push(AblationRow {
            variant: variant.name().to_string(),
            param_count,
            seeds: seeds.to_vec(),
            scores,
            mean,
            std,
        });
    }
    Ok(AblationReport { rows })
}

pub fn render_ablation_text(report: &AblationReport) -> String {
    let mut out = format!(
        "{:<10} {:>12} {:>12} {:>12} {:>6}\n",
        "variant", "params", "rel_l2_mean", "rel_l2_std", "seeds"
    );
    for r in &report.rows {
        out.push_str(&format!(
            "{:<10} {:>12} {:>12.5} {:>12.5} {:>6}\n",
            r.variant,
            r.param_count,
            r.mean,
            r.std,
            r.seeds.len()
        ));
    }
    out
}

pub fn render_ablation_csv(report: &AblationReport) -> String {
    let mut out = String::from("variant,param_count,rel_l2_mean,rel_l2_std,n_seeds\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.variant,
            r.param_count,
            r.mean,
            r.std,
            r.seeds.len()
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::test_support::{tiny_data, tiny_model_config, tiny_train_config};

    #[test]
    fn data_only_parameter_parity_holds_for_the_shipped_profiles() {
        for base in [ModelConfig::desk(), ModelConfig::paper()] {
            let tuned = data_only_config(&base);
            assert_eq!(tuned.layers_sym_enc, 0);
            let target = spec_param_count(&base) as f64;
            let got = spec_param_count(&tuned) as f64;
            let gap = (got - target).abs() / target;
            assert!(
                gap <= 0.02,
                "data-only variant misses parity: {got} vs {target} ({:.3}%)",
                gap * 100.0
            );
        }
    }

    #[test]
    fn harness_produces_three_rows_with_per_seed_scores() {
        let data = tiny_data(31);
        let mut tcfg = tiny_train_config();
        tcfg.total_steps = 2;
        let mcfg = MetricConfig { t_default: 2, ..MetricConfig::default() };
        let report =
            run_ablations(&tiny_model_config(), &tcfg, &data, &mcfg, &[11, 12]).unwrap();

        assert_eq!(report.rows.len(), 3);
        let names: Vec<&str> = report.rows.iter().map(|r| r.variant.as_str()).collect();
        assert_eq!(names, ["baseline", "rollout", "data_only"]);
        for row in &report.rows {
            assert_eq!(row.scores.len(), 2);
            assert!(row.scores.iter().all(|s| s.is_finite() && *s >= 0.0));
            assert!(row.param_count > 0);
        }
        assert_eq!(report.rows[0].param_count, report.rows[1].param_count);
        let base = report.rows[0].param_count as f64;
        let tuned = report.rows[2].param_count as f64;
        assert!((tuned - base).abs() / base <= 0.02);

        let text = render_ablation_text(&report);
        assert!(text.contains("baseline") && text.contains("data_only"));
        let csv = render_ablation_csv(&report);
        assert_eq!(csv.lines().count(), 4);
        assert!(run_ablations(&tiny_model_config(), &tcfg, &data, &mcfg, &[]).is_err());
    }
}
