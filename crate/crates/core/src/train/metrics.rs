//! Training loss and the evaluation metric.

use std::collections::BTreeMap;

use crate::tensor::Tensor;

use super::TrainError;

/// Settings for the relative-L² evaluation metric.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricConfig {
    /// Guard added to each frame's reference norm.
    pub eps: f64,
    /// Frames scored per sample unless overridden.
    pub t_default: usize,
    /// Per-family override of the scored horizon (family name → frames).
    pub t_override: BTreeMap<String, usize>,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            eps: 1e-7,
            t_default: 10,
            t_override: BTreeMap::from([("ins_forced".to_string(), 4)]),
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.eps > 0.0) {
            return Err(TrainError::Config("metric eps must be positive".into()));
        }
        if self.t_default == 0 || self.t_override.values().any(|&t| t == 0) {
            return Err(TrainError::Config("metric horizons must be at least 1".into()));
        }
        Ok(())
    }

    /// Scored horizon for a family.
    pub fn t_for(&self, family: &str) -> usize {
        self.t_override.get(family).copied().unwrap_or(self.t_default)
    }
}

/// Mean squared error over the unmasked channels of `[B, T, C, H, W]`
/// tensors, differentiable through `prediction`. `channel_mask[c] = false`
/// removes channel `c` from both the sum and the element count.
pub fn mse_loss(
    prediction: &Tensor,
    target: &Tensor,
    channel_mask: &[bool],
) -> Result<Tensor, TrainError> {
    if prediction.shape() != target.shape() {
        return Err(TrainError::Config(format!(
            "prediction shape {:?} does not match target shape {:?}",
            prediction.shape(),
            target.shape()
        )));
    }
    if prediction.rank() != 5 {
        return Err(TrainError::Config(format!(
            "loss expects [B, T, C, H, W], got rank {}",
            prediction.rank()
        )));
    }
    let [b, t, c, h, w] = [
        prediction.shape()[0],
        prediction.shape()[1],
        prediction.shape()[2],
        prediction.shape()[3],
        prediction.shape()[4],
    ];
    if channel_mask.len() != c {
        return Err(TrainError::Config(format!(
            "channel mask covers {} channels, tensors have {c}",
            channel_mask.len()
        )));
    }
    let live = channel_mask.iter().filter(|&&m| m).count();
    if live == 0 {
        return Err(TrainError::Config("all channels are masked out".into()));
    }
    let diff = prediction.sub(target)?;
    let sq = diff.mul(&diff)?;
    let n = (b * t * live * h * w) as f64;
    if live == c {
        return Ok(sq.sum_all().mul_scalar(1.0 / n));
    }
    let mut mask_values = Vec::with_capacity(c * h * w);
    for &keep in channel_mask {
        mask_values.extend(std::iter::repeat(if keep { 1.0 } else { 0.0 }).take(h * w));
    }
    let mask = Tensor::from_vec(mask_values, &[c, h, w])?;
    Ok(sq.mul(&mask)?.sum_all().mul_scalar(1.0 / n))
}

/// Time-averaged relative L² error between two `[frames, …]` trajectories
/// laid out frame-major: `(1/T) Σ_t ‖pred_t − truth_t‖₂ / (‖truth_t‖₂ + ε)`.
/// Each frame's norm runs jointly over all channels and grid points.
pub fn relative_l2(pred: &[f64], truth: &[f64], frames: usize, eps: f64) -> Result<f64, TrainError> {
    if pred.len() != truth.len() {
        return Err(TrainError::Config(format!(
            "prediction has {} values, truth {}",
            pred.len(),
            truth.len()
        )));
    }
    if frames == 0 || pred.len() % frames != 0 || pred.is_empty() {
        return Err(TrainError::Config(format!(
            "{} values do not split into {frames} frames",
            pred.len()
        )));
    }
    let stride = pred.len() / frames;
    let mut acc = 0.0;
    for t in 0..frames {
        let (p, u) = (&pred[t * stride..(t + 1) * stride], &truth[t * stride..(t + 1) * stride]);
        let num = p.iter().zip(u).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let den = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        acc += num / (den + eps);
    }
    Ok(acc / frames as f64)
}

/// Per-sample relative L² over the first `t_use` frames of batched
/// `[B, T, C, H, W]` data given as flat slices.
pub fn relative_l2_batch(
    pred: &[f64],
    truth: &[f64],
    b: usize,
    t: usize,
    t_use: usize,
    eps: f64,
) -> Result<Vec<f64>, TrainError> {
    if b == 0 || t == 0 || pred.len() != truth.len() || pred.len() % (b * t) != 0 {
        return Err(TrainError::Config("batch metric shapes are inconsistent".into()));
    }
    if t_use == 0 || t_use > t {
        return Err(TrainError::Config(format!("cannot score {t_use} of {t} frames")));
    }
    let per_sample = pred.len() / b;
    let keep = t_use * (per_sample / t);
    (0..b)
        .map(|i| {
            relative_l2(
                &pred[i * per_sample..i * per_sample + keep],
                &truth[i * per_sample..i * per_sample + keep],
                t_use,
                eps,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    #[test]
    fn perfect_prediction_scores_zero() {
        let x = vec![0.3, -1.2, 4.0, 0.0, 2.5, -0.5];
        assert_eq!(relative_l2(&x, &x, 2, 1e-7).unwrap(), 0.0);

        let t = Tensor::from_vec(x, &[1, 2, 3, 1, 1]).unwrap();
        let loss = mse_loss(&t, &t, &[true, true, true]).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn constant_offset_gives_unit_mse() {
        let target = Tensor::from_vec((0..16).map(|i| i as f64 * 0.1).collect(), &[1, 2, 2, 2, 2])
            .unwrap();
        let pred = target.add_scalar(1.0);
        let loss = mse_loss(&pred, &target, &[true, true]).unwrap();
        assert!((loss.item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_channels_are_excluded_from_the_mean() {
        // Channel 1 carries a huge error but is masked off.
        let target = Tensor::zeros(&[1, 1, 2, 2, 2]);
        let mut v = vec![0.5; 8];
        v[4..].iter_mut().for_each(|x| *x = 100.0);
        let pred = Tensor::from_vec(v, &[1, 1, 2, 2, 2]).unwrap();
        let loss = mse_loss(&pred, &target, &[true, false]).unwrap();
        assert!((loss.item() - 0.25).abs() < 1e-12);
        assert!(mse_loss(&pred, &target, &[false, false]).is_err());
    }

    #[test]
    fn mse_gradient_matches_the_analytic_form_and_finite_differences() {
        let mut rng = stream(31, "test/mse");
        let n = 2 * 1 * 3 * 2 * 2;
        let pv: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tv: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pred = Tensor::from_vec(pv.clone(), &[2, 1, 3, 2, 2]).unwrap().with_grad();
        let target = Tensor::from_vec(tv.clone(), &[2, 1, 3, 2, 2]).unwrap();
        let mask = [true, false, true];
        let loss = mse_loss(&pred, &target, &mask).unwrap();
        loss.backward().unwrap();
        let grad = pred.grad().unwrap();

        let n_live = 2 * 1 * 2 * 2 * 2; // two live channels
        let eval = |pv: &[f64]| {
            let p = Tensor::from_vec(pv.to_vec(), &[2, 1, 3, 2, 2]).unwrap();
            mse_loss(&p, &target, &mask).unwrap().item()
        };
        for idx in [0, 5, 9, 13, 23] {
            let channel = (idx / 4) % 3;
            let analytic = if channel == 1 {
                0.0
            } else {
                2.0 * (pv[idx] - tv[idx]) / n_live as f64
            };
            assert!((grad[idx] - analytic).abs() < 1e-12, "analytic grad mismatch at {idx}");
            let h = 1e-5;
            let mut plus = pv.clone();
            plus[idx] += h;
            let mut minus = pv.clone();
            minus[idx] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            assert!(
                (grad[idx] - numeric).abs() <= 1e-6 * (numeric.abs() + 1e-12).max(1.0),
                "fd mismatch at {idx}: {} vs {numeric}",
                grad[idx]
            );
        }
    }

    #[test]
    fn zero_prediction_and_doubled_prediction_score_the_same() {
        let mut rng = stream(7, "test/rel");
        let truth: Vec<f64> = (0..60).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let zeros = vec![0.0; 60];
        let doubled: Vec<f64> = truth.iter().map(|v| 2.0 * v).collect();
        let a = relative_l2(&zeros, &truth, 3, 1e-7).unwrap();
        let b = relative_l2(&doubled, &truth, 3, 1e-7).unwrap();
        assert!((a - 1.0).abs() < 1e-6, "zero prediction should score ≈ 1, got {a}");
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn blend_error_grows_monotonically_with_the_blend_distance() {
        let mut rng = stream(8, "test/blend");
        let truth: Vec<f64> = (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let score = |alpha: f64| {
            let blend: Vec<f64> = truth.iter().map(|v| alpha * v).collect();
            relative_l2(&blend, &truth, 2, 1e-7).unwrap()
        };
        let mut prev = score(1.0);
        for alpha in [0.9, 0.7, 0.2, -0.5] {
            let s = score(alpha);
            assert!(s > prev, "error should grow as alpha leaves 1");
            prev = s;
        }
    }

    #[test]
    fn batch_metric_matches_per_sample_calls_and_horizon_override() {
        let mut rng = stream(9, "test/batch");
        let (b, t, chw) = (3, 4, 5);
        let pred: Vec<f64> = (0..b * t * chw).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let truth: Vec<f64> = (0..b * t * chw).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let scores = relative_l2_batch(&pred, &truth, b, t, 2, 1e-7).unwrap();
        for i in 0..b {
            let lo = i * t * chw;
            let expected =
                relative_l2(&pred[lo..lo + 2 * chw], &truth[lo..lo + 2 * chw], 2, 1e-7).unwrap();
            assert!((scores[i] - expected).abs() < 1e-15);
        }

        let cfg = MetricConfig::default();
        assert_eq!(cfg.t_for("swe"), 10);
        assert_eq!(cfg.t_for("ins_forced"), 4);
        cfg.validate().unwrap();
    }
}
