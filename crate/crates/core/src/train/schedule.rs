//! Warmup–stable–decay learning-rate schedule: a linear ramp from zero to
//! the peak, a constant plateau, and a linear ramp back to zero.

use super::TrainError;

/// Learning rate at `step` of a `total`-step run. The ramp occupies the
/// first `warmup_frac` of the run and the decay the final `decay_frac`.
pub fn wsd_schedule(
    step: usize,
    total: usize,
    peak: f64,
    warmup_frac: f64,
    decay_frac: f64,
) -> Result<f64, TrainError> {
    if total == 0 || step >= total {
        return Err(TrainError::Config(format!("step {step} outside a {total}-step run")));
    }
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(TrainError::Config(format!("peak learning rate {peak} must be positive")));
    }
    if !(0.0..1.0).contains(&warmup_frac)
        || !(0.0..1.0).contains(&decay_frac)
        || warmup_frac + decay_frac >= 1.0
    {
        return Err(TrainError::Config(format!(
            "warmup {warmup_frac} and decay {decay_frac} fractions must be in [0, 1) and sum below 1"
        )));
    }
    let warmup_steps = (total as f64 * warmup_frac).round() as usize;
    let decay_steps = (total as f64 * decay_frac).round() as usize;
    if step < warmup_steps {
        Ok(peak * step as f64 / warmup_steps as f64)
    } else if step >= total - decay_steps {
        Ok(peak * (total - step) as f64 / decay_steps as f64)
    } else {
        Ok(peak)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOTAL: usize = 160_000; // 40 epochs × 4,000 steps
    const PEAK: f64 = 1e-4;

    #[test]
    fn reference_run_hits_the_documented_values() {
        let lr = |s| wsd_schedule(s, TOTAL, PEAK, 0.1, 0.2).unwrap();
        assert_eq!(lr(16_000), 1e-4); // warmup ends
        assert!((lr(8_000) - 5e-5).abs() < 1e-18); // warmup midpoint
        assert_eq!(lr(0), 0.0);
        assert_eq!(lr(100_000), 1e-4); // plateau
        assert_eq!(lr(128_000), 1e-4); // decay starts here, still at peak
        let last = lr(TOTAL - 1);
        assert!(last > 0.0 && last <= PEAK / 16_000.0 + 1e-18, "final lr {last}");
    }

    #[test]
    fn the_schedule_is_continuous_step_to_step() {
        let warmup_steps = 16_000.0;
        let max_jump = PEAK / warmup_steps + 1e-15;
        let check = |s: usize| {
            let a = wsd_schedule(s, TOTAL, PEAK, 0.1, 0.2).unwrap();
            let b = wsd_schedule(s + 1, TOTAL, PEAK, 0.1, 0.2).unwrap();
            assert!((b - a).abs() <= max_jump, "jump {} at step {s}", (b - a).abs());
        };
        for boundary in [0usize, 15_999, 16_000, 127_999, 128_000, TOTAL - 2] {
            check(boundary);
        }
        for s in (0..TOTAL - 1).step_by(997) {
            check(s);
        }
    }

    #[test]
    fn out_of_range_and_bad_fractions_are_rejected() {
        assert!(wsd_schedule(TOTAL, TOTAL, PEAK, 0.1, 0.2).is_err());
        assert!(wsd_schedule(0, 0, PEAK, 0.1, 0.2).is_err());
        assert!(wsd_schedule(0, 100, PEAK, 0.6, 0.5).is_err());
        assert!(wsd_schedule(0, 100, -1.0, 0.1, 0.2).is_err());
    }

    #[test]
    fn zero_warmup_starts_at_peak() {
        assert_eq!(wsd_schedule(0, 100, 1.0, 0.0, 0.2).unwrap(), 1.0);
        assert_eq!(wsd_schedule(79, 100, 1.0, 0.0, 0.2).unwrap(), 1.0);
        assert_eq!(wsd_schedule(99, 100, 1.0, 0.0, 0.2).unwrap(), 0.05);
    }
}
