//! One-cycle learning-rate schedule: cosine rise from max_lr/start_div to
//! max_lr over the warmup fraction, then cosine decay to max_lr/final_div.
//! The three anchors (start, peak, end) are hit exactly, not approximately;
//! callers rely on that for reproducibility checks.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct OneCycleSchedule {
    pub max_lr: f64,
    pub total_steps: u64,
    pub warmup_frac: f64,
    pub start_div: f64,
    pub final_div: f64,
}

impl OneCycleSchedule {
    pub fn new(
        max_lr: f64,
        total_steps: u64,
        warmup_frac: f64,
        start_div: f64,
        final_div: f64,
    ) -> Result<Self> {
        if max_lr <= 0.0 {
            return Err(Error::Param(format!("max_lr must be > 0, got {max_lr}")));
        }
        if total_steps == 0 {
            return Err(Error::Param("total_steps must be >= 1".into()));
        }
        if !(warmup_frac > 0.0 && warmup_frac < 1.0) {
            return Err(Error::Param(format!(
                "warmup_frac must lie strictly in (0, 1), got {warmup_frac}"
            )));
        }
        if start_div < 1.0 || final_div < 1.0 {
            return Err(Error::Param(format!(
                "start_div/final_div must be >= 1, got {start_div}/{final_div}"
            )));
        }
        let sched = OneCycleSchedule {
            max_lr,
            total_steps,
            warmup_frac,
            start_div,
            final_div,
        };
        if sched.warmup_steps() == 0 || sched.warmup_steps() >= total_steps {
            return Err(Error::Param(format!(
                "warmup of {} steps degenerate for {} total steps",
                sched.warmup_steps(),
                total_steps
            )));
        }
        Ok(sched)
    }

    /// Warmup boundary in whole steps.
    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_frac * self.total_steps as f64).round() as u64
    }

    /// Learning rate for a 0-based step index. Steps at or past total_steps
    /// clamp to the final value.
    pub fn lr(&self, step: u64) -> f64 {
        let start = self.max_lr / self.start_div;
        let fin = self.max_lr / self.final_div;
        let w = self.warmup_steps();
        if step == 0 {
            return start;
        }
        if step == w {
            return self.max_lr;
        }
        if step >= self.total_steps {
            return fin;
        }
        if step < w {
            let frac = step as f64 / w as f64;
            start + (self.max_lr - start) * 0.5 * (1.0 - (std::f64::consts::PI * frac).cos())
        } else {
            let frac = (step - w) as f64 / (self.total_steps - w) as f64;
            fin + (self.max_lr - fin) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    }
}

/// Free-function form of `OneCycleSchedule::lr`.
pub fn onecycle_lr(schedule: &OneCycleSchedule, step: u64) -> f64 {
    schedule.lr(step)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> OneCycleSchedule {
        OneCycleSchedule::new(1e-3, 1000, 0.1, 25.0, 1e4).unwrap()
    }

    #[test]
    fn anchors_are_exact() {
        let s = sched();
        assert_eq!(s.lr(0), 1e-3 / 25.0);
        assert_eq!(s.lr(s.warmup_steps()), 1e-3);
        assert_eq!(s.lr(1000), 1e-3 / 1e4);
    }

    #[test]
    fn clamps_past_the_end() {
        let s = sched();
        assert_eq!(s.lr(5000), s.lr(1000));
    }

    #[test]
    fn monotone_up_then_down() {
        let s = sched();
        let w = s.warmup_steps();
        for step in 1..=w {
            assert!(
                s.lr(step) >= s.lr(step - 1),
                "warmup not monotone at step {step}"
            );
        }
        for step in (w + 1)..=1000 {
            assert!(
                s.lr(step) <= s.lr(step - 1),
                "decay not monotone at step {step}"
            );
        }
    }

    #[test]
    fn peak_is_the_maximum() {
        let s = sched();
        let peak = s.lr(s.warmup_steps());
        for step in 0..=1000 {
            assert!(s.lr(step) <= peak + 1e-18);
        }
    }

    #[test]
    fn rejects_degenerate_configs() {
        assert!(OneCycleSchedule::new(0.0, 100, 0.1, 25.0, 1e4).is_err());
        assert!(OneCycleSchedule::new(1e-3, 0, 0.1, 25.0, 1e4).is_err());
        assert!(OneCycleSchedule::new(1e-3, 100, 0.0, 25.0, 1e4).is_err());
        assert!(OneCycleSchedule::new(1e-3, 100, 1.0, 25.0, 1e4).is_err());
        assert!(OneCycleSchedule::new(1e-3, 100, 0.1, 0.5, 1e4).is_err());
        // warmup rounds to zero steps
        assert!(OneCycleSchedule::new(1e-3, 2, 0.1, 25.0, 1e4).is_err());
    }
}
