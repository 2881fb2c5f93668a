use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default endpoints of the linear schedule.
pub const LINEAR_START: f64 = 1e-3;
pub const LINEAR_END: f64 = 0.999;
/// Levels are capped here so `sqrt(1 - level)` never vanishes.
pub const MAX_LEVEL: f64 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::invalid("kind", format!("unknown schedule kind `{other}`"))),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::Cosine => "cosine",
        })
    }
}

/// Noise level per timestep. `levels[t]` is the cumulative fraction of noise
/// variance in `x_t`, so `x_t = sqrt(1 - level) * x0 + sqrt(level) * eps`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    levels: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(num_steps: usize, kind: ScheduleKind) -> Result<Self> {
        match kind {
            ScheduleKind::Linear => Self::linear(num_steps, LINEAR_START, LINEAR_END),
            ScheduleKind::Cosine => Self::cosine(num_steps),
        }
    }

    pub fn linear(num_steps: usize, start: f64, end: f64) -> Result<Self> {
        check_steps(num_steps)?;
        let levels = if num_steps == 1 {
            vec![start]
        } else {
            let span = (num_steps - 1) as f64;
            (0..num_steps).map(|i| start + (end - start) * i as f64 / span).collect()
        };
        Self::from_levels(levels)
    }

    /// Cosine schedule on the signal fraction, offset `s = 0.008`.
    pub fn cosine(num_steps: usize) -> Result<Self> {
        check_steps(num_steps)?;
        let s = 0.008;
        let f = |u: f64| ((u + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let f0 = f(0.0);
        let levels = (0..num_steps)
            .map(|i| {
                let u = (i + 1) as f64 / num_steps as f64;
                (1.0 - f(u) / f0).clamp(0.0, MAX_LEVEL)
            })
            .collect();
        Self::from_levels(levels)
    }

    pub fn from_levels(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::invalid("num_steps", "must be at least 1"));
        }
        if levels.iter().any(|l| !l.is_finite() || !(0.0..=1.0).contains(l)) {
            return Err(Error::invalid("levels", "every level must lie in [0, 1]"));
        }
        if levels.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("levels", "levels must be non-decreasing"));
        }
        Ok(Self { levels })
    }

    pub fn num_steps(&self) -> usize {
        self.levels.len()
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn level(&self, t: usize) -> Result<f64> {
        self.levels
            .get(t)
            .copied()
            .ok_or(Error::TimestepOutOfRange { t, num_steps: self.levels.len() })
    }

    /// `steps` timesteps spread over the schedule, highest first.
    pub fn sampling_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let n = self.num_steps();
        if steps == 0 || steps > n {
            return Err(Error::invalid("steps", format!("must be in 1..={n}, got {steps}")));
        }
        if steps == 1 {
            return Ok(vec![n - 1]);
        }
        Ok((0..steps).rev().map(|i| i * (n - 1) / (steps - 1)).collect())
    }
}

fn check_steps(num_steps: usize) -> Result<()> {
    if num_steps == 0 {
        Err(Error::invalid("num_steps", "must be at least 1"))
    } else {
        Ok(())
    }
}

/// String-keyed constructor used by the config layer.
pub fn make_noise_schedule(num_steps: usize, kind: &str) -> Result<NoiseSchedule> {
    NoiseSchedule::new(num_steps, kind.parse()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_schedule_is_in_range() {
        let s = make_noise_schedule(1, "linear").unwrap();
        assert_eq!(s.num_steps(), 1);
        assert!((0.0..=1.0).contains(&s.levels()[0]));
    }

    #[test]
    fn linear_is_strictly_increasing() {
        let s = make_noise_schedule(10, "linear").unwrap();
        assert!(s.levels().windows(2).all(|w| w[1] > w[0]));
        assert!(s.levels()[0] < 0.01 && s.levels()[9] > 0.99);
    }

    #[test]
    fn linear_with_explicit_endpoints() {
        // (0.9 - 0.1) / 3 spacing.
        let s = NoiseSchedule::linear(4, 0.1, 0.9).unwrap();
        let expected = [0.1, 0.366_666_666_7, 0.633_333_333_3, 0.9];
        for (a, b) in s.levels().iter().zip(expected) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn cosine_endpoints_and_monotonicity() {
        let s = make_noise_schedule(50, "cosine").unwrap();
        assert!(s.levels()[0] < 0.01);
        assert!(s.levels()[49] > 0.99 && s.levels()[49] <= 1.0);
        assert!(s.levels().windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(make_noise_schedule(0, "linear").is_err());
        assert!(make_noise_schedule(5, "quadratic").is_err());
        assert!(NoiseSchedule::from_levels(vec![0.5, 0.4]).is_err());
        assert!(NoiseSchedule::from_levels(vec![0.5, 1.2]).is_err());
    }

    #[test]
    fn sampling_timesteps_descend_and_cover_ends() {
        let s = make_noise_schedule(50, "linear").unwrap();
        let ts = s.sampling_timesteps(7).unwrap();
        assert_eq!(ts.first(), Some(&49));
        assert_eq!(ts.last(), Some(&0));
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(s.sampling_timesteps(50).unwrap().len(), 50);
        assert!(s.sampling_timesteps(51).is_err());
        assert!(s.sampling_timesteps(0).is_err());
    }
}
