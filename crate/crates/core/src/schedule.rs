//! Learning-rate schedules for pathway gradient descent.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::pathway::string_serde;

/// Text form: `fixed:1e-3`, `step:1e-2:0.1:3` (initial, factor, every),
/// `cosine:1e-2:1e-5` (start, end).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Fixed(f64),
    StepDecay { initial: f64, factor: f64, every: usize },
    Cosine { start: f64, end: f64 },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::Cosine {
            start: 1e-2,
            end: 1e-5,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        let ok = match *self {
            LrSchedule::Fixed(lr) => positive(lr),
            LrSchedule::StepDecay {
                initial,
                factor,
                every,
            } => positive(initial) && positive(factor) && every >= 1,
            LrSchedule::Cosine { start, end } => positive(start) && positive(end),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidSpec(format!("invalid learning-rate schedule {self}")))
        }
    }

    /// Learning rate at step `t` of `total` (0-based).
    pub fn lr_at(&self, t: usize, total: usize) -> Result<f64> {
        if total < 1 {
            return Err(Error::InvalidSpec("schedule needs at least one step".into()));
        }
        if t >= total {
            return Err(Error::InvalidSpec(format!("step {t} outside schedule of {total}")));
        }
        Ok(match *self {
            LrSchedule::Fixed(lr) => lr,
            LrSchedule::StepDecay {
                initial,
                factor,
                every,
            } => initial * factor.powi((t / every) as i32),
            LrSchedule::Cosine { start, end } => {
                if total == 1 {
                    start
                } else {
                    let phase = std::f64::consts::PI * t as f64 / (total - 1) as f64;
                    end + 0.5 * (start - end) * (1.0 + phase.cos())
                }
            }
        })
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LrSchedule::Fixed(lr) => write!(f, "fixed:{lr:e}"),
            LrSchedule::StepDecay {
                initial,
                factor,
                every,
            } => write!(f, "step:{initial:e}:{factor}:{every}"),
            LrSchedule::Cosine { start, end } => write!(f, "cosine:{start:e}:{end:e}"),
        }
    }
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidSpec(format!("bad learning-rate schedule {s:?}"));
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |i: usize| -> Result<f64> { parts.get(i).and_then(|p| p.parse().ok()).ok_or_else(bad) };
        let sched = match (parts[0], parts.len()) {
            ("fixed", 2) => LrSchedule::Fixed(num(1)?),
            ("step", 4) => LrSchedule::StepDecay {
                initial: num(1)?,
                factor: num(2)?,
                every: parts[3].parse().map_err(|_| bad())?,
            },
            ("cosine", 3) => LrSchedule::Cosine {
                start: num(1)?,
                end: num(2)?,
            },
            _ => return Err(bad()),
        };
        sched.validate()?;
        Ok(sched)
    }
}

string_serde!(LrSchedule);
