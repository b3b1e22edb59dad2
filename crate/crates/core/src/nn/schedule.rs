//! Cosine-decay learning rate schedule with warm restarts.

use crate::error::{Error, Result};

/// Cosine decay from `lr_max` to `lr_min` over a cycle; at each cycle end
/// the rate restarts at `lr_max` and the cycle length grows by
/// `restart_multiplier`.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub cycle_length: u64,
    pub restart_multiplier: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            lr_max: 0.1,
            lr_min: 1e-5,
            cycle_length: 100,
            restart_multiplier: 2.0,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_max > 0.0 && self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::param(
                "lr",
                format!("need 0 < lr_min <= lr_max, got {} / {}", self.lr_min, self.lr_max),
            ));
        }
        if self.cycle_length == 0 {
            return Err(Error::param("cycle_length", "must be positive"));
        }
        if self.restart_multiplier < 1.0 {
            return Err(Error::param("restart_multiplier", "must be >= 1"));
        }
        Ok(())
    }
}

/// Learning rate at global step `t`.
///
/// Within a cycle of length L the rate follows
/// `lr_min + 0.5*(lr_max-lr_min)*(1+cos(pi*t_in/L))`, so position 0 yields
/// exactly `lr_max` and position L exactly `lr_min`; the next step starts
/// the following (stretched) cycle back at `lr_max`.
pub fn lr_at(schedule: &LrSchedule, step: u64) -> f64 {
    let mut t = step;
    let mut len = schedule.cycle_length.max(1);
    loop {
        if t <= len {
            if t == 0 {
                return schedule.lr_max;
            }
            if t == len {
                return schedule.lr_min;
            }
            let frac = t as f64 / len as f64;
            return schedule.lr_min
                + 0.5 * (schedule.lr_max - schedule.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos());
        }
        t -= len + 1;
        len = ((len as f64 * schedule.restart_multiplier).round() as u64).max(1);
    }
}

/// Steps at which the schedule sits exactly at `lr_min` (cycle ends),
/// up to and including `max_step`.
pub fn min_lr_steps(schedule: &LrSchedule, max_step: u64) -> Vec<u64> {
    let mut out = Vec::new();
    let mut len = schedule.cycle_length.max(1);
    let mut boundary = len;
    while boundary <= max_step {
        out.push(boundary);
        len = ((len as f64 * schedule.restart_multiplier).round() as u64).max(1);
        boundary += len + 1;
    }
    out
}
