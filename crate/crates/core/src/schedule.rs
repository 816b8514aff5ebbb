//! Linear variance schedule and the coefficient tables derived from it.
//!
//! Step indices are 1-based: `t` ranges over `1..=T`, and `alpha_bar(0)` is
//! defined as 1 so that the posterior at `t = 1` collapses onto `x0`.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("schedule.T", "must be at least 1"));
        }
        if !(self.beta_start > 0.0 && self.beta_start < 1.0) {
            return Err(Error::config("schedule.beta_start", "must lie in (0, 1)"));
        }
        if !(self.beta_end > 0.0 && self.beta_end < 1.0) {
            return Err(Error::config("schedule.beta_end", "must lie in (0, 1)"));
        }
        if self.beta_end < self.beta_start {
            return Err(Error::config(
                "schedule.beta_end",
                "must be >= schedule.beta_start",
            ));
        }
        Ok(())
    }
}

/// Immutable per-step coefficient tables.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleTable {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta_tilde: Vec<f64>,
}

pub fn build_schedule(cfg: &ScheduleConfig) -> Result<ScheduleTable> {
    cfg.validate()?;
    let n = cfg.steps;
    let beta: Vec<f64> = if n == 1 {
        vec![cfg.beta_start]
    } else {
        let span = cfg.beta_end - cfg.beta_start;
        (0..n)
            .map(|i| {
                if i == n - 1 {
                    cfg.beta_end
                } else {
                    cfg.beta_start + i as f64 * span / (n - 1) as f64
                }
            })
            .collect()
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(n);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    let beta_tilde = (0..n)
        .map(|i| {
            let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
            (1.0 - prev) / (1.0 - alpha_bar[i]) * beta[i]
        })
        .collect();
    Ok(ScheduleTable {
        beta,
        alpha,
        alpha_bar,
        beta_tilde,
    })
}

impl ScheduleTable {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn idx(&self, t: usize) -> usize {
        assert!(
            (1..=self.steps()).contains(&t),
            "step {t} outside 1..={}",
            self.steps()
        );
        t - 1
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if (1..=self.steps()).contains(&t) {
            Ok(())
        } else {
            Err(Error::Argument(format!(
                "diffusion step {t} outside 1..={}",
                self.steps()
            )))
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[self.idx(t)]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[self.idx(t)]
    }

    /// Cumulative product of `alpha` up to `t`; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[self.idx(t)]
        }
    }

    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta_tilde[self.idx(t)]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// Normalizer for the mask fusion weights: the sum of `alpha_bar` over the
/// last `fusion_steps` reverse steps (`t = 1..=fusion_steps`).
pub fn mask_fusion_gamma(table: &ScheduleTable, fusion_steps: usize) -> Result<f64> {
    if fusion_steps == 0 || fusion_steps > table.steps() {
        return Err(Error::Argument(format!(
            "mask fusion steps {fusion_steps} outside 1..={}",
            table.steps()
        )));
    }
    Ok((1..=fusion_steps).map(|t| table.alpha_bar(t)).sum())
}
