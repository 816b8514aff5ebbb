//! Synthetic longitudinal lesion cases with treatment-dependent growth.
//!
//! Each case has a fixed smoothed-noise "anatomy" per channel and an
//! elliptical lesion whose radius evolves piecewise-linearly in time:
//! the rate applied over the interval ending at a session is the growth
//! rate of that session's treatment. Sessions are treated with CRT up to a
//! per-case switch point and with TMZ afterwards.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{zscore_normalize, BinaryMask, LongitudinalCase, Session};
use crate::denoiser::Treatment;
use crate::diffusion::{ImageTensor, Shape};
use crate::rng::{child_seed, normal_vec, seeded};
use crate::{Error, Result};

/// Radius change in pixels per day, per treatment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrowthRates {
    pub crt: f64,
    pub tmz: f64,
}

impl GrowthRates {
    pub fn rate(&self, t: Treatment) -> f64 {
        match t {
            Treatment::Crt => self.crt,
            Treatment::Tmz => self.tmz,
        }
    }
}

impl Default for GrowthRates {
    fn default() -> Self {
        Self {
            crt: -0.04,
            tmz: 0.04,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_cases: usize,
    pub seed: u64,
    pub grid: usize,
    pub sessions_min: usize,
    pub sessions_max: usize,
    pub day_gap_min: u32,
    pub day_gap_max: u32,
    pub radius_min: f64,
    pub radius_max: f64,
    pub growth: GrowthRates,
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_cases: 8,
            seed: 0,
            grid: 64,
            sessions_min: 3,
            sessions_max: 6,
            day_gap_min: 20,
            day_gap_max: 60,
            radius_min: 7.0,
            radius_max: 11.0,
            growth: GrowthRates::default(),
            noise: 0.05,
        }
    }
}

impl SynthConfig {
    pub const CHANNELS: usize = 3;

    pub fn validate(&self) -> Result<()> {
        if self.grid < 16 || !self.grid.is_power_of_two() {
            return Err(Error::config("data.grid", "must be a power of two >= 16"));
        }
        if self.sessions_min < 2 {
            return Err(Error::config("data.sessions_min", "must be at least 2"));
        }
        if self.sessions_max < self.sessions_min {
            return Err(Error::config("data.sessions_max", "must be >= data.sessions_min"));
        }
        if self.day_gap_min == 0 || self.day_gap_max < self.day_gap_min {
            return Err(Error::config(
                "data.day_gap_min",
                "gaps must satisfy 1 <= day_gap_min <= day_gap_max",
            ));
        }
        if !(self.radius_min >= 0.0 && self.radius_max >= self.radius_min) {
            return Err(Error::config(
                "data.radius_min",
                "radii must satisfy 0 <= radius_min <= radius_max",
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("data.noise", "must be finite and >= 0"));
        }
        if !(self.growth.crt.is_finite() && self.growth.tmz.is_finite()) {
            return Err(Error::config("data.growth", "rates must be finite"));
        }
        Ok(())
    }
}

/// Lesion radius at every session: `r[i] = max(0, r[i-1] + rate(treat[i]) * (day[i] - day[i-1]))`.
pub fn radius_trajectory(r0: f64, schedule: &[(Treatment, u32)], rates: &GrowthRates) -> Vec<f64> {
    let mut out = Vec::with_capacity(schedule.len());
    let mut r = r0.max(0.0);
    for (i, &(treat, day)) in schedule.iter().enumerate() {
        if i > 0 {
            let dt = f64::from(day - schedule[i - 1].1);
            r = (r + rates.rate(treat) * dt).max(0.0);
        }
        out.push(r);
    }
    out
}

fn box_blur(field: &mut [f64], n: usize, radius: usize) {
    let mut tmp = vec![0.0; field.len()];
    for y in 0..n {
        for x in 0..n {
            let lo = x.saturating_sub(radius);
            let hi = (x + radius).min(n - 1);
            let s: f64 = (lo..=hi).map(|xx| field[y * n + xx]).sum();
            tmp[y * n + x] = s / (hi - lo + 1) as f64;
        }
    }
    for y in 0..n {
        for x in 0..n {
            let lo = y.saturating_sub(radius);
            let hi = (y + radius).min(n - 1);
            let s: f64 = (lo..=hi).map(|yy| tmp[yy * n + x]).sum();
            field[y * n + x] = s / (hi - lo + 1) as f64;
        }
    }
}

fn smoothed_field(rng: &mut crate::rng::Rng, n: usize, std: f64) -> Vec<f64> {
    let mut f = normal_vec(rng, n * n);
    box_blur(&mut f, n, 3);
    box_blur(&mut f, n, 3);
    let m = f.iter().sum::<f64>() / f.len() as f64;
    let s = (f.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / f.len() as f64).sqrt();
    f.iter().map(|v| (v - m) / s.max(1e-12) * std).collect()
}

const BASE: [f64; 3] = [1.0, 0.8, 0.5];
const ANATOMY_STD: f64 = 0.3;

/// Generates a case with raw (un-normalized) intensities.
pub fn generate_raw_case(cfg: &SynthConfig, case_seed: u64) -> Result<LongitudinalCase> {
    cfg.validate()?;
    let mut rng = seeded(child_seed(cfg.seed, case_seed));
    let n = cfg.grid;
    let len = rng.random_range(cfg.sessions_min..=cfg.sessions_max);

    let mut days = Vec::with_capacity(len);
    let mut day = 0u32;
    for i in 0..len {
        if i > 0 {
            day += rng.random_range(cfg.day_gap_min..=cfg.day_gap_max);
        }
        days.push(day);
    }
    let switch = rng.random_range(1..=len);
    let schedule: Vec<(Treatment, u32)> = days
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let t = if i < switch {
                Treatment::Crt
            } else {
                Treatment::Tmz
            };
            (t, d)
        })
        .collect();

    let r0 = if cfg.radius_max > cfg.radius_min {
        rng.random_range(cfg.radius_min..=cfg.radius_max)
    } else {
        cfg.radius_min
    };
    let radii = radius_trajectory(r0, &schedule, &cfg.growth);

    let half = n as f64 / 2.0;
    let jitter = n as f64 / 10.0;
    let cx = half + rng.random_range(-jitter..=jitter);
    let cy = half + rng.random_range(-jitter..=jitter);
    let aspect: f64 = rng.random_range(0.8..=1.25);
    let (ax, ay) = (1.0 / aspect.sqrt(), aspect.sqrt());

    let anatomy: Vec<Vec<f64>> = (0..SynthConfig::CHANNELS)
        .map(|_| smoothed_field(&mut rng, n, ANATOMY_STD))
        .collect();

    let shape = Shape::new(SynthConfig::CHANNELS, n, n);
    let plane = n * n;
    let mut sessions = Vec::with_capacity(len);
    for (i, &(treatment, day)) in schedule.iter().enumerate() {
        let r = radii[i];
        let noise = normal_vec(&mut rng, shape.len());
        let mut img = vec![0.0; shape.len()];
        let mut mask = vec![0u8; plane];
        for y in 0..n {
            for x in 0..n {
                let p = y * n + x;
                let dx = (x as f64 + 0.5 - cx) * ax;
                let dy = (y as f64 + 0.5 - cy) * ay;
                let e = (dx * dx + dy * dy).sqrt();
                let inside = r > 0.0 && e <= r;
                // Signed distance to the lesion boundary, negative inside.
                let d = e - r;
                let (mut t1, mut t1c, mut flair) = (0.0, 0.0, 0.0);
                if inside {
                    mask[p] = 1;
                    t1 -= 1.0;
                    flair += 1.5;
                    if d >= -2.0 {
                        t1c += 2.0;
                    } else {
                        t1c -= 0.3;
                    }
                } else if r > 0.0 && d <= 4.0 {
                    flair += (-d / 1.5).exp();
                }
                let lesion = [t1, t1c, flair];
                for c in 0..SynthConfig::CHANNELS {
                    let k = c * plane + p;
                    img[k] = BASE[c] + anatomy[c][p] + lesion[c] + cfg.noise * noise[k];
                }
            }
        }
        sessions.push(Session {
            image: ImageTensor::new(shape, img)?,
            mask: BinaryMask::new(n, n, mask)?,
            treatment,
            day,
        });
    }
    LongitudinalCase::new(format!("{case_seed:03}"), sessions)
}

/// Generates a case and z-scores every session image per channel.
pub fn generate_synthetic_case(cfg: &SynthConfig, case_seed: u64) -> Result<LongitudinalCase> {
    let raw = generate_raw_case(cfg, case_seed)?;
    let sessions = raw
        .sessions
        .into_iter()
        .map(|s| Session {
            image: zscore_normalize(&s.image),
            ..s
        })
        .collect();
    Ok(LongitudinalCase {
        case_id: raw.case_id,
        sessions,
    })
}
