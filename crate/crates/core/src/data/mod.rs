//! Longitudinal cases, normalization, slice eligibility and on-disk layout.

mod case_io;
mod synth;
pub mod tgv;

pub use case_io::{case_dir_name, list_case_dirs, load_case, load_cases, write_case, Manifest, SessionEntry};
pub use synth::{
    generate_raw_case, generate_synthetic_case, radius_trajectory, GrowthRates, SynthConfig,
};
pub use tgv::{load_tgv, save_tgv, TgvArray, TgvData};

use crate::denoiser::Treatment;
use crate::diffusion::{ImageTensor, Shape};
use crate::{Error, Result};

/// Binary `H x W` lesion mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Argument(format!(
                "mask length {} does not match {height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Argument("mask values must be 0 or 1".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    /// Thresholds probabilities with `p > tau`.
    pub fn from_probabilities(height: usize, width: usize, probs: &[f64], tau: f64) -> Result<Self> {
        Self::new(
            height,
            width,
            probs.iter().map(|&p| u8::from(p > tau)).collect(),
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn area(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub image: ImageTensor,
    pub mask: BinaryMask,
    pub treatment: Treatment,
    pub day: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalCase {
    pub case_id: String,
    pub sessions: Vec<Session>,
}

impl LongitudinalCase {
    pub fn new(case_id: String, sessions: Vec<Session>) -> Result<Self> {
        let case = Self { case_id, sessions };
        case.validate()?;
        Ok(case)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |r: String| Error::Data(format!("case {}: {r}", self.case_id));
        if self.sessions.len() < 2 {
            return Err(bad(format!(
                "needs at least 2 sessions, has {}",
                self.sessions.len()
            )));
        }
        let shape = self.shape();
        for (i, s) in self.sessions.iter().enumerate() {
            if s.image.shape() != shape {
                return Err(bad(format!("session {i} image shape differs")));
            }
            if s.mask.height() != shape.height || s.mask.width() != shape.width {
                return Err(bad(format!("session {i} mask shape differs")));
            }
            if i > 0 && s.day <= self.sessions[i - 1].day {
                return Err(bad(format!("session days not strictly increasing at {i}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    pub fn shape(&self) -> Shape {
        self.sessions[0].image.shape()
    }

    pub fn normalized(&self) -> Self {
        Self {
            case_id: self.case_id.clone(),
            sessions: self
                .sessions
                .iter()
                .map(|s| Session {
                    image: zscore_normalize(&s.image),
                    ..s.clone()
                })
                .collect(),
        }
    }
}

/// Per-channel z-score; constant channels map to zeros.
pub fn zscore_normalize(image: &ImageTensor) -> ImageTensor {
    let shape = image.shape();
    let plane = shape.plane();
    let mut out = image.clone();
    for chunk in out.data_mut().chunks_mut(plane) {
        let n = chunk.len() as f64;
        let mean = chunk.iter().sum::<f64>() / n;
        let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if std <= 1e-12 * mean.abs().max(1.0) {
            chunk.iter_mut().for_each(|v| *v = 0.0);
        } else {
            chunk.iter_mut().for_each(|v| *v = (*v - mean) / std);
        }
    }
    out
}

/// Sessions usable as prediction targets: indices (0-based) whose mask area
/// is at least `min_area_px`. Synthetic cases are single-slice, so each
/// eligible session contributes exactly one slice.
pub fn eligible_slices(case: &LongitudinalCase, min_area_px: usize) -> Vec<usize> {
    case.sessions
        .iter()
        .enumerate()
        .filter(|(_, s)| s.mask.area() >= min_area_px)
        .map(|(i, _)| i)
        .collect()
}
