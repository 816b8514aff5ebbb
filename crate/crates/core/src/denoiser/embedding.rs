//! Sinusoidal encodings and the treatment/day/timestep conditioning path.

use crate::{Error, Result};

pub const MAX_PERIOD: f64 = 10_000.0;

/// Interleaved `(sin(v / w_i), cos(v / w_i))` pairs with geometric
/// frequencies `w_i` from 1 to 10^4.
pub fn sinusoidal_embed(value: u32, width: usize) -> Result<Vec<f64>> {
    if width == 0 || !width.is_multiple_of(2) {
        return Err(Error::config(
            "model.embed_dim",
            format!("sinusoidal width must be even and positive, got {width}"),
        ));
    }
    let half = width / 2;
    let v = f64::from(value);
    let mut out = Vec::with_capacity(width);
    for i in 0..half {
        let omega = if half == 1 {
            1.0
        } else {
            MAX_PERIOD.powf(i as f64 / (half - 1) as f64)
        };
        let arg = v / omega;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    Ok(out)
}

/// Conditioning vectors fed to the network: `full` (length 4E) for every
/// block outside the bottleneck and `mid` (length E) for the bottleneck.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub full: Vec<f64>,
    pub mid: Vec<f64>,
}

impl Conditioning {
    /// Assembles `[v_f - v_s1, v_f - v_s2, v_f - v_s3, v_f + v_t]` and
    /// `mid = v_f + v_t`.
    pub fn assemble(sources: [&[f64]; 3], target: &[f64], timestep: &[f64]) -> Self {
        let e = target.len();
        let mid: Vec<f64> = target.iter().zip(timestep).map(|(a, b)| a + b).collect();
        let mut full = Vec::with_capacity(4 * e);
        for s in sources {
            full.extend(target.iter().zip(s).map(|(a, b)| a - b));
        }
        full.extend_from_slice(&mid);
        Self { full, mid }
    }

    pub fn embed_dim(&self) -> usize {
        self.mid.len()
    }
}
