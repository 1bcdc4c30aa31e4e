//! Per-frame loss weights from waveform energy.

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyWeighting {
    pub gamma: f64,
    pub w_min: f64,
    pub w_max: f64,
}

impl Default for EnergyWeighting {
    fn default() -> Self {
        Self { gamma: 0.5, w_min: 0.1, w_max: 10.0 }
    }
}

/// One weight per `hop`-sample frame (the last frame may be short), with
/// mean 1. Frame `i` covers samples `[i*hop, (i+1)*hop)`.
pub fn frame_energy(wave: &[f64], hop: usize, cfg: EnergyWeighting) -> Result<Vec<f64>> {
    if wave.is_empty() || hop == 0 {
        return Err(Error::Signal("frame_energy needs a non-empty waveform and positive hop".into()));
    }
    let energies: Vec<f64> = wave
        .chunks(hop)
        .map(|c| c.iter().map(|v| v * v).sum::<f64>() / c.len() as f64)
        .collect();
    let n = energies.len() as f64;
    let mean = energies.iter().sum::<f64>() / n;
    if mean <= 0.0 {
        return Ok(vec![1.0; energies.len()]);
    }
    let mut w: Vec<f64> = energies
        .iter()
        .map(|e| (e / mean).powf(cfg.gamma).clamp(cfg.w_min, cfg.w_max))
        .collect();
    let wm = w.iter().sum::<f64>() / n;
    w.iter_mut().for_each(|v| *v /= wm);
    Ok(w)
}
