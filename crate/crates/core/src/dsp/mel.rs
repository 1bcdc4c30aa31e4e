//! HTK-scale triangular mel filterbank and log-mel frames.

use semvoc_grad::Array;

use super::stft::{stft, StftPlan};
use crate::{Error, Result};

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MelConfig {
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub plan: StftPlan,
    pub eps: f64,
}

impl MelConfig {
    /// 40 bands over 0..4 kHz on a 400-point plan at 8 kHz (hop 100).
    pub fn desk() -> Self {
        Self {
            n_mels: 40,
            f_min: 0.0,
            f_max: 4000.0,
            plan: StftPlan::new(100, 8000).expect("static plan"),
            eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nyquist = self.plan.sample_rate() as f64 / 2.0;
        if self.f_max > nyquist {
            return Err(Error::Config(format!("mel f_max {} Hz exceeds Nyquist {nyquist} Hz", self.f_max)));
        }
        if self.n_mels == 0 || self.f_min < 0.0 || self.f_min >= self.f_max || self.eps <= 0.0 {
            return Err(Error::Config(format!(
                "mel config needs n_mels > 0, 0 <= f_min < f_max and eps > 0 (got {}, {}, {}, {})",
                self.n_mels, self.f_min, self.f_max, self.eps
            )));
        }
        Ok(())
    }

    /// Band center frequencies in Hz.
    pub fn centers(&self) -> Vec<f64> {
        let points = self.edges();
        points[1..=self.n_mels].to_vec()
    }

    fn edges(&self) -> Vec<f64> {
        let (lo, hi) = (hz_to_mel(self.f_min), hz_to_mel(self.f_max));
        (0..self.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (self.n_mels + 1) as f64))
            .collect()
    }

    /// `(n_mels, bins)` filterbank with unit-peak triangles.
    pub fn filterbank(&self) -> Array {
        let bins = self.plan.bins();
        let edges = self.edges();
        let bin_hz = self.plan.sample_rate() as f64 / self.plan.fft_size() as f64;
        Array::from_fn(&[self.n_mels, bins], |idx| {
            let (m, k) = (idx / bins, idx % bins);
            let f = k as f64 * bin_hz;
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            let up = (f - l) / (c - l);
            let down = (r - f) / (r - c);
            up.min(down).max(0.0)
        })
    }
}

/// Log-mel frames `(n_mels, T)`: `log(eps + fb . |STFT|)`.
pub fn mel(signal: &[f64], cfg: &MelConfig) -> Result<Array> {
    cfg.validate()?;
    let spec = stft(signal, &cfg.plan)?;
    let mag = spec.magnitude();
    let fb = cfg.filterbank();
    Ok(log_mel_from_magnitude(&fb, &mag, spec.frames, cfg.eps))
}

pub fn log_mel_from_magnitude(fb: &Array, mag: &[f64], frames: usize, eps: f64) -> Array {
    let (n_mels, bins) = (fb.shape()[0], fb.shape()[1]);
    let mut out = vec![0.0; n_mels * frames];
    for m in 0..n_mels {
        let row = &fb.data()[m * bins..(m + 1) * bins];
        let dst = &mut out[m * frames..(m + 1) * frames];
        for (k, &w) in row.iter().enumerate() {
            if w != 0.0 {
                for (d, &v) in dst.iter_mut().zip(&mag[k * frames..(k + 1) * frames]) {
                    *d += w * v;
                }
            }
        }
    }
    out.iter_mut().for_each(|v| *v = (eps + *v).ln());
    Array::new(vec![n_mels, frames], out)
}
