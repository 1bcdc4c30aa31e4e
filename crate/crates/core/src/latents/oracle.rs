use rand::Rng;
use rand_distr::StandardNormal;
use semvoc_grad::Array;

use super::{moving_average, orthonormal, LatentEncoder, LatentSeq, Provider};
use crate::dsp::{mel, MelConfig};
use crate::{rng_from, AudioClip, Error, Result};

pub const PROJ_DIM: usize = 48;
pub const CLASS_DIM: usize = 16;
const SMOOTH: usize = 5;

/// Stand-in semantic encoder: smoothed random projection of log-mel frames
/// plus a fixed per-class code.
#[derive(Clone, Debug)]
pub struct OracleEncoder {
    pub mel: MelConfig,
    pub seed: u64,
    pub n_classes: usize,
    proj: Array,
    class_codes: Vec<Vec<f64>>,
}

impl OracleEncoder {
    pub fn new(mel: MelConfig, seed: u64, n_classes: usize) -> Result<Self> {
        mel.validate()?;
        let proj = orthonormal(PROJ_DIM, mel.n_mels, seed);
        let mut rng = rng_from(seed, &[0xc1a5]);
        let class_codes = (0..n_classes)
            .map(|_| {
                let v: Vec<f64> = (0..CLASS_DIM).map(|_| rng.sample(StandardNormal)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / n).collect()
            })
            .collect();
        Ok(Self { mel, seed, n_classes, proj, class_codes })
    }

    pub fn class_code(&self, class: usize) -> &[f64] {
        &self.class_codes[class]
    }
}

impl LatentEncoder for OracleEncoder {
    fn provider(&self) -> Provider {
        Provider::SemanticOracle
    }

    fn dim(&self) -> usize {
        PROJ_DIM + CLASS_DIM
    }

    fn frame_rate(&self) -> f64 {
        self.mel.plan.sample_rate() as f64 / self.mel.plan.hop() as f64
    }

    fn encode(&self, clip: &AudioClip) -> Result<LatentSeq> {
        if clip.sample_rate != self.mel.plan.sample_rate() {
            return Err(Error::Config(format!("clip at {} Hz, encoder expects {}", clip.sample_rate, self.mel.plan.sample_rate())));
        }
        let m = mel(&clip.samples, &self.mel)?;
        let (n_mels, t) = (m.shape()[0], m.shape()[1]);
        let mut projected = vec![0.0; PROJ_DIM * t];
        for d in 0..PROJ_DIM {
            let row = &self.proj.data()[d * n_mels..(d + 1) * n_mels];
            for (k, &w) in row.iter().enumerate() {
                for (o, &v) in projected[d * t..(d + 1) * t].iter_mut().zip(&m.data()[k * t..(k + 1) * t]) {
                    *o += w * v;
                }
            }
        }
        let smoothed = moving_average(&Array::new(vec![PROJ_DIM, t], projected), SMOOTH);
        let rms = (smoothed.data().iter().map(|v| v * v).sum::<f64>() / smoothed.numel() as f64).sqrt();
        let mut data = smoothed.into_data();
        match clip.label {
            Some(c) if c < self.n_classes => {
                for &v in &self.class_codes[c] {
                    data.extend(std::iter::repeat_n(v * rms, t));
                }
            }
            Some(c) => return Err(Error::Data(format!("class {c} outside the oracle's {} classes", self.n_classes))),
            None => data.extend(std::iter::repeat_n(0.0, CLASS_DIM * t)),
        }
        LatentSeq::new(Array::new(vec![1, PROJ_DIM + CLASS_DIM, t], data), self.frame_rate(), Provider::SemanticOracle)
    }
}

/// Log-mel frames used directly as acoustic latents.
#[derive(Clone, Debug)]
pub struct MelEncoder {
    pub mel: MelConfig,
}

impl LatentEncoder for MelEncoder {
    fn provider(&self) -> Provider {
        Provider::AcousticMel
    }

    fn dim(&self) -> usize {
        self.mel.n_mels
    }

    fn frame_rate(&self) -> f64 {
        self.mel.plan.sample_rate() as f64 / self.mel.plan.hop() as f64
    }

    fn encode(&self, clip: &AudioClip) -> Result<LatentSeq> {
        let m = mel(&clip.samples, &self.mel)?;
        let s = m.shape().to_vec();
        LatentSeq::new(m.reshape(&[1, s[0], s[1]]), self.frame_rate(), Provider::AcousticMel)
    }
}
