//! A flow-matching vocoder driven by semantic latents, a toy text-to-latent
//! diffusion transformer, and the evaluation harness around both.
//!
//! Everything runs on the `f64` tape from [`semvoc_grad`]. Stages communicate
//! through [`latents::LatentSeq`] and checkpoint files, so the vocoder and the
//! latent generator can be trained and swapped independently.

pub mod corpus;
pub mod dsp;
mod error;
pub mod evalkit;
pub mod flow;
pub mod gradcheck;
pub mod latents;
pub mod layers;
pub mod pipeline;
mod seed;
pub mod textlatent;
pub mod vocoder;

pub use error::{Error, Result};
pub use seed::{derive_seed, rng_from};
pub use semvoc_grad as grad;

/// Mono waveform with its sample rate and, for corpus clips, a class index.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub label: Option<usize>,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self { samples, sample_rate, label: None }
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}
