//! Latent providers: a seeded semantic oracle, raw log-mel frames, and a
//! toy masked autoencoder.
//!
//! Every provider emits `(B, D, T)` at the frame rate of the mel plan
//! (`sample_rate / hop_max`), so the vocoder does not care which one it gets.

mod mae;
mod oracle;

use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use semvoc_grad::{Array, Checkpoint};
use serde::{Deserialize, Serialize};

pub use mae::{train_toy_mae, MaeConfig, MaeEncoder, MaeTrainReport};
pub use oracle::{MelEncoder, OracleEncoder, CLASS_DIM, PROJ_DIM};

use crate::{rng_from, AudioClip, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provider {
    SemanticOracle,
    AcousticMel,
    ToyMae,
}

impl Provider {
    pub fn tag(self) -> &'static str {
        match self {
            Provider::SemanticOracle => "semantic-oracle",
            Provider::AcousticMel => "acoustic-mel",
            Provider::ToyMae => "toy-mae",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "semantic-oracle" | "oracle" => Ok(Provider::SemanticOracle),
            "acoustic-mel" | "mel" => Ok(Provider::AcousticMel),
            "toy-mae" | "mae" => Ok(Provider::ToyMae),
            other => Err(Error::Config(format!("unknown latent provider `{other}`"))),
        }
    }
}

/// `(B, D, T)` latents with their frame rate and provider.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSeq {
    pub data: Array,
    pub frame_rate: f64,
    pub provider: Provider,
}

impl LatentSeq {
    pub fn new(data: Array, frame_rate: f64, provider: Provider) -> Result<Self> {
        if data.rank() != 3 {
            return Err(Error::Shape(format!("latents must be (B, D, T), got {:?}", data.shape())));
        }
        if !data.is_finite() {
            return Err(Error::Numeric("latents contain non-finite values".into()));
        }
        Ok(Self { data, frame_rate, provider })
    }

    pub fn batch(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[2]
    }

    /// Row `i` as a batch of one.
    pub fn item(&self, i: usize) -> LatentSeq {
        let per = self.dim() * self.frames();
        let data = Array::new(vec![1, self.dim(), self.frames()], self.data.data()[i * per..(i + 1) * per].to_vec());
        LatentSeq { data, frame_rate: self.frame_rate, provider: self.provider }
    }

    /// Concatenates along the batch axis; all parts must agree on provider and shape.
    pub fn stack(parts: &[LatentSeq]) -> Result<LatentSeq> {
        let first = parts.first().ok_or_else(|| Error::Data("no latents to stack".into()))?;
        let mut data = Vec::new();
        let mut b = 0;
        for p in parts {
            if p.provider != first.provider {
                return Err(Error::Provider(format!("cannot mix {} and {} latents", first.provider.tag(), p.provider.tag())));
            }
            if p.dim() != first.dim() || p.frames() != first.frames() || p.frame_rate != first.frame_rate {
                return Err(Error::Shape("latent sequences differ in dimension, length or rate".into()));
            }
            data.extend_from_slice(p.data.data());
            b += p.batch();
        }
        LatentSeq::new(Array::new(vec![b, first.dim(), first.frames()], data), first.frame_rate, first.provider)
    }

    /// Time-averaged `(B, D)` features.
    pub fn mean_pooled(&self) -> Vec<Vec<f64>> {
        let (d, t) = (self.dim(), self.frames());
        self.data
            .data()
            .chunks(d * t)
            .map(|clip| clip.chunks(t).map(|row| row.iter().sum::<f64>() / t as f64).collect())
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert_array("latents", &self.data);
        c.insert_scalar("frame_rate", self.frame_rate);
        c.insert_text("provider", self.provider.tag());
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let provider = Provider::parse(&c.text("provider")?)?;
        LatentSeq::new(c.array("latents")?, c.scalar("frame_rate")?, provider)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

pub trait LatentEncoder {
    fn provider(&self) -> Provider;
    fn dim(&self) -> usize;
    fn frame_rate(&self) -> f64;
    /// Latents for one clip, batch of one.
    fn encode(&self, clip: &AudioClip) -> Result<LatentSeq>;

    fn encode_all(&self, clips: &[&AudioClip]) -> Result<LatentSeq> {
        let parts = clips.iter().map(|c| self.encode(c)).collect::<Result<Vec<_>>>()?;
        LatentSeq::stack(&parts)
    }
}

/// `(rows, cols)` matrix with orthonormal columns (rows >= cols) or rows
/// (rows < cols), from a seeded Gaussian draw.
pub fn orthonormal(rows: usize, cols: usize, seed: u64) -> Array {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let mut rng = rng_from(seed, &[0x0a7e]);
    let g = DMatrix::<f64>::from_fn(tall, short, |_, _| rng.sample(StandardNormal));
    let q = g.qr().q();
    if rows >= cols {
        Array::from_fn(&[rows, cols], |i| q[(i / cols, i % cols)])
    } else {
        Array::from_fn(&[rows, cols], |i| q[(i % cols, i / cols)])
    }
}

/// Centered moving average along the last axis of `(D, T)`, truncated at the edges.
pub fn moving_average(x: &Array, width: usize) -> Array {
    let (d, t) = (x.shape()[0], x.shape()[1]);
    let half = width / 2;
    Array::from_fn(&[d, t], |i| {
        let (r, c) = (i / t, i % t);
        let lo = c.saturating_sub(half);
        let hi = (c + half + 1).min(t);
        x.data()[r * t + lo..r * t + hi].iter().sum::<f64>() / (hi - lo) as f64
    })
}
