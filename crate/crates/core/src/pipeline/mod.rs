//! Experiment drivers shared by the CLI and the acceptance suite: provider
//! construction, caption-to-audio generation, the mel-feature judge and the
//! guidance/step sweep.

mod mixture;

use std::io::Write;
use std::path::Path;

use semvoc_grad::{Array, Checkpoint};

use crate::corpus::{ClipRef, Corpus};
use crate::dsp::MelConfig;
use crate::evalkit::{segment_mel_features, FdFeaturizer, LinearProbe, ProbeConfig};
use crate::flow::{PredictionKind, SamplerConfig};
use crate::latents::{train_toy_mae, LatentEncoder, LatentSeq, MaeConfig, MaeEncoder, MelEncoder, OracleEncoder, Provider};
use crate::textlatent::Dit;
use crate::vocoder::Vocoder;
use crate::{derive_seed, AudioClip, Error, Result};

pub use mixture::{mean_cov_2d, mixture_transport, Mixture2d, MixtureReport};

/// Any of the three latent providers behind one type.
#[derive(Clone, Debug)]
pub enum Encoder {
    Oracle(OracleEncoder),
    Mel(MelEncoder),
    Mae(MaeEncoder),
}

impl Encoder {
    /// Builds the encoder for `provider`. The toy MAE is trained on `train`.
    pub fn fit(provider: Provider, classes: usize, train: &[&AudioClip], seed: u64, mae: &MaeConfig) -> Result<Self> {
        let mel = MelConfig::desk();
        Ok(match provider {
            Provider::SemanticOracle => Encoder::Oracle(OracleEncoder::new(mel, derive_seed(seed, &[0x0a]), classes)?),
            Provider::AcousticMel => Encoder::Mel(MelEncoder { mel }),
            Provider::ToyMae => {
                let cfg = MaeConfig { seed: derive_seed(seed, &[0x3a]), ..mae.clone() };
                Encoder::Mae(train_toy_mae(train, &mel, &cfg)?.0)
            }
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        match self {
            Encoder::Oracle(o) => {
                let mut c = Checkpoint::new();
                c.insert_text("provider", Provider::SemanticOracle.tag());
                c.insert_text("oracle.seed", &o.seed.to_string());
                c.insert_text("oracle.classes", &o.n_classes.to_string());
                c
            }
            Encoder::Mel(_) => {
                let mut c = Checkpoint::new();
                c.insert_text("provider", Provider::AcousticMel.tag());
                c
            }
            Encoder::Mae(m) => m.to_checkpoint(),
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let mel = MelConfig::desk();
        let number = |key: &str| -> Result<u64> {
            c.text(key)?.parse().map_err(|_| Error::Data(format!("`{key}` is not an integer")))
        };
        Ok(match Provider::parse(&c.text("provider")?)? {
            Provider::SemanticOracle => Encoder::Oracle(OracleEncoder::new(mel, number("oracle.seed")?, number("oracle.classes")? as usize)?),
            Provider::AcousticMel => Encoder::Mel(MelEncoder { mel }),
            Provider::ToyMae => Encoder::Mae(MaeEncoder::from_checkpoint(c, mel)?),
        })
    }

    fn inner(&self) -> &dyn LatentEncoder {
        match self {
            Encoder::Oracle(e) => e,
            Encoder::Mel(e) => e,
            Encoder::Mae(e) => e,
        }
    }
}

impl LatentEncoder for Encoder {
    fn provider(&self) -> Provider {
        self.inner().provider()
    }

    fn dim(&self) -> usize {
        self.inner().dim()
    }

    fn frame_rate(&self) -> f64 {
        self.inner().frame_rate()
    }

    fn encode(&self, clip: &AudioClip) -> Result<LatentSeq> {
        self.inner().encode(clip)
    }
}

/// Clips, labels and captions of one corpus split.
#[derive(Clone, Debug)]
pub struct Split<'a> {
    pub clips: Vec<&'a AudioClip>,
    pub labels: Vec<usize>,
    pub captions: Vec<String>,
}

impl<'a> Split<'a> {
    pub fn of(corpus: &'a Corpus, train: bool) -> Self {
        Self::from_refs(corpus.split(train))
    }

    pub fn all(corpus: &'a Corpus) -> Self {
        Self::from_refs(corpus.iter().collect())
    }

    fn from_refs(refs: Vec<ClipRef<'a>>) -> Self {
        Self {
            clips: refs.iter().map(|r| r.clip).collect(),
            labels: refs.iter().map(|r| r.class).collect(),
            captions: refs.iter().map(|r| r.caption.to_string()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }
}

/// Mel spans per clip for the judge's features.
pub const JUDGE_SEGMENTS: usize = 4;

/// Caption-class judge: a linear probe on segment-averaged log-mel of
/// reference audio, applied to generated audio.
#[derive(Clone, Debug)]
pub struct Judge {
    probe: LinearProbe,
    mel: MelConfig,
}

impl Judge {
    pub fn fit(clips: &[&AudioClip], labels: &[usize], classes: usize) -> Result<Self> {
        let mel = MelConfig::desk();
        let feats = clips.iter().map(|c| segment_mel_features(c, &mel, JUDGE_SEGMENTS)).collect::<Result<Vec<_>>>()?;
        let probe = LinearProbe::fit(&feats, labels, classes, &ProbeConfig::default())?;
        Ok(Self { probe, mel })
    }

    pub fn predict(&self, clip: &AudioClip) -> Result<usize> {
        Ok(self.probe.predict(&segment_mel_features(clip, &self.mel, JUDGE_SEGMENTS)?))
    }

    pub fn accuracy(&self, clips: &[&AudioClip], labels: &[usize]) -> Result<f64> {
        if clips.is_empty() || clips.len() != labels.len() {
            return Err(Error::Data(format!("{} clips for {} labels", clips.len(), labels.len())));
        }
        let mut hits = 0;
        for (c, &l) in clips.iter().zip(labels) {
            hits += usize::from(self.predict(c)? == l);
        }
        Ok(hits as f64 / clips.len() as f64)
    }
}

/// Sampling settings for caption-to-audio generation.
#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub cfg_scale: f64,
    pub steps_latent: usize,
    pub steps_wav: usize,
    pub seed: u64,
    /// Captions generated per batch.
    pub chunk: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self { cfg_scale: 3.5, steps_latent: 100, steps_wav: 200, seed: 0, chunk: 16 }
    }
}

impl GenConfig {
    fn latent_sampler(&self, chunk: usize) -> SamplerConfig {
        SamplerConfig {
            guidance_scale: self.cfg_scale,
            ..SamplerConfig::new(self.steps_latent, PredictionKind::Velocity, derive_seed(self.seed, &[1, chunk as u64]))
        }
    }

    fn wav_sampler(&self, chunk: usize) -> SamplerConfig {
        SamplerConfig::new(self.steps_wav, PredictionKind::Data, derive_seed(self.seed, &[2, chunk as u64]))
    }
}

/// Captions to latents with the DiT, then latents to audio with the vocoder.
pub fn generate_audio(dit: &Dit, voc: &Vocoder, captions: &[String], opts: &GenConfig) -> Result<(LatentSeq, Vec<AudioClip>)> {
    if dit.cfg.provider != voc.cfg.provider {
        return Err(Error::Provider(format!(
            "DiT generates `{}` latents but the vocoder was trained on `{}`",
            dit.cfg.provider.tag(),
            voc.cfg.provider.tag()
        )));
    }
    if captions.is_empty() || opts.chunk == 0 {
        return Err(Error::Config("nothing to generate".into()));
    }
    let mut latents = Vec::new();
    let mut audio = Vec::with_capacity(captions.len());
    for (k, part) in captions.chunks(opts.chunk).enumerate() {
        let caps: Vec<&str> = part.iter().map(String::as_str).collect();
        let lat = dit.generate(&caps, &opts.latent_sampler(k))?;
        audio.extend(voc.vocode(&lat, &opts.wav_sampler(k))?);
        latents.push(lat);
    }
    Ok((LatentSeq::stack(&latents)?, audio))
}

/// Vocodes given latents in chunks.
pub fn reconstruct_audio(voc: &Vocoder, latents: &LatentSeq, opts: &GenConfig) -> Result<Vec<AudioClip>> {
    if opts.chunk == 0 {
        return Err(Error::Config("chunk size must be positive".into()));
    }
    let mut audio = Vec::with_capacity(latents.batch());
    let per = latents.dim() * latents.frames();
    for (k, lo) in (0..latents.batch()).step_by(opts.chunk).enumerate() {
        let hi = (lo + opts.chunk).min(latents.batch());
        let data = Array::new(vec![hi - lo, latents.dim(), latents.frames()], latents.data.data()[lo * per..hi * per].to_vec());
        let part = LatentSeq::new(data, latents.frame_rate, latents.provider)?;
        audio.extend(voc.vocode(&part, &opts.wav_sampler(k))?);
    }
    Ok(audio)
}

/// Judge accuracy and Fréchet distance of generated audio against references.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenScore {
    pub accuracy: f64,
    pub fd: f64,
}

pub fn score_audio(judge: &Judge, fd: &FdFeaturizer, generated: &[AudioClip], labels: &[usize], reference: &[&AudioClip]) -> Result<GenScore> {
    let clips: Vec<&AudioClip> = generated.iter().collect();
    Ok(GenScore { accuracy: judge.accuracy(&clips, labels)?, fd: fd.distance(&clips, reference)? })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub cfg_scale: f64,
    pub steps: usize,
    pub fd: f64,
    pub accuracy: f64,
}

/// Everything a sweep needs besides the grids.
pub struct SweepSetup<'a> {
    pub dit: &'a Dit,
    pub voc: &'a Vocoder,
    pub judge: &'a Judge,
    pub fd: &'a FdFeaturizer,
    pub test: &'a Split<'a>,
    pub base: GenConfig,
}

/// One row per `(cfg, steps)` point; `steps` sets the latent sampler.
pub fn sweep(setup: &SweepSetup<'_>, cfg_grid: &[f64], step_grid: &[usize], mut progress: impl FnMut(&SweepRow)) -> Result<Vec<SweepRow>> {
    if cfg_grid.is_empty() || step_grid.is_empty() {
        return Err(Error::Config("sweep grids must be non-empty".into()));
    }
    let mut rows = Vec::with_capacity(cfg_grid.len() * step_grid.len());
    for &cfg_scale in cfg_grid {
        for &steps in step_grid {
            let opts = GenConfig { cfg_scale, steps_latent: steps, ..setup.base.clone() };
            let (_, audio) = generate_audio(setup.dit, setup.voc, &setup.test.captions, &opts)?;
            let s = score_audio(setup.judge, setup.fd, &audio, &setup.test.labels, &setup.test.clips)?;
            let row = SweepRow { cfg_scale, steps, fd: s.fd, accuracy: s.accuracy };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "cfg_scale,steps,fd,accuracy")?;
    for r in rows {
        writeln!(f, "{},{},{:.9},{:.6}", r.cfg_scale, r.steps, r.fd, r.accuracy)?;
    }
    f.flush()?;
    Ok(())
}

/// `step,loss` rows.
pub fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,loss")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(f, "{i},{l:.9e}")?;
    }
    f.flush()?;
    Ok(())
}
