//! Flag definitions. Every argument struct serializes to the flat
//! `key = value` form that `--config` reads back.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use semvoc::latents::Provider;

#[derive(Debug, Parser)]
#[command(name = "semvoc", version, about = "Semantic-latent vocoder pipeline at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic labelled corpus to WAV plus a JSONL manifest.
    SynthData(SynthArgs),
    /// Fit a latent provider and write train/test latents.
    Encode(EncodeArgs),
    /// Train the flow-matching vocoder (or the regression baseline).
    TrainVocoder(TrainVocoderArgs),
    /// Train the caption-conditioned latent DiT.
    TrainDit(TrainDitArgs),
    /// Caption to latents to waveform.
    Sample(SampleArgs),
    /// Latent file to waveform.
    Vocode(VocodeArgs),
    /// Score generation or reconstruction on the test split.
    Eval(EvalArgs),
    /// Linear-probe accuracy of a latent provider over several split seeds.
    Probe(ProbeArgs),
    /// 2-D PCA of mean-pooled latents with class-centroid separation.
    Project(ProjectArgs),
    /// Guidance-scale by sampling-step grid of generation metrics.
    Sweep(SweepArgs),
    /// Finite-difference checks of every differentiable op and both tiny models.
    GradCheck(GradCheckArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SynthData(_) => "synth-data",
            Command::Encode(_) => "encode",
            Command::TrainVocoder(_) => "train-vocoder",
            Command::TrainDit(_) => "train-dit",
            Command::Sample(_) => "sample",
            Command::Vocode(_) => "vocode",
            Command::Eval(_) => "eval",
            Command::Probe(_) => "probe",
            Command::Project(_) => "project",
            Command::Sweep(_) => "sweep",
            Command::GradCheck(_) => "grad-check",
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Common {
    /// Root of the artifact tree (corpus/, ckpt/, gen/, reports/).
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderArg {
    Oracle,
    Mel,
    Mae,
}

impl From<ProviderArg> for Provider {
    fn from(p: ProviderArg) -> Self {
        match p {
            ProviderArg::Oracle => Provider::SemanticOracle,
            ProviderArg::Mel => Provider::AcousticMel,
            ProviderArg::Mae => Provider::ToyMae,
        }
    }
}

/// `smoke` is a minimal network at the desk frame rate, for quick checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
    Smoke,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Flow,
    Regression,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 50)]
    pub clips_per_class: usize,
    #[arg(long, default_value_t = 1.6)]
    pub clip_seconds: f64,
    #[arg(long, default_value_t = 8000)]
    pub sample_rate: u32,
    #[arg(long, default_value_t = 30.0)]
    pub snr_db: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EncodeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Corpus directory; defaults to `<out-dir>/corpus`.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ProviderArg::Oracle)]
    pub provider: ProviderArg,
    /// Training steps of the toy MAE (ignored by other providers).
    #[arg(long, default_value_t = 2000)]
    pub mae_steps: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainVocoderArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub encode: EncodeArgs,
    #[arg(long, value_enum, default_value_t = Profile::Desk)]
    pub profile: Profile,
    #[arg(long, value_enum, default_value_t = ModeArg::Flow)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 20_000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    /// Random crops of this many latent frames; 0 trains on whole clips.
    #[arg(long, default_value_t = 0)]
    pub segment_frames: usize,
    #[arg(long, default_value_t = 1000)]
    pub log_every: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainDitArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Latent directory written by `encode` or `train-vocoder`.
    #[arg(long)]
    pub latents: PathBuf,
    #[arg(long, value_enum, default_value_t = Profile::Desk)]
    pub profile: Profile,
    #[arg(long, default_value_t = 0.1)]
    pub drop_prob: f64,
    #[arg(long, default_value_t = 20_000)]
    pub steps: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 1000)]
    pub log_every: usize,
}

/// Sampling flags shared by caption-driven commands.
#[derive(Debug, Clone, Args, Serialize)]
pub struct GenArgs {
    #[arg(long)]
    pub dit: PathBuf,
    #[arg(long)]
    pub voc: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub steps_latent: usize,
    #[arg(long, default_value_t = 200)]
    pub steps_wav: usize,
    #[arg(long, default_value_t = 3.5)]
    pub cfg: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SampleArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    pub caption: String,
    #[command(flatten)]
    #[serde(flatten)]
    pub sampling: GenArgs,
    /// Output WAV; defaults to `<out-dir>/gen/sample-<caption>.wav`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct VocodeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    pub latents: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    /// Output WAV; a batch of n writes `<stem>-<i>.wav`. Defaults to `<out-dir>/gen/vocoded.wav`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub voc: PathBuf,
    /// With a DiT, scores caption-to-audio generation; without one,
    /// reconstruction of the test latents in `--latents`.
    #[arg(long)]
    pub dit: Option<PathBuf>,
    #[arg(long)]
    pub latents: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub steps_latent: usize,
    #[arg(long, default_value_t = 200)]
    pub steps_wav: usize,
    #[arg(long, default_value_t = 3.5)]
    pub cfg: f64,
    /// Report name under reports/ and gen/; defaults to the checkpoint stem.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ProbeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub encode: EncodeArgs,
    /// Split seeds `seed, seed + 1, ...`.
    #[arg(long, default_value_t = 3)]
    pub split_seeds: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ProjectArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub encode: EncodeArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub dit: PathBuf,
    #[arg(long)]
    pub voc: PathBuf,
    /// Comma-separated guidance scales.
    #[arg(long, default_value = "1,2,3.5,5")]
    pub cfg_grid: String,
    /// Comma-separated latent sampling steps.
    #[arg(long, default_value = "10,25,50,100")]
    pub step_grid: String,
    #[arg(long, default_value_t = 200)]
    pub steps_wav: usize,
    /// Output CSV; defaults to `<out-dir>/reports/sweep.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GradCheckArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}
