//! Flow-matching vocoder: a latent conditioner feeding parallel STFT-resolution
//! ConvNeXt branches whose iSTFT outputs are averaged into a waveform.
//!
//! The flow state is the waveform. Each branch re-analyzes `x_t` with its own
//! STFT, predicts complex coefficients, and inverts them on the tape.

use std::sync::Arc;

use rand::Rng;
use semvoc_grad::nn::{layer_norm, sinusoidal_embedding, Conv1d, Init, Linear};
use semvoc_grad::{AdamWConfig, Array, Checkpoint, OptState, ParamId, ParamStore, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::dsp::{frame_energy, stft, EnergyWeighting, IrfftFrames, StftPlan};
use crate::flow::{euler_from, fm_data_loss, gaussian, path_from_noise, PredictionKind, SamplerConfig};
use crate::latents::{LatentSeq, Provider};
use crate::{rng_from, AudioClip, Error, Result};

const NORM_EPS: f64 = 1e-6;
/// Timesteps are scaled before the sinusoidal encoding so that `t` in
/// `[0, 1]` spans many periods of the fastest frequency.
const TIME_SCALE: f64 = 1000.0;
const DW_KERNEL: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    BiasNorm,
    LayerNorm,
}

/// `Flow` is the flow-matching vocoder. `Regression` is the feed-forward
/// baseline: same network, zero input, fixed `t = 0`, one pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocoderMode {
    Flow,
    Regression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocoderConfig {
    pub hops: Vec<usize>,
    pub widths: Vec<usize>,
    pub blocks: usize,
    pub cond_width: usize,
    pub cond_blocks: usize,
    pub time_dim: usize,
    pub time_hidden: usize,
    pub latent_dim: usize,
    pub sample_rate: u32,
    pub provider: Provider,
    pub norm: NormKind,
    pub mode: VocoderMode,
    pub seed: u64,
}

impl VocoderConfig {
    pub fn desk(provider: Provider, latent_dim: usize, seed: u64) -> Self {
        Self {
            hops: vec![100, 50, 25],
            widths: vec![96, 64, 48],
            blocks: 4,
            cond_width: 64,
            cond_blocks: 4,
            time_dim: 64,
            time_hidden: 128,
            latent_dim,
            sample_rate: 8000,
            provider,
            norm: NormKind::BiasNorm,
            mode: VocoderMode::Flow,
            seed,
        }
    }

    /// Full-size shapes at 24 kHz.
    pub fn paper(provider: Provider, latent_dim: usize, seed: u64) -> Self {
        Self {
            hops: vec![320, 160, 80],
            widths: vec![768, 512, 384],
            blocks: 8,
            cond_width: 512,
            cond_blocks: 4,
            time_dim: 256,
            time_hidden: 512,
            sample_rate: 24000,
            ..Self::desk(provider, latent_dim, seed)
        }
    }

    /// One small branch, for gradient checks.
    pub fn tiny(provider: Provider, latent_dim: usize, seed: u64) -> Self {
        Self {
            hops: vec![8],
            widths: vec![6],
            blocks: 2,
            cond_width: 5,
            cond_blocks: 1,
            time_dim: 4,
            time_hidden: 6,
            ..Self::desk(provider, latent_dim, seed)
        }
    }

    pub fn hop_max(&self) -> usize {
        self.hops.iter().copied().max().unwrap_or(0)
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop_max() as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.hops.is_empty() || self.hops.len() != self.widths.len() {
            return Err(Error::Config(format!("{} hops but {} branch widths", self.hops.len(), self.widths.len())));
        }
        let hm = self.hop_max();
        if let Some(h) = self.hops.iter().find(|&&h| h == 0 || hm % h != 0) {
            return Err(Error::Config(format!("hop {h} does not divide the largest hop {hm}")));
        }
        if self.widths.contains(&0) || self.blocks == 0 || self.cond_width == 0 || self.latent_dim == 0 {
            return Err(Error::Config("vocoder widths, block count and latent dim must be positive".into()));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::Config(format!("time embedding dim {} must be even", self.time_dim)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ConvNeXt {
    dw: Conv1d,
    pw1: Conv1d,
    alpha: ParamId,
    pw2: Conv1d,
}

impl ConvNeXt {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, c: usize) -> Self {
        Self {
            dw: Conv1d::new(store, init, &format!("{name}.dw"), c, c, DW_KERNEL, c, true),
            pw1: Conv1d::new(store, init, &format!("{name}.pw1"), c, 2 * c, 1, 1, true),
            alpha: store.add(format!("{name}.prelu"), Array::full(&[2 * c], 0.25)),
            pw2: Conv1d::new(store, init, &format!("{name}.pw2"), 2 * c, c, 1, 1, true),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.dw.forward(tape, store, x);
        let h = self.pw1.forward(tape, store, h);
        let a = tape.param(store, self.alpha);
        let h = tape.prelu(h, a);
        let h = self.pw2.forward(tape, store, h);
        tape.add(x, h)
    }
}

#[derive(Clone, Debug)]
struct ChannelNorm {
    kind: NormKind,
    /// BiasNorm bias `(C)` and log-scale `(1)`.
    params: Option<(ParamId, ParamId)>,
}

impl ChannelNorm {
    fn new(store: &mut ParamStore, name: &str, c: usize, kind: NormKind) -> Self {
        let params = (kind == NormKind::BiasNorm).then(|| {
            (store.add(format!("{name}.bias"), Array::zeros(&[c])), store.add(format!("{name}.log_scale"), Array::zeros(&[1])))
        });
        Self { kind, params }
    }

    /// Normalizes `(B, C, T)` over the channel axis.
    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        match (self.kind, self.params) {
            (NormKind::BiasNorm, Some((bias, log_scale))) => {
                let s = tape.shape(x).to_vec();
                let b = tape.param(store, bias);
                let b = tape.expand(b, 0, s[0]);
                let b = tape.expand(b, 2, s[2]);
                let centered = tape.sub(x, b);
                let rms = tape.rms_axis(centered, 1, NORM_EPS);
                let rms = tape.expand(rms, 1, s[1]);
                let y = tape.div(x, rms);
                let g = tape.param(store, log_scale);
                let g = tape.exp(g);
                tape.mul_scalar(y, g)
            }
            _ => layer_norm(tape, x, 1, NORM_EPS),
        }
    }
}

#[derive(Clone, Debug)]
struct Conditioner {
    proj: Conv1d,
    norm: ChannelNorm,
    blocks: Vec<ConvNeXt>,
}

#[derive(Clone, Debug)]
struct Branch {
    plan: StftPlan,
    irfft: Arc<IrfftFrames>,
    width: usize,
    /// Latent frames are repeated this many times to reach the branch frame rate.
    factor: usize,
    embed: Conv1d,
    time1: Linear,
    time2: Linear,
    latent: Vec<Conv1d>,
    blocks: Vec<ConvNeXt>,
    head: Conv1d,
}

impl Branch {
    fn forward(&self, tape: &mut Tape, store: &ParamStore, x_t: &Array, t_enc: Var, cond: Var) -> Result<Var> {
        let (b, len) = (x_t.shape()[0], x_t.shape()[1]);
        let frames = self.plan.frames(len);
        let bins = self.plan.bins();
        let mut coef = Vec::with_capacity(b * 2 * bins * frames);
        for row in x_t.data().chunks(len) {
            coef.extend(stft(row, &self.plan)?.to_channels().into_data());
        }
        let x = tape.constant(Array::new(vec![b, 2 * bins, frames], coef));
        let mut h = self.embed.forward(tape, store, x);
        let te = self.time1.forward(tape, store, t_enc);
        let te = tape.gelu(te);
        let te = self.time2.forward(tape, store, te);
        let c = self.width;
        for (j, (blk, lat)) in self.blocks.iter().zip(&self.latent).enumerate() {
            let tj = tape.slice(te, 1, j * c, c);
            let tj = tape.add_scalar(tj, 1.0);
            let tj = tape.expand(tj, 2, frames);
            h = tape.mul(h, tj);
            let l = lat.forward(tape, store, cond);
            let l = tape.upsample_nearest(l, self.factor);
            h = tape.add(h, l);
            h = blk.forward(tape, store, h);
        }
        let h = layer_norm(tape, h, 1, NORM_EPS);
        let coef = self.head.forward(tape, store, h);
        let frames_out = tape.custom(coef, self.irfft.clone());
        Ok(tape.overlap_add(frames_out, Arc::new(self.plan.ola_plan(len))))
    }
}

#[derive(Clone, Debug)]
pub struct Vocoder {
    pub cfg: VocoderConfig,
    pub store: ParamStore,
    cond: Conditioner,
    branches: Vec<Branch>,
}

impl Vocoder {
    pub fn new(cfg: VocoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(cfg.seed);
        let dc = cfg.cond_width;
        let cond = Conditioner {
            proj: Conv1d::new(&mut store, &mut init, "cond.proj", cfg.latent_dim, dc, 3, 1, true),
            norm: ChannelNorm::new(&mut store, "cond.norm", dc, cfg.norm),
            blocks: (0..cfg.cond_blocks)
                .map(|i| ConvNeXt::new(&mut store, &mut init, &format!("cond.block{i}"), dc))
                .collect(),
        };
        let hm = cfg.hop_max();
        let mut branches = Vec::with_capacity(cfg.hops.len());
        for (r, (&hop, &c)) in cfg.hops.iter().zip(&cfg.widths).enumerate() {
            let plan = StftPlan::new(hop, cfg.sample_rate)?;
            let k2 = 2 * plan.bins();
            let name = format!("branch{r}");
            branches.push(Branch {
                irfft: Arc::new(IrfftFrames::new(plan.clone())),
                plan,
                width: c,
                factor: hm / hop,
                embed: Conv1d::new(&mut store, &mut init, &format!("{name}.embed"), k2, c, 1, 1, true),
                time1: Linear::new(&mut store, &mut init, &format!("{name}.time1"), cfg.time_dim, cfg.time_hidden, true),
                time2: Linear::new(&mut store, &mut init, &format!("{name}.time2"), cfg.time_hidden, cfg.blocks * c, true),
                latent: (0..cfg.blocks)
                    .map(|j| Conv1d::zeros(&mut store, &format!("{name}.latent{j}"), dc, c, 1, true))
                    .collect(),
                blocks: (0..cfg.blocks)
                    .map(|j| ConvNeXt::new(&mut store, &mut init, &format!("{name}.block{j}"), c))
                    .collect(),
                head: Conv1d::zeros(&mut store, &format!("{name}.head"), c, k2, 1, true),
            });
        }
        Ok(Self { cfg, store, cond, branches })
    }

    fn check_latents(&self, latents: &LatentSeq) -> Result<()> {
        if latents.provider != self.cfg.provider {
            return Err(Error::Provider(format!(
                "latents come from `{}` but the vocoder was built for `{}`",
                latents.provider.tag(),
                self.cfg.provider.tag()
            )));
        }
        if (latents.frame_rate - self.cfg.frame_rate()).abs() > 1e-9 {
            return Err(Error::Provider(format!(
                "latent frame rate {} does not match the vocoder's {}",
                latents.frame_rate,
                self.cfg.frame_rate()
            )));
        }
        if latents.dim() != self.cfg.latent_dim {
            return Err(Error::Shape(format!("latents have {} channels, vocoder expects {}", latents.dim(), self.cfg.latent_dim)));
        }
        Ok(())
    }

    /// Conditioner output `(B, D', T)` for `(B, D, T)` latents.
    pub fn condition(&self, tape: &mut Tape, latents: &Array) -> Result<Var> {
        let s = latents.shape();
        if s.len() != 3 || s[1] != self.cfg.latent_dim {
            return Err(Error::Shape(format!("conditioner expects (B, {}, T), got {s:?}", self.cfg.latent_dim)));
        }
        let x = tape.constant(latents.clone());
        let h = self.cond.proj.forward(tape, &self.store, x);
        let mut h = self.cond.norm.forward(tape, &self.store, h);
        for blk in &self.cond.blocks {
            h = blk.forward(tape, &self.store, h);
        }
        Ok(h)
    }

    /// Per-branch waveforms `(B, L)` before averaging.
    pub fn predict_branches(&self, tape: &mut Tape, x_t: &Array, t: &[f64], cond: Var) -> Result<Vec<Var>> {
        let s = x_t.shape().to_vec();
        let cs = tape.shape(cond).to_vec();
        let hm = self.cfg.hop_max();
        if s.len() != 2 || t.len() != s[0] {
            return Err(Error::Shape(format!("x_t {s:?} needs one timestep per row, got {}", t.len())));
        }
        if s[1] % hm != 0 || cs.len() != 3 || cs[0] != s[0] || cs[1] != self.cfg.cond_width || cs[2] * hm != s[1] {
            return Err(Error::Shape(format!(
                "x_t {s:?} must hold one {hm}-sample hop per conditioning frame, conditioning is {cs:?}"
            )));
        }
        let t_enc = self.time_encoding(tape, t);
        self.branches
            .iter()
            .map(|br| br.forward(tape, &self.store, x_t, t_enc, cond))
            .collect()
    }

    fn time_encoding(&self, tape: &mut Tape, t: &[f64]) -> Var {
        tape.constant(sinusoidal_embedding(t, self.cfg.time_dim, TIME_SCALE))
    }

    /// Clean-waveform estimate: the mean of the branch outputs.
    pub fn predict(&self, tape: &mut Tape, x_t: &Array, t: &[f64], cond: Var) -> Result<Var> {
        let outs = self.predict_branches(tape, x_t, t, cond)?;
        let mut acc = outs[0];
        for &o in &outs[1..] {
            acc = tape.add(acc, o);
        }
        Ok(tape.scale(acc, 1.0 / outs.len() as f64))
    }

    /// Training loss for one batch: energy-weighted data loss for the flow
    /// vocoder, plain MSE from a zero input for the regression baseline.
    pub fn loss(&self, tape: &mut Tape, x1: &Array, latents: &Array, rng: &mut impl Rng, sigma: f64) -> Result<Var> {
        let (b, len) = (x1.shape()[0], x1.shape()[1]);
        let hm = self.cfg.hop_max();
        let cond = self.condition(tape, latents)?;
        match self.cfg.mode {
            VocoderMode::Flow => {
                let ts: Vec<f64> = (0..b).map(|_| rng.gen_range(0.0..1.0)).collect();
                let s = path_from_noise(x1, gaussian(&[b, len], sigma, rng), &ts)?;
                let pred = self.predict(tape, &s.x_t, &ts, cond)?;
                let mut w = Vec::with_capacity(b * len / hm);
                for row in x1.data().chunks(len) {
                    w.extend(frame_energy(row, hm, EnergyWeighting::default())?);
                }
                fm_data_loss(tape, pred, x1, &Array::new(vec![b, len.div_ceil(hm)], w), hm)
            }
            VocoderMode::Regression => {
                let pred = self.predict(tape, &Array::zeros(&[b, len]), &vec![0.0; b], cond)?;
                fm_data_loss(tape, pred, x1, &Array::full(&[b, len.div_ceil(hm)], 1.0), hm)
            }
        }
    }

    /// Waveforms for every item of `latents`, `T * hop_max` samples each.
    pub fn vocode(&self, latents: &LatentSeq, sampler: &SamplerConfig) -> Result<Vec<AudioClip>> {
        self.check_latents(latents)?;
        let (b, t) = (latents.batch(), latents.frames());
        let len = t * self.cfg.hop_max();
        let mut tape = Tape::inference();
        let cond = self.condition(&mut tape, &latents.data)?;
        let cond = tape.value(cond).clone();
        let run = |x: &Array, tv: f64| -> Result<Array> {
            let mut tape = Tape::inference();
            let c = tape.constant(cond.clone());
            let y = self.predict(&mut tape, x, &vec![tv; b], c)?;
            Ok(tape.value(y).clone())
        };
        let out = match self.cfg.mode {
            VocoderMode::Regression => run(&Array::zeros(&[b, len]), 0.0)?,
            VocoderMode::Flow => {
                if sampler.kind != PredictionKind::Data {
                    return Err(Error::Config("the vocoder predicts clean data; use the data sampler".into()));
                }
                // No unconditional branch is trained, so guidance is fixed at 1.
                let cfg = SamplerConfig { guidance_scale: 1.0, ..sampler.clone() };
                let x0 = gaussian(&[b, len], cfg.sigma, &mut rng_from(cfg.seed, &[0x5a3b]));
                euler_from(x0, &cfg, |x, tv, _| run(x, tv))?
            }
        };
        Ok(out
            .data()
            .chunks(len)
            .map(|row| AudioClip::new(row.to_vec(), self.cfg.sample_rate))
            .collect())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new();
        c.insert_text("vocoder.config", &serde_json::to_string(&self.cfg)?);
        c.insert_text("provider", self.cfg.provider.tag());
        self.store.save_into(&mut c, "");
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let cfg: VocoderConfig = serde_json::from_str(&c.text("vocoder.config")?)?;
        let mut v = Self::new(cfg)?;
        v.store.load_from(c, "")?;
        Ok(v)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        Ok(self.to_checkpoint()?.save(path)?)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub sigma: f64,
    /// Random crops of this many latent frames; `None` trains on whole clips.
    pub segment_frames: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 20_000, batch: 1, lr: 1e-3, sigma: 1.0, segment_frames: None, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Mean loss over steps `[from, from + n)`, clamped to the run.
    pub fn window_mean(&self, from: usize, n: usize) -> f64 {
        let lo = from.min(self.losses.len().saturating_sub(1));
        let hi = (lo + n).min(self.losses.len());
        self.losses[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
    }

    pub fn tail_mean(&self, n: usize) -> f64 {
        self.window_mean(self.losses.len().saturating_sub(n), n)
    }
}

/// Trains `model` on clip/latent pairs. `latents` is stacked in clip order.
pub fn train_vocoder(
    model: &mut Vocoder,
    clips: &[&AudioClip],
    latents: &LatentSeq,
    tc: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    model.check_latents(latents)?;
    if clips.is_empty() || clips.len() != latents.batch() {
        return Err(Error::Data(format!("{} clips for {} latent items", clips.len(), latents.batch())));
    }
    let hm = model.cfg.hop_max();
    let t = latents.frames();
    let seg = tc.segment_frames.unwrap_or(t);
    if seg == 0 || seg > t {
        return Err(Error::Config(format!("segment of {seg} frames does not fit clips of {t} frames")));
    }
    for c in clips {
        if c.sample_rate != model.cfg.sample_rate || c.len() < t * hm {
            return Err(Error::Data(format!(
                "clip of {} samples at {} Hz is shorter than {t} latent frames at {} Hz",
                c.len(),
                c.sample_rate,
                model.cfg.sample_rate
            )));
        }
    }
    let (d, len) = (latents.dim(), seg * hm);
    let mut opt = OptState::new(&model.store, AdamWConfig { lr: tc.lr, ..Default::default() });
    let mut rng = rng_from(tc.seed, &[0x70c0]);
    let mut losses = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let mut x1 = Vec::with_capacity(tc.batch * len);
        let mut lat = Vec::with_capacity(tc.batch * d * seg);
        for _ in 0..tc.batch {
            let i = rng.gen_range(0..clips.len());
            let f0 = if seg < t { rng.gen_range(0..=t - seg) } else { 0 };
            x1.extend_from_slice(&clips[i].samples[f0 * hm..f0 * hm + len]);
            let item = &latents.data.data()[i * d * t..(i + 1) * d * t];
            for row in item.chunks(t) {
                lat.extend_from_slice(&row[f0..f0 + seg]);
            }
        }
        let x1 = Array::new(vec![tc.batch, len], x1);
        let lat = Array::new(vec![tc.batch, d, seg], lat);
        let mut tape = Tape::new();
        let loss = model.loss(&mut tape, &x1, &lat, &mut rng, tc.sigma)?;
        let l = tape.value(loss).item();
        if !l.is_finite() {
            return Err(Error::Numeric(format!("vocoder loss became {l} at step {step}")));
        }
        losses.push(l);
        progress(step, l);
        let g = tape.backward(loss)?;
        opt.step(&mut model.store, &g);
    }
    Ok(TrainReport { losses })
}
