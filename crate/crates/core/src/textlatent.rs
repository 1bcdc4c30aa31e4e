//! Caption-conditioned latent generator: a small diffusion transformer with
//! AdaLN-Zero timestep modulation and cross-attention to token embeddings,
//! trained with the velocity objective and caption dropout.

use rand::Rng;
use semvoc_grad::nn::{sinusoidal_embedding, Init, Linear};
use semvoc_grad::{AdamWConfig, Array, Checkpoint, OptState, ParamId, ParamStore, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::corpus::{Bucket, GeneratorKind};
use crate::flow::{euler_sample, fm_velocity_loss, gaussian, path_from_noise, Branch, PredictionKind, SamplerConfig};
use crate::latents::{LatentSeq, Provider};
use crate::layers::{ln_last, positions, Attention, Mlp};
use crate::{rng_from, Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
const TIME_SCALE: f64 = 1000.0;

/// Fixed word list: padding, unknown, generator names, pitch buckets.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
}

impl Default for Vocab {
    fn default() -> Self {
        let mut words = vec!["<pad>".to_string(), "<unk>".to_string()];
        words.extend(GeneratorKind::ALL.iter().map(|k| k.name().to_string()));
        words.extend(Bucket::ALL.iter().map(|b| b.name().to_string()));
        Self { words }
    }
}

/// Right-padded token ids with their validity mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptionTokens {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.words.iter().position(|w| w == word).filter(|&i| i > UNK).unwrap_or(UNK)
    }

    /// Whitespace tokens, truncated to `max_len`. An empty caption becomes a
    /// single UNK token.
    pub fn tokenize(&self, caption: &str, max_len: usize) -> CaptionTokens {
        let mut ids: Vec<usize> = caption.split_whitespace().take(max_len).map(|w| self.id(w)).collect();
        if ids.is_empty() {
            ids.push(UNK);
        }
        let n = ids.len();
        ids.resize(max_len, PAD);
        CaptionTokens { ids, mask: (0..max_len).map(|i| i < n).collect() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DitConfig {
    pub latent_dim: usize,
    pub frames: usize,
    pub frame_rate: f64,
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub max_tokens: usize,
    pub time_dim: usize,
    pub provider: Provider,
    /// Train on per-channel standardized latents.
    pub standardize: bool,
    pub seed: u64,
}

impl DitConfig {
    pub fn desk(provider: Provider, latent_dim: usize, frames: usize, frame_rate: f64, seed: u64) -> Self {
        Self {
            latent_dim,
            frames,
            frame_rate,
            width: 64,
            heads: 4,
            blocks: 2,
            max_tokens: 8,
            time_dim: 64,
            provider,
            standardize: true,
            seed,
        }
    }

    pub fn paper(provider: Provider, latent_dim: usize, frames: usize, frame_rate: f64, seed: u64) -> Self {
        Self { width: 1024, heads: 16, blocks: 24, time_dim: 256, ..Self::desk(provider, latent_dim, frames, frame_rate, seed) }
    }

    pub fn tiny(provider: Provider, latent_dim: usize, frames: usize, seed: u64) -> Self {
        Self { width: 16, heads: 2, blocks: 1, max_tokens: 4, time_dim: 8, ..Self::desk(provider, latent_dim, frames, 80.0, seed) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide width {}", self.heads, self.width)));
        }
        if self.latent_dim == 0 || self.frames == 0 || self.blocks == 0 || self.max_tokens == 0 {
            return Err(Error::Config("DiT dims, frames, blocks and max tokens must be positive".into()));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::Config(format!("time embedding dim {} must be even", self.time_dim)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct DitBlock {
    ada: Linear,
    attn: Attention,
    cross: Attention,
    mlp: Mlp,
}

/// `x * (1 + scale) + shift` with `(B, W)` modulations broadcast over tokens.
fn modulate(tape: &mut Tape, x: Var, shift: Var, scale: Var) -> Var {
    let t = tape.shape(x)[1];
    let scale = tape.add_scalar(scale, 1.0);
    let scale = tape.expand(scale, 1, t);
    let shift = tape.expand(shift, 1, t);
    let y = tape.mul(x, scale);
    tape.add(y, shift)
}

fn gate(tape: &mut Tape, g: Var, x: Var) -> Var {
    let t = tape.shape(x)[1];
    let g = tape.expand(g, 1, t);
    tape.mul(g, x)
}

impl DitBlock {
    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, t_act: Var, c: Var, valid: &[Vec<bool>]) -> Var {
        let w = tape.shape(x)[2];
        let mods = self.ada.forward(tape, store, t_act);
        let m: Vec<Var> = (0..6).map(|i| tape.slice(mods, 1, i * w, w)).collect();
        let h = ln_last(tape, x);
        let h = modulate(tape, h, m[0], m[1]);
        let a = self.attn.forward(tape, store, h, h, None);
        let a = gate(tape, m[2], a);
        let x = tape.add(x, a);
        let h = ln_last(tape, x);
        let ca = self.cross.forward(tape, store, h, c, Some(valid));
        let x = tape.add(x, ca);
        let h = ln_last(tape, x);
        let h = modulate(tape, h, m[3], m[4]);
        let f = self.mlp.forward(tape, store, h);
        let f = gate(tape, m[5], f);
        tape.add(x, f)
    }
}

#[derive(Clone, Debug)]
pub struct Dit {
    pub cfg: DitConfig,
    pub store: ParamStore,
    pub vocab: Vocab,
    tokens: ParamId,
    input: Linear,
    time1: Linear,
    time2: Linear,
    blocks: Vec<DitBlock>,
    final_ada: Linear,
    output: Linear,
    /// Per-channel latent mean and std (ones and zeros when not standardizing).
    pub stats: (Vec<f64>, Vec<f64>),
}

impl Dit {
    pub fn new(cfg: DitConfig) -> Result<Self> {
        cfg.validate()?;
        let vocab = Vocab::default();
        let mut store = ParamStore::new();
        let mut init = Init::new(cfg.seed);
        let w = cfg.width;
        let tokens = store.add("text.tokens", init.normal(&[vocab.len(), w], 1.0));
        let input = Linear::new(&mut store, &mut init, "input", cfg.latent_dim, w, true);
        let time1 = Linear::new(&mut store, &mut init, "time1", cfg.time_dim, w, true);
        let time2 = Linear::new(&mut store, &mut init, "time2", w, w, true);
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let name = format!("block{i}");
                DitBlock {
                    ada: Linear::zeros(&mut store, &format!("{name}.ada"), w, 6 * w, true),
                    attn: Attention::new(&mut store, &mut init, &format!("{name}.attn"), w, cfg.heads),
                    cross: Attention::new(&mut store, &mut init, &format!("{name}.cross"), w, cfg.heads),
                    mlp: Mlp::new(&mut store, &mut init, &format!("{name}.mlp"), w, 4),
                }
            })
            .collect();
        let final_ada = Linear::zeros(&mut store, "final.ada", w, 2 * w, true);
        let output = Linear::zeros(&mut store, "final.out", w, cfg.latent_dim, true);
        let stats = (vec![0.0; cfg.latent_dim], vec![1.0; cfg.latent_dim]);
        Ok(Self { cfg, store, vocab, tokens, input, time1, time2, blocks, final_ada, output, stats })
    }

    pub fn tokenize(&self, caption: &str) -> CaptionTokens {
        self.vocab.tokenize(caption, self.cfg.max_tokens)
    }

    /// Caption embeddings `(B, M, W)`: token lookup plus positions.
    pub fn embed_text(&self, tape: &mut Tape, captions: &[CaptionTokens]) -> Var {
        let (b, m, w) = (captions.len(), self.cfg.max_tokens, self.cfg.width);
        let ids: Vec<usize> = captions.iter().flat_map(|c| c.ids.iter().copied()).collect();
        let table = tape.param(&self.store, self.tokens);
        let e = tape.gather_rows(table, &ids);
        let e = tape.reshape(e, &[b, m, w]);
        let pos = tape.constant(positions(m, w));
        let pos = tape.expand(pos, 0, b);
        tape.add(e, pos)
    }

    /// Velocity prediction `(B, D, T)` for noisy latents `(B, D, T)` in the
    /// model's (possibly standardized) space.
    pub fn forward(&self, tape: &mut Tape, x: Var, t: &[f64], captions: &[CaptionTokens]) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[1] != self.cfg.latent_dim || s[0] != t.len() || s[0] != captions.len() {
            return Err(Error::Shape(format!(
                "DiT input {s:?} needs (B, {}, T) with {} timesteps and {} captions",
                self.cfg.latent_dim,
                t.len(),
                captions.len()
            )));
        }
        if let Some(c) = captions.iter().find(|c| c.ids.len() != self.cfg.max_tokens || c.mask.len() != c.ids.len()) {
            return Err(Error::Shape(format!(
                "caption of {} ids and {} mask entries, expected {}",
                c.ids.len(),
                c.mask.len(),
                self.cfg.max_tokens
            )));
        }
        let (b, tt, w) = (s[0], s[2], self.cfg.width);
        let h = tape.transpose(x, 1, 2);
        let h = self.input.forward(tape, &self.store, h);
        let pos = tape.constant(positions(tt, w));
        let pos = tape.expand(pos, 0, b);
        let mut h = tape.add(h, pos);
        let te = tape.constant(sinusoidal_embedding(t, self.cfg.time_dim, TIME_SCALE));
        let te = self.time1.forward(tape, &self.store, te);
        let te = tape.gelu(te);
        let te = self.time2.forward(tape, &self.store, te);
        let t_act = tape.gelu(te);
        let c = self.embed_text(tape, captions);
        let valid: Vec<Vec<bool>> = captions.iter().map(|c| c.mask.clone()).collect();
        for blk in &self.blocks {
            h = blk.forward(tape, &self.store, h, t_act, c, &valid);
        }
        let mods = self.final_ada.forward(tape, &self.store, t_act);
        let shift = tape.slice(mods, 1, 0, w);
        let scale = tape.slice(mods, 1, w, w);
        let h = ln_last(tape, h);
        let h = modulate(tape, h, shift, scale);
        let out = self.output.forward(tape, &self.store, h);
        Ok(tape.transpose(out, 1, 2))
    }

    fn standardize(&self, data: &Array) -> Array {
        let (d, t) = (data.shape()[1], data.shape()[2]);
        Array::from_fn(data.shape(), |i| {
            let c = (i / t) % d;
            (data.data()[i] - self.stats.0[c]) / self.stats.1[c]
        })
    }

    fn destandardize(&self, data: &Array) -> Array {
        let (d, t) = (data.shape()[1], data.shape()[2]);
        Array::from_fn(data.shape(), |i| {
            let c = (i / t) % d;
            data.data()[i] * self.stats.1[c] + self.stats.0[c]
        })
    }

    /// One latent sequence per caption, via guided Euler sampling.
    pub fn generate(&self, captions: &[&str], sampler: &SamplerConfig) -> Result<LatentSeq> {
        if sampler.kind != PredictionKind::Velocity {
            return Err(Error::Config("the DiT predicts velocity; use the velocity sampler".into()));
        }
        if captions.is_empty() {
            return Err(Error::Config("no captions to generate".into()));
        }
        let b = captions.len();
        let cond: Vec<CaptionTokens> = captions.iter().map(|c| self.tokenize(c)).collect();
        let uncond = vec![self.tokenize(""); b];
        let shape = [b, self.cfg.latent_dim, self.cfg.frames];
        let out = euler_sample(&shape, sampler, |x, t, branch| {
            let mut tape = Tape::inference();
            let xv = tape.constant(x.clone());
            let toks = if branch == Branch::Conditional { &cond } else { &uncond };
            let v = self.forward(&mut tape, xv, &vec![t; b], toks)?;
            Ok(tape.value(v).clone())
        })?;
        LatentSeq::new(self.destandardize(&out), self.cfg.frame_rate, self.cfg.provider)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new();
        c.insert_text("dit.config", &serde_json::to_string(&self.cfg)?);
        c.insert_text("provider", self.cfg.provider.tag());
        c.insert_array("dit.latent_mean", &Array::from_vec(self.stats.0.clone()));
        c.insert_array("dit.latent_std", &Array::from_vec(self.stats.1.clone()));
        self.store.save_into(&mut c, "");
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let cfg: DitConfig = serde_json::from_str(&c.text("dit.config")?)?;
        let mut dit = Self::new(cfg)?;
        dit.store.load_from(c, "")?;
        let (mean, std) = (c.array("dit.latent_mean")?.into_data(), c.array("dit.latent_std")?.into_data());
        if mean.len() != dit.cfg.latent_dim || std.len() != dit.cfg.latent_dim {
            return Err(Error::Data("DiT latent statistics do not match the latent dim".into()));
        }
        dit.stats = (mean, std);
        Ok(dit)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        Ok(self.to_checkpoint()?.save(path)?)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DitTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub sigma: f64,
    pub drop_prob: f64,
    pub seed: u64,
}

impl Default for DitTrainConfig {
    fn default() -> Self {
        Self { steps: 20_000, batch: 8, lr: 1e-3, sigma: 1.0, drop_prob: 0.1, seed: 0 }
    }
}

/// Per-channel mean and std over batch and time, std floored at `1e-6`.
pub fn channel_stats(latents: &Array) -> (Vec<f64>, Vec<f64>) {
    let s = latents.shape();
    let (b, d, t) = (s[0], s[1], s[2]);
    let n = (b * t) as f64;
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for item in latents.data().chunks(d * t) {
        for (c, row) in item.chunks(t).enumerate() {
            mean[c] += row.iter().sum::<f64>() / n;
        }
    }
    for item in latents.data().chunks(d * t) {
        for (c, row) in item.chunks(t).enumerate() {
            var[c] += row.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>() / n;
        }
    }
    (mean, var.into_iter().map(|v| v.sqrt().max(1e-6)).collect())
}

/// Trains `model` on latent/caption pairs; returns per-step losses.
pub fn train_dit(
    model: &mut Dit,
    latents: &LatentSeq,
    captions: &[String],
    tc: &DitTrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if latents.provider != model.cfg.provider {
        return Err(Error::Provider(format!(
            "latents from `{}` cannot train a DiT for `{}`",
            latents.provider.tag(),
            model.cfg.provider.tag()
        )));
    }
    if latents.batch() != captions.len() || captions.is_empty() {
        return Err(Error::Data(format!("{} latent items for {} captions", latents.batch(), captions.len())));
    }
    if latents.dim() != model.cfg.latent_dim || latents.frames() != model.cfg.frames {
        return Err(Error::Shape(format!(
            "latents ({}, {}) do not match the DiT's ({}, {})",
            latents.dim(),
            latents.frames(),
            model.cfg.latent_dim,
            model.cfg.frames
        )));
    }
    if !(0.0..=1.0).contains(&tc.drop_prob) {
        return Err(Error::Config(format!("caption drop probability {} outside [0, 1]", tc.drop_prob)));
    }
    if model.cfg.standardize {
        model.stats = channel_stats(&latents.data);
    }
    let data = model.standardize(&latents.data);
    let tokens: Vec<CaptionTokens> = captions.iter().map(|c| model.tokenize(c)).collect();
    let empty = model.tokenize("");
    let (d, t) = (latents.dim(), latents.frames());
    let mut opt = OptState::new(&model.store, AdamWConfig { lr: tc.lr, ..Default::default() });
    let mut rng = rng_from(tc.seed, &[0xd17]);
    let mut losses = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let mut x1 = Vec::with_capacity(tc.batch * d * t);
        let mut toks = Vec::with_capacity(tc.batch);
        for _ in 0..tc.batch {
            let i = rng.gen_range(0..captions.len());
            x1.extend_from_slice(&data.data()[i * d * t..(i + 1) * d * t]);
            let dropped = rng.gen_bool(tc.drop_prob);
            toks.push(if dropped { empty.clone() } else { tokens[i].clone() });
        }
        let x1 = Array::new(vec![tc.batch, d, t], x1);
        let ts: Vec<f64> = (0..tc.batch).map(|_| rng.gen_range(0.0..1.0)).collect();
        let s = path_from_noise(&x1, gaussian(&[tc.batch, d, t], tc.sigma, &mut rng), &ts)?;
        let mut tape = Tape::new();
        let x = tape.constant(s.x_t.clone());
        let v = model.forward(&mut tape, x, &ts, &toks)?;
        let loss = fm_velocity_loss(&mut tape, v, &s.v_star)?;
        let l = tape.value(loss).item();
        if !l.is_finite() {
            return Err(Error::Numeric(format!("DiT loss became {l} at step {step}")));
        }
        losses.push(l);
        progress(step, l);
        let g = tape.backward(loss)?;
        opt.step(&mut model.store, &g);
    }
    Ok(losses)
}
