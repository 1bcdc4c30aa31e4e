use rand::seq::SliceRandom;
use rand::Rng;
use semvoc_grad::nn::{Init, Linear};
use semvoc_grad::{AdamWConfig, Array, Checkpoint, OptState, ParamId, ParamStore, Tape, Var};

use super::{LatentEncoder, LatentSeq, Provider};
use crate::dsp::{mel, patchify, MelConfig};
use crate::layers::{ln_last, positions, EncoderBlock};
use crate::{rng_from, AudioClip, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MaeConfig {
    pub mask_ratio: f64,
    /// (frequency, time) patch extents.
    pub patch: (usize, usize),
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub decoder_width: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for MaeConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.75,
            patch: (20, 1),
            depth: 2,
            width: 32,
            heads: 4,
            decoder_width: 32,
            steps: 2000,
            batch: 4,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
struct EncoderNet {
    embed: Linear,
    blocks: Vec<EncoderBlock>,
}

impl EncoderNet {
    fn new(store: &mut ParamStore, init: &mut Init, cfg: &MaeConfig) -> Self {
        let ps = cfg.patch.0 * cfg.patch.1;
        Self {
            embed: Linear::new(store, init, "enc.embed", ps, cfg.width, true),
            blocks: (0..cfg.depth)
                .map(|i| EncoderBlock::new(store, init, &format!("enc.block{i}"), cfg.width, cfg.heads))
                .collect(),
        }
    }

    /// Embedded tokens `(B, P, W)` with positions added.
    fn embed(&self, tape: &mut Tape, store: &ParamStore, patches: &Array) -> Var {
        let s = patches.shape().to_vec();
        let (b, p) = (s[0], s[1]);
        let x = tape.constant(patches.clone());
        let h = self.embed.forward(tape, store, x);
        let w = tape.shape(h)[2];
        let pos = tape.constant(positions(p, w));
        let pos = tape.expand(pos, 0, b);
        tape.add(h, pos)
    }

    fn encode(&self, tape: &mut Tape, store: &ParamStore, tokens: Var) -> Var {
        let mut h = tokens;
        for blk in &self.blocks {
            h = blk.forward(tape, store, h);
        }
        ln_last(tape, h)
    }
}

/// Trained MAE encoder used as a latent provider.
#[derive(Clone, Debug)]
pub struct MaeEncoder {
    pub cfg: MaeConfig,
    pub mel: MelConfig,
    store: ParamStore,
    net: EncoderNet,
    /// Global log-mel standardization from the training clips.
    norm: (f64, f64),
}

fn validate(cfg: &MaeConfig) -> Result<()> {
    if !(cfg.mask_ratio > 0.0 && cfg.mask_ratio < 1.0) {
        return Err(Error::Config(format!("mask ratio {} outside (0, 1)", cfg.mask_ratio)));
    }
    if cfg.patch.0 == 0 || cfg.patch.1 == 0 || cfg.depth == 0 || cfg.width % cfg.heads != 0 {
        return Err(Error::Config("MAE needs positive patch extents, depth >= 1 and heads dividing width".into()));
    }
    Ok(())
}

fn normalized_patches(mel_frames: &Array, cfg: &MaeConfig, norm: (f64, f64), pad: f64) -> Result<(Array, crate::dsp::PatchGrid)> {
    let z = mel_frames.map(|v| (v - norm.0) / norm.1);
    patchify(&z, cfg.patch, (pad - norm.0) / norm.1)
}

impl MaeEncoder {
    fn build(cfg: &MaeConfig, mel: MelConfig, norm: (f64, f64)) -> Self {
        let mut store = ParamStore::new();
        let mut init = Init::new(cfg.seed);
        let net = EncoderNet::new(&mut store, &mut init, cfg);
        Self { cfg: cfg.clone(), mel, store, net, norm }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert_text("provider", Provider::ToyMae.tag());
        let cfg = &self.cfg;
        c.insert_array(
            "mae.config",
            &Array::from_vec(vec![
                cfg.mask_ratio,
                cfg.patch.0 as f64,
                cfg.patch.1 as f64,
                cfg.depth as f64,
                cfg.width as f64,
                cfg.heads as f64,
                cfg.decoder_width as f64,
                cfg.seed as f64,
            ]),
        );
        c.insert_array("mae.norm", &Array::from_vec(vec![self.norm.0, self.norm.1]));
        self.store.save_into(&mut c, "");
        c
    }

    pub fn from_checkpoint(c: &Checkpoint, mel: MelConfig) -> Result<Self> {
        let v = c.array("mae.config")?.into_data();
        if v.len() != 8 {
            return Err(Error::Data("mae.config has the wrong length".into()));
        }
        let cfg = MaeConfig {
            mask_ratio: v[0],
            patch: (v[1] as usize, v[2] as usize),
            depth: v[3] as usize,
            width: v[4] as usize,
            heads: v[5] as usize,
            decoder_width: v[6] as usize,
            seed: v[7] as u64,
            ..MaeConfig::default()
        };
        validate(&cfg)?;
        let n = c.array("mae.norm")?.into_data();
        let mut enc = Self::build(&cfg, mel, (n[0], n[1]));
        enc.store.load_from(c, "")?;
        Ok(enc)
    }
}

impl LatentEncoder for MaeEncoder {
    fn provider(&self) -> Provider {
        Provider::ToyMae
    }

    fn dim(&self) -> usize {
        self.mel.n_mels.div_ceil(self.cfg.patch.0) * self.cfg.width
    }

    fn frame_rate(&self) -> f64 {
        self.mel.plan.sample_rate() as f64 / (self.mel.plan.hop() * self.cfg.patch.1) as f64
    }

    fn encode(&self, clip: &AudioClip) -> Result<LatentSeq> {
        let m = mel(&clip.samples, &self.mel)?;
        let (patches, grid) = normalized_patches(&m, &self.cfg, self.norm, self.mel.eps.ln())?;
        let p = grid.len();
        let patches = patches.reshape(&[1, p, grid.patch_size()]);
        let mut tape = Tape::inference();
        let tokens = self.net.embed(&mut tape, &self.store, &patches);
        let enc = self.net.encode(&mut tape, &self.store, tokens);
        let (nt, nf, w) = (grid.time_patches, grid.freq_patches, self.cfg.width);
        let rows = tape.reshape(enc, &[nt, nf * w]);
        let cols = tape.transpose(rows, 0, 1);
        let data = tape.value(cols).clone().reshape(&[1, nf * w, nt]);
        LatentSeq::new(data, self.frame_rate(), Provider::ToyMae)
    }
}

#[derive(Clone, Debug)]
pub struct MaeTrainReport {
    pub losses: Vec<f64>,
}

impl MaeTrainReport {
    pub fn initial(&self) -> f64 {
        self.losses[0]
    }

    /// Mean of the last `n` step losses.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let k = n.min(self.losses.len());
        self.losses[self.losses.len() - k..].iter().sum::<f64>() / k as f64
    }
}

struct Decoder {
    proj: Linear,
    mask_token: ParamId,
    block: EncoderBlock,
    head: Linear,
}

/// Masked-patch reconstruction training. Returns the encoder alone.
pub fn train_toy_mae(clips: &[&AudioClip], mel_cfg: &MelConfig, cfg: &MaeConfig) -> Result<(MaeEncoder, MaeTrainReport)> {
    validate(cfg)?;
    if clips.is_empty() {
        return Err(Error::Data("MAE training needs at least one clip".into()));
    }
    let mels = clips.iter().map(|c| mel(&c.samples, mel_cfg)).collect::<Result<Vec<_>>>()?;
    let all: Vec<f64> = mels.iter().flat_map(|m| m.data().iter().copied()).collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let std = (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64).sqrt().max(1e-8);
    let norm = (mean, std);
    let pad = mel_cfg.eps.ln();
    let patched = mels
        .iter()
        .map(|m| normalized_patches(m, cfg, norm, pad))
        .collect::<Result<Vec<_>>>()?;
    let grid = patched[0].1;
    if patched.iter().any(|(_, g)| *g != grid) {
        return Err(Error::Shape("MAE training clips must share one length".into()));
    }
    let p = grid.len();
    let n_mask = (p as f64 * cfg.mask_ratio).round() as usize;
    let n_vis = p - n_mask.min(p);
    if n_vis == 0 || n_mask == 0 {
        return Err(Error::Config(format!("mask ratio {} leaves {n_vis} of {p} patches visible", cfg.mask_ratio)));
    }

    let mut enc = MaeEncoder::build(cfg, mel_cfg.clone(), norm);
    let mut store = enc.store.clone();
    let mut init = Init::new(cfg.seed ^ 0xdec0);
    let dw = cfg.decoder_width;
    let ps = grid.patch_size();
    let dec = Decoder {
        proj: Linear::new(&mut store, &mut init, "dec.proj", cfg.width, dw, true),
        mask_token: store.add("dec.mask_token", init.normal(&[1, dw], 0.02)),
        block: EncoderBlock::new(&mut store, &mut init, "dec.block", dw, cfg.heads.min(dw).max(1)),
        head: Linear::new(&mut store, &mut init, "dec.head", dw, ps, true),
    };
    let mut opt = OptState::new(&store, AdamWConfig { lr: cfg.lr, ..Default::default() });
    let mut rng = rng_from(cfg.seed, &[0x3ae]);
    let mut losses = Vec::with_capacity(cfg.steps);
    let b = cfg.batch.max(1);
    for _ in 0..cfg.steps {
        let picks: Vec<usize> = (0..b).map(|_| rng.gen_range(0..patched.len())).collect();
        let mut batch = Vec::with_capacity(b * p * ps);
        for &i in &picks {
            batch.extend_from_slice(patched[i].0.data());
        }
        let batch = Array::new(vec![b, p, ps], batch);
        // Visible and masked positions per clip, each sorted.
        let mut vis_ids = Vec::with_capacity(b * n_vis);
        let mut perm = vec![0usize; b * p];
        let mut masked_rows = Vec::with_capacity(b * n_mask);
        for bi in 0..b {
            let mut order: Vec<usize> = (0..p).collect();
            order.shuffle(&mut rng);
            let (mut vis, mut hid) = (order[..n_vis].to_vec(), order[n_vis..].to_vec());
            vis.sort_unstable();
            hid.sort_unstable();
            for (r, &pos) in vis.iter().enumerate() {
                vis_ids.push(bi * p + pos);
                perm[bi * p + pos] = bi * n_vis + r;
            }
            for (r, &pos) in hid.iter().enumerate() {
                perm[bi * p + pos] = b * n_vis + bi * n_mask + r;
                masked_rows.push(bi * p + pos);
            }
        }
        let target = Array::from_fn(&[b * n_mask, ps], |i| batch.data()[masked_rows[i / ps] * ps + i % ps]);

        let mut tape = Tape::new();
        let tokens = enc.net.embed(&mut tape, &store, &batch);
        let flat = tape.reshape(tokens, &[b * p, cfg.width]);
        let visible = tape.gather_rows(flat, &vis_ids);
        let visible = tape.reshape(visible, &[b, n_vis, cfg.width]);
        let encoded = enc.net.encode(&mut tape, &store, visible);
        let h = dec.proj.forward(&mut tape, &store, encoded);
        let h = tape.reshape(h, &[b * n_vis, dw]);
        let mt = tape.param(&store, dec.mask_token);
        let mt = tape.gather_rows(mt, &vec![0; b * n_mask]);
        let joined = tape.concat(&[h, mt], 0);
        let full = tape.gather_rows(joined, &perm);
        let full = tape.reshape(full, &[b, p, dw]);
        let pos = tape.constant(positions(p, dw));
        let pos = tape.expand(pos, 0, b);
        let full = tape.add(full, pos);
        let full = dec.block.forward(&mut tape, &store, full);
        let full = ln_last(&mut tape, full);
        let pred = dec.head.forward(&mut tape, &store, full);
        let pred = tape.reshape(pred, &[b * p, ps]);
        let pred = tape.gather_rows(pred, &masked_rows);
        let tgt = tape.constant(target);
        let d = tape.sub(pred, tgt);
        let sq = tape.mul(d, d);
        let loss = tape.mean(sq);
        losses.push(tape.value(loss).item());
        let g = tape.backward(loss)?;
        opt.step(&mut store, &g);
    }
    for id in enc.store.ids().collect::<Vec<_>>() {
        let name = enc.store.name(id).to_string();
        let trained = store.id(&name).expect("encoder parameter in training store");
        *enc.store.value_mut(id) = store.value(trained).clone();
    }
    Ok((enc, MaeTrainReport { losses }))
}
