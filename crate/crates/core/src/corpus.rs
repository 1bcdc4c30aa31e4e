//! Deterministic synthetic audio corpus with one generator per class.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dsp::{read_wav, write_wav};
use crate::{derive_seed, rng_from, AudioClip, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    Sine,
    ChirpUp,
    ChirpDown,
    AmTone,
    Square,
    HarmonicStack,
    NoiseBurst,
    ClickTrain,
}

impl GeneratorKind {
    pub const ALL: [GeneratorKind; 8] = [
        GeneratorKind::Sine,
        GeneratorKind::ChirpUp,
        GeneratorKind::ChirpDown,
        GeneratorKind::AmTone,
        GeneratorKind::Square,
        GeneratorKind::HarmonicStack,
        GeneratorKind::NoiseBurst,
        GeneratorKind::ClickTrain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GeneratorKind::Sine => "sine",
            GeneratorKind::ChirpUp => "chirp-up",
            GeneratorKind::ChirpDown => "chirp-down",
            GeneratorKind::AmTone => "am-tone",
            GeneratorKind::Square => "square",
            GeneratorKind::HarmonicStack => "harmonic-stack",
            GeneratorKind::NoiseBurst => "noise-burst",
            GeneratorKind::ClickTrain => "click-train",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    Low,
    Mid,
    High,
}

impl Bucket {
    pub const ALL: [Bucket; 3] = [Bucket::Low, Bucket::Mid, Bucket::High];

    pub fn hz(self) -> f64 {
        match self {
            Bucket::Low => 220.0,
            Bucket::Mid => 440.0,
            Bucket::High => 880.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Bucket::Low => "low",
            Bucket::Mid => "mid",
            Bucket::High => "high",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub kind: GeneratorKind,
    pub bucket: Bucket,
}

impl ClassSpec {
    pub fn new(kind: GeneratorKind, bucket: Bucket) -> Self {
        Self { name: kind.name().to_string(), kind, bucket }
    }

    pub fn caption(&self) -> String {
        format!("{} {}", self.name, self.bucket.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub classes: Vec<ClassSpec>,
    pub clips_per_class: usize,
    pub clip_seconds: f64,
    pub sample_rate: u32,
    pub snr_db: f64,
    pub master_seed: u64,
    /// Fraction of each class (by clip index) assigned to the training split.
    pub train_fraction: f64,
}

impl CorpusSpec {
    /// Eight classes, one per generator, 50 clips of 1.6 s at 8 kHz.
    pub fn desk(master_seed: u64) -> Self {
        use Bucket::*;
        use GeneratorKind::*;
        let classes = [
            (Sine, Mid),
            (ChirpUp, Mid),
            (ChirpDown, Mid),
            (AmTone, Low),
            (Square, Low),
            (HarmonicStack, Mid),
            (NoiseBurst, High),
            (ClickTrain, Mid),
        ]
        .into_iter()
        .map(|(k, b)| ClassSpec::new(k, b))
        .collect();
        Self { classes, clips_per_class: 50, clip_seconds: 1.6, sample_rate: 8000, snr_db: 30.0, master_seed, train_fraction: 0.8 }
    }

    pub fn clip_len(&self) -> usize {
        (self.clip_seconds * self.sample_rate as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.clips_per_class == 0 {
            return Err(Error::Config("corpus needs at least one class and one clip per class".into()));
        }
        if self.clip_len() == 0 || self.sample_rate == 0 {
            return Err(Error::Config("corpus clips must be non-empty".into()));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(Error::Config(format!("train fraction {} outside [0, 1]", self.train_fraction)));
        }
        Ok(())
    }

    pub fn clip_seed(&self, class: usize, clip: usize) -> u64 {
        derive_seed(self.master_seed, &[class as u64, clip as u64])
    }

    pub fn is_train(&self, clip: usize) -> bool {
        (clip as f64) < (self.clips_per_class as f64 * self.train_fraction).round()
    }

    pub fn captions(&self) -> Vec<String> {
        self.classes.iter().map(ClassSpec::caption).collect()
    }

    /// Class index whose caption matches exactly.
    pub fn class_of_caption(&self, caption: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.caption() == caption)
    }
}

fn oscillate(n: usize, sr: f64, freq: impl Fn(f64) -> f64, phase0: f64) -> Vec<f64> {
    let mut phase = phase0;
    (0..n)
        .map(|i| {
            let v = phase.sin();
            phase += 2.0 * PI * freq(i as f64 / sr) / sr;
            v
        })
        .collect()
}

fn render(kind: GeneratorKind, f0: f64, n: usize, sr: f64, rng: &mut impl Rng) -> Vec<f64> {
    let dur = n as f64 / sr;
    let phase: f64 = rng.gen_range(0.0..2.0 * PI);
    match kind {
        GeneratorKind::Sine => (0..n).map(|i| (2.0 * PI * f0 * i as f64 / sr + phase).sin()).collect(),
        GeneratorKind::ChirpUp | GeneratorKind::ChirpDown => {
            let up = kind == GeneratorKind::ChirpUp;
            let (lo, hi) = (f0 / 2.0, 2.0 * f0);
            let ratio: f64 = hi / lo;
            oscillate(
                n,
                sr,
                |t| {
                    let u = if up { t / dur } else { 1.0 - t / dur };
                    lo * ratio.powf(u)
                },
                phase,
            )
        }
        GeneratorKind::AmTone => {
            let rate: f64 = rng.gen_range(3.0..6.0);
            let depth = 0.8;
            let mphase: f64 = rng.gen_range(0.0..2.0 * PI);
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    (1.0 + depth * (2.0 * PI * rate * t + mphase).sin()) * (2.0 * PI * f0 * t + phase).sin()
                })
                .collect()
        }
        GeneratorKind::Square => {
            // Band-limited: odd harmonics below Nyquist.
            let f = f0 * rng.gen_range(0.98..1.02);
            let harmonics: Vec<usize> = (0..).map(|k| 2 * k + 1).take_while(|&h| h as f64 * f < sr / 2.0).collect();
            (0..n)
                .map(|i| {
                    let arg = 2.0 * PI * f * i as f64 / sr + phase;
                    harmonics.iter().map(|&h| (h as f64 * arg).sin() / h as f64).sum()
                })
                .collect()
        }
        GeneratorKind::HarmonicStack => {
            let f = f0 * rng.gen_range(0.98..1.02);
            let amps: Vec<f64> = (1..=5).map(|k| rng.gen_range(0.6..1.0) / k as f64).collect();
            (0..n)
                .map(|i| {
                    let arg = 2.0 * PI * f * i as f64 / sr + phase;
                    amps.iter().enumerate().map(|(k, a)| a * ((k + 1) as f64 * arg).sin()).sum()
                })
                .collect()
        }
        GeneratorKind::NoiseBurst => {
            // Bursts of first-differenced (high-tilted) noise.
            let burst = (0.15 * sr) as usize;
            let mut env = vec![0.0; n];
            for _ in 0..3 {
                let start = rng.gen_range(0..n - burst);
                for (j, e) in env[start..start + burst].iter_mut().enumerate() {
                    *e = f64::max(*e, (PI * j as f64 / burst as f64).sin());
                }
            }
            let white: Vec<f64> = (0..=n).map(|_| rng.sample(StandardNormal)).collect();
            (0..n).map(|i| env[i] * (white[i + 1] - white[i])).collect()
        }
        GeneratorKind::ClickTrain => {
            let rate = f0 / 20.0;
            let period = sr / rate;
            let offset: f64 = rng.gen_range(0.0..period);
            let ring = (0.008 * sr) as usize;
            let mut out = vec![0.0; n];
            let mut pos = offset;
            while (pos as usize) < n {
                let p = pos as usize;
                for j in 0..ring.min(n - p) {
                    let t = j as f64 / sr;
                    out[p + j] += (-t / 0.002).exp() * (2.0 * PI * f0 * t).sin();
                }
                pos += period;
            }
            out
        }
    }
}

/// Clip `clip` of class `class`, peak-normalized to 0.7 with additive noise at the corpus SNR.
pub fn generate_clip(spec: &CorpusSpec, class: usize, clip: usize) -> Result<AudioClip> {
    spec.validate()?;
    let cls = spec.classes.get(class).ok_or_else(|| Error::Config(format!("no class {class}")))?;
    let mut rng = rng_from(spec.clip_seed(class, clip), &[]);
    let n = spec.clip_len();
    let sr = spec.sample_rate as f64;
    let mut x = render(cls.kind, cls.bucket.hz(), n, sr, &mut rng);
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        x.iter_mut().for_each(|v| *v *= 0.7 / peak);
    }
    let power = x.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let noise_std = (power / 10f64.powf(spec.snr_db / 10.0)).sqrt();
    for v in &mut x {
        *v += noise_std * rng.sample::<f64, _>(StandardNormal);
    }
    Ok(AudioClip::new(x, spec.sample_rate).with_label(class))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub class: String,
    pub caption: String,
    pub seed: u64,
}

/// In-memory corpus: clips in class-major order with their manifest rows.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub clips: Vec<AudioClip>,
    pub rows: Vec<ManifestRow>,
}

pub struct ClipRef<'a> {
    pub index: usize,
    pub class: usize,
    pub clip_index: usize,
    pub clip: &'a AudioClip,
    pub caption: &'a str,
}

impl Corpus {
    pub fn generate(spec: &CorpusSpec) -> Result<Self> {
        spec.validate()?;
        let mut clips = Vec::new();
        let mut rows = Vec::new();
        for (c, cls) in spec.classes.iter().enumerate() {
            for i in 0..spec.clips_per_class {
                clips.push(generate_clip(spec, c, i)?);
                rows.push(ManifestRow {
                    path: format!("{}/{:03}.wav", cls.name, i),
                    class: cls.name.clone(),
                    caption: cls.caption(),
                    seed: spec.clip_seed(c, i),
                });
            }
        }
        Ok(Self { spec: spec.clone(), clips, rows })
    }

    pub fn iter(&self) -> impl Iterator<Item = ClipRef<'_>> {
        let per = self.spec.clips_per_class;
        self.clips.iter().zip(&self.rows).enumerate().map(move |(index, (clip, row))| ClipRef {
            index,
            class: index / per,
            clip_index: index % per,
            clip,
            caption: &row.caption,
        })
    }

    pub fn split(&self, train: bool) -> Vec<ClipRef<'_>> {
        self.iter().filter(|c| self.spec.is_train(c.clip_index) == train).collect()
    }

    /// Writes WAVs, `manifest.jsonl` and `spec.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for cls in &self.spec.classes {
            fs::create_dir_all(dir.join(&cls.name))?;
        }
        let mut manifest = BufWriter::new(fs::File::create(dir.join("manifest.jsonl"))?);
        for (clip, row) in self.clips.iter().zip(&self.rows) {
            write_wav(dir.join(&row.path), clip)?;
            serde_json::to_writer(&mut manifest, row)?;
            manifest.write_all(b"\n")?;
        }
        manifest.flush()?;
        fs::write(dir.join("spec.json"), serde_json::to_string_pretty(&self.spec)?)?;
        Ok(())
    }

    /// Reads a corpus written by [`Corpus::write`].
    pub fn load(dir: &Path) -> Result<Self> {
        let spec: CorpusSpec = serde_json::from_str(&fs::read_to_string(dir.join("spec.json"))?)?;
        spec.validate()?;
        let mut rows = Vec::new();
        for line in BufReader::new(fs::File::open(dir.join("manifest.jsonl"))?).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                rows.push(serde_json::from_str::<ManifestRow>(&line)?);
            }
        }
        if rows.len() != spec.classes.len() * spec.clips_per_class {
            return Err(Error::Data(format!(
                "manifest has {} rows, spec implies {}",
                rows.len(),
                spec.classes.len() * spec.clips_per_class
            )));
        }
        let mut clips = Vec::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            let class = i / spec.clips_per_class;
            if row.class != spec.classes[class].name {
                return Err(Error::Data(format!("manifest row {i} has class {}, expected {}", row.class, spec.classes[class].name)));
            }
            clips.push(read_wav(dir.join(&row.path))?.with_label(class));
        }
        Ok(Self { spec, clips, rows })
    }
}

/// Generates the corpus described by `spec` and writes it under `out`.
pub fn synth_corpus(spec: &CorpusSpec, out: &Path) -> Result<Vec<ManifestRow>> {
    let corpus = Corpus::generate(spec)?;
    corpus.write(out)?;
    Ok(corpus.rows)
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.jsonl")
}
