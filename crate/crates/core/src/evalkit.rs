//! Evaluation: linear probes, Fréchet distance on fixed spectral features,
//! reconstruction distances and a PCA projection of pooled latents.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;

use crate::dsp::{mel, stft, MelConfig, StftPlan};
use crate::latents::{orthonormal, LatentSeq};
use crate::{rng_from, AudioClip, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
    pub test_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { steps: 2000, lr: 0.1, test_fraction: 0.2 }
    }
}

/// Multinomial logistic regression on z-scored features.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    mean: Vec<f64>,
    std: Vec<f64>,
    /// `(F, C)` row-major.
    w: Vec<f64>,
    b: Vec<f64>,
    classes: usize,
}

fn softmax_row(row: &mut [f64]) {
    let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

impl LinearProbe {
    /// Full-batch gradient descent from zero weights.
    pub fn fit(features: &[Vec<f64>], labels: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<Self> {
        let n = features.len();
        if n == 0 || n != labels.len() {
            return Err(Error::Data(format!("{n} feature rows for {} labels", labels.len())));
        }
        let f = features[0].len();
        if features.iter().any(|r| r.len() != f) {
            return Err(Error::Shape("probe features have ragged rows".into()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {l} outside {classes} classes")));
        }
        let mut mean = vec![0.0; f];
        for r in features {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n as f64;
            }
        }
        let mut std = vec![0.0; f];
        for r in features {
            for ((s, v), m) in std.iter_mut().zip(r).zip(&mean) {
                *s += (v - m).powi(2) / n as f64;
            }
        }
        let std: Vec<f64> = std.into_iter().map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 }).collect();
        let mut probe = Self { mean, std, w: vec![0.0; f * classes], b: vec![0.0; classes], classes };
        let x: Vec<Vec<f64>> = features.iter().map(|r| probe.zscore(r)).collect();
        let mut p = vec![0.0; classes];
        let mut gw = vec![0.0; f * classes];
        let mut gb = vec![0.0; classes];
        for _ in 0..cfg.steps {
            gw.iter_mut().for_each(|v| *v = 0.0);
            gb.iter_mut().for_each(|v| *v = 0.0);
            for (xi, &yi) in x.iter().zip(labels) {
                probe.logits_into(xi, &mut p);
                softmax_row(&mut p);
                p[yi] -= 1.0;
                for (j, &xv) in xi.iter().enumerate() {
                    for (g, pc) in gw[j * classes..(j + 1) * classes].iter_mut().zip(&p) {
                        *g += xv * pc;
                    }
                }
                for (g, pc) in gb.iter_mut().zip(&p) {
                    *g += pc;
                }
            }
            let step = cfg.lr / n as f64;
            for (w, g) in probe.w.iter_mut().zip(&gw) {
                *w -= step * g;
            }
            for (b, g) in probe.b.iter_mut().zip(&gb) {
                *b -= step * g;
            }
        }
        Ok(probe)
    }

    fn zscore(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    fn logits_into(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.b);
        for (j, &xv) in x.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(&self.w[j * self.classes..(j + 1) * self.classes]) {
                *o += xv * w;
            }
        }
    }

    pub fn predict(&self, row: &[f64]) -> usize {
        let mut p = vec![0.0; self.classes];
        self.logits_into(&self.zscore(row), &mut p);
        (0..self.classes).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    /// `NaN` for classes absent from the test split.
    pub per_class: Vec<f64>,
    pub split_seed: u64,
    pub provider: Option<String>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per-class shuffled split; each class keeps `round(n * fraction)` test items,
/// at least one when it has two or more items.
pub fn stratified_split(labels: &[usize], test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut rng = rng_from(seed, &[0x5917]);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut rng);
        let mut k = (idx.len() as f64 * test_fraction).round() as usize;
        if idx.len() >= 2 {
            k = k.clamp(1, idx.len() - 1);
        }
        test.extend_from_slice(&idx[..k.min(idx.len())]);
        train.extend_from_slice(&idx[k.min(idx.len())..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Fits a probe on a stratified split of `features` and scores the held-out part.
pub fn linear_probe(features: &[Vec<f64>], labels: &[usize], seed: u64, cfg: &ProbeConfig) -> Result<ProbeResult> {
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let distinct = (0..classes).filter(|c| labels.contains(c)).count();
    if distinct < 2 {
        return Err(Error::Data("a probe needs at least two classes".into()));
    }
    let (train, test) = stratified_split(labels, cfg.test_fraction, seed);
    let fx: Vec<Vec<f64>> = train.iter().map(|&i| features[i].clone()).collect();
    let fy: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let probe = LinearProbe::fit(&fx, &fy, classes, cfg)?;
    let mut correct = vec![0usize; classes];
    let mut total = vec![0usize; classes];
    for &i in &test {
        total[labels[i]] += 1;
        if probe.predict(&features[i]) == labels[i] {
            correct[labels[i]] += 1;
        }
    }
    let hits: usize = correct.iter().sum();
    Ok(ProbeResult {
        accuracy: hits as f64 / test.len().max(1) as f64,
        per_class: correct.iter().zip(&total).map(|(&c, &t)| c as f64 / t as f64).collect(),
        split_seed: seed,
        provider: None,
        train,
        test,
    })
}

/// Probe on time-averaged latents.
pub fn probe_latents(latents: &LatentSeq, labels: &[usize], seed: u64, cfg: &ProbeConfig) -> Result<ProbeResult> {
    let mut r = linear_probe(&latents.mean_pooled(), labels, seed, cfg)?;
    r.provider = Some(latents.provider.tag().to_string());
    Ok(r)
}

/// Log-mel averaged over `segments` equal time spans and concatenated.
pub fn segment_mel_features(clip: &AudioClip, mel_cfg: &MelConfig, segments: usize) -> Result<Vec<f64>> {
    let m = mel(&clip.samples, mel_cfg)?;
    let (nm, t) = (m.shape()[0], m.shape()[1]);
    if segments == 0 || segments > t {
        return Err(Error::Config(format!("{segments} segments for {t} frames")));
    }
    let mut out = Vec::with_capacity(nm * segments);
    for s in 0..segments {
        let (lo, hi) = (s * t / segments, (s + 1) * t / segments);
        for row in m.data().chunks(t) {
            out.push(row[lo..hi].iter().sum::<f64>() / (hi - lo) as f64);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major `(F, F)`.
    pub cov: Vec<f64>,
    pub count: usize,
}

impl FeatureStats {
    /// Sample mean and unbiased covariance; needs at least two rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::Data(format!("feature statistics need two or more rows, got {n}")));
        }
        let f = rows[0].len();
        if rows.iter().any(|r| r.len() != f) {
            return Err(Error::Shape("feature rows have ragged lengths".into()));
        }
        let x = DMatrix::from_fn(n, f, |i, j| rows[i][j]);
        let mean: DVector<f64> = x.row_mean().transpose();
        let centered = DMatrix::from_fn(n, f, |i, j| x[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        Ok(Self {
            mean: mean.iter().copied().collect(),
            cov: (0..f * f).map(|i| cov[(i / f, i % f)]).collect(),
            count: n,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        let f = self.dim();
        DMatrix::from_fn(f, f, |i, j| 0.5 * (self.cov[i * f + j] + self.cov[j * f + i]))
    }
}

/// Symmetric PSD square root with negative eigenvalues clipped to zero.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("feature dims {} and {} differ", a.dim(), b.dim())));
    }
    let (sa, sb) = (a.cov_matrix(), b.cov_matrix());
    let ra = psd_sqrt(&sa);
    let inner = &ra * &sb * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let dmu: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    Ok((dmu + sa.trace() + sb.trace() - 2.0 * cross).max(0.0))
}

pub const FD_DIM: usize = 16;

/// Clip-level features for the internal Fréchet distance: time-averaged
/// log-mel through a fixed orthonormal `(16, n_mels)` projection.
#[derive(Clone, Debug)]
pub struct FdFeaturizer {
    pub mel: MelConfig,
    proj: Vec<f64>,
}

impl FdFeaturizer {
    pub fn new(mel: MelConfig, seed: u64) -> Self {
        let proj = orthonormal(FD_DIM, mel.n_mels, seed).into_data();
        Self { mel, proj }
    }

    pub fn features(&self, clip: &AudioClip) -> Result<Vec<f64>> {
        let m = mel(&clip.samples, &self.mel)?;
        let t = m.shape()[1];
        let pooled: Vec<f64> = m.data().chunks(t).map(|r| r.iter().sum::<f64>() / t as f64).collect();
        Ok(self.proj.chunks(pooled.len()).map(|row| row.iter().zip(&pooled).map(|(a, b)| a * b).sum()).collect())
    }

    pub fn stats(&self, clips: &[&AudioClip]) -> Result<FeatureStats> {
        let rows = clips.iter().map(|c| self.features(c)).collect::<Result<Vec<_>>>()?;
        FeatureStats::from_rows(&rows)
    }

    pub fn distance(&self, a: &[&AudioClip], b: &[&AudioClip]) -> Result<f64> {
        frechet_distance(&self.stats(a)?, &self.stats(b)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReconMetrics {
    pub mel: f64,
    pub stft: f64,
    pub waveform: f64,
}

/// Distances between a reference and a generated clip over their common length.
pub fn recon_metrics(reference: &AudioClip, generated: &AudioClip, mel_cfg: &MelConfig, hops: &[usize]) -> Result<ReconMetrics> {
    if reference.sample_rate != generated.sample_rate {
        return Err(Error::Config(format!("sample rates {} and {} differ", reference.sample_rate, generated.sample_rate)));
    }
    let n = reference.len().min(generated.len());
    if n == 0 {
        return Err(Error::Signal("clips share no samples".into()));
    }
    let (r, g) = (&reference.samples[..n], &generated.samples[..n]);
    let waveform = r.iter().zip(g).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64;
    let (mr, mg) = (mel(r, mel_cfg)?, mel(g, mel_cfg)?);
    let mel_d = mr.data().iter().zip(mg.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / mr.numel() as f64;
    let mut stft_d = 0.0;
    for &hop in hops {
        let plan = StftPlan::new(hop, reference.sample_rate)?;
        let (a, b) = (stft(r, &plan)?.magnitude(), stft(g, &plan)?.magnitude());
        stft_d += a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    }
    Ok(ReconMetrics { mel: mel_d, stft: stft_d / hops.len().max(1) as f64, waveform })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaResult {
    pub coords: Vec<[f64; 2]>,
    pub explained_ratio: [f64; 2],
    pub components: [Vec<f64>; 2],
}

/// Top-two principal components of the rows. Each component's
/// largest-magnitude entry is made positive.
pub fn pca_2d(rows: &[Vec<f64>]) -> Result<PcaResult> {
    let n = rows.len();
    if n < 3 {
        return Err(Error::Data(format!("PCA needs at least 3 rows, got {n}")));
    }
    let stats = FeatureStats::from_rows(rows)?;
    let f = stats.dim();
    if f < 2 {
        return Err(Error::Shape("PCA to 2-D needs at least 2 features".into()));
    }
    let e = SymmetricEigen::new(stats.cov_matrix());
    let mut order: Vec<usize> = (0..f).collect();
    order.sort_by(|&a, &b| e.eigenvalues[b].total_cmp(&e.eigenvalues[a]));
    let total: f64 = e.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let comp = |k: usize| -> Vec<f64> {
        let col: Vec<f64> = e.eigenvectors.column(order[k]).iter().copied().collect();
        let big = col.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if big < 0.0 { col.iter().map(|v| -v).collect() } else { col }
    };
    let components = [comp(0), comp(1)];
    let coords = rows
        .iter()
        .map(|r| {
            let c: Vec<f64> = r.iter().zip(&stats.mean).map(|(a, m)| a - m).collect();
            let p = |v: &Vec<f64>| c.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
            [p(&components[0]), p(&components[1])]
        })
        .collect();
    let ratio = |k: usize| if total > 0.0 { e.eigenvalues[order[k]].max(0.0) / total } else { 0.0 };
    Ok(PcaResult { coords, explained_ratio: [ratio(0), ratio(1)], components })
}

/// PCA of time-averaged latents.
pub fn pca_project(latents: &LatentSeq) -> Result<PcaResult> {
    pca_2d(&latents.mean_pooled())
}

/// Mean distance between class centroids and mean distance of points to
/// their own centroid, in the projected plane.
pub fn centroid_separation(coords: &[[f64; 2]], labels: &[usize]) -> (f64, f64) {
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut cent = vec![[0.0; 2]; classes];
    let mut count = vec![0usize; classes];
    for (p, &l) in coords.iter().zip(labels) {
        cent[l][0] += p[0];
        cent[l][1] += p[1];
        count[l] += 1;
    }
    for (c, &n) in cent.iter_mut().zip(&count) {
        if n > 0 {
            c[0] /= n as f64;
            c[1] /= n as f64;
        }
    }
    let dist = |a: &[f64; 2], b: &[f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let present: Vec<usize> = (0..classes).filter(|&c| count[c] > 0).collect();
    let (mut inter, mut pairs) = (0.0, 0);
    for (i, &a) in present.iter().enumerate() {
        for &b in &present[i + 1..] {
            inter += dist(&cent[a], &cent[b]);
            pairs += 1;
        }
    }
    let intra = coords.iter().zip(labels).map(|(p, &l)| dist(p, &cent[l])).sum::<f64>() / coords.len().max(1) as f64;
    (inter / pairs.max(1) as f64, intra)
}

/// `index,label,pc1,pc2` rows.
pub fn write_pca_csv(path: &Path, result: &PcaResult, labels: &[String]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "index,label,pc1,pc2")?;
    for (i, (p, l)) in result.coords.iter().zip(labels).enumerate() {
        writeln!(f, "{i},{l},{:.9},{:.9}", p[0], p[1])?;
    }
    f.flush()?;
    Ok(())
}
