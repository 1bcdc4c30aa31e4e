//! One function per subcommand.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use semvoc::corpus::{Corpus, CorpusSpec};
use semvoc::dsp::{write_wav, MelConfig};
use semvoc::evalkit::{centroid_separation, pca_project, probe_latents, recon_metrics, write_pca_csv, FdFeaturizer, ProbeConfig};
use semvoc::flow::{PredictionKind, SamplerConfig};
use semvoc::gradcheck::{run_suite, GRAD_TOL};
use semvoc::latents::{LatentEncoder, LatentSeq, MaeConfig, Provider};
use semvoc::pipeline::{
    generate_audio, reconstruct_audio, score_audio, sweep, write_loss_csv, write_sweep_csv, Encoder, GenConfig, Judge, Split,
    SweepSetup,
};
use semvoc::textlatent::{train_dit, Dit, DitConfig, DitTrainConfig};
use semvoc::vocoder::{train_vocoder, TrainConfig, Vocoder, VocoderConfig, VocoderMode};
use semvoc_grad::Checkpoint;

use crate::args::*;
use crate::config::{announce, CliError};

/// The `--out-dir` tree.
struct Layout {
    root: PathBuf,
}

impl Layout {
    fn new(common: &Common) -> Self {
        Self { root: common.out_dir.clone() }
    }

    fn sub(&self, name: &str) -> Result<PathBuf> {
        let p = self.root.join(name);
        fs::create_dir_all(&p).with_context(|| format!("creating {}", p.display()))?;
        Ok(p)
    }

    fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }

    fn ckpt(&self) -> Result<PathBuf> {
        self.sub("ckpt")
    }

    fn gen_dir(&self) -> Result<PathBuf> {
        self.sub("gen")
    }

    fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

pub fn dispatch(cmd: Command) -> Result<()> {
    let name = cmd.name();
    match cmd {
        Command::SynthData(a) => synth_data(name, a),
        Command::Encode(mut a) => {
            resolve_corpus(&mut a);
            let layout = Layout::new(&a.common);
            announce(name, &a, &layout.reports())?;
            let (_, dir) = ensure_latents(&a, &layout)?;
            println!("latents in {}", dir.display());
            Ok(())
        }
        Command::TrainVocoder(a) => train_vocoder_cmd(name, a),
        Command::TrainDit(a) => train_dit_cmd(name, a),
        Command::Sample(a) => sample(name, a),
        Command::Vocode(a) => vocode(name, a),
        Command::Eval(a) => eval(name, a),
        Command::Probe(a) => probe(name, a),
        Command::Project(a) => project(name, a),
        Command::Sweep(a) => sweep_cmd(name, a),
        Command::GradCheck(a) => grad_check(name, a),
    }
}

fn resolve_corpus(a: &mut EncodeArgs) {
    if a.corpus.is_none() {
        a.corpus = Some(Layout::new(&a.common).corpus());
    }
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    Corpus::load(path).with_context(|| format!("loading corpus {}", path.display()))
}

fn synth_data(name: &str, a: SynthArgs) -> Result<()> {
    let layout = Layout::new(&a.common);
    announce(name, &a, &layout.reports())?;
    let spec = CorpusSpec {
        clips_per_class: a.clips_per_class,
        clip_seconds: a.clip_seconds,
        sample_rate: a.sample_rate,
        snr_db: a.snr_db,
        ..CorpusSpec::desk(a.common.seed)
    };
    let corpus = Corpus::generate(&spec)?;
    corpus.write(&layout.corpus())?;
    println!("wrote {} clips to {}", corpus.clips.len(), layout.corpus().display());
    Ok(())
}

/// What a latent directory was built from; a mismatch forces a rebuild.
#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct LatentMeta {
    provider: String,
    seed: u64,
    corpus: PathBuf,
    mae_steps: usize,
}

#[derive(Serialize, Deserialize)]
struct ItemRow {
    caption: String,
    label: usize,
}

fn write_items(path: &Path, split: &Split<'_>) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for (caption, &label) in split.captions.iter().zip(&split.labels) {
        serde_json::to_writer(&mut f, &ItemRow { caption: caption.clone(), label })?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

fn read_items(path: &Path) -> Result<Vec<ItemRow>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Encoder and latent directory for `a`, reusing an up-to-date one.
fn ensure_latents(a: &EncodeArgs, layout: &Layout) -> Result<(Encoder, PathBuf)> {
    let provider = Provider::from(a.provider);
    let corpus_dir = a.corpus.clone().expect("resolved corpus");
    let dir = layout.ckpt()?.join(format!("latents-{}", provider.tag()));
    let meta = LatentMeta { provider: provider.tag().into(), seed: a.common.seed, corpus: corpus_dir.clone(), mae_steps: a.mae_steps };
    let meta_path = dir.join("meta.json");
    if let Ok(text) = fs::read_to_string(&meta_path) {
        if serde_json::from_str::<LatentMeta>(&text).ok().as_ref() == Some(&meta) {
            let enc = Encoder::from_checkpoint(&Checkpoint::load(dir.join("encoder.ckpt"))?)?;
            println!("reusing latents in {}", dir.display());
            return Ok((enc, dir));
        }
    }
    let corpus = load_corpus(&corpus_dir)?;
    let (train, test) = (Split::of(&corpus, true), Split::of(&corpus, false));
    let mae = MaeConfig { steps: a.mae_steps, ..MaeConfig::default() };
    println!("fitting {} encoder", provider.tag());
    let enc = Encoder::fit(provider, corpus.spec.classes.len(), &train.clips, a.common.seed, &mae)?;
    fs::create_dir_all(&dir)?;
    enc.to_checkpoint().save(dir.join("encoder.ckpt"))?;
    enc.encode_all(&train.clips)?.save(dir.join("train.lat"))?;
    enc.encode_all(&test.clips)?.save(dir.join("test.lat"))?;
    write_items(&dir.join("train.jsonl"), &train)?;
    write_items(&dir.join("test.jsonl"), &test)?;
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)?;
    Ok((enc, dir))
}

fn vocoder_config(profile: Profile, provider: Provider, dim: usize, seed: u64) -> VocoderConfig {
    match profile {
        Profile::Desk => VocoderConfig::desk(provider, dim, seed),
        Profile::Paper => VocoderConfig::paper(provider, dim, seed),
        Profile::Smoke => VocoderConfig {
            hops: vec![100, 50],
            widths: vec![8, 8],
            blocks: 1,
            cond_width: 8,
            cond_blocks: 1,
            time_dim: 8,
            time_hidden: 8,
            ..VocoderConfig::desk(provider, dim, seed)
        },
    }
}

fn dit_config(profile: Profile, lat: &LatentSeq, seed: u64) -> DitConfig {
    let (p, d, t, r) = (lat.provider, lat.dim(), lat.frames(), lat.frame_rate);
    match profile {
        Profile::Desk => DitConfig::desk(p, d, t, r, seed),
        Profile::Paper => DitConfig::paper(p, d, t, r, seed),
        Profile::Smoke => DitConfig { frame_rate: r, ..DitConfig::tiny(p, d, t, seed) },
    }
}

fn log_progress(every: usize, label: &'static str) -> impl FnMut(usize, f64) {
    move |step, loss| {
        if every > 0 && step % every == 0 {
            println!("{label} step {step} loss {loss:.6}");
        }
    }
}

fn train_vocoder_cmd(name: &str, mut a: TrainVocoderArgs) -> Result<()> {
    resolve_corpus(&mut a.encode);
    let layout = Layout::new(&a.encode.common);
    announce(name, &a, &layout.reports())?;
    let (_, dir) = ensure_latents(&a.encode, &layout)?;
    let lat = LatentSeq::load(dir.join("train.lat"))?;
    let corpus = load_corpus(a.encode.corpus.as_ref().expect("resolved corpus"))?;
    let train = Split::of(&corpus, true);

    let seed = a.encode.common.seed;
    let mut cfg = vocoder_config(a.profile, lat.provider, lat.dim(), seed);
    cfg.mode = match a.mode {
        ModeArg::Flow => VocoderMode::Flow,
        ModeArg::Regression => VocoderMode::Regression,
    };
    let mut voc = Vocoder::new(cfg)?;
    let tc = TrainConfig {
        steps: a.steps,
        batch: a.batch,
        lr: a.lr,
        sigma: a.sigma,
        segment_frames: (a.segment_frames > 0).then_some(a.segment_frames),
        seed,
    };
    let report = train_vocoder(&mut voc, &train.clips, &lat, &tc, log_progress(a.log_every, "vocoder"))?;
    let stem = match a.mode {
        ModeArg::Flow => format!("voc-{}", lat.provider.tag()),
        ModeArg::Regression => format!("voc-{}-regression", lat.provider.tag()),
    };
    let path = layout.ckpt()?.join(format!("{stem}.ckpt"));
    voc.save(&path)?;
    write_loss_csv(&layout.reports().join(format!("{stem}-loss.csv")), &report.losses)?;
    let n = report.losses.len().min(100);
    println!("saved {} (loss {:.6} -> {:.6})", path.display(), report.window_mean(0, n), report.tail_mean(n));
    Ok(())
}

fn train_dit_cmd(name: &str, a: TrainDitArgs) -> Result<()> {
    let layout = Layout::new(&a.common);
    announce(name, &a, &layout.reports())?;
    let lat = LatentSeq::load(a.latents.join("train.lat")).with_context(|| format!("loading latents from {}", a.latents.display()))?;
    let captions: Vec<String> = read_items(&a.latents.join("train.jsonl"))?.into_iter().map(|r| r.caption).collect();
    let mut dit = Dit::new(dit_config(a.profile, &lat, a.common.seed))?;
    let tc = DitTrainConfig { steps: a.steps, batch: a.batch, lr: a.lr, sigma: a.sigma, drop_prob: a.drop_prob, seed: a.common.seed };
    let losses = train_dit(&mut dit, &lat, &captions, &tc, log_progress(a.log_every, "dit"))?;
    let stem = format!("dit-{}", lat.provider.tag());
    let path = layout.ckpt()?.join(format!("{stem}.ckpt"));
    dit.save(&path)?;
    write_loss_csv(&layout.reports().join(format!("{stem}-loss.csv")), &losses)?;
    println!("saved {}", path.display());
    Ok(())
}

fn load_models(g: &GenArgs) -> Result<(Dit, Vocoder)> {
    let dit = Dit::load(&g.dit).with_context(|| format!("loading DiT {}", g.dit.display()))?;
    let voc = Vocoder::load(&g.voc).with_context(|| format!("loading vocoder {}", g.voc.display()))?;
    Ok((dit, voc))
}

fn slug(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

fn sample(name: &str, mut a: SampleArgs) -> Result<()> {
    let layout = Layout::new(&a.common);
    if a.out.is_none() {
        a.out = Some(layout.gen_dir()?.join(format!("sample-{}.wav", slug(&a.caption))));
    }
    announce(name, &a, &layout.reports())?;
    let (dit, voc) = load_models(&a.sampling)?;
    let opts = GenConfig { cfg_scale: a.sampling.cfg, steps_latent: a.sampling.steps_latent, steps_wav: a.sampling.steps_wav, seed: a.common.seed, chunk: 1 };
    let (_, audio) = generate_audio(&dit, &voc, &[a.caption.clone()], &opts)?;
    let out = a.out.as_ref().expect("resolved output");
    write_wav(out, &audio[0])?;
    println!("wrote {}", out.display());
    Ok(())
}

fn numbered(path: &Path, i: usize) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}-{i}.wav"))
}

fn vocode(name: &str, mut a: VocodeArgs) -> Result<()> {
    let layout = Layout::new(&a.common);
    if a.out.is_none() {
        a.out = Some(layout.gen_dir()?.join("vocoded.wav"));
    }
    announce(name, &a, &layout.reports())?;
    let lat = LatentSeq::load(&a.latents).with_context(|| format!("loading latents {}", a.latents.display()))?;
    let voc = Vocoder::load(&a.ckpt).with_context(|| format!("loading vocoder {}", a.ckpt.display()))?;
    let sampler = SamplerConfig { sigma: a.sigma, ..SamplerConfig::new(a.steps, PredictionKind::Data, a.common.seed) };
    let audio = voc.vocode(&lat, &sampler)?;
    let out = a.out.as_ref().expect("resolved output");
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    if audio.len() == 1 {
        write_wav(out, &audio[0])?;
        println!("wrote {}", out.display());
    } else {
        for (i, clip) in audio.iter().enumerate() {
            write_wav(numbered(out, i), clip)?;
        }
        println!("wrote {} clips next to {}", audio.len(), out.display());
    }
    Ok(())
}

fn file_stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or("model").to_string()
}

#[derive(Serialize)]
struct ClipRow<'a> {
    index: usize,
    caption: &'a str,
    label: usize,
    predicted: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    mel_distance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stft_distance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    waveform_l1: Option<f64>,
}

fn eval(name: &str, mut a: EvalArgs) -> Result<()> {
    let layout = Layout::new(&a.common);
    if a.corpus.is_none() {
        a.corpus = Some(layout.corpus());
    }
    let recon = a.dit.is_none();
    if recon && a.latents.is_none() {
        return Err(CliError::Usage("eval needs --dit (generation) or --latents (reconstruction)".into()).into());
    }
    if a.name.is_none() {
        let base = a.dit.as_ref().unwrap_or(&a.voc);
        a.name = Some(format!("{}-{}", if recon { "recon" } else { "gen" }, file_stem(base)));
    }
    announce(name, &a, &layout.reports())?;
    let corpus = load_corpus(a.corpus.as_ref().expect("resolved corpus"))?;
    let (train, test) = (Split::of(&corpus, true), Split::of(&corpus, false));
    let voc = Vocoder::load(&a.voc).with_context(|| format!("loading vocoder {}", a.voc.display()))?;
    let opts = GenConfig { cfg_scale: a.cfg, steps_latent: a.steps_latent, steps_wav: a.steps_wav, seed: a.common.seed, ..GenConfig::default() };
    let audio = match &a.dit {
        Some(p) => {
            let dit = Dit::load(p).with_context(|| format!("loading DiT {}", p.display()))?;
            generate_audio(&dit, &voc, &test.captions, &opts)?.1
        }
        None => {
            let dir = a.latents.as_ref().expect("checked above");
            let lat = LatentSeq::load(dir.join("test.lat")).with_context(|| format!("loading latents from {}", dir.display()))?;
            if lat.batch() != test.len() {
                return Err(semvoc::Error::Data(format!("{} test latents for {} test clips", lat.batch(), test.len())).into());
            }
            reconstruct_audio(&voc, &lat, &opts)?
        }
    };

    let judge = Judge::fit(&train.clips, &train.labels, corpus.spec.classes.len())?;
    let fd = FdFeaturizer::new(MelConfig::desk(), 0);
    let score = score_audio(&judge, &fd, &audio, &test.labels, &test.clips)?;
    let tag = a.name.clone().expect("resolved name");
    let wav_dir = layout.gen_dir()?.join(&tag);
    fs::create_dir_all(&wav_dir)?;
    let reports = layout.reports();
    let mut rows = std::io::BufWriter::new(fs::File::create(reports.join(format!("eval-{tag}.jsonl")))?);
    let mut sums = [0.0; 3];
    for (i, clip) in audio.iter().enumerate() {
        write_wav(wav_dir.join(format!("{i:03}.wav")), clip)?;
        let m = if recon { Some(recon_metrics(test.clips[i], clip, &MelConfig::desk(), &voc.cfg.hops)?) } else { None };
        if let Some(m) = &m {
            sums[0] += m.mel;
            sums[1] += m.stft;
            sums[2] += m.waveform;
        }
        let row = ClipRow {
            index: i,
            caption: &test.captions[i],
            label: test.labels[i],
            predicted: judge.predict(clip)?,
            mel_distance: m.as_ref().map(|m| m.mel),
            stft_distance: m.as_ref().map(|m| m.stft),
            waveform_l1: m.as_ref().map(|m| m.waveform),
        };
        serde_json::to_writer(&mut rows, &row)?;
        rows.write_all(b"\n")?;
    }
    rows.flush()?;
    let mut table = format!("metric,value\naccuracy,{:.6}\nfd,{:.9}\n", score.accuracy, score.fd);
    if recon {
        let n = audio.len() as f64;
        table += &format!("mel_distance,{:.9}\nstft_distance,{:.9}\nwaveform_l1,{:.9}\n", sums[0] / n, sums[1] / n, sums[2] / n);
    }
    fs::write(reports.join(format!("eval-{tag}.csv")), &table)?;
    print!("{table}");
    Ok(())
}

/// Encoder latents for every clip of the corpus plus their labels.
fn all_latents(a: &mut EncodeArgs) -> Result<(Corpus, LatentSeq, Vec<usize>)> {
    resolve_corpus(a);
    let layout = Layout::new(&a.common);
    let (enc, _) = ensure_latents(a, &layout)?;
    let corpus = load_corpus(a.corpus.as_ref().expect("resolved corpus"))?;
    let (lat, labels) = {
        let all = Split::all(&corpus);
        (enc.encode_all(&all.clips)?, all.labels)
    };
    Ok((corpus, lat, labels))
}

fn probe(name: &str, mut a: ProbeArgs) -> Result<()> {
    resolve_corpus(&mut a.encode);
    let layout = Layout::new(&a.encode.common);
    announce(name, &a, &layout.reports())?;
    if a.split_seeds == 0 {
        return Err(CliError::Usage("--split-seeds must be at least 1".into()).into());
    }
    let (_, lat, labels) = all_latents(&mut a.encode)?;
    let mut table = String::from("split_seed,accuracy\n");
    let mut total = 0.0;
    let base = a.encode.common.seed;
    for s in base..base + a.split_seeds {
        let r = probe_latents(&lat, &labels, s, &ProbeConfig::default())?;
        table += &format!("{s},{:.6}\n", r.accuracy);
        total += r.accuracy;
    }
    table += &format!("mean,{:.6}\n", total / a.split_seeds as f64);
    fs::write(layout.reports().join(format!("probe-{}.csv", lat.provider.tag())), &table)?;
    print!("{table}");
    Ok(())
}

fn project(name: &str, mut a: ProjectArgs) -> Result<()> {
    resolve_corpus(&mut a.encode);
    let layout = Layout::new(&a.encode.common);
    announce(name, &a, &layout.reports())?;
    let (corpus, lat, labels) = all_latents(&mut a.encode)?;
    let pca = pca_project(&lat)?;
    let names: Vec<String> = labels.iter().map(|&l| corpus.spec.classes[l].name.clone()).collect();
    let path = layout.reports().join(format!("pca-{}.csv", lat.provider.tag()));
    write_pca_csv(&path, &pca, &names)?;
    let (inter, intra) = centroid_separation(&pca.coords, &labels);
    println!("explained variance {:.4} {:.4}", pca.explained_ratio[0], pca.explained_ratio[1]);
    println!("centroid distance {inter:.6}, within-class spread {intra:.6}, ratio {:.4}", inter / intra.max(1e-12));
    println!("wrote {}", path.display());
    Ok(())
}

fn parse_grid<T: std::str::FromStr>(flag: &str, s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<T>().map_err(|_| CliError::Config(format!("--{flag}: `{t}` is not a number")).into()))
        .collect()
}

fn sweep_cmd(name: &str, mut a: SweepArgs) -> Result<()> {
    let layout = Layout::new(&a.common);
    if a.corpus.is_none() {
        a.corpus = Some(layout.corpus());
    }
    if a.out.is_none() {
        a.out = Some(layout.reports().join("sweep.csv"));
    }
    announce(name, &a, &layout.reports())?;
    let cfg_grid: Vec<f64> = parse_grid("cfg-grid", &a.cfg_grid)?;
    let step_grid: Vec<usize> = parse_grid("step-grid", &a.step_grid)?;
    if cfg_grid.is_empty() || step_grid.is_empty() {
        return Err(CliError::Config("sweep grids must be non-empty".into()).into());
    }
    let corpus = load_corpus(a.corpus.as_ref().expect("resolved corpus"))?;
    let (train, test) = (Split::of(&corpus, true), Split::of(&corpus, false));
    let dit = Dit::load(&a.dit).with_context(|| format!("loading DiT {}", a.dit.display()))?;
    let voc = Vocoder::load(&a.voc).with_context(|| format!("loading vocoder {}", a.voc.display()))?;
    let judge = Judge::fit(&train.clips, &train.labels, corpus.spec.classes.len())?;
    let fd = FdFeaturizer::new(MelConfig::desk(), 0);
    let setup = SweepSetup {
        dit: &dit,
        voc: &voc,
        judge: &judge,
        fd: &fd,
        test: &test,
        base: GenConfig { steps_wav: a.steps_wav, seed: a.common.seed, ..GenConfig::default() },
    };
    let rows = sweep(&setup, &cfg_grid, &step_grid, |r| {
        println!("cfg {} steps {}: fd {:.6} accuracy {:.4}", r.cfg_scale, r.steps, r.fd, r.accuracy)
    })?;
    let out = a.out.as_ref().expect("resolved output");
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_sweep_csv(out, &rows)?;
    println!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}

fn grad_check(name: &str, a: GradCheckArgs) -> Result<()> {
    let layout = Layout::new(&a.common);
    announce(name, &a, &layout.reports())?;
    let cases = run_suite(a.common.seed)?;
    let mut table = String::from("case,max_rel_err,checked,pass\n");
    for c in &cases {
        table += &format!("{},{:.3e},{},{}\n", c.name, c.max_rel_err, c.checked, c.passes());
        println!("{:<20} rel err {:.3e} over {:>4} elements  {}", c.name, c.max_rel_err, c.checked, if c.passes() { "ok" } else { "FAIL" });
    }
    fs::write(layout.reports().join("grad-check.csv"), &table)?;
    let failed: Vec<&str> = cases.iter().filter(|c| !c.passes()).map(|c| c.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(CliError::Check(format!("{} gradient case(s) above {GRAD_TOL}: {}", failed.len(), failed.join(", "))).into());
    }
    println!("all {} cases below {GRAD_TOL}", cases.len());
    Ok(())
}
