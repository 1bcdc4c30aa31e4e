use realfft::RealFftPlanner;
use semvoc::corpus::*;

#[test]
fn desk_corpus_counts_and_captions() {
    let spec = CorpusSpec::desk(3);
    assert_eq!(spec.classes.len(), 8);
    assert_eq!(spec.clips_per_class, 50);
    assert_eq!(spec.clip_len(), 12800);
    let caps = spec.captions();
    assert_eq!(caps[0], "sine mid");
    for (i, c) in caps.iter().enumerate() {
        assert_eq!(spec.class_of_caption(c), Some(i));
    }
    assert_eq!(spec.class_of_caption("sine high"), None);
}

#[test]
fn written_corpus_has_one_file_per_row_and_is_reproducible() {
    let mut spec = CorpusSpec::desk(3);
    spec.clips_per_class = 3;
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let rows = synth_corpus(&spec, a.path()).unwrap();
    synth_corpus(&spec, b.path()).unwrap();
    assert_eq!(rows.len(), 24);
    let manifest = std::fs::read_to_string(manifest_path(a.path())).unwrap();
    assert_eq!(manifest.lines().count(), 24);
    for row in &rows {
        let fa = std::fs::read(a.path().join(&row.path)).unwrap();
        let fb = std::fs::read(b.path().join(&row.path)).unwrap();
        assert_eq!(fa, fb, "{}", row.path);
        assert_eq!(fa.len(), 44 + 2 * 12800);
    }
    assert_eq!(manifest, std::fs::read_to_string(manifest_path(b.path())).unwrap());

    let loaded = Corpus::load(a.path()).unwrap();
    assert_eq!(loaded.rows, rows);
    assert_eq!(loaded.clips[5].label, Some(1));
    let orig = Corpus::generate(&spec).unwrap();
    for (x, y) in loaded.clips[7].samples.iter().zip(&orig.clips[7].samples) {
        assert!((x - y).abs() <= 1.0 / 32768.0);
    }
}

#[test]
fn clips_depend_on_their_own_seed_only() {
    let spec = CorpusSpec::desk(3);
    let a = generate_clip(&spec, 2, 4).unwrap();
    let b = generate_clip(&spec, 2, 4).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, generate_clip(&spec, 2, 5).unwrap());
    let mut other = spec.clone();
    other.master_seed = 4;
    assert_ne!(a, generate_clip(&other, 2, 4).unwrap());
    assert!(a.samples.iter().all(|v| v.abs() < 1.0));
}

#[test]
fn sine_mid_peaks_at_440() {
    let spec = CorpusSpec::desk(3);
    let n = spec.clip_len();
    let fft = RealFftPlanner::<f64>::new().plan_fft_forward(n);
    for clip in 0..5 {
        let mut x = generate_clip(&spec, 0, clip).unwrap().samples;
        let mut out = fft.make_output_vec();
        fft.process(&mut x, &mut out).unwrap();
        let peak = (0..out.len()).max_by(|&a, &b| out[a].norm().total_cmp(&out[b].norm())).unwrap();
        let expected = 440.0 * n as f64 / spec.sample_rate as f64;
        assert!((peak as f64 - expected).abs() <= 1.0, "peak bin {peak} vs {expected}");
    }
}

#[test]
fn split_is_stratified() {
    let mut spec = CorpusSpec::desk(3);
    spec.clips_per_class = 10;
    let corpus = Corpus::generate(&spec).unwrap();
    let train = corpus.split(true);
    let test = corpus.split(false);
    assert_eq!(train.len() + test.len(), 80);
    for c in 0..8 {
        assert_eq!(test.iter().filter(|r| r.class == c).count(), 2);
    }
}

#[test]
fn invalid_spec_is_rejected() {
    let mut spec = CorpusSpec::desk(3);
    spec.clips_per_class = 0;
    assert!(Corpus::generate(&spec).is_err());
    let mut spec = CorpusSpec::desk(3);
    spec.classes.clear();
    assert!(spec.validate().is_err());
}
