use semvoc::flow::{gaussian, PredictionKind, SamplerConfig};
use semvoc::grad::check::{check_params, FdOptions};
use semvoc::grad::nn::Init;
use semvoc::grad::{Array, ParamStore, Tape};
use semvoc::latents::{LatentSeq, Provider};
use semvoc::layers::Attention;
use semvoc::rng_from;
use semvoc::textlatent::*;

/// Replaces every all-zero parameter with small random values so that
/// zero-initialized gates and projections carry gradient and signal.
fn randomize_zeros(store: &mut ParamStore, seed: u64) {
    let mut init = Init::new(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.value(id).data().iter().all(|&v| v == 0.0) {
            let shape = store.value(id).shape().to_vec();
            *store.value_mut(id) = init.normal(&shape, 0.3);
        }
    }
}

fn tiny(seed: u64) -> Dit {
    let mut dit = Dit::new(DitConfig::tiny(Provider::SemanticOracle, 3, 5, seed)).unwrap();
    randomize_zeros(&mut dit.store, seed + 100);
    dit
}

fn run(dit: &Dit, x: &Array, t: &[f64], caps: &[CaptionTokens]) -> Array {
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let out = dit.forward(&mut tape, xv, t, caps).unwrap();
    tape.value(out).clone()
}

#[test]
fn tokenizer_pads_truncates_and_maps_unknown_words() {
    let v = Vocab::default();
    let a = v.tokenize("sine low", 4);
    assert_eq!(a.mask, vec![true, true, false, false]);
    assert_eq!(&a.ids[2..], &[PAD, PAD]);
    assert!(a.ids.iter().all(|&i| i < v.len()));
    assert_eq!(a, v.tokenize("sine  low", 4));

    let b = v.tokenize("sine high", 4);
    assert_eq!(a.ids[0], b.ids[0]);
    assert_ne!(a.ids[1], b.ids[1]);

    let c = v.tokenize("sine purple", 4);
    assert_eq!(c.ids[1], UNK);
    assert_eq!(v.id("<pad>"), UNK);

    let empty = v.tokenize("", 4);
    assert_eq!(empty.ids, vec![UNK, PAD, PAD, PAD]);
    assert_eq!(empty.mask, vec![true, false, false, false]);

    assert_eq!(v.tokenize("a b c d e f", 3).mask, vec![true; 3]);
}

#[test]
fn caption_embeddings_differ_only_where_tokens_differ() {
    let dit = Dit::new(DitConfig::tiny(Provider::SemanticOracle, 3, 5, 1)).unwrap();
    let caps = [dit.tokenize("sine low"), dit.tokenize("sine high"), dit.tokenize("sine low")];
    let mut tape = Tape::inference();
    let e = dit.embed_text(&mut tape, &caps);
    let e = tape.value(e).clone();
    let (m, w) = (dit.cfg.max_tokens, dit.cfg.width);
    let row = |b: usize, p: usize| e.data()[(b * m + p) * w..(b * m + p + 1) * w].to_vec();
    for p in 0..m {
        assert_eq!(row(0, p), row(2, p));
        assert_eq!(row(0, p) == row(1, p), p != 1, "position {p}");
    }
}

#[test]
fn output_is_zero_at_init_and_keeps_shape() {
    let dit = Dit::new(DitConfig::desk(Provider::SemanticOracle, 6, 9, 80.0, 2)).unwrap();
    let mut rng = rng_from(2, &[]);
    for (b, t) in [(1, 9), (3, 4), (2, 17)] {
        let x = gaussian(&[b, 6, t], 1.0, &mut rng);
        let caps = vec![dit.tokenize("noise-burst high"); b];
        let out = run(&dit, &x, &vec![0.3; b], &caps);
        assert_eq!(out.shape(), &[b, 6, t]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn shape_and_mask_mismatches_are_rejected() {
    let dit = tiny(3);
    let mut tape = Tape::inference();
    let x = tape.constant(Array::zeros(&[2, 4, 5]));
    assert!(dit.forward(&mut tape, x, &[0.1, 0.2], &[dit.tokenize("a"), dit.tokenize("b")]).is_err());
    let x = tape.constant(Array::zeros(&[2, 3, 5]));
    assert!(dit.forward(&mut tape, x, &[0.1], &[dit.tokenize("a"), dit.tokenize("b")]).is_err());
    let mut bad = dit.tokenize("a");
    bad.mask.pop();
    assert!(dit.forward(&mut tape, x, &[0.1, 0.2], &[bad, dit.tokenize("b")]).is_err());
    let mut cfg = DitConfig::tiny(Provider::SemanticOracle, 3, 5, 0);
    cfg.heads = 3;
    assert!(Dit::new(cfg).is_err());
}

#[test]
fn attention_rows_sum_to_one_and_masked_keys_get_zero_weight() {
    let mut store = ParamStore::new();
    let mut init = Init::new(4);
    let attn = Attention::new(&mut store, &mut init, "a", 8, 2);
    let mut rng = rng_from(4, &[]);
    let q = gaussian(&[2, 3, 8], 1.0, &mut rng);
    let kv = gaussian(&[2, 5, 8], 3.0, &mut rng);
    let valid = vec![vec![true, true, false, true, false], vec![true, false, false, false, false]];
    let mut tape = Tape::inference();
    let (qv, kvv) = (tape.constant(q), tape.constant(kv));
    let (_, w) = attn.forward_with_weights(&mut tape, &store, qv, kvv, Some(&valid));
    let w = tape.value(w);
    assert_eq!(w.shape(), &[4, 3, 5]);
    for (r, row) in w.data().chunks(5).enumerate() {
        let b = r / 6;
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (j, &p) in row.iter().enumerate() {
            if valid[b][j] {
                assert!(p > 0.0);
            } else {
                assert_eq!(p, 0.0);
            }
        }
    }
}

#[test]
fn padded_token_embedding_does_not_affect_output() {
    let mut dit = tiny(5);
    let mut rng = rng_from(5, &[]);
    let x = gaussian(&[2, 3, 5], 1.0, &mut rng);
    let caps = [dit.tokenize("square mid"), dit.tokenize("")];
    let before = run(&dit, &x, &[0.2, 0.7], &caps);
    let pad_row = dit.store.id("text.tokens").unwrap();
    let w = dit.cfg.width;
    for v in &mut dit.store.value_mut(pad_row).data_mut()[PAD * w..(PAD + 1) * w] {
        *v += 10.0;
    }
    assert_eq!(before, run(&dit, &x, &[0.2, 0.7], &caps));
    // Sanity: editing a visible token does change the output.
    let unk = UNK * w;
    dit.store.value_mut(pad_row).data_mut()[unk] += 1.0;
    assert_ne!(before, run(&dit, &x, &[0.2, 0.7], &caps));
}

#[test]
fn permuting_the_batch_permutes_outputs() {
    let dit = tiny(6);
    let mut rng = rng_from(6, &[]);
    let x = gaussian(&[3, 3, 5], 1.0, &mut rng);
    let ts = [0.1, 0.5, 0.9];
    let caps = [dit.tokenize("sine low"), dit.tokenize("noise"), dit.tokenize("")];
    let out = run(&dit, &x, &ts, &caps);
    let perm = [2, 0, 1];
    let n = 15;
    let xp = Array::new(vec![3, 3, 5], perm.iter().flat_map(|&i| x.data()[i * n..(i + 1) * n].to_vec()).collect());
    let tp: Vec<f64> = perm.iter().map(|&i| ts[i]).collect();
    let cp: Vec<CaptionTokens> = perm.iter().map(|&i| caps[i].clone()).collect();
    let outp = run(&dit, &xp, &tp, &cp);
    for (k, &i) in perm.iter().enumerate() {
        for j in 0..n {
            assert!((outp.data()[k * n + j] - out.data()[i * n + j]).abs() < 1e-12);
        }
    }
}

#[test]
fn tiny_dit_gradients_match_finite_differences() {
    let dit = tiny(7);
    let mut rng = rng_from(7, &[]);
    let x = gaussian(&[2, 3, 5], 1.0, &mut rng);
    let caps = [dit.tokenize("chirp-up high"), dit.tokenize("")];
    let ids: Vec<_> = dit.store.ids().collect();
    let opts = FdOptions { h: 1e-5, max_per_input: 4, seed: 7 };
    let report = check_params(&dit.store, &ids, &opts, |tape, s| {
        let mut m = dit.clone();
        m.store = s.clone();
        let xv = tape.constant(x.clone());
        m.forward(tape, xv, &[0.25, 0.8], &caps).unwrap()
    })
    .unwrap();
    assert!(report.checked > 50);
    assert!(report.passes(1e-2), "max rel err {}", report.max_rel_err);
}

fn toy_latents(n: usize, seed: u64) -> (LatentSeq, Vec<String>) {
    let mut rng = rng_from(seed, &[]);
    let mut data = gaussian(&[n, 3, 5], 0.1, &mut rng).into_data();
    let mut caps = Vec::new();
    for i in 0..n {
        let class = i % 2;
        for v in &mut data[i * 15..i * 15 + 5] {
            *v += if class == 0 { 2.0 } else { -2.0 };
        }
        caps.push(if class == 0 { "sine low" } else { "noise-burst high" }.to_string());
    }
    (LatentSeq::new(Array::new(vec![n, 3, 5], data), 80.0, Provider::SemanticOracle).unwrap(), caps)
}

#[test]
fn training_is_deterministic_and_learns() {
    let (lat, caps) = toy_latents(8, 8);
    let tc = DitTrainConfig { steps: 300, batch: 4, lr: 3e-3, seed: 8, ..Default::default() };
    let cfg = DitConfig::tiny(Provider::SemanticOracle, 3, 5, 8);
    let mut a = Dit::new(cfg.clone()).unwrap();
    let la = train_dit(&mut a, &lat, &caps, &tc, |_, _| {}).unwrap();
    let mut b = Dit::new(cfg).unwrap();
    let lb = train_dit(&mut b, &lat, &caps, &tc, |_, _| {}).unwrap();
    assert_eq!(la, lb);
    assert_eq!(a.to_checkpoint().unwrap(), b.to_checkpoint().unwrap());
    let head: f64 = la[..30].iter().sum::<f64>() / 30.0;
    let tail: f64 = la[270..].iter().sum::<f64>() / 30.0;
    assert!(tail < 0.8 * head, "head {head} tail {tail}");
}

#[test]
fn training_rejects_mismatched_inputs() {
    let (lat, caps) = toy_latents(4, 9);
    let tc = DitTrainConfig { steps: 1, batch: 2, ..Default::default() };
    let mut m = Dit::new(DitConfig::tiny(Provider::AcousticMel, 3, 5, 0)).unwrap();
    assert!(matches!(train_dit(&mut m, &lat, &caps, &tc, |_, _| {}), Err(semvoc::Error::Provider(_))));
    let mut m = Dit::new(DitConfig::tiny(Provider::SemanticOracle, 3, 5, 0)).unwrap();
    assert!(train_dit(&mut m, &lat, &caps[..3], &tc, |_, _| {}).is_err());
    let mut m = Dit::new(DitConfig::tiny(Provider::SemanticOracle, 3, 6, 0)).unwrap();
    assert!(train_dit(&mut m, &lat, &caps, &tc, |_, _| {}).is_err());
    let mut m = Dit::new(DitConfig::tiny(Provider::SemanticOracle, 3, 5, 0)).unwrap();
    let bad = DitTrainConfig { drop_prob: 1.5, ..tc };
    assert!(train_dit(&mut m, &lat, &caps, &bad, |_, _| {}).is_err());
}

#[test]
fn guidance_identities() {
    let mut dit = tiny(10);
    dit.stats = (vec![1.0, -1.0, 0.5], vec![2.0, 0.5, 1.0]);
    let mut s = SamplerConfig::new(8, PredictionKind::Velocity, 10);
    s.guidance_scale = 1.0;
    let cond = dit.generate(&["sine low", "noise-burst high"], &s).unwrap();
    assert_eq!(cond.provider, Provider::SemanticOracle);
    assert_eq!((cond.batch(), cond.dim(), cond.frames()), (2, 3, 5));

    // s = 0 ignores the caption entirely.
    s.guidance_scale = 0.0;
    let u1 = dit.generate(&["sine low", "noise-burst high"], &s).unwrap();
    let u2 = dit.generate(&["square mid", "chirp-down low"], &s).unwrap();
    assert_eq!(u1, u2);
    assert_ne!(u1, cond);

    // s = 1 with empty captions is the unconditional output.
    s.guidance_scale = 1.0;
    assert_eq!(dit.generate(&["", ""], &s).unwrap(), u1);

    s.kind = PredictionKind::Data;
    assert!(dit.generate(&["sine low"], &s).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let mut dit = tiny(11);
    dit.stats = (vec![0.5; 3], vec![2.0; 3]);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("dit.ckpt");
    dit.save(&p).unwrap();
    let back = Dit::load(&p).unwrap();
    assert_eq!(back.cfg, dit.cfg);
    assert_eq!(back.stats, dit.stats);
    let s = SamplerConfig::new(4, PredictionKind::Velocity, 1);
    let a = dit.generate(&["click-train mid"], &s).unwrap();
    let b = back.generate(&["click-train mid"], &s).unwrap();
    for (x, y) in a.data.data().iter().zip(b.data.data()) {
        assert!((x - y).abs() < 1e-4);
    }
}
