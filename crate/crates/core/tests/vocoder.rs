use semvoc::flow::{gaussian, PredictionKind, SamplerConfig};
use semvoc::grad::check::{check_params, FdOptions};
use semvoc::grad::nn::{sinusoidal_embedding, Init};
use semvoc::grad::{Array, ParamStore, Tape};
use semvoc::latents::{LatentSeq, Provider};
use semvoc::rng_from;
use semvoc::vocoder::*;
use semvoc::AudioClip;

fn randomize_zeros(store: &mut ParamStore, seed: u64, skip: &str) {
    let mut init = Init::new(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !skip.is_empty() && store.name(id).contains(skip) {
            continue;
        }
        if store.value(id).data().iter().all(|&v| v == 0.0) {
            let shape = store.value(id).shape().to_vec();
            *store.value_mut(id) = init.normal(&shape, 0.3);
        }
    }
}

/// Two branches (hops 8 and 4), small enough to run in milliseconds.
fn small(seed: u64) -> VocoderConfig {
    VocoderConfig { hops: vec![8, 4], widths: vec![6, 4], ..VocoderConfig::tiny(Provider::SemanticOracle, 3, seed) }
}

fn latents(b: usize, t: usize, d: usize, seed: u64) -> Array {
    gaussian(&[b, d, t], 1.0, &mut rng_from(seed, &[]))
}

fn value_of(f: impl FnOnce(&mut Tape) -> semvoc::grad::Var) -> Array {
    let mut tape = Tape::inference();
    let v = f(&mut tape);
    tape.value(v).clone()
}

#[test]
fn sinusoidal_encoding_at_zero() {
    let e = sinusoidal_embedding(&[0.0], 8, 1000.0);
    for (i, &v) in e.data().iter().enumerate() {
        assert_eq!(v, if i % 2 == 0 { 0.0 } else { 1.0 });
    }
}

#[test]
fn config_validation() {
    assert!(VocoderConfig::desk(Provider::SemanticOracle, 64, 0).validate().is_ok());
    let p = VocoderConfig::paper(Provider::SemanticOracle, 768, 0);
    assert_eq!((p.hops.as_slice(), p.widths.as_slice(), p.blocks, p.cond_width), (&[320, 160, 80][..], &[768, 512, 384][..], 8, 512));
    let mut bad = small(0);
    bad.hops = vec![8, 3];
    assert!(Vocoder::new(bad).is_err());
    let mut bad = small(0);
    bad.widths.pop();
    assert!(Vocoder::new(bad).is_err());
    let d = VocoderConfig::desk(Provider::AcousticMel, 40, 0);
    assert_eq!((d.hop_max(), d.frame_rate()), (100, 80.0));
}

#[test]
fn conditioner_with_zero_residuals_is_normalized_projection() {
    let mut voc = Vocoder::new(small(1)).unwrap();
    let ids: Vec<_> = voc.store.ids().filter(|&id| voc.store.name(id).starts_with("cond.block0.pw2")).collect();
    assert_eq!(ids.len(), 2);
    for id in ids {
        let shape = voc.store.value(id).shape().to_vec();
        *voc.store.value_mut(id) = Array::zeros(&shape);
    }
    let (b, d, t) = (2, 3, 6);
    let lat = latents(b, t, d, 1);
    let out = value_of(|tape| voc.condition(tape, &lat).unwrap());
    assert_eq!(out.shape(), &[b, 5, t]);

    // Hand-rolled "same" conv with kernel 3, then y / rms over channels.
    let w = voc.store.value(voc.store.id("cond.proj.w").unwrap()).clone();
    let bias = voc.store.value(voc.store.id("cond.proj.b").unwrap()).clone();
    for bi in 0..b {
        let mut proj = vec![vec![0.0; t]; 5];
        for (o, row) in proj.iter_mut().enumerate() {
            for (k, slot) in row.iter_mut().enumerate() {
                let mut acc = bias.data()[o];
                for i in 0..d {
                    for j in 0..3 {
                        let src = k as isize + j as isize - 1;
                        if (0..t as isize).contains(&src) {
                            acc += w.data()[(o * d + i) * 3 + j] * lat.data()[(bi * d + i) * t + src as usize];
                        }
                    }
                }
                *slot = acc;
            }
        }
        for k in 0..t {
            let rms = ((0..5).map(|o| proj[o][k] * proj[o][k]).sum::<f64>() / 5.0 + 1e-6).sqrt();
            for (o, row) in proj.iter().enumerate() {
                let got = out.data()[(bi * 5 + o) * t + k];
                assert!((got - row[k] / rms).abs() < 1e-10, "b {bi} c {o} t {k}");
            }
        }
    }
}

#[test]
fn layernorm_fallback_normalizes_channels() {
    let cfg = VocoderConfig { norm: NormKind::LayerNorm, cond_blocks: 0, ..small(2) };
    let voc = Vocoder::new(cfg).unwrap();
    let lat = latents(1, 5, 3, 2);
    let out = value_of(|tape| voc.condition(tape, &lat).unwrap());
    for k in 0..5 {
        let col: Vec<f64> = (0..5).map(|c| out.data()[c * 5 + k]).collect();
        let mean = col.iter().sum::<f64>() / 5.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
        assert!(mean.abs() < 1e-10 && (var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn conditioner_has_no_cross_batch_mixing() {
    let voc = Vocoder::new(small(3)).unwrap();
    let a = latents(1, 7, 3, 30);
    let b = latents(1, 7, 3, 31);
    let both = Array::new(vec![2, 3, 7], [a.data(), b.data()].concat());
    let oa = value_of(|tape| voc.condition(tape, &a).unwrap());
    let ob = value_of(|tape| voc.condition(tape, &b).unwrap());
    let o2 = value_of(|tape| voc.condition(tape, &both).unwrap());
    let n = oa.numel();
    for i in 0..n {
        assert!((o2.data()[i] - oa.data()[i]).abs() < 1e-12);
        assert!((o2.data()[n + i] - ob.data()[i]).abs() < 1e-12);
    }
    assert!(voc.condition(&mut Tape::inference(), &latents(1, 7, 4, 0)).is_err());
}

#[test]
fn fresh_vocoder_predicts_silence_of_the_right_length() {
    let voc = Vocoder::new(small(4)).unwrap();
    let lat = latents(2, 6, 3, 4);
    let x_t = gaussian(&[2, 48], 1.0, &mut rng_from(4, &[1]));
    let out = value_of(|tape| {
        let c = voc.condition(tape, &lat).unwrap();
        voc.predict(tape, &x_t, &[0.3, 0.6], c).unwrap()
    });
    assert_eq!(out.shape(), &[2, 48]);
    assert!(out.data().iter().all(|&v| v == 0.0));

    let mut tape = Tape::inference();
    let c = voc.condition(&mut tape, &lat).unwrap();
    assert!(voc.predict(&mut tape, &gaussian(&[2, 44], 1.0, &mut rng_from(0, &[])), &[0.1, 0.2], c).is_err());
    assert!(voc.predict(&mut tape, &x_t, &[0.1], c).is_err());
}

#[test]
fn zero_time_and_latent_terms_leave_hidden_state_unchanged() {
    // With the time MLP output and latent projections at zero, the
    // prediction must not depend on the latents or on t.
    let mut voc = Vocoder::new(small(5)).unwrap();
    randomize_zeros(&mut voc.store, 50, ".latent");
    let ids: Vec<_> = voc.store.ids().filter(|&id| voc.store.name(id).contains(".time2")).collect();
    for id in ids {
        let shape = voc.store.value(id).shape().to_vec();
        *voc.store.value_mut(id) = Array::zeros(&shape);
    }
    let x_t = gaussian(&[1, 40], 1.0, &mut rng_from(5, &[]));
    let run = |lat: &Array, t: f64| {
        value_of(|tape| {
            let c = voc.condition(tape, lat).unwrap();
            voc.predict(tape, &x_t, &[t], c).unwrap()
        })
    };
    let base = run(&latents(1, 5, 3, 1), 0.2);
    assert!(base.data().iter().any(|&v| v != 0.0));
    assert_eq!(base, run(&latents(1, 5, 3, 2), 0.2));
    assert_eq!(base, run(&latents(1, 5, 3, 1), 0.9));
}

#[test]
fn average_of_branches_and_single_branch_isolation() {
    let mut voc = Vocoder::new(small(6)).unwrap();
    randomize_zeros(&mut voc.store, 60, "");
    let lat = latents(1, 5, 3, 6);
    let x_t = gaussian(&[1, 40], 1.0, &mut rng_from(6, &[]));
    let (branches, mean) = {
        let mut tape = Tape::inference();
        let c = voc.condition(&mut tape, &lat).unwrap();
        let bs = voc.predict_branches(&mut tape, &x_t, &[0.4], c).unwrap();
        let bs: Vec<Array> = bs.iter().map(|&v| tape.value(v).clone()).collect();
        let m = voc.predict(&mut tape, &x_t, &[0.4], c).unwrap();
        (bs, tape.value(m).clone())
    };
    for i in 0..40 {
        assert!((mean.data()[i] - (branches[0].data()[i] + branches[1].data()[i]) / 2.0).abs() < 1e-12);
    }
    for keep in 0..2 {
        let mut v = voc.clone();
        let drop = 1 - keep;
        for id in [format!("branch{drop}.head.w"), format!("branch{drop}.head.b")] {
            let id = v.store.id(&id).unwrap();
            let shape = v.store.value(id).shape().to_vec();
            *v.store.value_mut(id) = Array::zeros(&shape);
        }
        let out = value_of(|tape| {
            let c = v.condition(tape, &lat).unwrap();
            v.predict(tape, &x_t, &[0.4], c).unwrap()
        });
        for i in 0..40 {
            assert!((out.data()[i] - branches[keep].data()[i] / 2.0).abs() < 1e-12);
        }
    }
}

#[test]
fn tiny_vocoder_loss_gradients_match_finite_differences() {
    let mut voc = Vocoder::new(VocoderConfig::tiny(Provider::SemanticOracle, 3, 8)).unwrap();
    randomize_zeros(&mut voc.store, 80, "");
    let lat = latents(2, 4, 3, 8);
    let x1 = gaussian(&[2, 32], 0.5, &mut rng_from(8, &[1]));
    let ids: Vec<_> = voc.store.ids().collect();
    let opts = FdOptions { h: 1e-5, max_per_input: 4, seed: 8 };
    let report = check_params(&voc.store, &ids, &opts, |tape, s| {
        let mut m = voc.clone();
        m.store = s.clone();
        let mut rng = rng_from(80, &[]);
        m.loss(tape, &x1, &lat, &mut rng, 1.0).unwrap()
    })
    .unwrap();
    assert!(report.checked > 60);
    assert!(report.passes(1e-2), "max rel err {}", report.max_rel_err);
}

fn seq(b: usize, t: usize, provider: Provider, seed: u64) -> LatentSeq {
    LatentSeq::new(latents(b, t, 3, seed), 1000.0, provider).unwrap()
}

#[test]
fn vocode_checks_provider_rate_and_sampler() {
    let voc = Vocoder::new(small(9)).unwrap();
    let s = SamplerConfig::new(3, PredictionKind::Data, 1);
    assert!(voc.vocode(&seq(1, 4, Provider::SemanticOracle, 1), &s).is_ok());
    assert!(matches!(voc.vocode(&seq(1, 4, Provider::AcousticMel, 1), &s), Err(semvoc::Error::Provider(_))));
    let wrong_rate = LatentSeq::new(latents(1, 4, 3, 1), 80.0, Provider::SemanticOracle).unwrap();
    assert!(matches!(voc.vocode(&wrong_rate, &s), Err(semvoc::Error::Provider(_))));
    let v = SamplerConfig::new(3, PredictionKind::Velocity, 1);
    assert!(voc.vocode(&seq(1, 4, Provider::SemanticOracle, 1), &v).is_err());
}

#[test]
fn vocode_is_deterministic_and_sized() {
    let mut voc = Vocoder::new(small(10)).unwrap();
    randomize_zeros(&mut voc.store, 100, "");
    let lat = seq(2, 5, Provider::SemanticOracle, 10);
    let s = SamplerConfig::new(4, PredictionKind::Data, 3);
    let a = voc.vocode(&lat, &s).unwrap();
    assert_eq!(a.len(), 2);
    assert!(a.iter().all(|c| c.len() == 40 && c.sample_rate == 8000));
    assert_eq!(a, voc.vocode(&lat, &s).unwrap());
    let other = SamplerConfig { seed: 4, ..s.clone() };
    assert_ne!(a, voc.vocode(&lat, &other).unwrap());
    // Guidance has no effect on the vocoder.
    let guided = SamplerConfig { guidance_scale: 3.5, ..s };
    assert_eq!(a, voc.vocode(&lat, &guided).unwrap());
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let clips: Vec<AudioClip> = (0..2)
        .map(|k| {
            let f = 1000.0 * (k + 1) as f64;
            AudioClip::new((0..64).map(|i| 0.5 * (2.0 * std::f64::consts::PI * f * i as f64 / 8000.0).sin()).collect(), 8000)
        })
        .collect();
    let refs: Vec<&AudioClip> = clips.iter().collect();
    let lat = seq(2, 8, Provider::SemanticOracle, 11);
    let tc = TrainConfig { steps: 200, batch: 2, lr: 3e-3, seed: 11, ..Default::default() };
    let mut a = Vocoder::new(small(11)).unwrap();
    let ra = train_vocoder(&mut a, &refs, &lat, &tc, |_, _| {}).unwrap();
    let mut b = Vocoder::new(small(11)).unwrap();
    let rb = train_vocoder(&mut b, &refs, &lat, &tc, |_, _| {}).unwrap();
    assert_eq!(ra.losses, rb.losses);
    assert_eq!(a.to_checkpoint().unwrap(), b.to_checkpoint().unwrap());
    assert!(ra.tail_mean(20) < 0.5 * ra.window_mean(0, 20), "{} vs {}", ra.tail_mean(20), ra.window_mean(0, 20));

    let crop = TrainConfig { segment_frames: Some(4), steps: 5, ..tc.clone() };
    train_vocoder(&mut a, &refs, &lat, &crop, |_, _| {}).unwrap();
    let too_long = TrainConfig { segment_frames: Some(9), ..crop };
    assert!(train_vocoder(&mut a, &refs, &lat, &too_long, |_, _| {}).is_err());
    assert!(train_vocoder(&mut a, &refs[..1], &lat, &tc, |_, _| {}).is_err());
    let mel = seq(2, 8, Provider::AcousticMel, 11);
    assert!(matches!(train_vocoder(&mut a, &refs, &mel, &tc, |_, _| {}), Err(semvoc::Error::Provider(_))));
}

#[test]
fn regression_mode_is_a_single_deterministic_pass() {
    let mut voc = Vocoder::new(VocoderConfig { mode: VocoderMode::Regression, ..small(12) }).unwrap();
    randomize_zeros(&mut voc.store, 120, "");
    let lat = seq(1, 5, Provider::SemanticOracle, 12);
    let a = voc.vocode(&lat, &SamplerConfig::new(1, PredictionKind::Data, 1)).unwrap();
    let b = voc.vocode(&lat, &SamplerConfig::new(50, PredictionKind::Data, 2)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn checkpoint_round_trip() {
    let mut voc = Vocoder::new(small(13)).unwrap();
    randomize_zeros(&mut voc.store, 130, "");
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("voc.ckpt");
    voc.save(&p).unwrap();
    let back = Vocoder::load(&p).unwrap();
    assert_eq!(back.cfg, voc.cfg);
    let lat = seq(1, 5, Provider::SemanticOracle, 13);
    let s = SamplerConfig::new(4, PredictionKind::Data, 1);
    let (a, b) = (voc.vocode(&lat, &s).unwrap(), back.vocode(&lat, &s).unwrap());
    for (x, y) in a[0].samples.iter().zip(&b[0].samples) {
        assert!((x - y).abs() < 1e-4);
    }
}
