//! Finite-difference gradient suite over every tape op, the composite layers,
//! and the two tiny end-to-end models. Backs the `grad-check` command.

use std::sync::Arc;

use rand::Rng;
use semvoc_grad::check::{check_inputs, check_params, FdOptions, FdReport};
use semvoc_grad::nn::{layer_norm, Init};
use semvoc_grad::{Array, ParamStore, Tape, UnaryOp, Var};
use serde::Serialize;

use crate::dsp::{IrfftFrames, StftPlan};
use crate::flow::{fm_data_loss, fm_velocity_loss, gaussian};
use crate::latents::Provider;
use crate::layers::{Attention, Mlp};
use crate::textlatent::{Dit, DitConfig};
use crate::vocoder::{Vocoder, VocoderConfig};
use crate::{rng_from, Result};

/// Relative error bound every case must stay under.
pub const GRAD_TOL: f64 = 1e-2;

#[derive(Clone, Debug, Serialize)]
pub struct GradCase {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

impl GradCase {
    pub fn passes(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < GRAD_TOL && self.checked > 0
    }
}

struct Suite {
    seed: u64,
    cases: Vec<GradCase>,
}

impl Suite {
    fn push(&mut self, name: &str, r: FdReport) {
        self.cases.push(GradCase { name: name.to_string(), max_rel_err: r.max_rel_err, checked: r.checked });
    }

    fn op(&mut self, name: &str, inputs: Vec<Array>, f: impl Fn(&mut Tape, &[Var]) -> Var) -> Result<()> {
        let opts = FdOptions { seed: self.seed, ..Default::default() };
        let r = check_inputs(&inputs, &opts, f)?;
        self.push(name, r);
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, shape: &[usize]) -> Array {
    Array::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Magnitudes in [0.2, 1.2] with random sign, away from kinks and poles.
fn away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Array {
    Array::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(0.2..1.2);
        if rng.gen_bool(0.5) { v } else { -v }
    })
}

/// Zero-initialized gates and heads block gradient flow; fill them so every
/// parameter is exercised.
pub fn randomize_zero_params(store: &mut ParamStore, seed: u64) {
    let mut init = Init::new(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.value(id).data().iter().all(|&v| v == 0.0) {
            let shape = store.value(id).shape().to_vec();
            *store.value_mut(id) = init.normal(&shape, 0.3);
        }
    }
}

#[derive(Debug)]
struct Cube;

impl UnaryOp for Cube {
    fn name(&self) -> &'static str {
        "cube"
    }
    fn forward(&self, input: &Array) -> Array {
        input.map(|x| x * x * x)
    }
    fn backward(&self, input: &Array, _output: &Array, grad_out: &[f64], grad_in: &mut [f64]) {
        for ((d, &g), &x) in grad_in.iter_mut().zip(grad_out).zip(input.data()) {
            *d += 3.0 * x * x * g;
        }
    }
}

fn primitive_ops(s: &mut Suite) -> Result<()> {
    let mut rng = rng_from(s.seed, &[1]);
    let r = &mut rng;
    let (a, b) = (uniform(r, &[2, 3, 4]), uniform(r, &[2, 3, 4]));
    s.op("add", vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]))?;
    s.op("sub", vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]))?;
    s.op("mul", vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]))?;
    s.op("div", vec![a.clone(), away_from_zero(r, &[2, 3, 4])], |t, v| t.div(v[0], v[1]))?;
    s.op("scale", vec![a.clone()], |t, v| t.scale(v[0], -1.7))?;
    s.op("add_scalar", vec![a.clone()], |t, v| t.add_scalar(v[0], 0.3))?;
    s.op("mul_scalar", vec![a.clone(), Array::scalar(0.7)], |t, v| t.mul_scalar(v[0], v[1]))?;
    s.op("exp", vec![a.clone()], |t, v| t.exp(v[0]))?;
    s.op("gelu", vec![a.map(|x| 3.0 * x)], |t, v| t.gelu(v[0]))?;
    s.op("prelu", vec![away_from_zero(r, &[2, 3, 5]), uniform(r, &[3])], |t, v| t.prelu(v[0], v[1]))?;
    s.op("matmul", vec![uniform(r, &[3, 4]), uniform(r, &[4, 5])], |t, v| t.matmul(v[0], v[1]))?;
    s.op("bmm", vec![uniform(r, &[2, 3, 4]), uniform(r, &[2, 4, 2])], |t, v| t.bmm(v[0], v[1]))?;
    s.op("conv1d", vec![uniform(r, &[2, 3, 7]), uniform(r, &[4, 3, 3]), uniform(r, &[4])], |t, v| {
        t.conv1d(v[0], v[1], Some(v[2]), 1)
    })?;
    s.op("conv1d_depthwise", vec![uniform(r, &[2, 3, 9]), uniform(r, &[3, 1, 7])], |t, v| t.conv1d(v[0], v[1], None, 3))?;
    s.op("conv1d_grouped", vec![uniform(r, &[1, 4, 6]), uniform(r, &[6, 2, 3])], |t, v| t.conv1d(v[0], v[1], None, 2))?;
    s.op("transpose", vec![a.clone()], |t, v| t.transpose(v[0], 0, 2))?;
    s.op("reshape", vec![a.clone()], |t, v| t.reshape(v[0], &[6, 4]))?;
    s.op("concat", vec![a.clone(), uniform(r, &[2, 1, 4])], |t, v| t.concat(&[v[0], v[1]], 1))?;
    s.op("slice", vec![a.clone()], |t, v| t.slice(v[0], 2, 1, 2))?;
    s.op("expand", vec![uniform(r, &[2, 1, 4])], |t, v| t.expand(v[0], 1, 3))?;
    s.op("upsample_nearest", vec![a.clone()], |t, v| t.upsample_nearest(v[0], 3))?;
    s.op("sum", vec![a.clone()], |t, v| t.sum(v[0]))?;
    s.op("mean", vec![a.clone()], |t, v| t.mean(v[0]))?;
    s.op("mean_axis", vec![a.clone()], |t, v| t.mean_axis(v[0], 1))?;
    s.op("rms_axis", vec![a.clone()], |t, v| t.rms_axis(v[0], 2, 1e-6))?;
    s.op("softmax", vec![a.map(|x| 2.0 * x)], |t, v| t.softmax(v[0]))?;
    let ids = [0usize, 2, 2, 1, 3, 0];
    s.op("gather_rows", vec![uniform(r, &[4, 3])], move |t, v| t.gather_rows(v[0], &ids))?;
    s.op("custom", vec![a], |t, v| {
        let c = t.custom(v[0], Arc::new(Cube));
        t.mul(c, v[0])
    })?;
    Ok(())
}

fn composite_ops(s: &mut Suite) -> Result<()> {
    let mut rng = rng_from(s.seed, &[2]);
    let r = &mut rng;
    s.op("layer_norm", vec![uniform(r, &[2, 5, 4])], |t, v| layer_norm(t, v[0], 2, 1e-6))?;

    let plan = StftPlan::new(4, 1000)?;
    let frames = 5;
    let len = frames * plan.hop();
    let irfft = Arc::new(IrfftFrames::new(plan.clone()));
    let ola = Arc::new(plan.ola_plan(len));
    s.op("istft", vec![uniform(r, &[2, 2 * plan.bins(), frames])], move |t, v| {
        let f = t.custom(v[0], irfft.clone());
        t.overlap_add(f, ola.clone())
    })?;

    let v_star = uniform(r, &[2, 6]);
    s.op("fm_velocity_loss", vec![uniform(r, &[2, 6])], move |t, v| fm_velocity_loss(t, v[0], &v_star).expect("shapes"))?;
    let x1 = uniform(r, &[2, 8]);
    let w = Array::from_fn(&[2, 2], |_| r.gen_range(0.1..2.0));
    s.op("fm_data_loss", vec![uniform(r, &[2, 8])], move |t, v| fm_data_loss(t, v[0], &x1, &w, 4).expect("shapes"))?;

    let mut store = ParamStore::new();
    let mut init = Init::new(s.seed);
    let attn = Attention::new(&mut store, &mut init, "attn", 4, 2);
    let mlp = Mlp::new(&mut store, &mut init, "mlp", 4, 2);
    let valid = vec![vec![true, true, false], vec![true, false, false]];
    s.op("attention_masked", vec![uniform(r, &[2, 4, 4]), uniform(r, &[2, 3, 4])], |t, v| {
        attn.forward(t, &store, v[0], v[1], Some(&valid))
    })?;
    s.op("mlp", vec![uniform(r, &[2, 3, 4])], |t, v| mlp.forward(t, &store, v[0]))?;
    Ok(())
}

fn tiny_models(s: &mut Suite) -> Result<()> {
    let opts = FdOptions { h: 1e-5, max_per_input: 4, seed: s.seed };

    let mut voc = Vocoder::new(VocoderConfig::tiny(Provider::SemanticOracle, 3, s.seed))?;
    randomize_zero_params(&mut voc.store, s.seed ^ 0x5a);
    let lat = gaussian(&[2, 3, 4], 1.0, &mut rng_from(s.seed, &[3]));
    let x1 = gaussian(&[2, 32], 0.5, &mut rng_from(s.seed, &[4]));
    let ids: Vec<_> = voc.store.ids().collect();
    let report = check_params(&voc.store, &ids, &opts, |tape, st| {
        let mut m = voc.clone();
        m.store = st.clone();
        m.loss(tape, &x1, &lat, &mut rng_from(s.seed, &[5]), 1.0).expect("tiny vocoder loss")
    })?;
    s.push("vocoder_tiny_loss", report);

    let mut dit = Dit::new(DitConfig::tiny(Provider::SemanticOracle, 3, 5, s.seed))?;
    randomize_zero_params(&mut dit.store, s.seed ^ 0xd1);
    let x = gaussian(&[2, 3, 5], 1.0, &mut rng_from(s.seed, &[6]));
    let caps = [dit.tokenize("chirp-up high"), dit.tokenize("")];
    let ids: Vec<_> = dit.store.ids().collect();
    let report = check_params(&dit.store, &ids, &opts, |tape, st| {
        let mut m = dit.clone();
        m.store = st.clone();
        let xv = tape.constant(x.clone());
        m.forward(tape, xv, &[0.25, 0.8], &caps).expect("tiny dit forward")
    })?;
    s.push("dit_tiny_forward", report);
    Ok(())
}

/// Runs every case; inspect [`GradCase::passes`] for the verdict.
pub fn run_suite(seed: u64) -> Result<Vec<GradCase>> {
    let mut s = Suite { seed, cases: Vec::new() };
    primitive_ops(&mut s)?;
    composite_ops(&mut s)?;
    tiny_models(&mut s)?;
    Ok(s.cases)
}
