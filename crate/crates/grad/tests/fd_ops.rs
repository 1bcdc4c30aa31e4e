//! Finite-difference checks for every tape operation, each on three seeded shapes.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semvoc_grad::check::{check_inputs, FdOptions};
use semvoc_grad::{Array, GradError, OlaPlan, Tape, Var};

const TOL: f64 = 1e-2;

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    Array::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values bounded away from zero, for ops with kinks or poles there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    Array::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(0.2..1.2);
        if rng.gen_bool(0.5) { v } else { -v }
    })
}

fn run(name: &str, seed: u64, inputs: Vec<Array>, f: impl Fn(&mut Tape, &[Var]) -> Var) {
    let opts = FdOptions { seed, ..Default::default() };
    let report = check_inputs(&inputs, &opts, f).unwrap();
    assert!(report.passes(TOL), "{name} (seed {seed}): rel err {}", report.max_rel_err);
    assert!(report.checked > 0);
}

fn each_seed(mut body: impl FnMut(u64, &mut ChaCha8Rng)) {
    for seed in [11u64, 12, 13] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        body(seed, &mut rng);
    }
}

fn shape_for(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.gen_range(1..5)).collect()
}

#[test]
fn elementwise_binary() {
    each_seed(|seed, rng| {
        let s = shape_for(rng, 3);
        let (a, b) = (rand_array(rng, &s), rand_array(rng, &s));
        run("add", seed, vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
        run("sub", seed, vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]));
        run("mul", seed, vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
        let d = away_from_zero(rng, &s);
        run("div", seed, vec![a, d], |t, v| t.div(v[0], v[1]));
    });
}

#[test]
fn elementwise_unary() {
    each_seed(|seed, rng| {
        let s = shape_for(rng, 2);
        let a = rand_array(rng, &s);
        run("scale", seed, vec![a.clone()], |t, v| t.scale(v[0], -1.7));
        run("add_scalar", seed, vec![a.clone()], |t, v| t.add_scalar(v[0], 0.3));
        run("exp", seed, vec![a.clone()], |t, v| t.exp(v[0]));
        run("gelu", seed, vec![a.clone().map(|x| 3.0 * x)], |t, v| t.gelu(v[0]));
        run("mul_scalar", seed, vec![a, Array::scalar(0.7)], |t, v| t.mul_scalar(v[0], v[1]));
    });
}

#[test]
fn prelu_slopes_and_input() {
    each_seed(|seed, rng| {
        let (b, c, n) = (rng.gen_range(1..3), rng.gen_range(1..5), rng.gen_range(1..6));
        let x = away_from_zero(rng, &[b, c, n]);
        let alpha = rand_array(rng, &[c]);
        run("prelu", seed, vec![x, alpha], |t, v| t.prelu(v[0], v[1]));
    });
}

#[test]
fn matmul_and_bmm() {
    each_seed(|seed, rng| {
        let (m, k, n) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..6));
        let (a, b) = (rand_array(rng, &[m, k]), rand_array(rng, &[k, n]));
        run("matmul", seed, vec![a, b], |t, v| t.matmul(v[0], v[1]));
        let bs = rng.gen_range(1..4);
        let (a, b) = (rand_array(rng, &[bs, m, k]), rand_array(rng, &[bs, k, n]));
        run("bmm", seed, vec![a, b], |t, v| t.bmm(v[0], v[1]));
    });
}

#[test]
fn conv1d_dense_pointwise_and_depthwise() {
    each_seed(|seed, rng| {
        let (b, cin, cout, len) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(3..9));
        for k in [1usize, 3, 4] {
            let x = rand_array(rng, &[b, cin, len]);
            let w = rand_array(rng, &[cout, cin, k]);
            let bias = rand_array(rng, &[cout]);
            run("conv1d", seed, vec![x.clone(), w.clone(), bias], |t, v| t.conv1d(v[0], v[1], Some(v[2]), 1));
            run("conv1d_nobias", seed, vec![x, w], |t, v| t.conv1d(v[0], v[1], None, 1));
        }
        let x = rand_array(rng, &[b, cin, len]);
        let w = rand_array(rng, &[cin, 1, 7]);
        let bias = rand_array(rng, &[cin]);
        run("conv1d_depthwise", seed, vec![x, w, bias], |t, v| t.conv1d(v[0], v[1], Some(v[2]), cin));
        let x = rand_array(rng, &[b, 4, len]);
        let w = rand_array(rng, &[6, 2, 3]);
        run("conv1d_grouped", seed, vec![x, w], |t, v| t.conv1d(v[0], v[1], None, 2));
    });
}

#[test]
fn layout_ops() {
    each_seed(|seed, rng| {
        let s = shape_for(rng, 3);
        let a = rand_array(rng, &s);
        run("transpose", seed, vec![a.clone()], |t, v| t.transpose(v[0], 0, 2));
        let flat = [s.iter().product::<usize>()];
        run("reshape", seed, vec![a.clone()], move |t, v| t.reshape(v[0], &flat));
        let mut s2 = s.clone();
        s2[1] += 2;
        let b = rand_array(rng, &s2);
        run("concat", seed, vec![a.clone(), b], |t, v| t.concat(&[v[0], v[1]], 1));
        let start = rng.gen_range(0..s[2]);
        let len = s[2] - start;
        run("slice", seed, vec![a.clone()], move |t, v| t.slice(v[0], 2, start, len));
        run("expand", seed, vec![a.clone()], |t, v| t.expand(v[0], 1, 3));
        run("upsample", seed, vec![a], |t, v| t.upsample_nearest(v[0], 3));
    });
}

#[test]
fn reductions() {
    each_seed(|seed, rng| {
        let s = shape_for(rng, 3);
        let a = rand_array(rng, &s);
        run("sum", seed, vec![a.clone()], |t, v| t.sum(v[0]));
        run("mean", seed, vec![a.clone()], |t, v| t.mean(v[0]));
        for axis in 0..3 {
            run("mean_axis", seed, vec![a.clone()], move |t, v| t.mean_axis(v[0], axis));
            run("rms_axis", seed, vec![a.clone()], move |t, v| t.rms_axis(v[0], axis, 1e-6));
        }
        run("softmax", seed, vec![a.map(|x| 2.0 * x)], |t, v| t.softmax(v[0]));
    });
}

#[test]
fn gather_rows_accumulates_repeats() {
    each_seed(|seed, rng| {
        let (vocab, w) = (rng.gen_range(2..6), rng.gen_range(1..5));
        let ids: Vec<usize> = (0..7).map(|_| rng.gen_range(0..vocab)).collect();
        let table = rand_array(rng, &[vocab, w]);
        run("gather_rows", seed, vec![table], move |t, v| t.gather_rows(v[0], &ids));
    });
}

#[test]
fn overlap_add_matches_fd() {
    each_seed(|seed, rng| {
        let n = [8usize, 12, 16][rng.gen_range(0..3)];
        let hop = n / 4;
        let frames = rng.gen_range(2..6);
        let length = hop * frames;
        let window: Vec<f64> = (0..n).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()).collect();
        let plan = Arc::new(OlaPlan::new(window, hop, n / 2, frames, length));
        let x = rand_array(rng, &[2, n, frames]);
        run("overlap_add", seed, vec![x], move |t, v| t.overlap_add(v[0], plan.clone()));
    });
}

#[test]
fn fan_out_accumulates() {
    each_seed(|seed, rng| {
        let a = rand_array(rng, &[3, 4]);
        run("fan_out", seed, vec![a], |t, v| {
            let e = t.exp(v[0]);
            let p = t.mul(e, v[0]);
            let q = t.add(p, v[0]);
            let s = t.softmax(q);
            t.mul(s, e)
        });
    });
}

#[test]
fn backward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_array(&mut rng, &[2, 3, 10]);
    let w = rand_array(&mut rng, &[4, 3, 5]);
    let grads = || {
        let mut t = Tape::new();
        let (xv, wv) = (t.leaf(x.clone()), t.leaf(w.clone()));
        let y = t.conv1d(xv, wv, None, 1);
        let y = t.gelu(y);
        let l = t.mean(y);
        let g = t.backward(l).unwrap();
        (g.wrt(xv).unwrap().clone(), g.wrt(wv).unwrap().clone())
    };
    let (a, b) = (grads(), grads());
    assert_eq!(a.0.data(), b.0.data());
    assert_eq!(a.1.data(), b.1.data());
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut t = Tape::new();
    let x = t.leaf(Array::zeros(&[2]));
    assert_eq!(t.backward(x).unwrap_err(), GradError::NonScalarLoss(vec![2]));
}

#[test]
fn non_finite_gradient_is_reported() {
    let mut t = Tape::new();
    let x = t.leaf(Array::from_vec(vec![1.0, 2.0]));
    let zero = t.constant(Array::zeros(&[2]));
    let y = t.div(x, zero);
    let l = t.sum(y);
    assert!(matches!(t.backward(l), Err(GradError::NonFinite { .. })));
}

#[test]
fn unreachable_leaf_gets_zero_gradient() {
    let mut t = Tape::new();
    let x = t.leaf(Array::from_vec(vec![1.0, 2.0]));
    let y = t.leaf(Array::from_vec(vec![3.0]));
    let l = t.sum(x);
    let g = t.backward(l).unwrap();
    assert_eq!(g.wrt(y).unwrap().data(), &[0.0]);
    assert_eq!(g.wrt(x).unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn checker_flags_a_detached_path() {
    // Re-binding the input as a constant hides the dependence from backward.
    let x = Array::from_vec(vec![0.3, -0.4, 0.9]);
    let report = check_inputs(&[x], &FdOptions::default(), |t, v| {
        let detached = t.constant(t.value(v[0]).clone());
        t.mul(v[0], detached)
    })
    .unwrap();
    assert!(!report.passes(TOL), "rel err {}", report.max_rel_err);
}

#[derive(Debug)]
struct Cube;

impl semvoc_grad::UnaryOp for Cube {
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

#[test]
fn custom_unary_op() {
    each_seed(|seed, rng| {
        let s = shape_for(rng, 2);
        let a = rand_array(rng, &s);
        run("custom", seed, vec![a], |t, v| {
            let c = t.custom(v[0], Arc::new(Cube));
            t.mul(c, v[0])
        });
    });
}
