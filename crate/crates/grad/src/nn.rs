//! Small layer helpers built on the tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::array::Array;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

/// Seeded parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Array {
        Array::from_fn(shape, |_| std * self.rng.sample::<f64, _>(StandardNormal))
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Array {
        Array::from_fn(shape, |_| self.rng.gen_range(-bound..=bound))
    }
}

/// Affine map over the last axis. Weight is stored `(fan_in, fan_out)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = store.add(format!("{name}.w"), init.uniform(&[fan_in, fan_out], bound));
        let b = bias.then(|| store.add(format!("{name}.b"), Array::zeros(&[fan_out])));
        Self { w, b, fan_in, fan_out }
    }

    /// A linear layer whose weight and bias start at zero.
    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let w = store.add(format!("{name}.w"), Array::zeros(&[fan_in, fan_out]));
        let b = bias.then(|| store.add(format!("{name}.b"), Array::zeros(&[fan_out])));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let shape = tape.shape(x).to_vec();
        assert_eq!(*shape.last().unwrap(), self.fan_in, "linear: input width mismatch");
        let rows = shape.iter().product::<usize>() / self.fan_in;
        let flat = tape.reshape(x, &[rows, self.fan_in]);
        let w = tape.param(store, self.w);
        let mut y = tape.matmul(flat, w);
        if let Some(b) = self.b {
            let b = tape.param(store, b);
            let b = tape.expand(b, 0, rows);
            y = tape.add(y, b);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.fan_out;
        tape.reshape(y, &out_shape)
    }
}

/// 1-D convolution over `(B, C, T)` with "same" padding.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub groups: usize,
    pub cin: usize,
    pub cout: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        let fan_in = cin / groups * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = store.add(format!("{name}.w"), init.uniform(&[cout, cin / groups, kernel], bound));
        let b = bias.then(|| store.add(format!("{name}.b"), Array::zeros(&[cout])));
        Self { w, b, groups, cin, cout }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize, bias: bool) -> Self {
        let w = store.add(format!("{name}.w"), Array::zeros(&[cout, cin, kernel]));
        let b = bias.then(|| store.add(format!("{name}.b"), Array::zeros(&[cout])));
        Self { w, b, groups: 1, cin, cout }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = self.b.map(|b| tape.param(store, b));
        tape.conv1d(x, w, b, self.groups)
    }
}

/// Normalizes `x` to zero mean and unit variance along `axis` (no affine).
pub fn layer_norm(tape: &mut Tape, x: Var, axis: usize, eps: f64) -> Var {
    let n = tape.shape(x)[axis];
    let mu = tape.mean_axis(x, axis);
    let mu = tape.expand(mu, axis, n);
    let centered = tape.sub(x, mu);
    let sd = tape.rms_axis(centered, axis, eps);
    let sd = tape.expand(sd, axis, n);
    tape.div(centered, sd)
}

/// Sinusoidal encoding of each value: `(values.len(), dim)`, with
/// `sin` at even and `cos` at odd positions.
pub fn sinusoidal_embedding(values: &[f64], dim: usize, scale: f64) -> Array {
    assert!(dim >= 2 && dim % 2 == 0, "sinusoidal dimension must be even");
    let half = dim / 2;
    let mut out = Vec::with_capacity(values.len() * dim);
    for &v in values {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * (2 * i) as f64 / dim as f64).exp();
            let arg = v * scale * freq;
            out.push(arg.sin());
            out.push(arg.cos());
        }
    }
    Array::new(vec![values.len(), dim], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoid_at_zero() {
        let e = sinusoidal_embedding(&[0.0], 8, 1000.0);
        for (i, v) in e.data().iter().enumerate() {
            assert_eq!(*v, if i % 2 == 0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn layer_norm_statistics() {
        let mut tape = Tape::new();
        let x = tape.constant(Array::new(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 5.0, 8.0]));
        let y = layer_norm(&mut tape, x, 1, 1e-12);
        for row in tape.value(y).data().chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
        }
    }
}
