//! Flow-matching sanity check on a two-component Gaussian mixture in the plane.

use rand::Rng;
use semvoc_grad::nn::{sinusoidal_embedding, Init, Linear};
use semvoc_grad::{AdamWConfig, Array, OptState, ParamStore, Tape, Var};

use crate::flow::{euler_sample, fm_velocity_loss, gaussian, path_from_noise, PredictionKind, SamplerConfig};
use crate::{rng_from, Result};

/// Two-component Gaussian mixture in the plane.
#[derive(Clone, Debug)]
pub struct Mixture2d {
    pub means: [[f64; 2]; 2],
    pub std: f64,
}

impl Default for Mixture2d {
    fn default() -> Self {
        Self { means: [[-1.0, -0.5], [1.0, 0.5]], std: 0.3 }
    }
}

impl Mixture2d {
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Array {
        let z = gaussian(&[n, 2], self.std, rng);
        let mut d = z.into_data();
        for row in d.chunks_mut(2) {
            let c = &self.means[usize::from(rng.gen_bool(0.5))];
            row[0] += c[0];
            row[1] += c[1];
        }
        Array::new(vec![n, 2], d)
    }

    pub fn mean(&self) -> [f64; 2] {
        let m = &self.means;
        [(m[0][0] + m[1][0]) / 2.0, (m[0][1] + m[1][1]) / 2.0]
    }

    pub fn cov(&self) -> [[f64; 2]; 2] {
        let mu = self.mean();
        let mut c = [[0.0; 2]; 2];
        for m in &self.means {
            for i in 0..2 {
                for j in 0..2 {
                    c[i][j] += 0.5 * (m[i] - mu[i]) * (m[j] - mu[j]);
                }
            }
        }
        c[0][0] += self.std * self.std;
        c[1][1] += self.std * self.std;
        c
    }
}

pub fn mean_cov_2d(x: &Array) -> ([f64; 2], [[f64; 2]; 2]) {
    let n = x.shape()[0] as f64;
    let mut mu = [0.0; 2];
    for r in x.data().chunks(2) {
        mu[0] += r[0] / n;
        mu[1] += r[1] / n;
    }
    let mut c = [[0.0; 2]; 2];
    for r in x.data().chunks(2) {
        for i in 0..2 {
            for j in 0..2 {
                c[i][j] += (r[i] - mu[i]) * (r[j] - mu[j]) / (n - 1.0);
            }
        }
    }
    (mu, c)
}

struct VelocityMlp {
    l1: Linear,
    l2: Linear,
    l3: Linear,
}

const MLP_TIME_DIM: usize = 16;

impl VelocityMlp {
    fn new(store: &mut ParamStore, seed: u64) -> Self {
        let mut init = Init::new(seed);
        Self {
            l1: Linear::new(store, &mut init, "mlp.l1", 2 + MLP_TIME_DIM, 64, true),
            l2: Linear::new(store, &mut init, "mlp.l2", 64, 64, true),
            l3: Linear::new(store, &mut init, "mlp.l3", 64, 2, true),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, ts: &[f64]) -> Var {
        let temb = tape.constant(sinusoidal_embedding(ts, MLP_TIME_DIM, 100.0));
        let h = tape.concat(&[x, temb], 1);
        let h = self.l1.forward(tape, store, h);
        let h = tape.gelu(h);
        let h = self.l2.forward(tape, store, h);
        let h = tape.gelu(h);
        self.l3.forward(tape, store, h)
    }
}

#[derive(Clone, Debug)]
pub struct MixtureReport {
    pub mean_error: f64,
    pub cov_error: f64,
    pub final_loss: f64,
}

/// Trains a velocity MLP to transport N(0, I) onto [`Mixture2d`] and compares
/// moments of `n_eval` Euler samples against the closed form.
pub fn mixture_transport(steps: usize, batch: usize, n_eval: usize, seed: u64) -> Result<MixtureReport> {
    let target = Mixture2d::default();
    let mut store = ParamStore::new();
    let mlp = VelocityMlp::new(&mut store, seed);
    let mut opt = OptState::new(&store, AdamWConfig { lr: 2e-3, ..Default::default() });
    let mut rng = rng_from(seed, &[1]);
    let mut ema = None;
    for _ in 0..steps {
        let x1 = target.sample(batch, &mut rng);
        let ts: Vec<f64> = (0..batch).map(|_| rng.gen_range(0.0..1.0)).collect();
        let s = path_from_noise(&x1, gaussian(&[batch, 2], 1.0, &mut rng), &ts)?;
        let mut tape = Tape::new();
        let x = tape.constant(s.x_t.clone());
        let v = mlp.forward(&mut tape, &store, x, &s.t);
        let loss = fm_velocity_loss(&mut tape, v, &s.v_star)?;
        let l = tape.value(loss).item();
        ema = Some(ema.map_or(l, |e: f64| 0.99 * e + 0.01 * l));
        let g = tape.backward(loss)?;
        opt.step(&mut store, &g);
    }
    let cfg = SamplerConfig::new(100, PredictionKind::Velocity, seed ^ 0xe7a1);
    let out = euler_sample(&[n_eval, 2], &cfg, |x, t, _| {
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let v = mlp.forward(&mut tape, &store, xv, &vec![t; n_eval]);
        Ok(tape.value(v).clone())
    })?;
    let (mu, c) = mean_cov_2d(&out);
    let (tm, tc) = (target.mean(), target.cov());
    let mean_error = ((mu[0] - tm[0]).powi(2) + (mu[1] - tm[1]).powi(2)).sqrt();
    let cov_error = (0..2)
        .flat_map(|i| (0..2).map(move |j| (i, j)))
        .map(|(i, j)| (c[i][j] - tc[i][j]).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(MixtureReport { mean_error, cov_error, final_loss: ema.unwrap_or(f64::NAN) })
}
