//! Straight-line flow matching: path samples, losses, and the Euler sampler
//! with classifier-free guidance.

use rand::Rng;
use rand_distr::StandardNormal;
use semvoc_grad::{Array, Tape, Var};

use crate::{Error, Result};

/// One draw of the linear path between noise `x0` and data `x1`.
///
/// The leading axis of `x1` is the batch; `t` has one entry per batch row.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub x0: Array,
    pub x1: Array,
    pub t: Vec<f64>,
    pub x_t: Array,
    pub v_star: Array,
}

fn rows(a: &Array) -> usize {
    a.shape().first().copied().unwrap_or(1)
}

/// Builds the path sample from explicit noise with per-row times.
pub fn path_from_noise(x1: &Array, x0: Array, ts: &[f64]) -> Result<FlowSample> {
    if x0.shape() != x1.shape() {
        return Err(Error::Shape(format!("noise {:?} vs data {:?}", x0.shape(), x1.shape())));
    }
    let b = rows(x1);
    if ts.len() != b {
        return Err(Error::Shape(format!("{} times for {b} rows", ts.len())));
    }
    if let Some(bad) = ts.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Config(format!("flow time {bad} outside [0, 1]")));
    }
    let per = x1.numel() / b;
    let mut xt = vec![0.0; x1.numel()];
    let mut v = vec![0.0; x1.numel()];
    for (i, (a, n)) in x1.data().iter().zip(x0.data()).enumerate() {
        let t = ts[i / per];
        xt[i] = (1.0 - t) * n + t * a;
        v[i] = a - n;
    }
    let shape = x1.shape().to_vec();
    Ok(FlowSample {
        x_t: Array::new(shape.clone(), xt),
        v_star: Array::new(shape, v),
        x0,
        x1: x1.clone(),
        t: ts.to_vec(),
    })
}

pub fn gaussian(shape: &[usize], sigma: f64, rng: &mut impl Rng) -> Array {
    Array::from_fn(shape, |_| sigma * rng.sample::<f64, _>(StandardNormal))
}

/// Path sample at a single time shared by all rows.
pub fn make_path_sample(x1: &Array, t: f64, sigma: f64, rng: &mut impl Rng) -> Result<FlowSample> {
    let x0 = gaussian(x1.shape(), sigma, rng);
    path_from_noise(x1, x0, &vec![t; rows(x1)])
}

/// Path sample with independent uniform times per row.
pub fn make_path_batch(x1: &Array, sigma: f64, rng: &mut impl Rng) -> Result<FlowSample> {
    let ts: Vec<f64> = (0..rows(x1)).map(|_| rng.gen_range(0.0..1.0)).collect();
    let x0 = gaussian(x1.shape(), sigma, rng);
    path_from_noise(x1, x0, &ts)
}

/// `mean((v_hat - v_star)^2)`.
pub fn fm_velocity_loss(tape: &mut Tape, v_hat: Var, v_star: &Array) -> Result<Var> {
    if tape.shape(v_hat) != v_star.shape() {
        return Err(Error::Shape(format!("velocity {:?} vs target {:?}", tape.shape(v_hat), v_star.shape())));
    }
    let target = tape.constant(v_star.clone());
    let d = tape.sub(v_hat, target);
    let sq = tape.mul(d, d);
    Ok(tape.mean(sq))
}

/// Frame-weighted MSE between predicted and clean waveforms `(B, L)`.
///
/// `weights` is `(B, frames)` with sample `i` belonging to frame `i / hop`.
pub fn fm_data_loss(tape: &mut Tape, x1_hat: Var, x1: &Array, weights: &Array, hop: usize) -> Result<Var> {
    let s = x1.shape();
    if tape.shape(x1_hat) != s || s.len() != 2 {
        return Err(Error::Shape(format!("prediction {:?} vs target {s:?}", tape.shape(x1_hat))));
    }
    let (b, len) = (s[0], s[1]);
    let frames = len.div_ceil(hop);
    if weights.shape() != [b, frames] {
        return Err(Error::Shape(format!(
            "expected ({b}, {frames}) frame weights for hop {hop}, got {:?}",
            weights.shape()
        )));
    }
    let w = Array::from_fn(&[b, len], |i| weights.data()[(i / len) * frames + (i % len) / hop]);
    let target = tape.constant(x1.clone());
    let w = tape.constant(w);
    let d = tape.sub(x1_hat, target);
    let sq = tape.mul(d, d);
    let weighted = tape.mul(sq, w);
    Ok(tape.mean(weighted))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictionKind {
    Velocity,
    Data,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    pub sigma: f64,
    pub kind: PredictionKind,
    pub seed: u64,
    /// Floor on `1 - t` when converting a data prediction to a velocity.
    pub eps_t: f64,
}

impl SamplerConfig {
    pub fn new(steps: usize, kind: PredictionKind, seed: u64) -> Self {
        Self { steps, guidance_scale: 1.0, sigma: 1.0, kind, seed, eps_t: 1e-3 }
    }
}

/// Which conditioning a model evaluation should use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Conditional,
    Unconditional,
}

/// Guided prediction. Scale 1 evaluates only the conditional branch and
/// scale 0 only the unconditional one.
fn guided<F>(model: &mut F, x: &Array, t: f64, s: f64) -> Result<Array>
where
    F: FnMut(&Array, f64, Branch) -> Result<Array>,
{
    if s == 1.0 {
        return model(x, t, Branch::Conditional);
    }
    let uncond = model(x, t, Branch::Unconditional)?;
    if s == 0.0 {
        return Ok(uncond);
    }
    let cond = model(x, t, Branch::Conditional)?;
    if cond.shape() != uncond.shape() {
        return Err(Error::Shape("conditional and unconditional predictions differ in shape".into()));
    }
    let data = uncond.data().iter().zip(cond.data()).map(|(u, c)| u + s * (c - u)).collect();
    Ok(Array::new(uncond.shape().to_vec(), data))
}

/// Integrates from `x0` on the grid `t_k = k / N`.
///
/// Data predictions use `x <- (1 - r) x + r x1_hat` with `r = dt / max(1 - t, eps_t)`,
/// which is the velocity update for `v = (x1_hat - x) / (1 - t)` and lands on
/// `x1_hat` exactly at the final step.
pub fn euler_from<F>(x0: Array, cfg: &SamplerConfig, mut model: F) -> Result<Array>
where
    F: FnMut(&Array, f64, Branch) -> Result<Array>,
{
    if cfg.steps == 0 {
        return Err(Error::Config("sampler needs at least one step".into()));
    }
    let n = cfg.steps;
    let dt = 1.0 / n as f64;
    let mut x = x0;
    for k in 0..n {
        let t = k as f64 / n as f64;
        let pred = guided(&mut model, &x, t, cfg.guidance_scale)?;
        if pred.shape() != x.shape() {
            return Err(Error::Shape(format!("model returned {:?} for state {:?}", pred.shape(), x.shape())));
        }
        match cfg.kind {
            PredictionKind::Velocity => {
                for (s, v) in x.data_mut().iter_mut().zip(pred.data()) {
                    *s += dt * v;
                }
            }
            PredictionKind::Data => {
                let remaining = (n - k) as f64 / n as f64;
                let r = if remaining > cfg.eps_t { 1.0 / (n - k) as f64 } else { dt / cfg.eps_t };
                for (s, p) in x.data_mut().iter_mut().zip(pred.data()) {
                    *s = (1.0 - r) * *s + r * p;
                }
            }
        }
        if !x.is_finite() {
            return Err(Error::Numeric(format!("non-finite sampler state at step {k}")));
        }
    }
    Ok(x)
}

/// Draws `x0 ~ N(0, sigma^2)` from `cfg.seed` and integrates.
pub fn euler_sample<F>(shape: &[usize], cfg: &SamplerConfig, model: F) -> Result<Array>
where
    F: FnMut(&Array, f64, Branch) -> Result<Array>,
{
    if cfg.sigma <= 0.0 {
        return Err(Error::Config(format!("sampler sigma must be positive, got {}", cfg.sigma)));
    }
    let mut rng = crate::rng_from(cfg.seed, &[0x5a3b]);
    let x0 = gaussian(shape, cfg.sigma, &mut rng);
    euler_from(x0, cfg, model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_path_arithmetic() {
        let s = path_from_noise(&Array::from_vec(vec![1.0]), Array::from_vec(vec![0.0]), &[0.25]).unwrap();
        assert_eq!(s.x_t.data(), &[0.25]);
        assert_eq!(s.v_star.data(), &[1.0]);
    }

    #[test]
    fn time_outside_unit_interval_is_rejected() {
        let x = Array::from_vec(vec![1.0]);
        assert!(matches!(path_from_noise(&x, x.clone(), &[1.5]), Err(Error::Config(_))));
    }

    #[test]
    fn zero_steps_is_rejected() {
        let cfg = SamplerConfig::new(0, PredictionKind::Velocity, 0);
        assert!(euler_sample(&[2], &cfg, |x, _, _| Ok(x.clone())).is_err());
    }

    #[test]
    fn nan_state_reports_step() {
        let cfg = SamplerConfig::new(5, PredictionKind::Velocity, 0);
        let err = euler_sample(&[2], &cfg, |x, t, _| {
            Ok(if t > 0.3 { x.map(|_| f64::NAN) } else { x.clone() })
        })
        .unwrap_err();
        assert!(err.to_string().contains("step 2"), "{err}");
    }
}
