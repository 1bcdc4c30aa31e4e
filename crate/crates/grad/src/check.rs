//! Central finite-difference gradient checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::array::Array;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::GradError;

#[derive(Clone, Debug)]
pub struct FdOptions {
    pub h: f64,
    /// Upper bound on checked elements per input; chosen at random when exceeded.
    pub max_per_input: usize,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self { h: 1e-4, max_per_input: usize::MAX, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)` seen, where
    /// `floor = max(1e-6, 1e-3 * max |numeric|)`.
    pub max_rel_err: f64,
    pub checked: usize,
}

impl FdReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < tol
    }
}

/// Reduces a non-scalar output to a scalar with a fixed random projection.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Var {
    if tape.value(out).numel() == 1 {
        return tape.sum(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let shape = tape.shape(out).to_vec();
    let r = Array::from_fn(&shape, |_| rng.sample::<f64, _>(StandardNormal));
    let r = tape.constant(r);
    let prod = tape.mul(out, r);
    tape.sum(prod)
}

fn pick(rng: &mut ChaCha8Rng, n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..max {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(max);
    idx.sort_unstable();
    idx
}

fn rel_errors(pairs: &[(f64, f64)]) -> f64 {
    let scale = pairs.iter().fold(0.0f64, |m, &(_, n)| m.max(n.abs()));
    let floor = (1e-3 * scale).max(1e-6);
    pairs
        .iter()
        .map(|&(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Checks gradients of `f` with respect to each array in `inputs`.
pub fn check_inputs<F>(inputs: &[Array], opts: &FdOptions, f: F) -> Result<FdReport, GradError>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |xs: &[Array]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars);
        let loss = project(&mut tape, out, opts.seed);
        tape.value(loss).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars);
    let loss = project(&mut tape, out, opts.seed);
    let grads = tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut pairs = Vec::new();
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).expect("leaf gradient").clone();
        for i in pick(&mut rng, inputs[k].numel(), opts.max_per_input) {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + opts.h;
            let up = eval(&work);
            work[k].data_mut()[i] = orig - opts.h;
            let down = eval(&work);
            work[k].data_mut()[i] = orig;
            pairs.push((analytic.data()[i], (up - down) / (2.0 * opts.h)));
        }
    }
    Ok(FdReport { max_rel_err: rel_errors(&pairs), checked: pairs.len() })
}

/// Checks gradients of a model loss with respect to selected parameters.
pub fn check_params<F>(store: &ParamStore, ids: &[ParamId], opts: &FdOptions, f: F) -> Result<FdReport, GradError>
where
    F: Fn(&mut Tape, &ParamStore) -> Var,
{
    let eval = |s: &ParamStore| -> f64 {
        let mut tape = Tape::inference();
        let out = f(&mut tape, s);
        let loss = project(&mut tape, out, opts.seed);
        tape.value(loss).item()
    };
    let mut tape = Tape::new();
    let out = f(&mut tape, store);
    let loss = project(&mut tape, out, opts.seed);
    let grads = tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut pairs = Vec::new();
    let mut work = store.clone();
    for &id in ids {
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Array::zeros(store.value(id).shape()));
        for i in pick(&mut rng, store.value(id).numel(), opts.max_per_input) {
            let orig = work.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = orig + opts.h;
            let up = eval(&work);
            work.value_mut(id).data_mut()[i] = orig - opts.h;
            let down = eval(&work);
            work.value_mut(id).data_mut()[i] = orig;
            pairs.push((analytic.data()[i], (up - down) / (2.0 * opts.h)));
        }
    }
    Ok(FdReport { max_rel_err: rel_errors(&pairs), checked: pairs.len() })
}
