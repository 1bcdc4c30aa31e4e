//! Centered STFT/iSTFT with a periodic Hann window.
//!
//! Scaling: the forward transform multiplies by `1/sqrt(N)` and the inverse
//! by `sqrt(N)` before windowed overlap-add, which is divided by the summed
//! squared window. With `hop = N/4` that envelope is 1.5 away from the edges.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use realfft::num_complex::Complex;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use semvoc_grad::{Array, OlaPlan, UnaryOp};

use crate::{Error, Result};

/// One spectral resolution: `fft_size = 4 * hop`.
#[derive(Clone)]
pub struct StftPlan {
    fft_size: usize,
    hop: usize,
    sample_rate: u32,
    window: Arc<Vec<f64>>,
    forward: Arc<dyn RealToComplex<f64>>,
    inverse: Arc<dyn ComplexToReal<f64>>,
}

impl fmt::Debug for StftPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StftPlan")
            .field("fft_size", &self.fft_size)
            .field("hop", &self.hop)
            .field("sample_rate", &self.sample_rate)
            .finish()
    }
}

impl PartialEq for StftPlan {
    fn eq(&self, other: &Self) -> bool {
        self.fft_size == other.fft_size && self.hop == other.hop && self.sample_rate == other.sample_rate
    }
}

pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

impl StftPlan {
    pub fn new(hop: usize, sample_rate: u32) -> Result<Self> {
        if hop == 0 || sample_rate == 0 {
            return Err(Error::Config(format!("stft plan needs positive hop and rate, got hop {hop} at {sample_rate} Hz")));
        }
        let fft_size = 4 * hop;
        let mut planner = RealFftPlanner::<f64>::new();
        Ok(Self {
            fft_size,
            hop,
            sample_rate,
            window: Arc::new(hann(fft_size)),
            forward: planner.plan_fft_forward(fft_size),
            inverse: planner.plan_fft_inverse(fft_size),
        })
    }

    pub fn fft_size(&self) -> usize {
        self.fft_size
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// Frame count for a signal of `len` samples.
    pub fn frames(&self, len: usize) -> usize {
        len.div_ceil(self.hop)
    }

    /// Overlap-add plan reproducing [`istft`] on the tape.
    pub fn ola_plan(&self, length: usize) -> OlaPlan {
        let frames = self.frames(length);
        OlaPlan::new(self.window.to_vec(), self.hop, self.fft_size / 2, frames, length)
    }
}

/// Non-negative-frequency STFT coefficients, `bins x frames`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectroFrame {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
    pub bins: usize,
    pub frames: usize,
}

impl SpectroFrame {
    pub fn zeros(bins: usize, frames: usize) -> Self {
        Self { re: vec![0.0; bins * frames], im: vec![0.0; bins * frames], bins, frames }
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.re.iter().zip(&self.im).map(|(r, i)| r.hypot(*i)).collect()
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            re: self.re.iter().map(|v| v * a).collect(),
            im: self.im.iter().map(|v| v * a).collect(),
            ..*self
        }
    }

    /// Real rows followed by imaginary rows: a `(2 * bins, frames)` array.
    pub fn to_channels(&self) -> Array {
        let mut data = self.re.clone();
        data.extend_from_slice(&self.im);
        Array::new(vec![2 * self.bins, self.frames], data)
    }

    pub fn from_channels(a: &Array) -> Result<Self> {
        let s = a.shape();
        if s.len() != 2 || s[0] % 2 != 0 {
            return Err(Error::Shape(format!("expected (2*bins, frames) channels, got {s:?}")));
        }
        let (bins, frames) = (s[0] / 2, s[1]);
        let (re, im) = a.data().split_at(bins * frames);
        Ok(Self { re: re.to_vec(), im: im.to_vec(), bins, frames })
    }
}

fn reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((1..=pad).rev().map(|i| x[i]));
    out.extend_from_slice(x);
    out.extend((0..pad).map(|i| x[n - 2 - i]));
    out
}

pub fn stft(signal: &[f64], plan: &StftPlan) -> Result<SpectroFrame> {
    let n = plan.fft_size;
    if signal.len() < n {
        return Err(Error::Signal(format!("signal of {} samples is shorter than one {n}-sample window", signal.len())));
    }
    let padded = reflect_pad(signal, n / 2);
    let frames = plan.frames(signal.len());
    let bins = plan.bins();
    let mut out = SpectroFrame::zeros(bins, frames);
    let mut buf = plan.forward.make_input_vec();
    let mut spec = plan.forward.make_output_vec();
    let mut scratch = plan.forward.make_scratch_vec();
    let norm = 1.0 / (n as f64).sqrt();
    for m in 0..frames {
        let seg = &padded[m * plan.hop..m * plan.hop + n];
        for ((b, &x), &w) in buf.iter_mut().zip(seg).zip(plan.window.iter()) {
            *b = x * w;
        }
        plan.forward
            .process_with_scratch(&mut buf, &mut spec, &mut scratch)
            .map_err(|e| Error::Numeric(e.to_string()))?;
        for (k, c) in spec.iter().enumerate() {
            out.re[k * frames + m] = c.re * norm;
            out.im[k * frames + m] = c.im * norm;
        }
    }
    Ok(out)
}

/// Unwindowed time-domain frames `(N, frames)` from coefficients.
fn inverse_frames(coef: &SpectroFrame, plan: &StftPlan) -> Result<Vec<f64>> {
    let n = plan.fft_size;
    let frames = coef.frames;
    let mut spec = plan.inverse.make_input_vec();
    let mut buf = plan.inverse.make_output_vec();
    let mut scratch = plan.inverse.make_scratch_vec();
    let norm = 1.0 / (n as f64).sqrt();
    let mut out = vec![0.0; n * frames];
    for m in 0..frames {
        for (k, c) in spec.iter_mut().enumerate() {
            *c = Complex::new(coef.re[k * frames + m], coef.im[k * frames + m]);
        }
        spec[0].im = 0.0;
        spec[n / 2].im = 0.0;
        plan.inverse
            .process_with_scratch(&mut spec, &mut buf, &mut scratch)
            .map_err(|e| Error::Numeric(e.to_string()))?;
        for (j, v) in buf.iter().enumerate() {
            out[j * frames + m] = v * norm;
        }
    }
    Ok(out)
}

pub fn istft(coef: &SpectroFrame, plan: &StftPlan, length: usize) -> Result<Vec<f64>> {
    if coef.bins != plan.bins() {
        return Err(Error::Shape(format!("coefficients have {} bins, plan expects {}", coef.bins, plan.bins())));
    }
    if coef.re.len() != coef.bins * coef.frames || coef.im.len() != coef.re.len() {
        return Err(Error::Shape("coefficient buffers do not match bins x frames".into()));
    }
    let frames = inverse_frames(coef, plan)?;
    let ola = OlaPlan::new(plan.window.to_vec(), plan.hop, plan.fft_size / 2, coef.frames, length);
    let mut out = vec![0.0; length];
    ola.for_each(|j, m, pos, w| out[pos] += w * frames[j * coef.frames + m]);
    Ok(out)
}

/// Sum of squared shifted windows at each padded position.
pub fn window_envelope(plan: &StftPlan, frames: usize) -> Vec<f64> {
    let n = plan.fft_size;
    let mut env = vec![0.0; (frames - 1) * plan.hop + n];
    for m in 0..frames {
        for (j, w) in plan.window.iter().enumerate() {
            env[m * plan.hop + j] += w * w;
        }
    }
    env
}

/// Inverse real DFT of `(B, 2*bins, T)` coefficient channels into `(B, N, T)`
/// frames, as a tape op. Matches the per-frame inverse inside [`istft`].
#[derive(Clone)]
pub struct IrfftFrames {
    plan: StftPlan,
}

impl fmt::Debug for IrfftFrames {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "IrfftFrames({})", self.plan.fft_size)
    }
}

impl IrfftFrames {
    pub fn new(plan: StftPlan) -> Self {
        Self { plan }
    }
}

impl UnaryOp for IrfftFrames {
    fn name(&self) -> &'static str {
        "irfft_frames"
    }

    fn forward(&self, input: &Array) -> Array {
        let s = input.shape();
        let bins = self.plan.bins();
        assert!(s.len() == 3 && s[1] == 2 * bins, "irfft_frames: expected (B, {}, T), got {s:?}", 2 * bins);
        let (b, t, n) = (s[0], s[2], self.plan.fft_size);
        let mut out = Vec::with_capacity(b * n * t);
        for bi in 0..b {
            let ch = &input.data()[bi * 2 * bins * t..(bi + 1) * 2 * bins * t];
            let coef = SpectroFrame {
                re: ch[..bins * t].to_vec(),
                im: ch[bins * t..].to_vec(),
                bins,
                frames: t,
            };
            out.extend(inverse_frames(&coef, &self.plan).expect("inverse fft"));
        }
        Array::new(vec![b, n, t], out)
    }

    fn backward(&self, input: &Array, _output: &Array, grad_out: &[f64], grad_in: &mut [f64]) {
        let s = input.shape();
        let (b, t) = (s[0], s[2]);
        let n = self.plan.fft_size;
        let bins = self.plan.bins();
        let fwd = &self.plan.forward;
        let mut buf = fwd.make_input_vec();
        let mut spec = fwd.make_output_vec();
        let mut scratch = fwd.make_scratch_vec();
        let norm = 1.0 / (n as f64).sqrt();
        for bi in 0..b {
            let g = &grad_out[bi * n * t..(bi + 1) * n * t];
            let d = &mut grad_in[bi * 2 * bins * t..(bi + 1) * 2 * bins * t];
            for m in 0..t {
                for (j, v) in buf.iter_mut().enumerate() {
                    *v = g[j * t + m];
                }
                fwd.process_with_scratch(&mut buf, &mut spec, &mut scratch).expect("forward fft");
                for (k, c) in spec.iter().enumerate() {
                    let edge = k == 0 || k == bins - 1;
                    let ck = if edge { 1.0 } else { 2.0 } * norm;
                    d[k * t + m] += ck * c.re;
                    if !edge {
                        d[(bins + k) * t + m] += ck * c.im;
                    }
                }
            }
        }
    }
}

/// Dense `(N, 2*bins)` synthesis basis equivalent to [`IrfftFrames`].
pub fn synthesis_basis(plan: &StftPlan) -> Array {
    let n = plan.fft_size;
    let bins = plan.bins();
    let norm = 1.0 / (n as f64).sqrt();
    Array::from_fn(&[n, 2 * bins], |idx| {
        let (j, c) = (idx / (2 * bins), idx % (2 * bins));
        let (k, imag) = if c < bins { (c, false) } else { (c - bins, true) };
        let edge = k == 0 || k == bins - 1;
        let ck = if edge { 1.0 } else { 2.0 } * norm;
        let arg = 2.0 * PI * (k * j % n) as f64 / n as f64;
        match (imag, edge) {
            (false, _) => ck * arg.cos(),
            (true, true) => 0.0,
            (true, false) => -ck * arg.sin(),
        }
    })
}
