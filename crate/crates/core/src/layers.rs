//! Transformer building blocks on the tape.

use semvoc_grad::nn::{layer_norm, Init, Linear};
use semvoc_grad::{Array, ParamStore, Tape, Var};

pub const LN_EPS: f64 = 1e-6;
/// Additive score bias for masked keys; `exp` of it underflows to exactly 0.
pub const MASK_BIAS: f64 = -1e9;

/// Layer norm over the last axis, without affine parameters.
pub fn ln_last(tape: &mut Tape, x: Var) -> Var {
    let axis = tape.shape(x).len() - 1;
    layer_norm(tape, x, axis, LN_EPS)
}

#[derive(Clone, Debug)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    width: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, width: usize, heads: usize) -> Self {
        assert!(heads > 0 && width % heads == 0, "head count {heads} must divide width {width}");
        Self {
            q: Linear::new(store, init, &format!("{name}.q"), width, width, true),
            k: Linear::new(store, init, &format!("{name}.k"), width, width, true),
            v: Linear::new(store, init, &format!("{name}.v"), width, width, true),
            o: Linear::new(store, init, &format!("{name}.o"), width, width, true),
            heads,
            width,
        }
    }

    /// `(B, T, W)` into `(B*H, T, W/H)`.
    fn split_heads(&self, tape: &mut Tape, x: Var) -> Var {
        let s = tape.shape(x).to_vec();
        let (b, t) = (s[0], s[1]);
        let dh = self.width / self.heads;
        let x = tape.reshape(x, &[b, t, self.heads, dh]);
        let x = tape.transpose(x, 1, 2);
        tape.reshape(x, &[b * self.heads, t, dh])
    }

    /// Attention of queries `xq (B, Tq, W)` over `xkv (B, Tk, W)`.
    ///
    /// `key_valid[b][j] == false` excludes key `j` for batch row `b`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, xq: Var, xkv: Var, key_valid: Option<&[Vec<bool>]>) -> Var {
        self.forward_with_weights(tape, store, xq, xkv, key_valid).0
    }

    /// Like [`Attention::forward`], also returning the `(B*H, Tq, Tk)` weights.
    pub fn forward_with_weights(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        xq: Var,
        xkv: Var,
        key_valid: Option<&[Vec<bool>]>,
    ) -> (Var, Var) {
        let (sq, sk) = (tape.shape(xq).to_vec(), tape.shape(xkv).to_vec());
        assert!(sq.len() == 3 && sk.len() == 3 && sq[0] == sk[0], "attention: bad shapes {sq:?} / {sk:?}");
        assert!(sq[2] == self.width && sk[2] == self.width, "attention: width mismatch");
        let (b, tq, tk) = (sq[0], sq[1], sk[1]);
        let dh = self.width / self.heads;
        let q = self.q.forward(tape, store, xq);
        let k = self.k.forward(tape, store, xkv);
        let v = self.v.forward(tape, store, xkv);
        let q = self.split_heads(tape, q);
        let k = self.split_heads(tape, k);
        let v = self.split_heads(tape, v);
        let kt = tape.transpose(k, 1, 2);
        let scores = tape.bmm(q, kt);
        let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        if let Some(valid) = key_valid {
            assert!(valid.len() == b && valid.iter().all(|r| r.len() == tk), "attention: mask shape mismatch");
            let bias = Array::from_fn(&[b * self.heads, tq, tk], |i| {
                let (bh, j) = (i / (tq * tk), i % tk);
                if valid[bh / self.heads][j] { 0.0 } else { MASK_BIAS }
            });
            let bias = tape.constant(bias);
            scores = tape.add(scores, bias);
        }
        let attn = tape.softmax(scores);
        let ctx = tape.bmm(attn, v);
        let ctx = tape.reshape(ctx, &[b, self.heads, tq, dh]);
        let ctx = tape.transpose(ctx, 1, 2);
        let ctx = tape.reshape(ctx, &[b, tq, self.width]);
        (self.o.forward(tape, store, ctx), attn)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, width: usize, ratio: usize) -> Self {
        Self {
            fc1: Linear::new(store, init, &format!("{name}.fc1"), width, width * ratio, true),
            fc2: Linear::new(store, init, &format!("{name}.fc2"), width * ratio, width, true),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.fc1.forward(tape, store, x);
        let h = tape.gelu(h);
        self.fc2.forward(tape, store, h)
    }
}

/// Pre-norm transformer encoder block.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    attn: Attention,
    mlp: Mlp,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, width: usize, heads: usize) -> Self {
        Self {
            attn: Attention::new(store, init, &format!("{name}.attn"), width, heads),
            mlp: Mlp::new(store, init, &format!("{name}.mlp"), width, 4),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = ln_last(tape, x);
        let a = self.attn.forward(tape, store, h, h, None);
        let x = tape.add(x, a);
        let h = ln_last(tape, x);
        let m = self.mlp.forward(tape, store, h);
        tape.add(x, m)
    }
}

/// Sinusoidal positions `(T, W)`.
pub fn positions(t: usize, width: usize) -> Array {
    let idx: Vec<f64> = (0..t).map(|i| i as f64).collect();
    semvoc_grad::nn::sinusoidal_embedding(&idx, width, 1.0)
}
