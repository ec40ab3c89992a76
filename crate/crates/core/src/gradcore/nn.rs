//! Layers built on the tape. Each layer owns only [`ParamId`]s; values live in
//! a [`ParamStore`] so a whole model can be frozen, checkpointed or optimized
//! as one unit.

use rand::Rng;

use super::array::Array;
use super::optim::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = store.add(format!("{name}.w"), Array::uniform(&[in_dim, out_dim], bound, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), Array::uniform(&[out_dim], bound, rng)));
        Self { w, b, in_dim, out_dim }
    }

    /// Applies to the last axis of a 2-D or 3-D input.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Temporal convolution over `[B, T, C]`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((kernel * c_in) as f64).sqrt();
        let w = store.add(format!("{name}.w"), Array::uniform(&[kernel * c_in, c_out], bound, rng));
        let b = store.add(format!("{name}.b"), Array::uniform(&[c_out], bound, rng));
        Self { w, b, kernel, stride, pad }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv1d(x, w, b, self.kernel, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Array::ones(&[dim]));
        let beta = store.add(format!("{name}.beta"), Array::zeros(&[dim]));
        Self { gamma, beta, eps: 1e-5 }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, self.eps)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub count: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, count: usize, dim: usize, rng: &mut R) -> Self {
        let table = store.add(format!("{name}.table"), Array::randn(&[count, dim], 0.02, rng));
        Self { table, count, dim }
    }

    /// Rows for `indices`, shaped `[indices.len(), dim]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, indices: &[usize]) -> Result<Var> {
        let t = tape.param(store, self.table);
        tape.embedding(t, indices)
    }
}

/// Additive mask with 0 where `i >= j` and `-inf` above the diagonal.
pub fn causal_mask(t: usize) -> Array {
    let mut m = Array::zeros(&[t, t]);
    for i in 0..t {
        for j in i + 1..t {
            m.data_mut()[i * t + j] = f64::NEG_INFINITY;
        }
    }
    m
}

/// Mask of shape `[batch*heads, t, t]` hiding key positions at or beyond each
/// sequence's valid length.
pub fn key_padding_mask(lengths: &[usize], heads: usize, t: usize) -> Array {
    let mut data = Vec::with_capacity(lengths.len() * heads * t * t);
    for &len in lengths {
        for _ in 0..heads {
            for _ in 0..t {
                data.extend((0..t).map(|j| if j < len { 0.0 } else { f64::NEG_INFINITY }));
            }
        }
    }
    Array::from_parts(vec![lengths.len() * heads, t, t], data)
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
    pub width: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && width % heads == 0, "width {width} not divisible by {heads} heads");
        Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), width, 3 * width, true, rng),
            out: Linear::new(store, &format!("{name}.out"), width, width, true, rng),
            heads,
            width,
        }
    }

    /// Self-attention over `x: [B, T, W]`. `mask` must have a shape that is a
    /// suffix of `[B*heads, T, T]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mask: Option<&Array>) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.width {
            return Err(Error::shape("attention", format!("input {s:?}, width {}", self.width)));
        }
        let (b, t, w) = (s[0], s[1], s[2]);
        let (h, dh) = (self.heads, self.width / self.heads);
        let qkv = self.qkv.forward(tape, store, x)?;
        let split = |tape: &mut Tape, part: usize| -> Result<Var> {
            let p = tape.slice(qkv, 2, part * w, w)?;
            let p = tape.reshape(p, &[b, t, h, dh])?;
            let p = tape.permute(p, &[0, 2, 1, 3])?;
            tape.reshape(p, &[b * h, t, dh])
        };
        let q = split(tape, 0)?;
        let k = split(tape, 1)?;
        let v = split(tape, 2)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        if let Some(m) = mask {
            scores = tape.add_mask(scores, m)?;
        }
        let attn = tape.softmax(scores, 2)?;
        let ctx = tape.matmul(attn, v)?;
        let ctx = tape.reshape(ctx, &[b, h, t, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, t, w])?;
        self.out.forward(tape, store, ctx)
    }
}

/// Pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), width, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width),
            fc1: Linear::new(store, &format!("{name}.fc1"), width, 2 * width, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), 2 * width, width, true, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mask: Option<&Array>) -> Result<Var> {
        let h = self.ln1.forward(tape, store, x)?;
        let h = self.attn.forward(tape, store, h, mask)?;
        let x = tape.add(x, h)?;
        let h = self.ln2.forward(tape, store, x)?;
        let h = self.fc1.forward(tape, store, h)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, store, h)?;
        tape.add(x, h)
    }
}

/// Stack of blocks followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct Transformer {
    pub blocks: Vec<TransformerBlock>,
    pub ln_f: LayerNorm,
    pub width: usize,
    pub heads: usize,
}

impl Transformer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        layers: usize,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        let blocks = (0..layers)
            .map(|i| TransformerBlock::new(store, &format!("{name}.{i}"), width, heads, rng))
            .collect();
        Self { blocks, ln_f: LayerNorm::new(store, &format!("{name}.ln_f"), width), width, heads }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, mut x: Var, mask: Option<&Array>) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(tape, store, x, mask)?;
        }
        self.ln_f.forward(tape, store, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn causal_mask_is_lower_triangular() {
        let m = causal_mask(3);
        for i in 0..3 {
            for j in 0..3 {
                let v = m.data()[i * 3 + j];
                assert_eq!(v == 0.0, i >= j);
            }
        }
    }

    #[test]
    fn attention_respects_causality() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let tr = Transformer::new(&mut store, "t", 2, 8, 2, &mut rng);
        let x0 = Array::randn(&[1, 5, 8], 1.0, &mut rng);
        let mut x1 = x0.clone();
        for c in 0..8 {
            x1.data_mut()[4 * 8 + c] += 1.0;
        }
        let mask = causal_mask(5);
        let run = |x: Array| {
            let mut tape = Tape::new();
            let v = tape.constant(x);
            let y = tr.forward(&mut tape, &store, v, Some(&mask)).unwrap();
            tape.value(y).clone()
        };
        let (a, b) = (run(x0), run(x1));
        assert_eq!(&a.data()[..4 * 8], &b.data()[..4 * 8]);
        assert_ne!(&a.data()[4 * 8..], &b.data()[4 * 8..]);
    }
}
