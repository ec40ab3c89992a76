//! Transformer building blocks shared by the retrieval model and the facial
//! cVAE: a sequence encoder that reads a diagonal Gaussian off two learned
//! distribution tokens, and a decoder that turns a latent plus learned
//! positional queries back into a sequence.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::nn::{key_padding_mask, Embedding, Linear, Transformer};
use crate::gradcore::{Array, ParamId, ParamStore, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeqConfig {
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub latent: usize,
    pub max_len: usize,
}

impl Default for SeqConfig {
    fn default() -> Self {
        Self { width: 64, heads: 4, layers: 2, latent: 32, max_len: 64 }
    }
}

/// Mean and log-variance of a batch of diagonal Gaussians, `[B, latent]` each.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mu: Var,
    pub logvar: Var,
}

impl GaussianVars {
    /// `mu + exp(logvar / 2) * eps` with a recorded noise draw.
    pub fn sample(&self, tape: &mut Tape, eps: &Array) -> Result<Var> {
        let half = tape.scale(self.logvar, 0.5);
        let sigma = tape.exp(half);
        let e = tape.constant(eps.clone());
        let noise = tape.mul(sigma, e)?;
        tape.add(self.mu, noise)
    }
}

/// Sum of KL(a‖N(0,I)) + KL(b‖N(0,I)) + KL(a‖b) + KL(b‖a), each averaged over rows.
pub fn four_term_kl(tape: &mut Tape, a: GaussianVars, b: GaussianVars) -> Result<Var> {
    let zero = tape.constant(Array::zeros(tape.shape(a.mu)));
    let terms = [
        tape.kl_diag(a.mu, a.logvar, zero, zero)?,
        tape.kl_diag(b.mu, b.logvar, zero, zero)?,
        tape.kl_diag(a.mu, a.logvar, b.mu, b.logvar)?,
        tape.kl_diag(b.mu, b.logvar, a.mu, a.logvar)?,
    ];
    let mut s = terms[0];
    for t in &terms[1..] {
        s = tape.add(s, *t)?;
    }
    Ok(s)
}

/// Adds rows `0..t` of a `[max_len, W]` table to every sequence of `x: [B, t, W]`.
fn add_positions(tape: &mut Tape, store: &ParamStore, x: Var, table: ParamId) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, t, w) = (s[0], s[1], s[2]);
    let p = tape.param(store, table);
    let max = tape.shape(p)[0];
    if t > max {
        return Err(Error::Invalid(format!("sequence of {t} exceeds maximum length {max}")));
    }
    let p = tape.slice(p, 0, 0, t)?;
    let p = tape.reshape(p, &[t * w])?;
    let flat = tape.reshape(x, &[b, t * w])?;
    let y = tape.add_bias(flat, p)?;
    tape.reshape(y, &[b, t, w])
}

#[derive(Clone, Debug)]
pub enum InputLayer {
    Tokens(Embedding),
    Features(Linear),
}

pub enum EncoderInput<'a> {
    /// Row-major `[batch, t]` token ids, padded with zeros.
    Tokens { ids: &'a [usize], batch: usize, t: usize },
    /// `[B, t, F]` feature sequence on the caller's tape.
    Features(Var),
}

#[derive(Clone, Debug)]
pub struct DistEncoder {
    pub input: InputLayer,
    pub dist_tokens: Embedding,
    pub positions: ParamId,
    pub body: Transformer,
    pub mu: Linear,
    pub logvar: Linear,
    pub config: SeqConfig,
}

impl DistEncoder {
    pub fn tokens<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, vocab: usize, cfg: SeqConfig, rng: &mut R) -> Self {
        let input = InputLayer::Tokens(Embedding::new(store, &format!("{name}.embed"), vocab, cfg.width, rng));
        Self::build(store, name, input, cfg, rng)
    }

    pub fn features<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, cfg: SeqConfig, rng: &mut R) -> Self {
        let input = InputLayer::Features(Linear::new(store, &format!("{name}.proj"), dim, cfg.width, true, rng));
        Self::build(store, name, input, cfg, rng)
    }

    fn build<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: InputLayer, cfg: SeqConfig, rng: &mut R) -> Self {
        Self {
            input,
            dist_tokens: Embedding::new(store, &format!("{name}.dist"), 2, cfg.width, rng),
            positions: store.add(format!("{name}.pos"), Array::randn(&[cfg.max_len, cfg.width], 0.02, rng)),
            body: Transformer::new(store, &format!("{name}.tf"), cfg.layers, cfg.width, cfg.heads, rng),
            mu: Linear::new(store, &format!("{name}.mu"), cfg.width, cfg.latent, true, rng),
            logvar: Linear::new(store, &format!("{name}.logvar"), cfg.width, cfg.latent, true, rng),
            config: cfg,
        }
    }

    /// `lengths` gives each sequence's valid prefix; padded positions are
    /// hidden from attention.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, input: EncoderInput, lengths: &[usize]) -> Result<GaussianVars> {
        let w = self.config.width;
        let x = match (&self.input, input) {
            (InputLayer::Tokens(e), EncoderInput::Tokens { ids, batch, t }) => {
                if ids.len() != batch * t {
                    return Err(Error::shape("text encoder", format!("{} ids for [{batch}, {t}]", ids.len())));
                }
                let x = e.forward(tape, store, ids)?;
                tape.reshape(x, &[batch, t, w])?
            }
            (InputLayer::Features(l), EncoderInput::Features(x)) => l.forward(tape, store, x)?,
            _ => return Err(Error::Invalid("encoder input kind does not match its input layer".into())),
        };
        let s = tape.shape(x).to_vec();
        let (b, t) = (s[0], s[1]);
        if lengths.len() != b || lengths.iter().any(|&l| l == 0 || l > t) {
            return Err(Error::shape("sequence encoder", format!("lengths {lengths:?} for [{b}, {t}]")));
        }
        let x = add_positions(tape, store, x, self.positions)?;
        let ids: Vec<usize> = (0..b).flat_map(|_| [0, 1]).collect();
        let tok = self.dist_tokens.forward(tape, store, &ids)?;
        let tok = tape.reshape(tok, &[b, 2, w])?;
        let x = tape.concat(&[tok, x], 1)?;
        let mask = if lengths.iter().all(|&l| l == t) {
            None
        } else {
            let with_tokens: Vec<usize> = lengths.iter().map(|l| l + 2).collect();
            Some(key_padding_mask(&with_tokens, self.config.heads, t + 2))
        };
        let h = self.body.forward(tape, store, x, mask.as_ref())?;
        let h_mu = tape.slice(h, 1, 0, 1)?;
        let h_mu = tape.reshape(h_mu, &[b, w])?;
        let h_lv = tape.slice(h, 1, 1, 1)?;
        let h_lv = tape.reshape(h_lv, &[b, w])?;
        Ok(GaussianVars { mu: self.mu.forward(tape, store, h_mu)?, logvar: self.logvar.forward(tape, store, h_lv)? })
    }
}

#[derive(Clone, Debug)]
pub struct SeqDecoder {
    pub latent_proj: Linear,
    pub queries: ParamId,
    pub body: Transformer,
    pub out: Linear,
    pub config: SeqConfig,
}

impl SeqDecoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, out_dim: usize, cfg: SeqConfig, rng: &mut R) -> Self {
        Self {
            latent_proj: Linear::new(store, &format!("{name}.latent"), cfg.latent, cfg.width, true, rng),
            queries: store.add(format!("{name}.queries"), Array::randn(&[cfg.max_len, cfg.width], 0.02, rng)),
            body: Transformer::new(store, &format!("{name}.tf"), cfg.layers, cfg.width, cfg.heads, rng),
            out: Linear::new(store, &format!("{name}.out"), cfg.width, out_dim, true, rng),
            config: cfg,
        }
    }

    /// Decodes `z: [B, latent]` into `[B, len, out_dim]`: every frame's query
    /// is offset by the projected latent.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, z: Var, len: usize) -> Result<Var> {
        if len == 0 || len > self.config.max_len {
            return Err(Error::Invalid(format!("decode length {len} outside [1, {}]", self.config.max_len)));
        }
        let b = tape.shape(z)[0];
        let w = self.config.width;
        let zp = self.latent_proj.forward(tape, store, z)?;
        let rows: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat(i).take(len)).collect();
        let x = tape.embedding(zp, &rows)?;
        let x = tape.reshape(x, &[b, len, w])?;
        let x = add_positions(tape, store, x, self.queries)?;
        let h = self.body.forward(tape, store, x, None)?;
        self.out.forward(tape, store, h)
    }
}
