//! Convolutional motion autoencoders with discrete bottlenecks: a single
//! codebook model, its residual multi-level counterpart, and the two-codebook
//! hierarchical model whose quantized hand stream is fused into the body
//! encoding before body quantization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::nn::{Conv1d, Linear};
use crate::gradcore::{AdamW, AdamWConfig, Array, ParamStore, Tape, Var};
use crate::motionrep::{self, Layout, MotionRepr, Normalizer, Part, RawMotion, RootAnchor, Skeleton};
use crate::quantize::{self, Codebook, DEFAULT_DECAY};

/// Weight of the commitment terms.
pub const COMMITMENT_WEIGHT: f64 = 0.02;
pub const BODY_RATE: usize = 2;
pub const HAND_RATE: usize = 4;
pub const FULL_SCALE_CODEBOOK: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Vanilla,
    Rvq,
    H2vq,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Self::Vanilla => "vanilla",
            Self::Rvq => "rvq",
            Self::H2vq => "h2vq",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Self::Vanilla),
            "rvq" => Ok(Self::Rvq),
            "h2vq" => Ok(Self::H2vq),
            _ => Err(Error::Invalid(format!("unknown codec variant {s}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub variant: Variant,
    pub width: usize,
    pub code_dim: usize,
    pub res_blocks: usize,
    pub body_rate: usize,
    pub hand_rate: usize,
    /// Downsampling of the single-encoder variants.
    pub joint_rate: usize,
    pub codebook_size: usize,
    pub hand_codebook_size: usize,
    pub levels: usize,
    pub commitment: f64,
    pub decay: f64,
    pub reset: bool,
    pub reset_threshold: u64,
    pub window: usize,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            variant: Variant::H2vq,
            width: 64,
            code_dim: 64,
            res_blocks: 2,
            body_rate: BODY_RATE,
            hand_rate: HAND_RATE,
            joint_rate: 4,
            codebook_size: FULL_SCALE_CODEBOOK,
            hand_codebook_size: FULL_SCALE_CODEBOOK,
            levels: 2,
            commitment: COMMITMENT_WEIGHT,
            decay: DEFAULT_DECAY,
            reset: true,
            reset_threshold: 1,
            window: 32,
            batch: 8,
            steps: 3000,
            seed: 0,
            optimizer: AdamWConfig { lr: 1e-3, ..Default::default() },
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        let pow2 = |r: usize| r >= 1 && r.is_power_of_two();
        if !pow2(self.body_rate) || !pow2(self.hand_rate) || !pow2(self.joint_rate) {
            return Err(Error::Invalid("downsampling rates must be powers of two".into()));
        }
        if self.hand_rate % self.body_rate != 0 {
            return Err(Error::Invalid("hand rate must be a multiple of the body rate".into()));
        }
        if self.window % self.hand_rate.max(self.joint_rate) != 0 {
            return Err(Error::Invalid("training window must be divisible by the downsampling rates".into()));
        }
        if self.variant == Variant::Rvq && self.levels == 0 {
            return Err(Error::Invalid("residual quantization needs at least one level".into()));
        }
        Ok(())
    }

    /// Temporal factor between the motion and the coarsest token stream.
    pub fn length_multiple(&self) -> usize {
        match self.variant {
            Variant::H2vq => self.hand_rate,
            _ => self.joint_rate,
        }
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    a: Conv1d,
    b: Conv1d,
}

impl ResBlock {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, w: usize, rng: &mut R) -> Self {
        Self {
            a: Conv1d::new(store, &format!("{name}.a"), w, w, 3, 1, 1, rng),
            b: Conv1d::new(store, &format!("{name}.b"), w, w, 3, 1, 1, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = tape.relu(x);
        let h = self.a.forward(tape, store, h)?;
        let h = tape.relu(h);
        let h = self.b.forward(tape, store, h)?;
        tape.add(x, h)
    }
}

/// Conv stack: input projection, then per stage a stride-2 convolution
/// followed by residual blocks, then an output projection.
#[derive(Clone, Debug)]
struct Encoder {
    conv_in: Conv1d,
    stages: Vec<(Conv1d, Vec<ResBlock>)>,
    conv_out: Conv1d,
}

impl Encoder {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, c_in: usize, cfg: &CodecConfig, rate: usize, rng: &mut R) -> Self {
        let w = cfg.width;
        let conv_in = Conv1d::new(store, &format!("{name}.in"), c_in, w, 3, 1, 1, rng);
        let stages = (0..rate.trailing_zeros() as usize)
            .map(|s| {
                let down = Conv1d::new(store, &format!("{name}.down{s}"), w, w, 4, 2, 1, rng);
                let res = (0..cfg.res_blocks).map(|r| ResBlock::new(store, &format!("{name}.res{s}.{r}"), w, rng)).collect();
                (down, res)
            })
            .collect();
        let conv_out = Conv1d::new(store, &format!("{name}.out"), w, cfg.code_dim, 3, 1, 1, rng);
        Self { conv_in, stages, conv_out }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = self.conv_in.forward(tape, store, x)?;
        h = tape.relu(h);
        for (down, res) in &self.stages {
            h = down.forward(tape, store, h)?;
            for r in res {
                h = r.forward(tape, store, h)?;
            }
        }
        h = tape.relu(h);
        self.conv_out.forward(tape, store, h)
    }
}

/// Mirror of [`Encoder`] with nearest ×2 upsampling in place of strided convolutions.
#[derive(Clone, Debug)]
struct Decoder {
    conv_in: Conv1d,
    stages: Vec<(Vec<ResBlock>, Conv1d)>,
    conv_out: Conv1d,
}

impl Decoder {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, cfg: &CodecConfig, rate: usize, rng: &mut R) -> Self {
        let w = cfg.width;
        let conv_in = Conv1d::new(store, &format!("{name}.in"), c_in, w, 3, 1, 1, rng);
        let stages = (0..rate.trailing_zeros() as usize)
            .map(|s| {
                let res = (0..cfg.res_blocks).map(|r| ResBlock::new(store, &format!("{name}.res{s}.{r}"), w, rng)).collect();
                (res, Conv1d::new(store, &format!("{name}.up{s}"), w, w, 3, 1, 1, rng))
            })
            .collect();
        let conv_out = Conv1d::new(store, &format!("{name}.out"), w, c_out, 3, 1, 1, rng);
        Self { conv_in, stages, conv_out }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = self.conv_in.forward(tape, store, x)?;
        h = tape.relu(h);
        for (res, conv) in &self.stages {
            for r in res {
                h = r.forward(tape, store, h)?;
            }
            h = tape.upsample2(h)?;
            h = conv.forward(tape, store, h)?;
            h = tape.relu(h);
        }
        self.conv_out.forward(tape, store, h)
    }
}

#[derive(Clone, Debug)]
enum Arch {
    Single { enc: Encoder, dec: Decoder },
    Hier { enc_h: Encoder, enc_b: Encoder, transform: Linear, fusion: Conv1d, dec: Decoder },
}

/// Losses of one codec step, all evaluated before the parameter update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CodecLosses {
    pub total: f64,
    pub reconstruction: f64,
    /// Commitment sums Σ‖z − sg(ẑ)‖², per codebook stream (hand first for the
    /// hierarchical model).
    pub commitment: [f64; 2],
}

/// Forward pass bookkeeping shared by training and gradient checks.
pub struct CodecForward {
    pub total: Var,
    pub reconstruction: Var,
    pub commitment: Vec<Var>,
    pub output: Var,
    /// Per codebook: the quantizer input values and assignments.
    pub assignments: Vec<(Array, Vec<usize>)>,
}

/// Token indices of one sequence. For the hierarchical model `streams` is
/// `[body, hand]`; otherwise one stream per quantization level.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeIndices {
    pub streams: Vec<Vec<usize>>,
}

impl CodeIndices {
    pub fn body(&self) -> &[usize] {
        &self.streams[0]
    }

    pub fn hand(&self) -> &[usize] {
        &self.streams[1]
    }
}

#[derive(Clone, Debug)]
pub struct Codec {
    pub config: CodecConfig,
    pub d_b: usize,
    pub d_h: usize,
    pub store: ParamStore,
    pub books: Vec<Codebook>,
    arch: Arch,
    pub optimizer: AdamW,
    pub step: u64,
}

/// Seeded generator for one training step, independent of earlier steps.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

impl Codec {
    pub fn new(config: CodecConfig, d_b: usize, d_h: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let c = &config;
        let (arch, books) = match c.variant {
            Variant::Vanilla | Variant::Rvq => {
                let enc = Encoder::new(&mut store, "enc", d_b + d_h, c, c.joint_rate, &mut rng);
                let dec = Decoder::new(&mut store, "dec", c.code_dim, d_b + d_h, c, c.joint_rate, &mut rng);
                let levels = if c.variant == Variant::Rvq { c.levels } else { 1 };
                let books = (0..levels).map(|_| Codebook::new(c.codebook_size, c.code_dim, c.decay, &mut rng)).collect();
                (Arch::Single { enc, dec }, books)
            }
            Variant::H2vq => {
                let enc_h = Encoder::new(&mut store, "enc_h", d_h, c, c.hand_rate, &mut rng);
                let enc_b = Encoder::new(&mut store, "enc_b", d_b, c, c.body_rate, &mut rng);
                let transform = Linear::new(&mut store, "transform", c.code_dim, c.code_dim, true, &mut rng);
                let fusion = Conv1d::new(&mut store, "fusion", 2 * c.code_dim, c.code_dim, 3, 1, 1, &mut rng);
                let dec = Decoder::new(&mut store, "dec", 2 * c.code_dim, d_b + d_h, c, c.body_rate, &mut rng);
                let hand = Codebook::new(c.hand_codebook_size, c.code_dim, c.decay, &mut rng);
                let body = Codebook::new(c.codebook_size, c.code_dim, c.decay, &mut rng);
                (Arch::Hier { enc_h, enc_b, transform, fusion, dec }, vec![hand, body])
            }
        };
        let optimizer = AdamW::new(config.optimizer.clone());
        Ok(Self { config, d_b, d_h, store, books, arch, optimizer, step: 0 })
    }

    fn check_input(&self, body: &Array, hand: &Array) -> Result<(usize, usize)> {
        let (sb, sh) = (body.shape(), hand.shape());
        if sb.len() != 3 || sh.len() != 3 || sb[0] != sh[0] || sb[1] != sh[1] || sb[2] != self.d_b || sh[2] != self.d_h {
            return Err(Error::shape("codec", format!("body {sb:?}, hand {sh:?}")));
        }
        let m = self.config.length_multiple();
        if sb[1] % m != 0 {
            return Err(Error::Invalid(format!("length {} is not divisible by {m}", sb[1])));
        }
        Ok((sb[0], sb[1]))
    }

    /// Full objective on a batch of normalized parts `[B, L, d_b]`, `[B, L, d_h]`.
    pub fn forward(&self, tape: &mut Tape, body: &Array, hand: &Array) -> Result<CodecForward> {
        self.forward_impl(tape, body, hand, None)
    }

    /// The objective with every quantizer replaced by `z + (q0 - z0)` and
    /// its commitment by `Σ‖z - q0‖²`, where `z0` and the codes are taken
    /// from `base` (a [`Codec::forward`] result). Its exact gradient is the
    /// straight-through gradient of `forward` at the base point.
    pub fn straight_through_surrogate(&self, tape: &mut Tape, body: &Array, hand: &Array, base: &[(Array, Vec<usize>)]) -> Result<CodecForward> {
        self.forward_impl(tape, body, hand, Some(base))
    }

    fn frozen_quantize(tape: &mut Tape, z: Var, z0: &Array, q0: Array) -> Result<(Var, Var)> {
        let shape = tape.shape(z).to_vec();
        let q0 = q0.reshaped(&shape)?;
        let offset = q0.zip_map(&z0.clone().reshaped(&shape)?, |q, z| q - z);
        let offset = tape.constant(offset);
        let quantized = tape.add(z, offset)?;
        let q0 = tape.constant(q0);
        let diff = tape.sub(z, q0)?;
        let sq = tape.mul(diff, diff)?;
        Ok((quantized, tape.sum(sq)))
    }

    fn forward_impl(&self, tape: &mut Tape, body: &Array, hand: &Array, frozen: Option<&[(Array, Vec<usize>)]>) -> Result<CodecForward> {
        self.check_input(body, hand)?;
        if let Some(f) = frozen {
            if f.len() != self.books.len() {
                return Err(Error::Invalid(format!("{} frozen assignments for {} codebooks", f.len(), self.books.len())));
            }
        }
        let store = &self.store;
        let b = tape.constant(body.clone());
        let h = tape.constant(hand.clone());
        let target = tape.concat(&[b, h], 2)?;
        let (output, commitment, sizes, assignments) = match &self.arch {
            Arch::Single { enc, dec } => {
                let z = enc.forward(tape, store, target)?;
                let numel = tape.value(z).len();
                let (q, commit, assign) = if let Some(f) = frozen {
                    let mut q0: Option<Array> = None;
                    for (book, (_, idx)) in self.books.iter().zip(f) {
                        let q = book.lookup(idx)?;
                        q0 = Some(match q0 {
                            None => q,
                            Some(acc) => acc.zip_map(&q, |a, b| a + b),
                        });
                    }
                    let (q, c) = Self::frozen_quantize(tape, z, &f[0].0, q0.expect("at least one codebook"))?;
                    (q, c, f.to_vec())
                } else if self.config.variant == Variant::Rvq {
                    let r = quantize::rvq_quantize(tape, z, &self.books)?;
                    let assign = r.level_inputs.into_iter().zip(r.level_indices).collect();
                    (r.quantized, r.commitment, assign)
                } else {
                    let flat = tape.value(z).clone();
                    let r = quantize::quantize(tape, z, &self.books[0])?;
                    let w = flat.cols();
                    let flat = flat.reshaped(&[r.indices.len(), w])?;
                    (r.quantized, r.commitment, vec![(flat, r.indices)])
                };
                let out = dec.forward(tape, store, q)?;
                (out, vec![commit], vec![numel], assign)
            }
            Arch::Hier { enc_h, enc_b, transform, fusion, dec } => {
                let quant = |tape: &mut Tape, z: Var, level: usize| -> Result<(Var, Var, Vec<usize>)> {
                    match frozen {
                        Some(f) => {
                            let (z0, idx) = &f[level];
                            let (q, c) = Self::frozen_quantize(tape, z, z0, self.books[level].lookup(idx)?)?;
                            Ok((q, c, idx.clone()))
                        }
                        None => {
                            let r = quantize::quantize(tape, z, &self.books[level])?;
                            Ok((r.quantized, r.commitment, r.indices))
                        }
                    }
                };
                let zh = enc_h.forward(tape, store, h)?;
                let (qh, ch, ih) = quant(tape, zh, 0)?;
                let zb = self.fuse(tape, enc_b, transform, fusion, b, qh)?;
                let (qb, cb, ib) = quant(tape, zb, 1)?;
                let dec_in = self.hier_decoder_input(tape, qb, qh)?;
                let out = dec.forward(tape, store, dec_in)?;
                let zh_v = tape.value(zh);
                let zb_v = tape.value(zb);
                let sizes = vec![zh_v.len(), zb_v.len()];
                let assign = vec![
                    (zh_v.clone().reshaped(&[zh_v.rows(), zh_v.cols()])?, ih),
                    (zb_v.clone().reshaped(&[zb_v.rows(), zb_v.cols()])?, ib),
                ];
                (out, vec![ch, cb], sizes, assign)
            }
        };
        let reconstruction = tape.mse(output, target)?;
        let mut total = reconstruction;
        for (c, n) in commitment.iter().zip(&sizes) {
            let term = tape.scale(*c, self.config.commitment / *n as f64);
            total = tape.add(total, term)?;
        }
        Ok(CodecForward { total, reconstruction, commitment, output, assignments })
    }

    fn fuse(&self, tape: &mut Tape, enc_b: &Encoder, transform: &Linear, fusion: &Conv1d, body: Var, hand_q: Var) -> Result<Var> {
        let store = &self.store;
        let fb = enc_b.forward(tape, store, body)?;
        let mut ph = transform.forward(tape, store, hand_q)?;
        for _ in 0..(self.config.hand_rate / self.config.body_rate).trailing_zeros() {
            ph = tape.upsample2(ph)?;
        }
        let cat = tape.concat(&[fb, ph], 2)?;
        fusion.forward(tape, store, cat)
    }

    fn hier_decoder_input(&self, tape: &mut Tape, body_q: Var, hand_q: Var) -> Result<Var> {
        let mut up = hand_q;
        for _ in 0..(self.config.hand_rate / self.config.body_rate).trailing_zeros() {
            up = tape.upsample2(up)?;
        }
        tape.concat(&[body_q, up], 2)
    }

    /// One optimization step followed by codebook maintenance.
    pub fn train_step(&mut self, body: &Array, hand: &Array) -> Result<CodecLosses> {
        let mut rng = step_rng(self.config.seed ^ 0x5eed, self.step);
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, body, hand)?;
        let total = tape.value(fwd.total).item();
        if !total.is_finite() {
            return Err(Error::NonFinite {
                what: format!(
                    "codec loss (reconstruction {}, commitment {:?})",
                    tape.value(fwd.reconstruction).item(),
                    fwd.commitment.iter().map(|c| tape.value(*c).item()).collect::<Vec<_>>()
                ),
            });
        }
        let grads = tape.backward(fwd.total)?;
        self.store.zero_grad();
        self.store.accumulate(&grads)?;
        self.optimizer.step(&mut self.store);
        for (book, (z, idx)) in self.books.iter_mut().zip(&fwd.assignments) {
            book.ema_update(z, idx)?;
            if self.config.reset {
                book.code_reset(z, self.config.reset_threshold, &mut rng)?;
            }
        }
        self.step += 1;
        let mut commitment = [0.0; 2];
        for (slot, c) in commitment.iter_mut().zip(&fwd.commitment) {
            *slot = tape.value(*c).item();
        }
        Ok(CodecLosses { total, reconstruction: tape.value(fwd.reconstruction).item(), commitment })
    }

    /// Token indices of one sequence of normalized parts `[L, d_b]`, `[L, d_h]`.
    pub fn encode(&self, body: &Array, hand: &Array) -> Result<CodeIndices> {
        let l = body.shape()[0];
        let b3 = body.clone().reshaped(&[1, l, self.d_b])?;
        let h3 = hand.clone().reshaped(&[1, l, self.d_h])?;
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, &b3, &h3)?;
        let streams = match self.config.variant {
            // assignments are stored hand first
            Variant::H2vq => vec![fwd.assignments[1].1.clone(), fwd.assignments[0].1.clone()],
            _ => fwd.assignments.into_iter().map(|(_, i)| i).collect(),
        };
        Ok(CodeIndices { streams })
    }

    /// Decodes indices back to normalized parts `([L, d_b], [L, d_h])`.
    pub fn decode(&self, codes: &CodeIndices) -> Result<(Array, Array)> {
        let mut tape = Tape::new();
        let out = match &self.arch {
            Arch::Single { dec, .. } => {
                if codes.streams.len() != self.books.len() {
                    return Err(Error::Invalid(format!("expected {} index streams", self.books.len())));
                }
                let t = codes.streams[0].len();
                let mut sum: Option<Array> = None;
                for (book, idx) in self.books.iter().zip(&codes.streams) {
                    if idx.len() != t {
                        return Err(Error::Invalid("level streams differ in length".into()));
                    }
                    let q = book.lookup(idx)?;
                    sum = Some(match sum {
                        None => q,
                        Some(acc) => acc.zip_map(&q, |a, b| a + b),
                    });
                }
                let z = tape.constant(sum.unwrap().reshaped(&[1, t, self.config.code_dim])?);
                dec.forward(&mut tape, &self.store, z)?
            }
            Arch::Hier { dec, .. } => {
                let (ib, ih) = (codes.body(), codes.hand());
                let ratio = self.config.hand_rate / self.config.body_rate;
                if ib.len() != ratio * ih.len() {
                    return Err(Error::Invalid(format!("{} body tokens for {} hand tokens", ib.len(), ih.len())));
                }
                let qb = self.books[1].lookup(ib)?.reshaped(&[1, ib.len(), self.config.code_dim])?;
                let qh = self.books[0].lookup(ih)?.reshaped(&[1, ih.len(), self.config.code_dim])?;
                let qb = tape.constant(qb);
                let qh = tape.constant(qh);
                let x = self.hier_decoder_input(&mut tape, qb, qh)?;
                dec.forward(&mut tape, &self.store, x)?
            }
        };
        self.split_output(tape.value(out))
    }

    fn split_output(&self, out: &Array) -> Result<(Array, Array)> {
        let l = out.shape()[1];
        let w = self.d_b + self.d_h;
        let (mut b, mut h) = (Vec::with_capacity(l * self.d_b), Vec::with_capacity(l * self.d_h));
        for t in 0..l {
            let row = &out.data()[t * w..(t + 1) * w];
            b.extend_from_slice(&row[..self.d_b]);
            h.extend_from_slice(&row[self.d_b..]);
        }
        Ok((Array::new(&[l, self.d_b], b)?, Array::new(&[l, self.d_h], h)?))
    }

    /// Decoder applied to soft code vectors on a caller's tape. `body` is
    /// `[B, L/r_B, D]` and `hand` `[B, L/r_H, D]`; returns `[B, L, d_b + d_h]`.
    pub fn decode_soft(&self, tape: &mut Tape, body: Var, hand: Var) -> Result<Var> {
        match &self.arch {
            Arch::Hier { dec, .. } => {
                let x = self.hier_decoder_input(tape, body, hand)?;
                dec.forward(tape, &self.store, x)
            }
            Arch::Single { .. } => Err(Error::Invalid("soft decoding needs the hierarchical codec".into())),
        }
    }

    pub fn reconstruct(&self, body: &Array, hand: &Array) -> Result<(Array, Array)> {
        self.decode(&self.encode(body, hand)?)
    }
}

/// Normalized body and hand parts of a set of sequences, ready for batching.
#[derive(Clone, Debug)]
pub struct PartData {
    pub body: Vec<Array>,
    pub hand: Vec<Array>,
}

impl PartData {
    pub fn new(frames: &[&Array], layout: &Layout, norm: &Normalizer) -> Result<Self> {
        let (mut body, mut hand) = (Vec::new(), Vec::new());
        for f in frames {
            let n = norm.normalize(f)?;
            let (b, h, _) = motionrep::split_parts(&n, layout)?;
            body.push(b);
            hand.push(h);
        }
        Ok(Self { body, hand })
    }

    pub fn len(&self) -> usize {
        self.body.len()
    }

    pub fn is_empty(&self) -> bool {
        self.body.is_empty()
    }

    /// Random crops of `window` frames from random sequences: `[B, window, ·]`.
    pub fn sample<R: Rng>(&self, batch: usize, window: usize, rng: &mut R) -> Result<(Array, Array)> {
        let eligible: Vec<usize> = (0..self.len()).filter(|&i| self.body[i].rows() >= window).collect();
        if eligible.is_empty() {
            return Err(Error::Invalid(format!("no sequence has {window} frames")));
        }
        let (db, dh) = (self.body[0].cols(), self.hand[0].cols());
        let (mut b, mut h) = (Vec::with_capacity(batch * window * db), Vec::with_capacity(batch * window * dh));
        for _ in 0..batch {
            let i = eligible[rng.gen_range(0..eligible.len())];
            let start = rng.gen_range(0..=self.body[i].rows() - window);
            b.extend_from_slice(&self.body[i].data()[start * db..(start + window) * db]);
            h.extend_from_slice(&self.hand[i].data()[start * dh..(start + window) * dh]);
        }
        Ok((Array::new(&[batch, window, db], b)?, Array::new(&[batch, window, dh], h)?))
    }
}

impl Codec {
    /// Runs `steps` training steps on random windows of `data`, reporting
    /// every step's losses to `log`.
    pub fn train(&mut self, data: &PartData, steps: usize, mut log: impl FnMut(u64, &CodecLosses)) -> Result<()> {
        for _ in 0..steps {
            let mut rng = step_rng(self.config.seed, self.step);
            let (b, h) = data.sample(self.config.batch, self.config.window, &mut rng)?;
            let step = self.step;
            let losses = self.train_step(&b, &h)?;
            log(step, &losses);
        }
        Ok(())
    }

    /// Fraction of each codebook's entries selected at least once on `data`.
    pub fn usage(&self, data: &PartData) -> Result<Vec<f64>> {
        let mut hist: Vec<Vec<u64>> = self.books.iter().map(|b| vec![0; b.size()]).collect();
        for (b, h) in data.body.iter().zip(&data.hand) {
            let (b, h) = crop(b, h, self.config.length_multiple())?;
            let codes = self.encode(&b, &h)?;
            let streams = match self.config.variant {
                Variant::H2vq => vec![codes.hand().to_vec(), codes.body().to_vec()],
                _ => codes.streams,
            };
            for (hist, s) in hist.iter_mut().zip(streams) {
                for i in s {
                    hist[i] += 1;
                }
            }
        }
        Ok(hist.iter().map(|h| h.iter().filter(|&&c| c > 0).count() as f64 / h.len() as f64).collect())
    }
}

/// Leading frames of both parts, cut to a multiple of `multiple`.
pub fn crop(body: &Array, hand: &Array, multiple: usize) -> Result<(Array, Array)> {
    let l = body.rows() / multiple * multiple;
    if l == 0 {
        return Err(Error::Invalid(format!("sequence shorter than {multiple} frames")));
    }
    Ok((body.slice_rows(0, l), hand.slice_rows(0, l)))
}

/// Pose errors of one codec on held-out sequences, per skeleton part.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionRow {
    pub codec: String,
    /// MPJPE, PA-MPJPE and Accel for all joints, body joints, hand joints.
    pub mpjpe: [f64; 3],
    pub pa_mpjpe: [f64; 3],
    pub accel: [f64; 3],
}

impl ReconstructionRow {
    pub const HEADER: &'static str = "codec\tmpjpe_all\tmpjpe_body\tmpjpe_hand\tpa_mpjpe_all\tpa_mpjpe_body\tpa_mpjpe_hand\taccel_all\taccel_body\taccel_hand";

    pub fn to_tsv(&self) -> String {
        let mut s = self.codec.clone();
        for v in self.mpjpe.iter().chain(&self.pa_mpjpe).chain(&self.accel) {
            s.push_str(&format!("\t{v:.3}"));
        }
        s
    }
}

/// Sequence to be reconstructed together with the anchor that places it.
pub struct EvalSequence<'a> {
    pub frames: &'a Array,
    pub anchor: RootAnchor,
}

/// Encodes and decodes every sequence and measures joint errors in global
/// coordinates against the decoded ground truth.
pub fn reconstruction_benchmark(
    name: &str,
    codec: &Codec,
    norm: &Normalizer,
    skel: &Skeleton,
    seqs: &[EvalSequence],
) -> Result<ReconstructionRow> {
    if codec.step == 0 {
        return Err(Error::Invalid(format!("codec {name} is untrained")));
    }
    let layout = skel.layout();
    let parts = [skel.joints(Part::All), skel.joints(Part::Body), skel.joints(Part::Hand)];
    let mut row = ReconstructionRow { codec: name.to_string(), ..Default::default() };
    let mut frames = 0usize;
    for seq in seqs {
        let (pred, gt) = reconstruct_raw(codec, norm, skel, &layout, seq)?;
        let l = gt.frames();
        for (p, joints) in parts.iter().enumerate() {
            row.mpjpe[p] += motionrep::mpjpe(&pred, &gt, joints)? * l as f64;
            row.pa_mpjpe[p] += motionrep::pa_mpjpe(&pred, &gt, joints)? * l as f64;
            row.accel[p] += motionrep::accel_error(&pred, &gt, joints)? * l as f64;
        }
        frames += l;
    }
    if frames == 0 {
        return Err(Error::Invalid("empty evaluation set".into()));
    }
    for v in row.mpjpe.iter_mut().chain(row.pa_mpjpe.iter_mut()).chain(row.accel.iter_mut()) {
        *v /= frames as f64;
    }
    Ok(row)
}

/// Predicted and ground-truth global joint positions of one sequence.
pub fn reconstruct_raw(
    codec: &Codec,
    norm: &Normalizer,
    skel: &Skeleton,
    layout: &Layout,
    seq: &EvalSequence,
) -> Result<(RawMotion, RawMotion)> {
    let n = norm.normalize(seq.frames)?;
    let (b, h, f) = motionrep::split_parts(&n, layout)?;
    let (b, h) = crop(&b, &h, codec.config.length_multiple())?;
    let l = b.rows();
    let (rb, rh) = codec.reconstruct(&b, &h)?;
    let pred = norm.denormalize(&motionrep::merge_parts(&rb, &rh, &f.slice_rows(0, l), layout)?)?;
    let truth = seq.frames.slice_rows(0, l);
    let repr = |frames| MotionRepr { frames, velocity_included: true };
    Ok((
        motionrep::decode(&repr(pred), skel, seq.anchor)?,
        motionrep::decode(&repr(truth), skel, seq.anchor)?,
    ))
}
