//! Autoregressive transformer over interleaved body/hand code streams,
//! conditioned on a text embedding placed at position 0.
//!
//! Stream layout per super-step `s`: `[body 2s, body 2s+1, hand s]`, closed
//! by `[End_B, End_H]`. Every position admits tokens from exactly one part,
//! so the per-position softmax is restricted to that part's range.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{step_rng, Codec};
use crate::error::{Error, Result};
use crate::gradcore::nn::{causal_mask, Embedding, Linear, Transformer};
use crate::gradcore::{AdamW, AdamWConfig, Array, ParamId, ParamStore, Tape, Var};
use crate::tmr::Tmr;

/// Longest stream at full scale: 196 frames give 98 body + 49 hand tokens + 2 End.
pub const FULL_SCALE_MAX_STREAM: usize = 149;
pub const ALIGNMENT_WEIGHT: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub body: usize,
    pub hand: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Token {
    Body(usize),
    Hand(usize),
    EndBody,
    EndHand,
}

impl Vocab {
    pub fn size(&self) -> usize {
        self.body + self.hand + 2
    }

    pub fn end_body(&self) -> usize {
        self.body + self.hand
    }

    pub fn end_hand(&self) -> usize {
        self.body + self.hand + 1
    }

    pub fn encode(&self, t: Token) -> usize {
        match t {
            Token::Body(i) => i,
            Token::Hand(i) => self.body + i,
            Token::EndBody => self.end_body(),
            Token::EndHand => self.end_hand(),
        }
    }

    pub fn decode(&self, id: usize) -> Result<Token> {
        Ok(if id < self.body {
            Token::Body(id)
        } else if id < self.body + self.hand {
            Token::Hand(id - self.body)
        } else if id == self.end_body() {
            Token::EndBody
        } else if id == self.end_hand() {
            Token::EndHand
        } else {
            return Err(Error::IndexOutOfRange { index: id, size: self.size() });
        })
    }

    /// Admissibility of every vocabulary entry at stream position `p` given
    /// the token at `p - 1`.
    fn admissible(&self, p: usize, prev: Option<usize>, max_len: usize, forced_steps: Option<usize>) -> Vec<bool> {
        let mut ok = vec![false; self.size()];
        if prev == Some(self.end_body()) {
            ok[self.end_hand()] = true;
            return ok;
        }
        if prev == Some(self.end_hand()) {
            return ok;
        }
        match p % 3 {
            0 => {
                let step = p / 3;
                let (body, end) = match forced_steps {
                    Some(s) => (step < s, step >= s),
                    None => (p + 3 + 2 <= max_len, true),
                };
                if body {
                    ok[..self.body].iter_mut().for_each(|b| *b = true);
                }
                ok[self.end_body()] = end;
            }
            1 => ok[..self.body].iter_mut().for_each(|b| *b = true),
            _ => ok[self.body..self.body + self.hand].iter_mut().for_each(|b| *b = true),
        }
        ok
    }
}

/// Stream length for `body_len` body tokens (half as many hand tokens).
pub fn stream_len(body_len: usize) -> usize {
    body_len + body_len / 2 + 2
}

pub fn build_stream(vocab: &Vocab, body: &[usize], hand: &[usize]) -> Result<Vec<usize>> {
    if body.len() != 2 * hand.len() {
        return Err(Error::Invalid(format!("{} body tokens for {} hand tokens", body.len(), hand.len())));
    }
    let mut out = Vec::with_capacity(stream_len(body.len()));
    for (s, &h) in hand.iter().enumerate() {
        for &b in &body[2 * s..2 * s + 2] {
            if b >= vocab.body {
                return Err(Error::IndexOutOfRange { index: b, size: vocab.body });
            }
            out.push(vocab.encode(Token::Body(b)));
        }
        if h >= vocab.hand {
            return Err(Error::IndexOutOfRange { index: h, size: vocab.hand });
        }
        out.push(vocab.encode(Token::Hand(h)));
    }
    out.push(vocab.end_body());
    out.push(vocab.end_hand());
    Ok(out)
}

/// Parsed stream; `terminated` is false when the stream stopped before an
/// End pair (at a super-step boundary).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedStream {
    pub body: Vec<usize>,
    pub hand: Vec<usize>,
    pub terminated: bool,
}

pub fn parse_stream(vocab: &Vocab, stream: &[usize]) -> Result<ParsedStream> {
    let (mut body, mut hand) = (Vec::new(), Vec::new());
    let bad = |p: usize, d: String| Error::MalformedStream { position: p, detail: d };
    let mut p = 0;
    while p < stream.len() {
        let tok = vocab.decode(stream[p]).map_err(|_| bad(p, format!("token {} outside the vocabulary", stream[p])))?;
        match (p % 3, tok) {
            (0, Token::EndBody) => {
                return match stream.get(p + 1).map(|&t| vocab.decode(t)) {
                    Some(Ok(Token::EndHand)) => Ok(ParsedStream { body, hand, terminated: true }),
                    _ => Err(bad(p + 1, "End_B must be followed by End_H".into())),
                };
            }
            (0 | 1, Token::Body(i)) => body.push(i),
            (2, Token::Hand(i)) => hand.push(i),
            (r, t) => {
                let want = ["a body token or End_B", "a body token", "a hand token"][r];
                return Err(bad(p, format!("expected {want}, found {t:?}")));
            }
        }
        p += 1;
    }
    if stream.len() % 3 != 0 {
        return Err(bad(stream.len(), "stream ends inside a super-step".into()));
    }
    Ok(ParsedStream { body, hand, terminated: false })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GptConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    /// Longest stream, End pair included.
    pub max_len: usize,
    pub eta: f64,
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for GptConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            width: 64,
            heads: 4,
            max_len: stream_len(32),
            eta: ALIGNMENT_WEIGHT,
            temperature: 1.0,
            top_k: None,
            batch: 16,
            steps: 1500,
            seed: 0,
            optimizer: AdamWConfig { lr: 5e-4, ..Default::default() },
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GptLosses {
    pub total: f64,
    pub ce: f64,
    pub align: f64,
}

/// One equal-length batch of conditioned code sequences.
#[derive(Clone, Debug)]
pub struct GptBatch {
    pub texts: Vec<String>,
    /// `[B, latent]` text embeddings.
    pub text_emb: Array,
    pub body: Vec<Vec<usize>>,
    pub hand: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct Hgpt {
    pub config: GptConfig,
    pub vocab: Vocab,
    pub latent: usize,
    pub store: ParamStore,
    text_proj: Linear,
    tokens: Embedding,
    positions: ParamId,
    body: Transformer,
    head: Linear,
    pub optimizer: AdamW,
    pub step: u64,
}

#[derive(Clone, Debug)]
pub struct SampleOptions {
    pub temperature: f64,
    pub top_k: Option<usize>,
    /// Super-step count to generate exactly; `None` lets the model stop.
    pub target_steps: Option<usize>,
}

impl Hgpt {
    pub fn new(config: GptConfig, vocab: Vocab, latent: usize) -> Result<Self> {
        if config.heads == 0 || config.width % config.heads != 0 {
            return Err(Error::Invalid(format!("width {} not divisible by {} heads", config.width, config.heads)));
        }
        if config.max_len < 2 {
            return Err(Error::Invalid("maximum stream length must hold the End pair".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let w = config.width;
        let text_proj = Linear::new(&mut store, "text_proj", latent, w, true, &mut rng);
        let tokens = Embedding::new(&mut store, "tokens", vocab.size(), w, &mut rng);
        let positions = store.add("positions", Array::randn(&[config.max_len, w], 0.02, &mut rng));
        let body = Transformer::new(&mut store, "tf", config.layers, w, config.heads, &mut rng);
        let head = Linear::new(&mut store, "head", w, vocab.size(), false, &mut rng);
        let optimizer = AdamW::new(config.optimizer.clone());
        Ok(Self { config, vocab, latent, store, text_proj, tokens, positions, body, head, optimizer, step: 0 })
    }

    /// Masked logits `[B, T, V]` for prefixes of equal length `T - 1`; row
    /// `p` scores stream position `p`.
    pub fn logits(&self, tape: &mut Tape, text_emb: &Array, prefixes: &[Vec<usize>], forced_steps: Option<usize>) -> Result<Var> {
        let b = prefixes.len();
        if b == 0 || text_emb.shape() != [b, self.latent] {
            return Err(Error::shape("gpt", format!("text embedding {:?} for {b} prefixes", text_emb.shape())));
        }
        let n = prefixes[0].len();
        if prefixes.iter().any(|p| p.len() != n) {
            return Err(Error::Invalid("prefixes differ in length".into()));
        }
        let t = n + 1;
        if t > self.config.max_len {
            return Err(Error::Invalid(format!("stream of {t} positions exceeds maximum {}", self.config.max_len)));
        }
        let (w, v) = (self.config.width, self.vocab.size());
        let te = tape.constant(text_emb.clone());
        let head = self.text_proj.forward(tape, &self.store, te)?;
        let head = tape.reshape(head, &[b, 1, w])?;
        let mut x = head;
        if n > 0 {
            let ids: Vec<usize> = prefixes.iter().flatten().copied().collect();
            if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
                return Err(Error::IndexOutOfRange { index: bad, size: v });
            }
            let e = self.tokens.forward(tape, &self.store, &ids)?;
            let e = tape.reshape(e, &[b, n, w])?;
            x = tape.concat(&[head, e], 1)?;
        }
        let pos = tape.param(&self.store, self.positions);
        let pos = tape.slice(pos, 0, 0, t)?;
        let pos = tape.reshape(pos, &[t * w])?;
        let flat = tape.reshape(x, &[b, t * w])?;
        let x = tape.add_bias(flat, pos)?;
        let x = tape.reshape(x, &[b, t, w])?;
        let h = self.body.forward(tape, &self.store, x, Some(&causal_mask(t)))?;
        let logits = self.head.forward(tape, &self.store, h)?;
        let mut mask = Vec::with_capacity(b * t * v);
        for pre in prefixes {
            for p in 0..t {
                let prev = p.checked_sub(1).map(|q| pre[q]);
                let ok = self.vocab.admissible(p, prev, self.config.max_len, forced_steps);
                mask.extend(ok.iter().map(|&a| if a { 0.0 } else { f64::NEG_INFINITY }));
            }
        }
        tape.add_mask(logits, &Array::new(&[b, t, v], mask)?)
    }

    /// Cross-entropy plus `eta` times the alignment loss of the soft-decoded
    /// teacher-forced prediction.
    pub fn objective(&self, tape: &mut Tape, batch: &GptBatch, deps: Option<(&Codec, &Tmr)>) -> Result<(Var, Var, Option<Var>)> {
        let b = batch.body.len();
        let streams: Vec<Vec<usize>> =
            batch.body.iter().zip(&batch.hand).map(|(ib, ih)| build_stream(&self.vocab, ib, ih)).collect::<Result<_>>()?;
        let s = streams[0].len();
        if streams.iter().any(|x| x.len() != s) {
            return Err(Error::Invalid("batch mixes stream lengths".into()));
        }
        let prefixes: Vec<Vec<usize>> = streams.iter().map(|x| x[..s - 1].to_vec()).collect();
        let logits = self.logits(tape, &batch.text_emb, &prefixes, None)?;
        let v = self.vocab.size();
        let flat = tape.reshape(logits, &[b * s, v])?;
        let targets: Vec<Option<usize>> = streams.iter().flatten().map(|&t| Some(t)).collect();
        let ce = tape.cross_entropy(flat, &targets)?;
        if self.config.eta == 0.0 {
            return Ok((ce, ce, None));
        }
        let (codec, tmr) = deps.ok_or_else(|| Error::MissingDependency {
            name: "tmr".into(),
            detail: "the alignment loss needs frozen retrieval and codec models".into(),
        })?;
        let motion = self.soft_decode(tape, flat, b, s, codec)?;
        let texts: Vec<&str> = batch.texts.iter().map(String::as_str).collect();
        let align = tmr.alignment_loss(tape, &texts, motion)?;
        let weighted = tape.scale(align, self.config.eta);
        let total = tape.add(ce, weighted)?;
        Ok((total, ce, Some(align)))
    }

    /// Probability-weighted codebook rows of every body and hand position,
    /// decoded by the frozen codec: `[B, L, d_b + d_h]`.
    fn soft_decode(&self, tape: &mut Tape, flat_logits: Var, b: usize, s: usize, codec: &Codec) -> Result<Var> {
        if !codec.store.is_frozen() {
            return Err(Error::Invalid("soft decoding needs a frozen codec".into()));
        }
        let steps = (s - 2) / 3;
        let (kb, kh) = (self.vocab.body, self.vocab.hand);
        if codec.books.len() != 2 || codec.books[1].size() != kb || codec.books[0].size() != kh {
            return Err(Error::Invalid("codec codebooks do not match the token vocabulary".into()));
        }
        let mut body_rows = Vec::with_capacity(b * 2 * steps);
        let mut hand_rows = Vec::with_capacity(b * steps);
        for i in 0..b {
            for st in 0..steps {
                body_rows.push(i * s + 3 * st);
                body_rows.push(i * s + 3 * st + 1);
                hand_rows.push(i * s + 3 * st + 2);
            }
        }
        let d = codec.config.code_dim;
        let mut part = |rows: &[usize], start: usize, k: usize, book: &Array, t: usize| -> Result<Var> {
            let g = tape.embedding(flat_logits, rows)?;
            let g = tape.slice(g, 1, start, k)?;
            let p = tape.softmax(g, 1)?;
            let c = tape.constant(book.clone());
            let e = tape.matmul(p, c)?;
            tape.reshape(e, &[b, t, d])
        };
        let body = part(&body_rows, 0, kb, &codec.books[1].entries, 2 * steps)?;
        let hand = part(&hand_rows, kb, kh, &codec.books[0].entries, steps)?;
        codec.decode_soft(tape, body, hand)
    }

    pub fn train_step(&mut self, batch: &GptBatch, deps: Option<(&Codec, &Tmr)>) -> Result<GptLosses> {
        let mut tape = Tape::new();
        let (total, ce, align) = self.objective(&mut tape, batch, deps)?;
        let losses = GptLosses {
            total: tape.value(total).item(),
            ce: tape.value(ce).item(),
            align: align.map(|a| tape.value(a).item()).unwrap_or(0.0),
        };
        if !losses.total.is_finite() {
            return Err(Error::NonFinite { what: format!("generator loss {losses:?}") });
        }
        let grads = tape.backward(total)?;
        self.store.zero_grad();
        self.store.accumulate(&grads)?;
        self.optimizer.step(&mut self.store);
        self.step += 1;
        Ok(losses)
    }

    pub fn train(&mut self, data: &GptData, steps: usize, deps: Option<(&Codec, &Tmr)>, mut log: impl FnMut(u64, &GptLosses)) -> Result<()> {
        for _ in 0..steps {
            let mut rng = step_rng(self.config.seed, self.step);
            let batch = data.sample(self.config.batch, &mut rng)?;
            let step = self.step;
            let losses = self.train_step(&batch, deps)?;
            log(step, &losses);
        }
        Ok(())
    }

    /// Admissible-range distributions at every position of `prefix`'s
    /// continuation point (position `prefix.len()`).
    pub fn next_distribution(&self, text_emb: &[f64], prefix: &[usize], forced_steps: Option<usize>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let te = Array::new(&[1, self.latent], text_emb.to_vec())?;
        let logits = self.logits(&mut tape, &te, &[prefix.to_vec()], forced_steps)?;
        let v = self.vocab.size();
        let row = &tape.value(logits).data()[prefix.len() * v..(prefix.len() + 1) * v];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        Ok(e.iter().map(|x| x / z).collect())
    }

    /// Samples a stream token by token until the End pair, the maximum
    /// length, or the requested number of super-steps.
    pub fn sample(&self, text_emb: &[f64], opts: &SampleOptions, rng: &mut impl Rng) -> Result<ParsedStream> {
        let v = self.vocab.size();
        let cap = match opts.target_steps {
            Some(s) => stream_len(2 * s),
            None => self.config.max_len,
        };
        if cap > self.config.max_len {
            return Err(Error::Invalid(format!("{cap} stream positions exceed the maximum {}", self.config.max_len)));
        }
        let mut stream: Vec<usize> = Vec::with_capacity(cap);
        while stream.len() < cap {
            if stream.last() == Some(&self.vocab.end_hand()) {
                break;
            }
            let p = self.next_distribution(text_emb, &stream, opts.target_steps)?;
            let tok = if opts.temperature <= 0.0 {
                let mut best = 0;
                for i in 1..v {
                    if p[i] > p[best] {
                        best = i;
                    }
                }
                best
            } else {
                let mut w: Vec<f64> = p.iter().map(|&q| if q > 0.0 { q.powf(1.0 / opts.temperature) } else { 0.0 }).collect();
                if let Some(k) = opts.top_k {
                    let mut sorted: Vec<f64> = w.clone();
                    sorted.sort_by(|a, b| b.total_cmp(a));
                    let cut = sorted[k.clamp(1, v) - 1];
                    w.iter_mut().for_each(|x| {
                        if *x < cut {
                            *x = 0.0
                        }
                    });
                }
                WeightedIndex::new(&w).map_err(|e| Error::Invalid(format!("sampling weights: {e}")))?.sample(rng)
            };
            stream.push(tok);
        }
        // a cap in the middle of a super-step cannot happen: caps are 3s + 2
        let cut = if stream.last() == Some(&self.vocab.end_hand()) { stream.len() } else { stream.len() / 3 * 3 };
        parse_stream(&self.vocab, &stream[..cut])
    }
}

/// Encoded training pairs bucketed by token length.
#[derive(Clone, Debug)]
pub struct GptData {
    pub texts: Vec<String>,
    pub text_emb: Vec<Vec<f64>>,
    pub body: Vec<Vec<usize>>,
    pub hand: Vec<Vec<usize>>,
    buckets: Vec<Vec<usize>>,
}

impl GptData {
    pub fn new(texts: Vec<String>, text_emb: Vec<Vec<f64>>, body: Vec<Vec<usize>>, hand: Vec<Vec<usize>>) -> Result<Self> {
        let n = texts.len();
        if n == 0 || text_emb.len() != n || body.len() != n || hand.len() != n {
            return Err(Error::Invalid("generator data columns differ in length".into()));
        }
        let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, b) in body.iter().enumerate() {
            by_len.entry(b.len()).or_default().push(i);
        }
        Ok(Self { texts, text_emb, body, hand, buckets: by_len.into_values().collect() })
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Result<GptBatch> {
        let k = self.text_emb[idx[0]].len();
        let emb: Vec<f64> = idx.iter().flat_map(|&i| self.text_emb[i].iter().copied()).collect();
        Ok(GptBatch {
            texts: idx.iter().map(|&i| self.texts[i].clone()).collect(),
            text_emb: Array::new(&[idx.len(), k], emb)?,
            body: idx.iter().map(|&i| self.body[i].clone()).collect(),
            hand: idx.iter().map(|&i| self.hand[i].clone()).collect(),
        })
    }

    pub fn sample<R: Rng>(&self, batch: usize, rng: &mut R) -> Result<GptBatch> {
        let total: usize = self.buckets.iter().map(Vec::len).sum();
        let mut pick = rng.gen_range(0..total);
        let mut chosen = &self.buckets[0];
        for b in &self.buckets {
            if pick < b.len() {
                chosen = b;
                break;
            }
            pick -= b.len();
        }
        let idx: Vec<usize> = chosen.choose_multiple(rng, batch.min(chosen.len())).copied().collect();
        self.batch(&idx)
    }
}
