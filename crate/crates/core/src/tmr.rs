//! Text-motion retrieval model: word tokenizer, term-frequency similarity,
//! negative filtering, paired text/motion encoders with a shared motion
//! decoder, contrastive training and the retrieval protocols.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::step_rng;
use crate::error::{Error, Result};
use crate::gradcore::{AdamW, AdamWConfig, Array, ParamStore, Tape, Var};
use crate::motionrep::{Layout, Normalizer};
use crate::seqvae::{four_term_kl, DistEncoder, EncoderInput, GaussianVars, SeqConfig, SeqDecoder};

/// Texts more similar than this are not used as each other's negatives.
pub const NEGATIVE_FILTER_THRESHOLD: f64 = 0.85;
/// Similarity above which a retrieved text counts as correct under protocol B.
pub const PROTOCOL_B_EPSILON: f64 = 0.9;

pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

/// Cosine similarity of term-frequency vectors.
pub fn similarity(a: &str, b: &str) -> f64 {
    let tf = |t: &str| {
        let mut m: BTreeMap<String, f64> = BTreeMap::new();
        for w in words(t) {
            *m.entry(w).or_default() += 1.0;
        }
        m
    };
    let (ta, tb) = (tf(a), tf(b));
    let dot: f64 = ta.iter().filter_map(|(w, x)| tb.get(w).map(|y| x * y)).sum();
    let na = ta.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb = tb.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// `mask[i*n+j]` is true when pair `(i, j)` may serve as a negative (or is
/// the positive diagonal).
pub fn negative_filter(texts: &[&str]) -> Vec<bool> {
    let n = texts.len();
    let mut mask = vec![true; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let admit = similarity(texts[i], texts[j]) <= NEGATIVE_FILTER_THRESHOLD;
            mask[i * n + j] = admit;
            mask[j * n + i] = admit;
        }
    }
    mask
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: BTreeMap<String, usize>,
    pub max_len: usize,
}

impl Tokenizer {
    pub const PAD: usize = 0;
    pub const UNK: usize = 1;

    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_len: usize) -> Self {
        let set: BTreeSet<String> = texts.into_iter().flat_map(words).collect();
        let mut vocab = vec!["<pad>".to_string(), "<unk>".to_string()];
        vocab.extend(set);
        Self::from_vocab(vocab, max_len)
    }

    pub fn from_vocab(vocab: Vec<String>, max_len: usize) -> Self {
        let index = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { vocab, index, max_len }
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let ids: Vec<usize> = words(text)
            .iter()
            .take(self.max_len)
            .map(|w| self.index.get(w).copied().unwrap_or(Self::UNK))
            .collect();
        if ids.is_empty() {
            return Err(Error::Invalid("empty text".into()));
        }
        Ok(ids)
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.vocab.get(i).map(String::as_str).unwrap_or("<unk>")).collect::<Vec<_>>().join(" ")
    }
}

pub const LAMBDA_KL: f64 = 1e-5;
pub const LAMBDA_E: f64 = 1e-5;
pub const LAMBDA_NCE: f64 = 0.1;
pub const TEMPERATURE: f64 = 0.1;
pub const RECALL_KS: [usize; 5] = [1, 2, 3, 5, 10];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TmrConfig {
    pub encoder: SeqConfig,
    pub decoder_layers: usize,
    pub max_words: usize,
    pub lambda_kl: f64,
    pub lambda_e: f64,
    pub lambda_nce: f64,
    pub temperature: f64,
    pub filter_negatives: bool,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for TmrConfig {
    fn default() -> Self {
        Self {
            encoder: SeqConfig::default(),
            decoder_layers: 4,
            max_words: 16,
            lambda_kl: LAMBDA_KL,
            lambda_e: LAMBDA_E,
            lambda_nce: LAMBDA_NCE,
            temperature: TEMPERATURE,
            filter_negatives: true,
            batch: 32,
            steps: 1500,
            seed: 0,
            optimizer: AdamWConfig { lr: 5e-4, ..Default::default() },
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TmrLosses {
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub embedding: f64,
    pub nce: f64,
}

/// Body and hand columns of a normalized representation, the motion input
/// of the retrieval model.
pub fn motion_features(frames: &Array, layout: &Layout, norm: &Normalizer) -> Result<Array> {
    let n = norm.normalize(frames)?;
    let cols: Vec<usize> = layout.body_cols.iter().chain(&layout.hand_cols).copied().collect();
    let mut out = Vec::with_capacity(n.rows() * cols.len());
    for r in 0..n.rows() {
        let row = n.row(r);
        out.extend(cols.iter().map(|&c| row[c]));
    }
    Array::new(&[n.rows(), cols.len()], out)
}

#[derive(Clone, Debug)]
pub struct Tmr {
    pub config: TmrConfig,
    pub tokenizer: Tokenizer,
    pub motion_dim: usize,
    pub store: ParamStore,
    pub text_encoder: DistEncoder,
    pub motion_encoder: DistEncoder,
    pub decoder: SeqDecoder,
    pub optimizer: AdamW,
    pub step: u64,
}

impl Tmr {
    pub fn new(config: TmrConfig, tokenizer: Tokenizer, motion_dim: usize) -> Result<Self> {
        let e = config.encoder;
        if e.width % e.heads != 0 {
            return Err(Error::Invalid(format!("width {} not divisible by {} heads", e.width, e.heads)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let text_cfg = SeqConfig { max_len: config.max_words, ..e };
        let text_encoder = DistEncoder::tokens(&mut store, "text", tokenizer.len(), text_cfg, &mut rng);
        let motion_encoder = DistEncoder::features(&mut store, "motion", motion_dim, e, &mut rng);
        let dec_cfg = SeqConfig { layers: config.decoder_layers, ..e };
        let decoder = SeqDecoder::new(&mut store, "decoder", motion_dim, dec_cfg, &mut rng);
        let optimizer = AdamW::new(config.optimizer.clone());
        let tokenizer = Tokenizer { max_len: config.max_words, ..tokenizer };
        Ok(Self { config, tokenizer, motion_dim, store, text_encoder, motion_encoder, decoder, optimizer, step: 0 })
    }

    pub fn latent(&self) -> usize {
        self.config.encoder.latent
    }

    pub fn encode_texts(&self, tape: &mut Tape, texts: &[&str]) -> Result<GaussianVars> {
        let tokens: Vec<Vec<usize>> = texts.iter().map(|t| self.tokenizer.encode(t)).collect::<Result<_>>()?;
        let t = tokens.iter().map(Vec::len).max().unwrap_or(0);
        if t == 0 {
            return Err(Error::Invalid("no texts to encode".into()));
        }
        let mut ids = vec![Tokenizer::PAD; texts.len() * t];
        for (i, tk) in tokens.iter().enumerate() {
            ids[i * t..i * t + tk.len()].copy_from_slice(tk);
        }
        let lengths: Vec<usize> = tokens.iter().map(Vec::len).collect();
        self.text_encoder.forward(tape, &self.store, EncoderInput::Tokens { ids: &ids, batch: texts.len(), t }, &lengths)
    }

    /// Encodes equal-length motions `[B, L, motion_dim]` held on the tape.
    pub fn encode_motions(&self, tape: &mut Tape, motions: Var) -> Result<GaussianVars> {
        let s = tape.shape(motions).to_vec();
        if s.len() != 3 || s[2] != self.motion_dim {
            return Err(Error::shape("motion encoder", format!("{s:?}, feature width {}", self.motion_dim)));
        }
        let lengths = vec![s[1]; s[0]];
        self.motion_encoder.forward(tape, &self.store, EncoderInput::Features(motions), &lengths)
    }

    /// Full training objective on paired texts and equal-length motions.
    pub fn objective(&self, tape: &mut Tape, texts: &[&str], motions: &Array, rng: &mut impl Rng) -> Result<(Var, [Var; 5])> {
        let b = texts.len();
        let s = motions.shape();
        if s.len() != 3 || s[0] != b {
            return Err(Error::shape("tmr batch", format!("{b} texts, motions {s:?}")));
        }
        let l = s[1];
        let target = tape.constant(motions.clone());
        let gt = self.encode_texts(tape, texts)?;
        let gm = self.encode_motions(tape, target)?;
        let k = self.latent();
        let noise = |rng: &mut dyn rand::RngCore| {
            Array::new(&[b, k], (0..b * k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
        };
        let (et, em) = (noise(rng), noise(rng));
        let zt = gt.sample(tape, &et)?;
        let zm = gm.sample(tape, &em)?;
        let rt = self.decoder.forward(tape, &self.store, zt, l)?;
        let rm = self.decoder.forward(tape, &self.store, zm, l)?;
        let rec_t = tape.smooth_l1(rt, target)?;
        let rec_m = tape.smooth_l1(rm, target)?;
        let rec = tape.add(rec_t, rec_m)?;
        let kl = four_term_kl(tape, gt, gm)?;
        let emb = tape.smooth_l1(zt, zm)?;
        let mask = if self.config.filter_negatives { negative_filter(texts) } else { vec![true; b * b] };
        let nce = tape.info_nce(gt.mu, gm.mu, self.config.temperature, &mask)?;
        let kl_w = tape.scale(kl, self.config.lambda_kl);
        let e_w = tape.scale(emb, self.config.lambda_e);
        let nce_w = tape.scale(nce, self.config.lambda_nce);
        let mut total = tape.add(rec, kl_w)?;
        total = tape.add(total, e_w)?;
        total = tape.add(total, nce_w)?;
        Ok((total, [total, rec, kl, emb, nce]))
    }

    pub fn train_step(&mut self, texts: &[&str], motions: &Array) -> Result<TmrLosses> {
        let mut rng = step_rng(self.config.seed ^ 0x7e47, self.step);
        let mut tape = Tape::new();
        let (total, parts) = self.objective(&mut tape, texts, motions, &mut rng)?;
        let v: Vec<f64> = parts.iter().map(|p| tape.value(*p).item()).collect();
        let losses = TmrLosses { total: v[0], reconstruction: v[1], kl: v[2], embedding: v[3], nce: v[4] };
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { what: format!("retrieval loss terms {losses:?}") });
        }
        let grads = tape.backward(total)?;
        self.store.zero_grad();
        self.store.accumulate(&grads)?;
        self.optimizer.step(&mut self.store);
        self.step += 1;
        Ok(losses)
    }

    /// Trains on length-bucketed batches drawn from `data`.
    pub fn train(&mut self, data: &PairData, steps: usize, mut log: impl FnMut(u64, &TmrLosses)) -> Result<()> {
        for _ in 0..steps {
            let mut rng = step_rng(self.config.seed, self.step);
            let idx = data.sample(self.config.batch, &mut rng)?;
            let texts: Vec<&str> = idx.iter().map(|&i| data.texts[i].as_str()).collect();
            let motions = data.stack(&idx)?;
            let step = self.step;
            let losses = self.train_step(&texts, &motions)?;
            log(step, &losses);
        }
        Ok(())
    }

    /// Evaluation-mode text embeddings (means), `[n, latent]`.
    pub fn embed_texts(&self, texts: &[&str]) -> Result<Array> {
        let mut out = Vec::with_capacity(texts.len() * self.latent());
        for chunk in texts.chunks(64) {
            let mut tape = Tape::new();
            let g = self.encode_texts(&mut tape, chunk)?;
            out.extend_from_slice(tape.value(g.mu).data());
        }
        Array::new(&[texts.len(), self.latent()], out)
    }

    pub fn text_gaussian(&self, text: &str) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let g = self.encode_texts(&mut tape, &[text])?;
        Ok((tape.value(g.mu).data().to_vec(), tape.value(g.logvar).data().to_vec()))
    }

    /// Evaluation-mode motion embeddings of `[L_i, motion_dim]` sequences.
    pub fn embed_motions(&self, motions: &[&Array]) -> Result<Array> {
        let k = self.latent();
        let mut out = vec![0.0; motions.len() * k];
        let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, m) in motions.iter().enumerate() {
            by_len.entry(m.rows()).or_default().push(i);
        }
        for (l, idx) in by_len {
            for chunk in idx.chunks(32) {
                let mut data = Vec::with_capacity(chunk.len() * l * self.motion_dim);
                for &i in chunk {
                    data.extend_from_slice(motions[i].data());
                }
                let mut tape = Tape::new();
                let x = tape.constant(Array::new(&[chunk.len(), l, self.motion_dim], data)?);
                let g = self.encode_motions(&mut tape, x)?;
                for (r, &i) in chunk.iter().enumerate() {
                    out[i * k..(i + 1) * k].copy_from_slice(tape.value(g.mu).row(r));
                }
            }
        }
        Array::new(&[motions.len(), k], out)
    }

    /// Masked InfoNCE between the texts' mean embeddings and the motion
    /// embeddings of `motions: [B, L, motion_dim]`. Parameters must be frozen.
    pub fn alignment_loss(&self, tape: &mut Tape, texts: &[&str], motions: Var) -> Result<Var> {
        if !self.store.is_frozen() {
            return Err(Error::Invalid("alignment loss needs a frozen retrieval model".into()));
        }
        let t = self.embed_texts(texts)?;
        let t = tape.constant(t);
        let m = self.encode_motions(tape, motions)?;
        tape.info_nce(t, m.mu, self.config.temperature, &negative_filter(texts))
    }
}

/// Paired training texts and motion features with a length index.
#[derive(Clone, Debug)]
pub struct PairData {
    pub texts: Vec<String>,
    pub motions: Vec<Array>,
    buckets: Vec<Vec<usize>>,
}

impl PairData {
    pub fn new(texts: Vec<String>, motions: Vec<Array>) -> Result<Self> {
        if texts.len() != motions.len() || texts.is_empty() {
            return Err(Error::Invalid(format!("{} texts for {} motions", texts.len(), motions.len())));
        }
        let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, m) in motions.iter().enumerate() {
            by_len.entry(m.rows()).or_default().push(i);
        }
        Ok(Self { texts, motions, buckets: by_len.into_values().collect() })
    }

    /// Indices of one equal-length batch; buckets are drawn in proportion to size.
    pub fn sample<R: Rng>(&self, batch: usize, rng: &mut R) -> Result<Vec<usize>> {
        let total: usize = self.buckets.iter().map(Vec::len).sum();
        let mut pick = rng.gen_range(0..total);
        let bucket = self
            .buckets
            .iter()
            .find(|b| {
                if pick < b.len() {
                    true
                } else {
                    pick -= b.len();
                    false
                }
            })
            .expect("pick within total");
        Ok(bucket.choose_multiple(rng, batch.min(bucket.len())).copied().collect())
    }

    pub fn stack(&self, idx: &[usize]) -> Result<Array> {
        let l = self.motions[idx[0]].rows();
        let d = self.motions[idx[0]].cols();
        let mut data = Vec::with_capacity(idx.len() * l * d);
        for &i in idx {
            if self.motions[i].rows() != l {
                return Err(Error::Invalid("batch mixes motion lengths".into()));
            }
            data.extend_from_slice(self.motions[i].data());
        }
        Array::new(&[idx.len(), l, d], data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    A,
    B,
    C,
    D,
}

impl Protocol {
    pub fn pool_size(self) -> Option<usize> {
        match self {
            Protocol::A | Protocol::B => None,
            Protocol::C => Some(256),
            Protocol::D => Some(32),
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "A" => Ok(Self::A),
            "B" => Ok(Self::B),
            "C" => Ok(Self::C),
            "D" => Ok(Self::D),
            _ => Err(Error::Invalid(format!("unknown retrieval protocol {s}"))),
        }
    }
}

/// Recall at [`RECALL_KS`] in both directions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallTable {
    pub protocol: Protocol,
    pub t2m: [f64; 5],
    pub m2t: [f64; 5],
}

impl RecallTable {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("direction\tR@1\tR@2\tR@3\tR@5\tR@10\n");
        for (name, r) in [("T2M", &self.t2m), ("M2T", &self.m2t)] {
            s.push_str(name);
            for v in r {
                s.push_str(&format!("\t{v:.4}"));
            }
            s.push('\n');
        }
        s
    }
}

fn cosine_matrix(a: &Array, b: &Array) -> Array {
    let unit = |x: &Array| {
        let mut y = x.clone();
        let k = y.cols();
        for row in y.data_mut().chunks_mut(k) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
        }
        y
    };
    let (ua, ub) = (unit(a), unit(b));
    let (n, m, k) = (ua.rows(), ub.rows(), ua.cols());
    let mut out = vec![0.0; n * m];
    crate::gradcore::gemm(ua.data(), ub.data(), n, k, m, false, true, &mut out, 0.0);
    Array::from_parts(vec![n, m], out)
}

/// Candidate pool of query `i`: itself first, then seeded negatives. The
/// pool for a smaller size is a prefix of the pool for a larger one.
pub fn retrieval_pool(i: usize, n: usize, size: usize, seed: u64) -> Result<Vec<usize>> {
    if size > n {
        return Err(Error::Invalid(format!("split of {n} items is smaller than pool size {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
    others.shuffle(&mut rng);
    let mut pool = vec![i];
    pool.extend_from_slice(&others[..size - 1]);
    Ok(pool)
}

/// Recall of paired text/motion embeddings (row `i` of each belongs
/// together) under a retrieval protocol, ranking by cosine similarity.
pub fn retrieval_eval(protocol: Protocol, text_emb: &Array, motion_emb: &Array, texts: &[&str], seed: u64) -> Result<RecallTable> {
    let n = text_emb.rows();
    if motion_emb.rows() != n || texts.len() != n || text_emb.cols() != motion_emb.cols() {
        return Err(Error::shape("retrieval", format!("{:?} vs {:?}, {} texts", text_emb.shape(), motion_emb.shape(), texts.len())));
    }
    let sim = cosine_matrix(text_emb, motion_emb);
    let sim = |t: usize, m: usize| sim.data()[t * n + m];
    let mut hits_t2m = [0usize; 5];
    let mut hits_m2t = [0usize; 5];
    for i in 0..n {
        let pool = match protocol.pool_size() {
            Some(size) => retrieval_pool(i, n, size, seed)?,
            None => (0..n).collect(),
        };
        let correct = |j: usize| match protocol {
            Protocol::B => j == i || similarity(texts[i], texts[j]) > PROTOCOL_B_EPSILON,
            _ => j == i,
        };
        // T2M ranks motions for text i; M2T ranks texts for motion i.
        for (hits, score) in [
            (&mut hits_t2m, &(|j: usize| sim(i, j)) as &dyn Fn(usize) -> f64),
            (&mut hits_m2t, &(|j: usize| sim(j, i)) as &dyn Fn(usize) -> f64),
        ] {
            let mut ranked = pool.clone();
            ranked.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
            let first = ranked.iter().position(|&j| correct(j)).expect("ground truth is in the pool");
            for (h, &k) in hits.iter_mut().zip(&RECALL_KS) {
                if first < k {
                    *h += 1;
                }
            }
        }
    }
    let frac = |h: [usize; 5]| h.map(|x| x as f64 / n as f64);
    Ok(RecallTable { protocol, t2m: frac(hits_t2m), m2t: frac(hits_m2t) })
}
