//! Text-conditioned variational model of facial coefficient sequences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::step_rng;
use crate::error::{Error, Result};
use crate::gradcore::{AdamW, AdamWConfig, Array, ParamStore, Tape, Var};
use crate::motionrep::{self, Layout, FACE_DIM};
use crate::seqvae::{four_term_kl, DistEncoder, EncoderInput, GaussianVars, SeqConfig, SeqDecoder};
use crate::tmr::{PairData, Tokenizer};

pub const LAMBDA_KL: f64 = 1e-5;
pub const LAMBDA_E: f64 = 1e-5;
pub const MAX_FACE_LEN: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FaceConfig {
    pub model: SeqConfig,
    pub max_words: usize,
    pub lambda_kl: f64,
    pub lambda_e: f64,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for FaceConfig {
    fn default() -> Self {
        Self {
            model: SeqConfig { width: 32, heads: 4, layers: 6, latent: 16, max_len: MAX_FACE_LEN },
            max_words: 16,
            lambda_kl: LAMBDA_KL,
            lambda_e: LAMBDA_E,
            batch: 16,
            steps: 1000,
            seed: 0,
            optimizer: AdamWConfig { lr: 1e-3, ..Default::default() },
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FaceLosses {
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub embedding: f64,
}

#[derive(Clone, Debug)]
pub struct FaceModel {
    pub config: FaceConfig,
    pub tokenizer: Tokenizer,
    pub store: ParamStore,
    pub face_encoder: DistEncoder,
    pub text_encoder: DistEncoder,
    pub decoder: SeqDecoder,
    pub optimizer: AdamW,
    pub step: u64,
}

impl FaceModel {
    pub fn new(config: FaceConfig, tokenizer: Tokenizer) -> Result<Self> {
        let m = config.model;
        if m.heads == 0 || m.width % m.heads != 0 {
            return Err(Error::Invalid(format!("width {} not divisible by {} heads", m.width, m.heads)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let face_encoder = DistEncoder::features(&mut store, "face", FACE_DIM, m, &mut rng);
        let text_cfg = SeqConfig { max_len: config.max_words, ..m };
        let text_encoder = DistEncoder::tokens(&mut store, "text", tokenizer.len(), text_cfg, &mut rng);
        let decoder = SeqDecoder::new(&mut store, "decoder", FACE_DIM, m, &mut rng);
        let optimizer = AdamW::new(config.optimizer.clone());
        let tokenizer = Tokenizer::from_vocab(tokenizer.vocab().to_vec(), config.max_words);
        Ok(Self { config, tokenizer, store, face_encoder, text_encoder, decoder, optimizer, step: 0 })
    }

    fn encode_texts(&self, tape: &mut Tape, texts: &[&str]) -> Result<GaussianVars> {
        let tokens: Vec<Vec<usize>> = texts.iter().map(|t| self.tokenizer.encode(t)).collect::<Result<_>>()?;
        let t = tokens.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = vec![Tokenizer::PAD; texts.len() * t];
        for (i, tk) in tokens.iter().enumerate() {
            ids[i * t..i * t + tk.len()].copy_from_slice(tk);
        }
        let lengths: Vec<usize> = tokens.iter().map(Vec::len).collect();
        self.text_encoder.forward(tape, &self.store, EncoderInput::Tokens { ids: &ids, batch: texts.len(), t }, &lengths)
    }

    /// Objective on paired texts and equal-length faces `[B, L, 50]`:
    /// smooth-L1 reconstruction from the face latent, the four-term KL and
    /// the latent similarity term.
    pub fn objective(&self, tape: &mut Tape, texts: &[&str], faces: &Array, rng: &mut impl Rng) -> Result<(Var, [Var; 4])> {
        let b = texts.len();
        let s = faces.shape();
        if s.len() != 3 || s[0] != b || s[2] != FACE_DIM {
            return Err(Error::shape("face batch", format!("{b} texts, faces {s:?}")));
        }
        let target = tape.constant(faces.clone());
        let gf = self.face_encoder.forward(tape, &self.store, EncoderInput::Features(target), &vec![s[1]; b])?;
        let gt = self.encode_texts(tape, texts)?;
        let k = self.config.model.latent;
        let mut noise = || Array::new(&[b, k], (0..b * k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect());
        let (ef, et) = (noise()?, noise()?);
        let zf = gf.sample(tape, &ef)?;
        let zt = gt.sample(tape, &et)?;
        let rec = self.decoder.forward(tape, &self.store, zf, s[1])?;
        let rec = tape.smooth_l1(rec, target)?;
        let kl = four_term_kl(tape, gf, gt)?;
        let emb = tape.smooth_l1(zf, zt)?;
        let kl_w = tape.scale(kl, self.config.lambda_kl);
        let e_w = tape.scale(emb, self.config.lambda_e);
        let total = tape.add(rec, kl_w)?;
        let total = tape.add(total, e_w)?;
        Ok((total, [total, rec, kl, emb]))
    }

    pub fn train_step(&mut self, texts: &[&str], faces: &Array) -> Result<FaceLosses> {
        let mut rng = step_rng(self.config.seed ^ 0xface, self.step);
        let mut tape = Tape::new();
        let (total, parts) = self.objective(&mut tape, texts, faces, &mut rng)?;
        let v: Vec<f64> = parts.iter().map(|p| tape.value(*p).item()).collect();
        let losses = FaceLosses { total: v[0], reconstruction: v[1], kl: v[2], embedding: v[3] };
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { what: format!("face loss terms {losses:?}") });
        }
        let grads = tape.backward(total)?;
        self.store.zero_grad();
        self.store.accumulate(&grads)?;
        self.optimizer.step(&mut self.store);
        self.step += 1;
        Ok(losses)
    }

    /// Trains on length-bucketed batches of (face text, face sequence) pairs.
    pub fn train(&mut self, data: &PairData, steps: usize, mut log: impl FnMut(u64, &FaceLosses)) -> Result<()> {
        for _ in 0..steps {
            let mut rng = step_rng(self.config.seed, self.step);
            let idx = data.sample(self.config.batch, &mut rng)?;
            let texts: Vec<&str> = idx.iter().map(|&i| data.texts[i].as_str()).collect();
            let faces = data.stack(&idx)?;
            let step = self.step;
            let losses = self.train_step(&texts, &faces)?;
            log(step, &losses);
        }
        Ok(())
    }

    /// `len × 50` coefficients decoded from a text latent drawn with `rng`;
    /// a zero draw (`sample = false`) decodes the text mean.
    pub fn generate(&self, text: &str, len: usize, sample: bool, rng: &mut impl Rng) -> Result<Array> {
        if len == 0 || len > self.config.model.max_len {
            return Err(Error::Invalid(format!("face length {len} outside [1, {}]", self.config.model.max_len)));
        }
        let k = self.config.model.latent;
        let mut tape = Tape::new();
        let g = self.encode_texts(&mut tape, &[text])?;
        let eps: Vec<f64> = (0..k).map(|_| if sample { rng.sample(StandardNormal) } else { 0.0 }).collect();
        let z = g.sample(&mut tape, &Array::new(&[1, k], eps)?)?;
        let out = self.decoder.forward(&mut tape, &self.store, z, len)?;
        tape.value(out).clone().reshaped(&[len, FACE_DIM])
    }

    /// Mean smooth-L1 reconstruction error from the face mean latent.
    pub fn reconstruction_error(&self, faces: &[&Array]) -> Result<f64> {
        let mut total = 0.0;
        for f in faces {
            let mut tape = Tape::new();
            let x = tape.constant((*f).clone().reshaped(&[1, f.rows(), FACE_DIM])?);
            let g = self.face_encoder.forward(&mut tape, &self.store, EncoderInput::Features(x), &[f.rows()])?;
            let r = self.decoder.forward(&mut tape, &self.store, g.mu, f.rows())?;
            let l = tape.smooth_l1(r, x)?;
            total += tape.value(l).item();
        }
        Ok(total / faces.len().max(1) as f64)
    }
}

/// Replaces the face channels of body/hand parts with generated ones.
pub fn assemble_whole_body(body: &Array, hand: &Array, face: &Array, layout: &Layout) -> Result<Array> {
    if body.rows() != face.rows() || hand.rows() != face.rows() {
        return Err(Error::Invalid(format!(
            "face of {} frames for motion of {} frames",
            face.rows(),
            body.rows()
        )));
    }
    motionrep::merge_parts(body, hand, face, layout)
}
