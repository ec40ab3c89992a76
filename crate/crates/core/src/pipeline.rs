//! Training, generation and evaluation pipelines over a corpus, shared by the
//! command-line tool and the test suites.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{crop, reconstruction_benchmark, Codec, CodecConfig, CodecLosses, CodeIndices, EvalSequence, PartData, ReconstructionRow, Variant};
use crate::corpus::{classes, face_texts, Corpus, Item, Split, EMOTIONS};
use crate::error::{Error, Result};
use crate::facecvae::{assemble_whole_body, FaceConfig, FaceLosses, FaceModel};
use crate::gradcore::Array;
use crate::hgpt::{build_stream, stream_len, GptConfig, GptData, GptLosses, Hgpt, SampleOptions, Vocab};
use crate::io::{self, Checkpoint, EvalConfig, MotionFile, FLAG_GENERATED_FACE, FLAG_VELOCITY};
use crate::metrics::{evaluate_system, format_report, Generated, SuiteRow};
use crate::motionrep::{self, Normalizer, FACE_DIM};
use crate::tmr::{motion_features, retrieval_eval, PairData, Protocol, RecallTable, Tmr, TmrConfig, TmrLosses, Tokenizer};

/// Artifact locations below an output root.
#[derive(Clone, Debug)]
pub struct OutDir(pub PathBuf);

impl OutDir {
    pub fn corpus(&self) -> PathBuf {
        self.0.join("corpus")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.0.join("checkpoints").join(format!("{name}.tmck"))
    }

    pub fn codec_checkpoint(&self, variant: Variant) -> PathBuf {
        self.checkpoint(&format!("vq_{}", variant.name()))
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.0.join("reports").join(name)
    }

    pub fn generated(&self) -> PathBuf {
        self.0.join("generated")
    }
}

/// Loads a checkpoint that another command must have produced first.
pub fn require_checkpoint(path: &Path, name: &str, command: &str) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingDependency {
            name: name.into(),
            detail: format!("{} not found; run `{command}` first", path.display()),
        });
    }
    Checkpoint::load(path)
}

pub fn train_items(corpus: &Corpus) -> Vec<&Item> {
    corpus.split(Split::Train)
}

/// Per-channel statistics of the training split.
pub fn fit_normalizer(corpus: &Corpus) -> Result<Normalizer> {
    Normalizer::fit(train_items(corpus).iter().map(|i| &i.repr))
}

pub fn train_codec(corpus: &Corpus, config: &CodecConfig, log: impl FnMut(u64, &CodecLosses)) -> Result<(Codec, Normalizer)> {
    let layout = corpus.skeleton.layout();
    let norm = fit_normalizer(corpus)?;
    let frames: Vec<&Array> = train_items(corpus).iter().map(|i| &i.repr).collect();
    let data = PartData::new(&frames, &layout, &norm)?;
    let mut codec = Codec::new(config.clone(), layout.d_b(), layout.d_h())?;
    codec.train(&data, config.steps, log)?;
    Ok((codec, norm))
}

/// Held-out pose errors of trained codecs on the test split.
pub fn reconstruction_report(corpus: &Corpus, codecs: &[(&str, &Codec, &Normalizer)]) -> Result<Vec<ReconstructionRow>> {
    let test = corpus.split(Split::Test);
    let seqs: Vec<EvalSequence> = test.iter().map(|i| EvalSequence { frames: &i.repr, anchor: i.meta.anchor }).collect();
    codecs.iter().map(|(name, c, n)| reconstruction_benchmark(name, c, n, &corpus.skeleton, &seqs)).collect()
}

/// Vocabulary over every text template of the corpus families.
pub fn motion_tokenizer(corpus: &Corpus, max_words: usize) -> Tokenizer {
    let texts: Vec<String> = classes(&corpus.config.families).iter().flat_map(|c| c.texts()).collect();
    Tokenizer::build(texts.iter().map(String::as_str), max_words)
}

pub fn face_tokenizer(max_words: usize) -> Tokenizer {
    let texts: Vec<String> = EMOTIONS.iter().flat_map(|e| face_texts(e)).collect();
    Tokenizer::build(texts.iter().map(String::as_str), max_words)
}

/// Texts and retrieval-model motion features of one split.
pub fn retrieval_pairs(corpus: &Corpus, split: Split, norm: &Normalizer) -> Result<(Vec<String>, Vec<Array>)> {
    let layout = corpus.skeleton.layout();
    let items = corpus.split(split);
    let feats = items.iter().map(|i| motion_features(&i.repr, &layout, norm)).collect::<Result<_>>()?;
    Ok((items.iter().map(|i| i.meta.text.clone()).collect(), feats))
}

pub fn train_tmr(corpus: &Corpus, config: &TmrConfig, log: impl FnMut(u64, &TmrLosses)) -> Result<(Tmr, Normalizer)> {
    let layout = corpus.skeleton.layout();
    let norm = fit_normalizer(corpus)?;
    let (texts, feats) = retrieval_pairs(corpus, Split::Train, &norm)?;
    let data = PairData::new(texts, feats)?;
    let mut tmr = Tmr::new(config.clone(), motion_tokenizer(corpus, config.max_words), layout.d_b() + layout.d_h())?;
    tmr.train(&data, config.steps, log)?;
    Ok((tmr, norm))
}

/// Recall table of the retrieval model on the test split.
pub fn retrieval_report(corpus: &Corpus, tmr: &Tmr, norm: &Normalizer, protocol: Protocol, seed: u64) -> Result<RecallTable> {
    let (texts, feats) = retrieval_pairs(corpus, Split::Test, norm)?;
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let te = tmr.embed_texts(&refs)?;
    let me = tmr.embed_motions(&feats.iter().collect::<Vec<_>>())?;
    retrieval_eval(protocol, &te, &me, &refs, seed)
}

/// Face texts and raw facial channels of one split.
pub fn face_pairs(corpus: &Corpus, split: Split) -> Result<PairData> {
    let layout = corpus.skeleton.layout();
    let items = corpus.split(split);
    let faces = items.iter().map(|i| motionrep::split_parts(&i.repr, &layout).map(|p| p.2)).collect::<Result<_>>()?;
    PairData::new(items.iter().map(|i| i.meta.face_text.clone()).collect(), faces)
}

pub fn train_face(corpus: &Corpus, config: &FaceConfig, log: impl FnMut(u64, &FaceLosses)) -> Result<FaceModel> {
    let data = face_pairs(corpus, Split::Train)?;
    let mut face = FaceModel::new(config.clone(), face_tokenizer(config.max_words))?;
    face.train(&data, config.steps, log)?;
    Ok(face)
}

/// Token vocabulary matching a hierarchical codec.
pub fn gpt_vocab(codec: &Codec) -> Result<Vocab> {
    if codec.config.variant != Variant::H2vq {
        return Err(Error::Invalid("the generator needs the hierarchical codec".into()));
    }
    Ok(Vocab { body: codec.books[1].size(), hand: codec.books[0].size() })
}

/// Body and hand codes of a normalized-then-cropped sequence.
pub fn encode_sequence(codec: &Codec, norm: &Normalizer, frames: &Array, layout: &motionrep::Layout) -> Result<CodeIndices> {
    let n = norm.normalize(frames)?;
    let (b, h, _) = motionrep::split_parts(&n, layout)?;
    let (b, h) = crop(&b, &h, codec.config.length_multiple())?;
    codec.encode(&b, &h)
}

/// Training pairs of text embeddings and code streams.
pub fn gpt_data(corpus: &Corpus, codec: &Codec, codec_norm: &Normalizer, tmr: &Tmr) -> Result<GptData> {
    let layout = corpus.skeleton.layout();
    let items = train_items(corpus);
    let texts: Vec<String> = items.iter().map(|i| i.meta.text.clone()).collect();
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let emb = tmr.embed_texts(&refs)?;
    let (mut body, mut hand) = (Vec::new(), Vec::new());
    for i in &items {
        let c = encode_sequence(codec, codec_norm, &i.repr, &layout)?;
        body.push(c.body().to_vec());
        hand.push(c.hand().to_vec());
    }
    let text_emb = (0..items.len()).map(|r| emb.row(r).to_vec()).collect();
    GptData::new(texts, text_emb, body, hand)
}

/// Frozen copies of the codec and retrieval model for the alignment loss.
pub fn frozen_deps(codec: &Codec, codec_norm: &Normalizer, tmr: &Tmr, tmr_norm: &Normalizer) -> Result<(Codec, Tmr)> {
    if codec_norm != tmr_norm {
        return Err(Error::ConfigMismatch("codec and retrieval model were fitted on different corpora".into()));
    }
    let (mut c, mut t) = (codec.clone(), tmr.clone());
    c.store.freeze();
    t.store.freeze();
    Ok((c, t))
}

pub fn train_gpt(
    corpus: &Corpus,
    config: &GptConfig,
    codec: (&Codec, &Normalizer),
    tmr: (&Tmr, &Normalizer),
    log: impl FnMut(u64, &GptLosses),
) -> Result<Hgpt> {
    let vocab = gpt_vocab(codec.0)?;
    let data = gpt_data(corpus, codec.0, codec.1, tmr.0)?;
    let longest = data.body.iter().map(Vec::len).max().unwrap_or(0);
    if stream_len(longest) > config.max_len {
        return Err(Error::Invalid(format!("streams of {} positions exceed the maximum {}", stream_len(longest), config.max_len)));
    }
    let mut gpt = Hgpt::new(config.clone(), vocab, tmr.0.latent())?;
    let deps = frozen_deps(codec.0, codec.1, tmr.0, tmr.1)?;
    gpt.train(&data, config.steps, Some((&deps.0, &deps.1)), log)?;
    Ok(gpt)
}

/// The trained models needed for text-to-motion generation.
#[derive(Clone, Debug)]
pub struct Generator {
    pub corpus_skeleton: motionrep::Skeleton,
    pub codec: Codec,
    pub norm: Normalizer,
    pub tmr: Tmr,
    pub gpt: Hgpt,
    pub face: FaceModel,
}

/// Token-level record of one generation, stored next to the motion file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub text: String,
    pub face_text: String,
    pub length: usize,
    pub seed: u64,
    /// Token stream as sampled, End pair included.
    pub stream: Vec<usize>,
    pub body_codes: Vec<usize>,
    pub hand_codes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub record: TokenRecord,
    pub frames: Array,
}

/// `a <emotion> face` for the first emotion word in `text`, neutral otherwise.
pub fn default_face_text(text: &str) -> String {
    let words = crate::tmr::words(text);
    let e = EMOTIONS.iter().find(|e| words.iter().any(|w| w == *e)).unwrap_or(&"neutral");
    format!("a {e} face")
}

impl Generator {
    pub fn max_length(&self) -> usize {
        let steps = (self.gpt.config.max_len - 2) / 3;
        steps * self.codec.config.hand_rate
    }

    /// Whole-body frames `[length, d]` for `text`. Codes are sampled with a
    /// forced super-step count covering `length`, decoded, cropped and
    /// denormalized; facial channels come from the face model. The same
    /// seeded stream drives both samplers.
    pub fn generate(&self, text: &str, face_text: Option<&str>, length: usize, seed: u64) -> Result<Generation> {
        let max = self.max_length();
        if length == 0 || length > max {
            return Err(Error::Invalid(format!("length {length} outside [1, {max}]")));
        }
        let layout = self.corpus_skeleton.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb = self.tmr.embed_texts(&[text])?;
        let steps = length.div_ceil(self.codec.config.hand_rate);
        let opts = SampleOptions { temperature: self.gpt.config.temperature, top_k: self.gpt.config.top_k, target_steps: Some(steps) };
        let parsed = self.gpt.sample(emb.row(0), &opts, &mut rng)?;
        let stream = build_stream(&self.gpt.vocab, &parsed.body, &parsed.hand)?;
        let (b, h) = self.codec.decode(&CodeIndices { streams: vec![parsed.body.clone(), parsed.hand.clone()] })?;
        let (b, h) = (b.slice_rows(0, length), h.slice_rows(0, length));
        let merged = motionrep::merge_parts(&b, &h, &Array::zeros(&[length, FACE_DIM]), &layout)?;
        let (body, hand, _) = motionrep::split_parts(&self.norm.denormalize(&merged)?, &layout)?;
        let face_text = face_text.map(str::to_string).unwrap_or_else(|| default_face_text(text));
        let face = self.face.generate(&face_text, length, true, &mut rng)?;
        let frames = assemble_whole_body(&body, &hand, &face, &layout)?;
        let record = TokenRecord {
            text: text.into(),
            face_text,
            length,
            seed,
            stream,
            body_codes: parsed.body,
            hand_codes: parsed.hand,
        };
        Ok(Generation { record, frames })
    }

    /// Writes the motion file and its token sidecar; returns both paths.
    pub fn save(&self, g: &Generation, motion_path: &Path) -> Result<(PathBuf, PathBuf)> {
        let skel = &self.corpus_skeleton;
        MotionFile::new(&g.frames, skel.joint_count(), skel.frame_rate, FLAG_VELOCITY | FLAG_GENERATED_FACE).save(motion_path)?;
        let sidecar = motion_path.with_extension("tokens.json");
        let json = serde_json::to_string_pretty(&g.record).map_err(|e| Error::Serde(e.to_string()))?;
        std::fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))?;
        Ok((motion_path.to_path_buf(), sidecar))
    }

    /// Retrieval-model features of generated frames.
    pub fn features(&self, frames: &Array) -> Result<Array> {
        motion_features(frames, &self.corpus_skeleton.layout(), &self.norm)
    }
}

/// Seed of repetition `rep`, prompt `i`.
pub fn generation_seed(seed: u64, rep: usize, i: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ((rep as u64) << 32) ^ i as u64
}

/// Test-split prompts clipped to lengths the generator can produce.
fn eval_prompts(corpus: &Corpus, gen: &Generator) -> Vec<(String, usize)> {
    corpus.split(Split::Test).iter().map(|i| (i.meta.text.clone(), i.meta.frames.min(gen.max_length()))).collect()
}

/// Retrieval-model embeddings of one generation per test prompt.
pub fn generated_embeddings(corpus: &Corpus, gen: &Generator, seed: u64, rep: usize) -> Result<Array> {
    let feats: Vec<Array> = eval_prompts(corpus, gen)
        .iter()
        .enumerate()
        .map(|(i, (t, l))| gen.generate(t, None, *l, generation_seed(seed, rep, i)).and_then(|g| gen.features(&g.frames)))
        .collect::<Result<_>>()?;
    gen.tmr.embed_motions(&feats.iter().collect::<Vec<_>>())
}

/// Metric-suite rows for the real test motions and the generator.
pub fn evaluate(corpus: &Corpus, gen: &Generator, cfg: &EvalConfig) -> Result<Vec<SuiteRow>> {
    let (texts, feats) = retrieval_pairs(corpus, Split::Test, &gen.norm)?;
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let text = gen.tmr.embed_texts(&refs)?;
    let real = gen.tmr.embed_motions(&feats.iter().collect::<Vec<_>>())?;
    let real_row = evaluate_system("Real motion", &text, &real, cfg.repetitions, cfg.seed, |_| {
        Ok(Generated { motion: real.clone(), groups: Vec::new() })
    })?;
    let prompts = eval_prompts(corpus, gen);
    let gen_row = evaluate_system("Generator", &text, &real, cfg.repetitions, cfg.seed, |rep| {
        let motion = generated_embeddings(corpus, gen, cfg.seed, rep)?;
        let mut groups = Vec::new();
        for (i, (t, l)) in prompts.iter().take(cfg.mmodality_prompts).enumerate() {
            let feats: Vec<Array> = (0..cfg.mmodality_generations)
                .map(|g| gen.generate(t, None, *l, generation_seed(cfg.seed ^ 0x6d6d, rep, i * 1000 + g)).and_then(|x| gen.features(&x.frames)))
                .collect::<Result<_>>()?;
            groups.push(gen.tmr.embed_motions(&feats.iter().collect::<Vec<_>>())?);
        }
        Ok(Generated { motion, groups })
    })?;
    Ok(vec![real_row, gen_row])
}

pub fn evaluation_report(rows: &[SuiteRow]) -> String {
    format_report(rows, "desk-scale retrieval model")
}

/// Loads the four generation checkpoints below `out`.
pub fn load_generator(out: &OutDir, skeleton: motionrep::Skeleton) -> Result<Generator> {
    let codec_ck = require_checkpoint(&out.codec_checkpoint(Variant::H2vq), "h2vq", "train-vq --variant h2vq")?;
    let tmr_ck = require_checkpoint(&out.checkpoint("tmr"), "tmr", "train-tmr")?;
    let gpt_ck = require_checkpoint(&out.checkpoint("gpt"), "gpt", "train-gpt")?;
    let face_ck = require_checkpoint(&out.checkpoint("face"), "face", "train-face")?;
    let (codec, norm) = io::load_codec(&codec_ck, None)?;
    let (tmr, _) = io::load_tmr(&tmr_ck, None)?;
    let gpt = io::load_gpt(&gpt_ck, None)?;
    let face = io::load_face(&face_ck, None)?;
    if gpt.vocab != gpt_vocab(&codec)? || gpt.latent != tmr.latent() {
        return Err(Error::ConfigMismatch("generator checkpoint does not match the codec or retrieval model".into()));
    }
    Ok(Generator { corpus_skeleton: skeleton, codec, norm, tmr, gpt, face })
}
