//! On-disk formats: motion files, dataset manifests, checkpoints, run
//! configuration and the provenance log.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{Codec, CodecConfig};
use crate::corpus::{Corpus, CorpusConfig, Item, ItemMeta, SPLIT_FRACTIONS};
use crate::error::{Error, Result};
use crate::facecvae::{FaceConfig, FaceModel};
use crate::gradcore::{Array, ParamStore};
use crate::hgpt::{GptConfig, Hgpt, Vocab};
use crate::motionrep::{Normalizer, Skeleton};
use crate::quantize::Codebook;
use crate::tmr::{Tmr, TmrConfig, Tokenizer};

pub const MOTION_MAGIC: &[u8; 4] = b"TMTO";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TMCK";
pub const FORMAT_MAJOR: u16 = 1;
pub const FORMAT_MINOR: u16 = 0;
pub const MOTION_HEADER_BYTES: usize = 64;
/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "HOLOMOTION_OUT";

pub const FLAG_VELOCITY: u32 = 1;
pub const FLAG_GENERATED_FACE: u32 = 2;

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn serde_err(e: impl std::fmt::Display) -> Error {
    Error::Serde(e.to_string())
}

/// `[L, d]` frames stored as little-endian f32 behind a 64-byte header.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionFile {
    pub frames: Array,
    pub joints: u32,
    pub frame_rate: f32,
    pub flags: u32,
}

impl MotionFile {
    /// Values are rounded to f32 here so that a save/load round trip is exact.
    pub fn new(frames: &Array, joints: usize, frame_rate: f64, flags: u32) -> Self {
        let frames = frames.map(|v| v as f32 as f64);
        Self { frames, joints: joints as u32, frame_rate: frame_rate as f32, flags }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (l, d) = (self.frames.rows(), self.frames.cols());
        let mut out = Vec::with_capacity(MOTION_HEADER_BYTES + 4 * l * d);
        out.extend_from_slice(MOTION_MAGIC);
        out.extend_from_slice(&FORMAT_MAJOR.to_le_bytes());
        out.extend_from_slice(&FORMAT_MINOR.to_le_bytes());
        out.extend_from_slice(&(l as u32).to_le_bytes());
        out.extend_from_slice(&self.joints.to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        out.extend_from_slice(&self.frame_rate.to_le_bytes());
        out.extend_from_slice(&self.flags.to_le_bytes());
        out.resize(MOTION_HEADER_BYTES, 0);
        for v in self.frames.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < MOTION_HEADER_BYTES {
            return Err(Error::SizeMismatch { path: path.into(), expected: MOTION_HEADER_BYTES as u64, actual: bytes.len() as u64 });
        }
        if &bytes[..4] != MOTION_MAGIC {
            return Err(Error::BadMagic { path: path.into(), expected: "TMTO".into() });
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let (major, minor) = (u16_at(4), u16_at(6));
        if major != FORMAT_MAJOR {
            return Err(Error::Version { path: path.into(), major, minor });
        }
        let (l, joints, d) = (u32_at(8) as usize, u32_at(12), u32_at(16) as usize);
        let frame_rate = f32::from_le_bytes(bytes[20..24].try_into().unwrap());
        let flags = u32_at(24);
        let expected = (MOTION_HEADER_BYTES + 4 * l * d) as u64;
        if bytes.len() as u64 != expected {
            return Err(Error::SizeMismatch { path: path.into(), expected, actual: bytes.len() as u64 });
        }
        let data = bytes[MOTION_HEADER_BYTES..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(Self { frames: Array::new(&[l, d], data)?, joints, frame_rate, flags })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read(path)?, path)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    /// Motion file path relative to the manifest.
    pub path: String,
    #[serde(flatten)]
    pub meta: ItemMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: CorpusConfig,
    pub skeleton: Skeleton,
    pub split_fractions: [f64; 3],
    pub items: Vec<ManifestItem>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes one motion file per item plus the manifest into `dir`.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<PathBuf> {
    let mut items = Vec::with_capacity(corpus.items.len());
    for item in &corpus.items {
        let rel = format!("motions/{:05}.tmto", item.meta.id);
        let file = MotionFile::new(&item.repr, corpus.skeleton.joint_count(), corpus.skeleton.frame_rate, FLAG_VELOCITY);
        file.save(&dir.join(&rel))?;
        items.push(ManifestItem { path: rel, meta: item.meta.clone() });
    }
    let manifest = Manifest {
        config: corpus.config.clone(),
        skeleton: corpus.skeleton.clone(),
        split_fractions: SPLIT_FRACTIONS,
        items,
    };
    let path = dir.join(MANIFEST_FILE);
    write(&path, serde_json::to_string_pretty(&manifest).map_err(serde_err)?.as_bytes())?;
    Ok(path)
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::MissingDependency {
            name: "corpus".into(),
            detail: format!("{} not found; run gen-corpus first", path.display()),
        });
    }
    let manifest: Manifest = serde_json::from_slice(&read(&path)?).map_err(serde_err)?;
    manifest.skeleton.validate()?;
    let d = manifest.skeleton.layout().d;
    let mut items = Vec::with_capacity(manifest.items.len());
    for m in manifest.items {
        let p = dir.join(&m.path);
        let f = MotionFile::load(&p)?;
        if f.frames.cols() != d || f.frames.rows() != m.meta.frames {
            return Err(Error::Invalid(format!("{}: {:?} frames disagree with the manifest", p.display(), f.frames.shape())));
        }
        items.push(Item { meta: m.meta, repr: f.frames });
    }
    Ok(Corpus { config: manifest.config, skeleton: manifest.skeleton, items })
}

/// Named f64 array inside a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BlockHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    module: String,
    config: serde_json::Value,
    step: u64,
    meta: serde_json::Value,
    blocks: Vec<BlockHeader>,
}

/// Versioned container of a module's configuration, step counter and
/// parameter blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub module: String,
    pub config: serde_json::Value,
    pub step: u64,
    pub meta: serde_json::Value,
    pub blocks: Vec<Block>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            module: self.module.clone(),
            config: self.config.clone(),
            step: self.step,
            meta: self.meta.clone(),
            blocks: self.blocks.iter().map(|b| BlockHeader { name: b.name.clone(), shape: b.shape.clone() }).collect(),
        };
        let json = serde_json::to_vec(&header).map_err(serde_err)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&FORMAT_MAJOR.to_le_bytes());
        out.extend_from_slice(&FORMAT_MINOR.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for b in &self.blocks {
            for v in &b.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::SizeMismatch { path: path.into(), expected: 16, actual: bytes.len() as u64 });
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic { path: path.into(), expected: "TMCK".into() });
        }
        let major = u16::from_le_bytes([bytes[4], bytes[5]]);
        let minor = u16::from_le_bytes([bytes[6], bytes[7]]);
        if major != FORMAT_MAJOR {
            return Err(Error::Version { path: path.into(), major, minor });
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if bytes.len() < 16 + hlen {
            return Err(Error::SizeMismatch { path: path.into(), expected: (16 + hlen) as u64, actual: bytes.len() as u64 });
        }
        let header: CheckpointHeader = serde_json::from_slice(&bytes[16..16 + hlen]).map_err(serde_err)?;
        let total: usize = header.blocks.iter().map(|b| b.shape.iter().product::<usize>()).sum();
        let expected = (16 + hlen + 8 * total) as u64;
        if bytes.len() as u64 != expected {
            return Err(Error::SizeMismatch { path: path.into(), expected, actual: bytes.len() as u64 });
        }
        let mut offset = 16 + hlen;
        let mut blocks = Vec::with_capacity(header.blocks.len());
        for b in header.blocks {
            let n: usize = b.shape.iter().product();
            let data = bytes[offset..offset + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset += 8 * n;
            blocks.push(Block { name: b.name, shape: b.shape, data });
        }
        Ok(Self { module: header.module, config: header.config, step: header.step, meta: header.meta, blocks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read(path)?, path)
    }

    fn block(&self, name: &str) -> Result<&Block> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::Invalid(format!("checkpoint block {name} missing")))
    }

    fn array(&self, name: &str) -> Result<Array> {
        let b = self.block(name)?;
        Array::new(&b.shape, b.data.clone())
    }

    fn expect_module(&self, module: &str) -> Result<()> {
        if self.module != module {
            return Err(Error::ConfigMismatch(format!("checkpoint holds `{}`, expected `{module}`", self.module)));
        }
        Ok(())
    }

    fn typed_config<T: serde::de::DeserializeOwned + Serialize + PartialEq>(&self, expected: Option<&T>) -> Result<T> {
        let cfg: T = serde_json::from_value(self.config.clone()).map_err(serde_err)?;
        if let Some(e) = expected {
            if e != &cfg {
                return Err(Error::ConfigMismatch(format!(
                    "{} checkpoint was trained with {}, requested {}",
                    self.module,
                    self.config,
                    serde_json::to_value(e).map_err(serde_err)?
                )));
            }
        }
        Ok(cfg)
    }
}

fn push(blocks: &mut Vec<Block>, name: String, a: &Array) {
    blocks.push(Block { name, shape: a.shape().to_vec(), data: a.data().to_vec() });
}

/// Parameter values, optimizer moments and per-parameter step counts.
fn store_blocks(store: &ParamStore, blocks: &mut Vec<Block>) {
    for p in store.iter() {
        push(blocks, format!("param/{}", p.name), &p.value);
        push(blocks, format!("adam_m/{}", p.name), &p.m);
        push(blocks, format!("adam_v/{}", p.name), &p.v);
        blocks.push(Block { name: format!("adam_step/{}", p.name), shape: vec![1], data: vec![p.step as f64] });
    }
}

fn restore_store(store: &mut ParamStore, ck: &Checkpoint) -> Result<()> {
    for p in store.iter_mut() {
        let value = ck.array(&format!("param/{}", p.name))?;
        if value.shape() != p.value.shape() {
            return Err(Error::ConfigMismatch(format!("parameter {} has shape {:?}, expected {:?}", p.name, value.shape(), p.value.shape())));
        }
        p.value = value;
        p.m = ck.array(&format!("adam_m/{}", p.name))?;
        p.v = ck.array(&format!("adam_v/{}", p.name))?;
        p.step = ck.block(&format!("adam_step/{}", p.name))?.data[0] as u64;
    }
    let expected = 4 * store.len();
    let stored = ck.blocks.iter().filter(|b| ["param/", "adam_m/", "adam_v/", "adam_step/"].iter().any(|p| b.name.starts_with(p))).count();
    if stored != expected {
        return Err(Error::ConfigMismatch(format!("checkpoint has {} parameter blocks, model expects {expected}", stored)));
    }
    Ok(())
}

fn normalizer_blocks(norm: &Normalizer, blocks: &mut Vec<Block>) {
    blocks.push(Block { name: "norm/mean".into(), shape: vec![norm.width()], data: norm.mean.clone() });
    blocks.push(Block { name: "norm/std".into(), shape: vec![norm.width()], data: norm.std.clone() });
}

fn restore_normalizer(ck: &Checkpoint) -> Result<Normalizer> {
    Ok(Normalizer { mean: ck.block("norm/mean")?.data.clone(), std: ck.block("norm/std")?.data.clone() })
}

fn config_value<T: Serialize>(c: &T) -> Result<serde_json::Value> {
    serde_json::to_value(c).map_err(serde_err)
}

pub fn codec_checkpoint(codec: &Codec, norm: &Normalizer) -> Result<Checkpoint> {
    let mut blocks = Vec::new();
    store_blocks(&codec.store, &mut blocks);
    for (i, b) in codec.books.iter().enumerate() {
        push(&mut blocks, format!("book{i}/entries"), &b.entries);
        push(&mut blocks, format!("book{i}/ema_sum"), &b.ema_sum);
        blocks.push(Block { name: format!("book{i}/ema_count"), shape: vec![b.size()], data: b.ema_count.clone() });
        blocks.push(Block {
            name: format!("book{i}/staleness"),
            shape: vec![b.size()],
            data: b.staleness.iter().map(|&s| s as f64).collect(),
        });
    }
    normalizer_blocks(norm, &mut blocks);
    Ok(Checkpoint {
        module: "motioncodec".into(),
        config: config_value(&codec.config)?,
        step: codec.step,
        meta: serde_json::json!({ "d_b": codec.d_b, "d_h": codec.d_h }),
        blocks,
    })
}

pub fn load_codec(ck: &Checkpoint, expected: Option<&CodecConfig>) -> Result<(Codec, Normalizer)> {
    ck.expect_module("motioncodec")?;
    let cfg: CodecConfig = ck.typed_config(expected)?;
    let dim = |k: &str| ck.meta[k].as_u64().map(|v| v as usize).ok_or_else(|| Error::Invalid(format!("codec checkpoint lacks {k}")));
    let mut codec = Codec::new(cfg, dim("d_b")?, dim("d_h")?)?;
    restore_store(&mut codec.store, ck)?;
    for (i, b) in codec.books.iter_mut().enumerate() {
        let entries = ck.array(&format!("book{i}/entries"))?;
        let mut book = Codebook::from_entries(entries, b.decay);
        book.ema_sum = ck.array(&format!("book{i}/ema_sum"))?;
        book.ema_count = ck.block(&format!("book{i}/ema_count"))?.data.clone();
        book.staleness = ck.block(&format!("book{i}/staleness"))?.data.iter().map(|&s| s as u64).collect();
        *b = book;
    }
    codec.step = ck.step;
    Ok((codec, restore_normalizer(ck)?))
}

pub fn tmr_checkpoint(tmr: &Tmr, norm: &Normalizer) -> Result<Checkpoint> {
    let mut blocks = Vec::new();
    store_blocks(&tmr.store, &mut blocks);
    normalizer_blocks(norm, &mut blocks);
    Ok(Checkpoint {
        module: "tmr".into(),
        config: config_value(&tmr.config)?,
        step: tmr.step,
        meta: serde_json::json!({ "vocab": tmr.tokenizer.vocab(), "motion_dim": tmr.motion_dim }),
        blocks,
    })
}

fn vocab_of(ck: &Checkpoint) -> Result<Vec<String>> {
    serde_json::from_value(ck.meta["vocab"].clone()).map_err(serde_err)
}

pub fn load_tmr(ck: &Checkpoint, expected: Option<&TmrConfig>) -> Result<(Tmr, Normalizer)> {
    ck.expect_module("tmr")?;
    let cfg: TmrConfig = ck.typed_config(expected)?;
    let tok = Tokenizer::from_vocab(vocab_of(ck)?, cfg.max_words);
    let dim = ck.meta["motion_dim"].as_u64().ok_or_else(|| Error::Invalid("tmr checkpoint lacks motion_dim".into()))? as usize;
    let mut tmr = Tmr::new(cfg, tok, dim)?;
    restore_store(&mut tmr.store, ck)?;
    tmr.step = ck.step;
    Ok((tmr, restore_normalizer(ck)?))
}

pub fn gpt_checkpoint(gpt: &Hgpt) -> Result<Checkpoint> {
    let mut blocks = Vec::new();
    store_blocks(&gpt.store, &mut blocks);
    Ok(Checkpoint {
        module: "hgpt".into(),
        config: config_value(&gpt.config)?,
        step: gpt.step,
        meta: serde_json::json!({ "vocab": gpt.vocab, "latent": gpt.latent }),
        blocks,
    })
}

pub fn load_gpt(ck: &Checkpoint, expected: Option<&GptConfig>) -> Result<Hgpt> {
    ck.expect_module("hgpt")?;
    let cfg: GptConfig = ck.typed_config(expected)?;
    let vocab: Vocab = serde_json::from_value(ck.meta["vocab"].clone()).map_err(serde_err)?;
    let latent = ck.meta["latent"].as_u64().ok_or_else(|| Error::Invalid("gpt checkpoint lacks latent".into()))? as usize;
    let mut gpt = Hgpt::new(cfg, vocab, latent)?;
    restore_store(&mut gpt.store, ck)?;
    gpt.step = ck.step;
    Ok(gpt)
}

pub fn face_checkpoint(face: &FaceModel) -> Result<Checkpoint> {
    let mut blocks = Vec::new();
    store_blocks(&face.store, &mut blocks);
    Ok(Checkpoint {
        module: "facecvae".into(),
        config: config_value(&face.config)?,
        step: face.step,
        meta: serde_json::json!({ "vocab": face.tokenizer.vocab() }),
        blocks,
    })
}

pub fn load_face(ck: &Checkpoint, expected: Option<&FaceConfig>) -> Result<FaceModel> {
    ck.expect_module("facecvae")?;
    let cfg: FaceConfig = ck.typed_config(expected)?;
    let tok = Tokenizer::from_vocab(vocab_of(ck)?, cfg.max_words);
    let mut face = FaceModel::new(cfg, tok)?;
    restore_store(&mut face.store, ck)?;
    face.step = ck.step;
    Ok(face)
}

/// Evaluation settings of the metric suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub repetitions: usize,
    pub mmodality_generations: usize,
    pub mmodality_prompts: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            repetitions: crate::metrics::REPETITIONS,
            mmodality_generations: crate::metrics::MMODALITY_GENERATIONS,
            mmodality_prompts: 20,
            seed: 0,
        }
    }
}

/// Complete run configuration, read from TOML.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub codec: CodecConfig,
    pub tmr: TmrConfig,
    pub gpt: GptConfig,
    pub face: FaceConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(serde_err)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(serde_err)
    }

    /// SHA-256 of the canonical JSON rendering.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_vec(self).map_err(serde_err)?;
        Ok(Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub command: Vec<String>,
    pub seed: u64,
    pub config_hash: String,
    pub artifacts: Vec<String>,
}

pub const PROVENANCE_FILE: &str = "provenance.jsonl";

pub fn append_provenance(out_dir: &Path, record: &ProvenanceRecord) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join(PROVENANCE_FILE);
    let mut f = fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
    let line = serde_json::to_string(record).map_err(serde_err)?;
    writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
}
