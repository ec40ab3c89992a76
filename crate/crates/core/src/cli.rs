//! Command-line interface.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::codec::Variant;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::io::{self, ProvenanceRecord, RunConfig, OUT_ENV};
use crate::motionrep::Skeleton;
use crate::pipeline::{self, OutDir};
use crate::tmr::Protocol;

#[derive(Debug, Parser)]
#[command(name = "holomotion", version, about = "Whole-body text-to-motion toolkit")]
pub struct Cli {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed of the run configuration; also the sampling seed of `generate`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, env = OUT_ENV, default_value = "out")]
    pub out_dir: PathBuf,
    /// Worker threads for corpus generation.
    #[arg(long, global = true, default_value_t = 1)]
    pub device_threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus and its manifest.
    GenCorpus {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a motion codec.
    TrainVq {
        #[arg(long)]
        variant: Variant,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the text-motion retrieval model.
    TrainTmr {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the facial model.
    TrainFace {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the token generator; needs the retrieval model and the hierarchical codec.
    TrainGpt {
        #[arg(long)]
        steps: Option<usize>,
        /// Weight of the alignment loss.
        #[arg(long)]
        eta: Option<f64>,
    },
    /// Held-out reconstruction errors of every trained codec.
    Reconstruct,
    /// Generate one whole-body motion file from text.
    Generate {
        #[arg(long)]
        text: String,
        #[arg(long)]
        length: usize,
        /// Facial text; derived from emotion words of `--text` when absent.
        #[arg(long)]
        face_text: Option<String>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Metric-suite report of real and generated test motions.
    Evaluate {
        #[arg(long)]
        repetitions: Option<usize>,
    },
    /// Recall table of the retrieval model on the test split.
    RetrievalEval {
        #[arg(long)]
        protocol: Protocol,
    },
}

fn steps_every(total: usize) -> u64 {
    (total / 10).max(1) as u64
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.corpus.seed = s;
        cfg.codec.seed = s;
        cfg.tmr.seed = s;
        cfg.gpt.seed = s;
        cfg.face.seed = s;
        cfg.eval.seed = s;
    }
    match &cli.command {
        Command::GenCorpus { count: Some(c) } => cfg.corpus.count = *c,
        Command::TrainVq { variant, steps } => {
            cfg.codec.variant = *variant;
            if let Some(s) = steps {
                cfg.codec.steps = *s;
            }
        }
        Command::TrainTmr { steps: Some(s) } => cfg.tmr.steps = *s,
        Command::TrainFace { steps: Some(s) } => cfg.face.steps = *s,
        Command::TrainGpt { steps, eta } => {
            if let Some(s) = steps {
                cfg.gpt.steps = *s;
            }
            if let Some(e) = eta {
                cfg.gpt.eta = *e;
            }
        }
        Command::Evaluate { repetitions: Some(r) } => cfg.eval.repetitions = *r,
        _ => {}
    }
    Ok(cfg)
}

fn load_corpus(out: &OutDir) -> Result<Corpus> {
    io::load_corpus(&out.corpus())
}

fn write_text(path: PathBuf, text: &str) -> Result<PathBuf> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Runs one command and returns the artifacts it wrote.
fn execute(cli: &Cli, cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let out = OutDir(cli.out_dir.clone());
    match &cli.command {
        Command::GenCorpus { .. } => {
            let corpus = Corpus::generate_parallel(&cfg.corpus, cli.device_threads)?;
            let manifest = io::save_corpus(&corpus, &out.corpus())?;
            eprintln!("{} items written", corpus.items.len());
            Ok(vec![manifest, out.corpus().join("motions")])
        }
        Command::TrainVq { variant, .. } => {
            let corpus = load_corpus(&out)?;
            let every = steps_every(cfg.codec.steps);
            let (codec, norm) = pipeline::train_codec(&corpus, &cfg.codec, |s, l| {
                if s % every == 0 {
                    eprintln!("step {s}: reconstruction {:.5} commitment {:.5?}", l.reconstruction, l.commitment);
                }
            })?;
            let path = out.codec_checkpoint(*variant);
            io::codec_checkpoint(&codec, &norm)?.save(&path)?;
            Ok(vec![path])
        }
        Command::TrainTmr { .. } => {
            let corpus = load_corpus(&out)?;
            let every = steps_every(cfg.tmr.steps);
            let (tmr, norm) = pipeline::train_tmr(&corpus, &cfg.tmr, |s, l| {
                if s % every == 0 {
                    eprintln!("step {s}: total {:.5} reconstruction {:.5} kl {:.3} nce {:.5}", l.total, l.reconstruction, l.kl, l.nce);
                }
            })?;
            let path = out.checkpoint("tmr");
            io::tmr_checkpoint(&tmr, &norm)?.save(&path)?;
            Ok(vec![path])
        }
        Command::TrainFace { .. } => {
            let corpus = load_corpus(&out)?;
            let every = steps_every(cfg.face.steps);
            let face = pipeline::train_face(&corpus, &cfg.face, |s, l| {
                if s % every == 0 {
                    eprintln!("step {s}: total {:.5} reconstruction {:.5} kl {:.3}", l.total, l.reconstruction, l.kl);
                }
            })?;
            let path = out.checkpoint("face");
            io::face_checkpoint(&face)?.save(&path)?;
            Ok(vec![path])
        }
        Command::TrainGpt { .. } => {
            let tmr_ck = pipeline::require_checkpoint(&out.checkpoint("tmr"), "tmr", "train-tmr")?;
            let codec_ck = pipeline::require_checkpoint(&out.codec_checkpoint(Variant::H2vq), "h2vq", "train-vq --variant h2vq")?;
            let corpus = load_corpus(&out)?;
            let (tmr, tmr_norm) = io::load_tmr(&tmr_ck, None)?;
            let (codec, codec_norm) = io::load_codec(&codec_ck, None)?;
            let every = steps_every(cfg.gpt.steps);
            let gpt = pipeline::train_gpt(&corpus, &cfg.gpt, (&codec, &codec_norm), (&tmr, &tmr_norm), |s, l| {
                if s % every == 0 {
                    eprintln!("step {s}: total {:.5} cross-entropy {:.5} alignment {:.5}", l.total, l.ce, l.align);
                }
            })?;
            let path = out.checkpoint("gpt");
            io::gpt_checkpoint(&gpt)?.save(&path)?;
            Ok(vec![path])
        }
        Command::Reconstruct => {
            let corpus = load_corpus(&out)?;
            let mut loaded = Vec::new();
            for v in [Variant::Vanilla, Variant::Rvq, Variant::H2vq] {
                let path = out.codec_checkpoint(v);
                if path.exists() {
                    let (c, n) = io::load_codec(&io::Checkpoint::load(&path)?, None)?;
                    loaded.push((v.name(), c, n));
                }
            }
            if loaded.is_empty() {
                return Err(Error::MissingDependency { name: "vq".into(), detail: "no codec checkpoint found; run `train-vq` first".into() });
            }
            let refs: Vec<_> = loaded.iter().map(|(n, c, z)| (*n, c, z)).collect();
            let rows = pipeline::reconstruction_report(&corpus, &refs)?;
            let mut text = format!("{}\n", crate::codec::ReconstructionRow::HEADER);
            for r in &rows {
                text.push_str(&r.to_tsv());
                text.push('\n');
            }
            print!("{text}");
            Ok(vec![write_text(out.report("reconstruction.tsv"), &text)?])
        }
        Command::Generate { text, length, face_text, output } => {
            let gen = pipeline::load_generator(&out, Skeleton::desk())?;
            let seed = cli.seed.unwrap_or(0);
            let g = gen.generate(text, face_text.as_deref(), *length, seed)?;
            let path = output.clone().unwrap_or_else(|| out.generated().join(format!("motion_seed{seed}.tmto")));
            let (m, t) = gen.save(&g, &path)?;
            Ok(vec![m, t])
        }
        Command::Evaluate { .. } => {
            let corpus = load_corpus(&out)?;
            let gen = pipeline::load_generator(&out, corpus.skeleton.clone())?;
            let rows = pipeline::evaluate(&corpus, &gen, &cfg.eval)?;
            let text = pipeline::evaluation_report(&rows);
            print!("{text}");
            Ok(vec![write_text(out.report("evaluation.tsv"), &text)?])
        }
        Command::RetrievalEval { protocol } => {
            let corpus = load_corpus(&out)?;
            let ck = pipeline::require_checkpoint(&out.checkpoint("tmr"), "tmr", "train-tmr")?;
            let (tmr, norm) = io::load_tmr(&ck, None)?;
            let table = pipeline::retrieval_report(&corpus, &tmr, &norm, *protocol, cfg.eval.seed)?;
            let text = table.to_tsv();
            print!("{text}");
            Ok(vec![write_text(out.report(&format!("retrieval_{protocol:?}.tsv")), &text)?])
        }
    }
}

/// Parses `argv`, runs the command, prints its artifacts and appends a
/// provenance record.
pub fn run(argv: Vec<String>) -> Result<Vec<PathBuf>> {
    let cli = Cli::try_parse_from(&argv).map_err(|e| Error::Invalid(e.to_string()))?;
    let cfg = load_config(&cli)?;
    let artifacts = execute(&cli, &cfg)?;
    for a in &artifacts {
        println!("{}", a.display());
    }
    let record = ProvenanceRecord {
        command: argv,
        seed: cli.seed.unwrap_or(cfg.corpus.seed),
        config_hash: cfg.hash()?,
        artifacts: artifacts.iter().map(|p| p.display().to_string()).collect(),
    };
    io::append_provenance(&cli.out_dir, &record)?;
    Ok(artifacts)
}
