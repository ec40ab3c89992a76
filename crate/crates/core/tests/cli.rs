use std::path::Path;
use std::process::{Command, Output};

use holomotion::io::{self, ProvenanceRecord};

fn holomotion(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_holomotion")).env("HOLOMOTION_OUT", dir).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let o = holomotion(dir.path(), &["train-vq", "--variant", "h2vq", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = holomotion(dir.path(), &["train-vq", "--variant", "lattice"]);
    assert_eq!(o.status.code(), Some(2));
    let o = holomotion(dir.path(), &["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("train-gpt"));
}

#[test]
fn missing_dependencies_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let o = holomotion(dir.path(), &["train-gpt", "--steps", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("`tmr`"), "{}", stderr(&o));
    let o = holomotion(dir.path(), &["generate", "--text", "a person jumps", "--length", "8"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("`h2vq`"), "{}", stderr(&o));
    let o = holomotion(dir.path(), &["train-vq", "--variant", "rvq"]);
    assert!(stderr(&o).contains("`corpus`"), "{}", stderr(&o));
}

#[test]
fn corpus_command_records_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let o = holomotion(dir.path(), &["gen-corpus", "--count", "20", "--seed", "3", "--device-threads", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let corpus = io::load_corpus(&dir.path().join("corpus")).unwrap();
    assert_eq!(corpus.items.len(), 20);
    assert_eq!(corpus.config.seed, 3);
    let log = std::fs::read_to_string(dir.path().join("provenance.jsonl")).unwrap();
    let rec: ProvenanceRecord = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(rec.seed, 3);
    assert_eq!(rec.config_hash.len(), 64);
    assert!(rec.artifacts.iter().any(|a| a.ends_with("manifest.json")));

    let o = holomotion(dir.path(), &["reconstruct"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("`vq`"), "{}", stderr(&o));
}

#[test]
fn thread_count_does_not_change_the_corpus() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(holomotion(a.path(), &["gen-corpus", "--count", "24"]).status.success());
    assert!(holomotion(b.path(), &["gen-corpus", "--count", "24", "--device-threads", "3"]).status.success());
    let read = |d: &Path| std::fs::read(d.join("corpus/manifest.json")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    for i in 0..24 {
        let f = format!("corpus/motions/{i:05}.tmto");
        assert_eq!(std::fs::read(a.path().join(&f)).unwrap(), std::fs::read(b.path().join(&f)).unwrap());
    }
}

#[test]
fn evaluate_writes_the_metric_table() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["gen-corpus", "--count", "64"][..],
        &["train-vq", "--variant", "h2vq", "--steps", "5"],
        &["train-tmr", "--steps", "5"],
        &["train-face", "--steps", "2"],
        &["train-gpt", "--steps", "5"],
    ] {
        let o = holomotion(dir.path(), args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    }
    let o = holomotion(dir.path(), &["evaluate", "--repetitions", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout).into_owned();
    let lines: Vec<&str> = stdout.lines().collect();
    assert!(lines[0].starts_with('#'));
    assert_eq!(lines[1], holomotion::metrics::SuiteRow::HEADER);
    assert!(lines[2].starts_with("Real motion\t") && lines[3].starts_with("Generator\t"));
    assert!(lines[2..4].iter().all(|l| l.split('\t').count() == 12));
    let written = std::fs::read_to_string(dir.path().join("reports/evaluation.tsv")).unwrap();
    assert!(stdout.starts_with(&written));
}
