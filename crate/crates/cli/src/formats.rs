//! On-disk corpus layout: one dialogue per line plus db, vocab and
//! metadata sidecars.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use styledial_core::corpus_gen::{Corpus, CorpusSpec, Ontology, Split, Vocab, CORPUS_VERSION};
use styledial_core::dialogue_core::{Db, Dialogue};

pub const DIALOGUES_FILE: &str = "dialogues.jsonl";
pub const DB_FILE: &str = "db.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const META_FILE: &str = "corpus.json";

/// Files that make up a corpus, in checksum order.
pub const CORPUS_FILES: [&str; 4] = [META_FILE, DIALOGUES_FILE, DB_FILE, VOCAB_FILE];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub format_version: u32,
    pub spec: CorpusSpec,
    pub ontology: Ontology,
    pub split: Split,
    pub n_dialogues: usize,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `bytes` through a temporary sibling so readers never see a
/// half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

pub fn to_json_pretty<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(v)?;
    s.push(b'\n');
    Ok(s)
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for it in items {
        serde_json::to_writer(&mut out, it)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

/// True when `dir` exists and has at least one entry.
pub fn dir_non_empty(dir: &Path) -> Result<bool> {
    if !dir.exists() {
        return Ok(false);
    }
    Ok(fs::read_dir(dir)?.next().is_some())
}

/// Serializes a corpus into `dir` and returns its checksum.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<String> {
    fs::create_dir_all(dir)?;
    let meta = CorpusMeta {
        format_version: CORPUS_VERSION,
        spec: corpus.spec.clone(),
        ontology: corpus.ontology.clone(),
        split: corpus.split.clone(),
        n_dialogues: corpus.dialogues.len(),
    };
    write_atomic(&dir.join(META_FILE), &to_json_pretty(&meta)?)?;
    write_atomic(&dir.join(DIALOGUES_FILE), &to_jsonl(&corpus.dialogues)?)?;
    write_atomic(&dir.join(DB_FILE), &to_json_pretty(&corpus.db)?)?;
    write_atomic(&dir.join(VOCAB_FILE), &to_json_pretty(&corpus.vocab)?)?;
    corpus_checksum(dir)
}

/// SHA-256 over every corpus file, each prefixed by its name and length.
pub fn corpus_checksum(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for name in CORPUS_FILES {
        let bytes = fs::read(dir.join(name)).with_context(|| format!("reading {name} in {}", dir.display()))?;
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn vocab_checksum(vocab: &Vocab) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(vocab)?))
}

/// Loads a corpus directory and returns it with its checksum.
pub fn read_corpus(dir: &Path) -> Result<(Corpus, String)> {
    let meta: CorpusMeta = read_json(&dir.join(META_FILE))?;
    if meta.format_version != CORPUS_VERSION {
        bail!(
            "corpus format version {} in {}, this build reads version {CORPUS_VERSION}",
            meta.format_version,
            dir.display()
        );
    }
    let f = fs::File::open(dir.join(DIALOGUES_FILE))
        .with_context(|| format!("opening {DIALOGUES_FILE} in {}", dir.display()))?;
    let mut dialogues: Vec<Dialogue> = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        dialogues.push(serde_json::from_str(&line).with_context(|| format!("{DIALOGUES_FILE} line {}", i + 1))?);
    }
    if dialogues.len() != meta.n_dialogues {
        bail!("{} lists {} dialogues, found {}", META_FILE, meta.n_dialogues, dialogues.len());
    }
    if meta.split.test.end > dialogues.len() {
        bail!("split ranges exceed the dialogue count");
    }
    let db: Db = read_json(&dir.join(DB_FILE))?;
    let vocab: Vocab = read_json(&dir.join(VOCAB_FILE))?;
    let checksum = corpus_checksum(dir)?;
    Ok((
        Corpus {
            spec: meta.spec,
            ontology: meta.ontology,
            dialogues,
            db,
            vocab,
            split: meta.split,
        },
        checksum,
    ))
}

/// Appends `items` as JSON lines.
pub fn append_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(&to_jsonl(items)?)?;
    Ok(())
}
