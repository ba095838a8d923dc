use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataError, LabelMaps, Result, Utterance};

/// Standard corpus split file names inside a data directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.jsonl",
            Split::Dev => "dev.jsonl",
            Split::Test => "test.jsonl",
        }
    }

    pub fn path(self, dir: &Path) -> PathBuf {
        dir.join(self.file_name())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!(
                "unknown split {other:?} (expected train, dev or test)"
            )),
        }
    }
}

/// One line of a teacher embedding file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherEmbedding {
    pub id: String,
    pub embedding: Vec<f64>,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Parses non-blank JSON lines, reporting 1-based line numbers on failure.
fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push((i + 1, value));
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, &item).map_err(|e| DataError::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: e.to_string(),
        })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads and validates a JSONL corpus file; ids must be unique.
pub fn read_utterances(path: &Path) -> Result<Vec<Utterance>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (_, u) in read_jsonl::<Utterance>(path)? {
        u.validate()?;
        if !seen.insert(u.id.clone()) {
            return Err(DataError::DuplicateId { id: u.id });
        }
        out.push(u);
    }
    Ok(out)
}

/// Reads a training file and builds label maps from it.
pub fn load_corpus(path: &Path) -> Result<(Vec<Utterance>, LabelMaps)> {
    let utts = read_utterances(path)?;
    let maps = LabelMaps::build(&utts);
    Ok((utts, maps))
}

pub fn write_utterances(path: &Path, utts: &[Utterance]) -> Result<()> {
    write_jsonl(path, utts)
}

/// Loads precomputed sentence embeddings keyed by utterance id.
pub fn load_teacher_embeddings(path: &Path, d_et: usize) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for (_, rec) in read_jsonl::<TeacherEmbedding>(path)? {
        if rec.embedding.len() != d_et {
            return Err(DataError::Dimension {
                id: rec.id,
                expected: d_et,
                got: rec.embedding.len(),
            });
        }
        if out.contains_key(&rec.id) {
            return Err(DataError::DuplicateId { id: rec.id });
        }
        out.insert(rec.id, rec.embedding);
    }
    Ok(out)
}

pub fn write_teacher_embeddings(path: &Path, recs: &[TeacherEmbedding]) -> Result<()> {
    write_jsonl(path, recs)
}
