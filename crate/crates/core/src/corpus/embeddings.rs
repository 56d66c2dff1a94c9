//! Word-vector tables from whitespace-separated text files.

use super::Vocab;
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// One vector per vocabulary index, including UNK.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub vectors: Vec<Vec<f64>>,
    /// Vocabulary entries covered by the source file.
    pub from_file: usize,
    /// Entries filled with seeded random vectors.
    pub random_init: usize,
}

impl EmbeddingTable {
    /// Every entry drawn uniformly from `[-0.5/dim, 0.5/dim]`.
    pub fn random(vocab_len: usize, dim: usize, seed: u64) -> Self {
        Self::fill(vec![None; vocab_len], dim, seed)
    }

    fn fill(found: Vec<Option<Vec<f64>>>, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 0.5 / dim as f64;
        let mut from_file = 0;
        let mut random_init = 0;
        let vectors = found
            .into_iter()
            .map(|v| match v {
                Some(v) => {
                    from_file += 1;
                    v
                }
                None => {
                    random_init += 1;
                    (0..dim).map(|_| rng.random_range(-bound..=bound)).collect()
                }
            })
            .collect();
        Self { dim, vectors, from_file, random_init }
    }

    /// Builds a table for `vocab` from `(word, vector)` entries; words outside
    /// the vocabulary are ignored.
    pub fn from_entries<'a>(
        entries: impl IntoIterator<Item = (&'a str, &'a [f64])>,
        vocab: &Vocab,
        dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut found: Vec<Option<Vec<f64>>> = vec![None; vocab.len()];
        for (word, vec) in entries {
            if vec.len() != dim {
                return Err(Error::Dimension { expected: dim, got: vec.len() });
            }
            if let Some(i) = vocab.lookup(word).or_else(|| vocab.lookup(&word.to_lowercase())) {
                found[i] = Some(vec.to_vec());
            }
        }
        Ok(Self::fill(found, dim, seed))
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// Parses `word f1 ... fd` lines. Vocabulary words missing from the file get
/// seeded random vectors.
pub fn load_embeddings(path: &Path, vocab: &Vocab, seed: u64) -> Result<EmbeddingTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries: Vec<(String, Vec<f64>)> = Vec::new();
    let mut dim = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let parse_err = |message: String| Error::Parse { path: path.to_path_buf(), line: i + 1, message };
        let values = parts
            .map(|p| p.parse::<f64>().map_err(|e| parse_err(format!("bad value {p:?}: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        match dim {
            None if values.is_empty() => return Err(parse_err("no vector values".into())),
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(parse_err(format!("expected {d} values, found {}", values.len())));
            }
            Some(_) => {}
        }
        entries.push((word.to_string(), values));
    }
    let dim = dim.ok_or_else(|| Error::Data(format!("{}: empty embedding file", path.display())))?;
    EmbeddingTable::from_entries(entries.iter().map(|(w, v)| (w.as_str(), v.as_slice())), vocab, dim, seed)
}

pub fn write_embeddings(path: &Path, entries: &[(String, Vec<f64>)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (word, vec) in entries {
        write!(w, "{word}").map_err(|e| Error::io(path, e))?;
        for v in vec {
            write!(w, " {v}").map_err(|e| Error::io(path, e))?;
        }
        writeln!(w).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
