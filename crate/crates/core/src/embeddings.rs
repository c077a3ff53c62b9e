//! Word and character lookup tables.
//!
//! Row 0 of every table is the reserved unknown-symbol row. Word lookup
//! tries the exact form, then the lowercased form, then falls back to it.

use std::collections::HashMap;
use std::fs::File;
use std::hash::Hash;
use std::io::{BufRead, BufReader};
use std::path::Path;

use log::warn;
use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Initialization range for randomly initialized embedding rows.
pub const INIT_RANGE: f64 = 0.25;

pub const UNK_ROW: usize = 0;

/// Symbol → row map with row 0 reserved for unknowns.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab<T: Eq + Hash + Clone> {
    entries: Vec<T>,
    index: HashMap<T, usize>,
}

impl<T: Eq + Hash + Clone> Default for Vocab<T> {
    fn default() -> Self {
        Vocab {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Eq + Hash + Clone> Vocab<T> {
    /// Build from symbols in first-seen order; duplicates are ignored.
    pub fn from_symbols<I: IntoIterator<Item = T>>(symbols: I) -> Self {
        let mut v = Vocab::default();
        for s in symbols {
            v.insert(s);
        }
        v
    }

    pub fn insert(&mut self, s: T) -> usize {
        if let Some(&row) = self.index.get(&s) {
            return row;
        }
        self.entries.push(s.clone());
        let row = self.entries.len();
        self.index.insert(s, row);
        row
    }

    pub fn get(&self, s: &T) -> Option<usize> {
        self.index.get(s).copied()
    }

    /// Symbols in row order (row `i + 1` holds `symbols()[i]`).
    pub fn symbols(&self) -> &[T] {
        &self.entries
    }

    /// Rows including the unknown row.
    pub fn rows(&self) -> usize {
        self.entries.len() + 1
    }
}

/// Parsed textual word-vector file.
#[derive(Debug, Clone, PartialEq)]
pub struct WordVectors {
    pub dim: usize,
    pub words: Vec<String>,
    /// Row-major `[words.len() × dim]`.
    pub values: Vec<f64>,
}

/// Read `<count> <dim>` followed by `<word> <dim floats>` lines. A repeated
/// word keeps its last vector.
pub fn load_word_vectors(path: impl AsRef<Path>) -> Result<WordVectors> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_word_vectors(BufReader::new(file), &path.display().to_string())
}

pub fn read_word_vectors<R: BufRead>(reader: R, origin: &str) -> Result<WordVectors> {
    let mut lines = reader.lines().enumerate();
    let header = match lines.next() {
        Some((_, l)) => l.map_err(|e| Error::io(origin, e))?,
        None => return Err(Error::parse(origin, 1, "empty word-vector file")),
    };
    let mut fields = header.split_whitespace().map(str::parse::<usize>);
    let (declared, dim) = match (fields.next(), fields.next(), fields.next()) {
        (Some(Ok(c)), Some(Ok(d)), None) if d > 0 => (c, d),
        _ => return Err(Error::parse(origin, 1, format!("expected `<count> <dim>`, found `{header}`"))),
    };
    let mut rows: HashMap<String, usize> = HashMap::new();
    let mut words = Vec::new();
    let mut values = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io(origin, e))?;
        let lineno = i + 1;
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let v = parts
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::parse(origin, lineno, format!("bad number: {e}")))?;
        if v.len() != dim {
            return Err(Error::parse(
                origin,
                lineno,
                format!("vector for `{word}` has {} values, header declares {dim}", v.len()),
            ));
        }
        match rows.get(word) {
            Some(&r) => {
                warn!("{origin}:{lineno}: duplicate word `{word}`; keeping the last vector");
                values[r * dim..(r + 1) * dim].copy_from_slice(&v);
            }
            None => {
                rows.insert(word.to_string(), words.len());
                words.push(word.to_string());
                values.extend(v);
            }
        }
    }
    if words.len() != declared {
        warn!("{origin}: header declares {declared} words, found {}", words.len());
    }
    Ok(WordVectors { dim, words, values })
}

#[derive(Debug, Clone)]
pub struct WordTable {
    pub vocab: Vocab<String>,
    pub matrix: ParamId,
    pub dim: usize,
}

impl WordTable {
    /// Randomly initialized table over `words`.
    pub fn random<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        words: impl IntoIterator<Item = String>,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let vocab = Vocab::from_symbols(words);
        let matrix = store.add(name, Tensor::uniform(&[vocab.rows(), dim], INIT_RANGE, rng))?;
        Ok(WordTable { vocab, matrix, dim })
    }

    /// Table initialized from pre-trained vectors; the unknown row is random.
    pub fn from_vectors<R: Rng>(store: &mut ParamStore, name: &str, vectors: &WordVectors, rng: &mut R) -> Result<Self> {
        let dim = vectors.dim;
        let vocab = Vocab::from_symbols(vectors.words.iter().cloned());
        let mut data: Vec<f64> = (0..dim).map(|_| rng.gen_range(-INIT_RANGE..INIT_RANGE)).collect();
        data.extend_from_slice(&vectors.values);
        let matrix = store.add(name, Tensor::matrix(vocab.rows(), dim, data)?)?;
        Ok(WordTable { vocab, matrix, dim })
    }

    /// Rebind to an existing parameter (after loading a model).
    pub fn attach(store: &ParamStore, name: &str, vocab: Vocab<String>) -> Result<Self> {
        let matrix = store.require(name)?;
        let shape = store.value(matrix).shape();
        if shape[0] != vocab.rows() {
            return Err(Error::Format(format!(
                "`{name}` has {} rows but the vocabulary needs {}",
                shape[0],
                vocab.rows()
            )));
        }
        let dim = shape[1];
        Ok(WordTable { vocab, matrix, dim })
    }

    /// Row for `token`: exact, then lowercase, then unknown.
    pub fn row(&self, token: &str) -> usize {
        if let Some(r) = self.vocab.get(&token.to_string()) {
            return r;
        }
        let lower = token.to_lowercase();
        self.vocab.get(&lower).unwrap_or(UNK_ROW)
    }

    pub fn embed(&self, g: &mut Graph, token: &str) -> Result<Var> {
        g.gather(self.matrix, self.row(token))
    }

    pub fn vector(&self, store: &ParamStore, token: &str) -> Vec<f64> {
        store.value(self.matrix).row(self.row(token)).to_vec()
    }
}

#[derive(Debug, Clone)]
pub struct CharTable {
    pub vocab: Vocab<char>,
    pub matrix: ParamId,
    pub dim: usize,
}

impl CharTable {
    pub fn random<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        chars: impl IntoIterator<Item = char>,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let vocab = Vocab::from_symbols(chars);
        let matrix = store.add(name, Tensor::uniform(&[vocab.rows(), dim], INIT_RANGE, rng))?;
        Ok(CharTable { vocab, matrix, dim })
    }

    pub fn attach(store: &ParamStore, name: &str, vocab: Vocab<char>) -> Result<Self> {
        let matrix = store.require(name)?;
        let shape = store.value(matrix).shape();
        if shape[0] != vocab.rows() {
            return Err(Error::Format(format!(
                "`{name}` has {} rows but the alphabet needs {}",
                shape[0],
                vocab.rows()
            )));
        }
        let dim = shape[1];
        Ok(CharTable { vocab, matrix, dim })
    }

    pub fn row(&self, c: char) -> usize {
        self.vocab.get(&c).unwrap_or(UNK_ROW)
    }

    /// One embedding per character of `token`.
    pub fn embed(&self, g: &mut Graph, token: &str) -> Result<Vec<Var>> {
        if token.is_empty() {
            return Err(Error::Contract("cannot embed the characters of an empty token".into()));
        }
        token.chars().map(|c| g.gather(self.matrix, self.row(c))).collect()
    }
}
