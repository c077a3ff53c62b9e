//! Single-file model container.
//!
//! Layout:
//!
//! ```text
//! TRIMOD1\n
//! version 1\n
//! vocab <name> <count>\n      followed by <count> escaped entries, one per line
//! config <key> <value>\n      one per key, sorted by key
//! tensor <name> <rank> <dims…>\n  one per tensor, sorted by name
//! end\n
//! <payload>
//! ```
//!
//! The payload holds every tensor's values as little-endian IEEE-754 `f32`
//! in manifest order. Entries escape `\`, newline, carriage return and tab
//! as `\\`, `\n`, `\r` and `\t`. Unknown header lines are skipped with a
//! warning.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::warn;

use crate::autodiff::ParamStore;
use crate::embeddings::Vocab;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TriMod};
use crate::segmenter::{Segmenter, PREFIX as SEGMENTER_PREFIX};
use crate::tensor::Tensor;
use crate::training::TrainConfig;

pub const MAGIC: &[u8] = b"TRIMOD1\n";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelBundle {
    pub vocabs: BTreeMap<String, Vec<String>>,
    pub config: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            _ => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut it = s.chars();
    while let Some(c) = it.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match it.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('t') => out.push('\t'),
            other => return Err(Error::Format(format!("bad escape `\\{}`", other.map_or(String::new(), String::from)))),
        }
    }
    Ok(out)
}

impl ModelBundle {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = format!("version {VERSION}\n");
        for (name, entries) in &self.vocabs {
            header.push_str(&format!("vocab {} {}\n", escape(name), entries.len()));
            for e in entries {
                header.push_str(&escape(e));
                header.push('\n');
            }
        }
        for (k, v) in &self.config {
            if k.contains(char::is_whitespace) {
                return Err(Error::Format(format!("config key `{k}` contains whitespace")));
            }
            header.push_str(&format!("config {k} {}\n", escape(v)));
        }
        for (name, t) in &self.tensors {
            if name.contains(char::is_whitespace) {
                return Err(Error::Format(format!("tensor name `{name}` contains whitespace")));
            }
            header.push_str(&format!("tensor {name} {}", t.rank()));
            for d in t.shape() {
                header.push_str(&format!(" {d}"));
            }
            header.push('\n');
        }
        header.push_str("end\n");
        let payload_len: usize = self.tensors.values().map(|t| 4 * t.len()).sum();
        let mut out = Vec::with_capacity(MAGIC.len() + header.len() + payload_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(header.as_bytes());
        for t in self.tensors.values() {
            for &x in t.data() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            let shown = String::from_utf8_lossy(&bytes[..bytes.len().min(MAGIC.len())]).trim_end().to_string();
            return Err(Error::Version(format!("unsupported model format `{shown}`; expected TRIMOD1")));
        }
        let mut pos = MAGIC.len();
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Format("unexpected end of header".into()))?;
            pos += nl + 1;
            std::str::from_utf8(&rest[..nl]).map_err(|_| Error::Format("header is not UTF-8".into()))
        };
        let mut bundle = ModelBundle::default();
        let mut manifest: Vec<(String, Vec<usize>)> = Vec::new();
        loop {
            let line = next_line()?;
            let mut parts = line.split(' ');
            match parts.next() {
                Some("end") => break,
                Some("version") => {
                    let v = parts.next().unwrap_or("");
                    if v != VERSION.to_string() {
                        return Err(Error::Version(format!("unsupported format version `{v}`")));
                    }
                }
                Some("vocab") => {
                    let name = unescape(parts.next().unwrap_or(""))?;
                    let count: usize = parts
                        .next()
                        .and_then(|c| c.parse().ok())
                        .ok_or_else(|| Error::Format(format!("bad vocab line `{line}`")))?;
                    let mut entries = Vec::with_capacity(count);
                    for _ in 0..count {
                        entries.push(unescape(next_line()?)?);
                    }
                    bundle.vocabs.insert(name, entries);
                }
                Some("config") => {
                    let (k, v) = line["config ".len().min(line.len())..]
                        .split_once(' ')
                        .ok_or_else(|| Error::Format(format!("bad config line `{line}`")))?;
                    bundle.config.insert(k.to_string(), unescape(v)?);
                }
                Some("tensor") => {
                    let fields: Vec<&str> = parts.collect();
                    let bad = || Error::Format(format!("bad tensor line `{line}`"));
                    let name = fields.first().ok_or_else(bad)?.to_string();
                    let rank: usize = fields.get(1).and_then(|r| r.parse().ok()).ok_or_else(bad)?;
                    let dims = fields[2..]
                        .iter()
                        .map(|d| d.parse::<usize>().map_err(|_| bad()))
                        .collect::<Result<Vec<_>>>()?;
                    if dims.len() != rank || dims.contains(&0) {
                        return Err(bad());
                    }
                    manifest.push((name, dims));
                }
                _ => warn!("ignoring unknown model header line `{line}`"),
            }
        }
        for (name, dims) in manifest {
            let n: usize = dims.iter().product();
            let end = pos + 4 * n;
            if end > bytes.len() {
                return Err(Error::Format("unexpected end of payload".into()));
            }
            let data = bytes[pos..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            pos = end;
            if bundle.tensors.insert(name.clone(), Tensor::new(dims, data)?).is_some() {
                return Err(Error::Format(format!("tensor `{name}` listed twice")));
            }
        }
        if pos != bytes.len() {
            return Err(Error::Format(format!(
                "manifest covers {pos} bytes but the file has {}",
                bytes.len()
            )));
        }
        Ok(bundle)
    }

    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config.get(key).map(String::as_str)
    }
}

pub fn save(bundle: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, bundle.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelBundle> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelBundle::from_bytes(&bytes)
}

const EPOCHS_DONE: &str = "train.epochs_done";

/// A restored model plus the training settings it was saved with.
pub struct Restored {
    pub model: TriMod,
    pub train: TrainConfig,
    pub epochs_done: usize,
}

impl TriMod {
    pub fn to_bundle(&self, train: &TrainConfig, epochs_done: usize) -> ModelBundle {
        let mut b = ModelBundle::default();
        b.vocabs.insert("word".into(), self.encoder.words.vocab.symbols().to_vec());
        b.vocabs.insert(
            "char".into(),
            self.encoder.chars.vocab.symbols().iter().map(char::to_string).collect(),
        );
        for (k, v) in self.config.to_pairs().into_iter().chain(train.to_pairs()) {
            b.config.insert(k, v);
        }
        b.config.insert(EPOCHS_DONE.into(), epochs_done.to_string());
        for (_, p) in self.store.iter() {
            b.tensors.insert(p.name.clone(), p.value.clone());
        }
        if let Some(seg) = &self.segmenter {
            b.vocabs.insert(
                "segmenter".into(),
                seg.alphabet.symbols().iter().map(char::to_string).collect(),
            );
            for (_, p) in seg.store.iter() {
                b.tensors.insert(p.name.clone(), p.value.clone());
            }
        }
        b
    }

    pub fn from_bundle(bundle: &ModelBundle) -> Result<Restored> {
        let chars_of = |name: &str| -> Result<Vocab<char>> {
            let entries = bundle.vocabs.get(name).map(Vec::as_slice).unwrap_or(&[]);
            let mut chars = Vec::with_capacity(entries.len());
            for e in entries {
                let mut it = e.chars();
                match (it.next(), it.next()) {
                    (Some(c), None) => chars.push(c),
                    _ => return Err(Error::Format(format!("`{name}` vocabulary entry `{e}` is not one character"))),
                }
            }
            Ok(Vocab::from_symbols(chars))
        };
        let words = Vocab::from_symbols(bundle.vocabs.get("word").cloned().unwrap_or_default());
        let chars = chars_of("char")?;
        let config = ModelConfig::from_pairs(bundle.config.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        let mut rc = crate::training::RunConfig::default();
        for (k, v) in &bundle.config {
            if k.starts_with("train.") && k != EPOCHS_DONE {
                if let Err(e) = rc.set(k, v) {
                    warn!("ignoring stored setting: {e}");
                }
            }
        }
        let epochs_done = match bundle.config_value(EPOCHS_DONE) {
            Some(v) => v
                .parse()
                .map_err(|_| Error::Format(format!("bad value `{v}` for `{EPOCHS_DONE}`")))?,
            None => 0,
        };
        let mut store = ParamStore::new();
        let mut seg_store = ParamStore::new();
        let seg_prefix = format!("{SEGMENTER_PREFIX}.");
        for (name, t) in &bundle.tensors {
            if name.starts_with(&seg_prefix) {
                seg_store.add(name.clone(), t.clone())?;
            } else {
                store.add(name.clone(), t.clone())?;
            }
        }
        let segmenter = if seg_store.is_empty() {
            None
        } else {
            Some(Segmenter::from_parts(seg_store, chars_of("segmenter")?)?)
        };
        let model = TriMod::from_parts(store, config, words, chars, segmenter)?;
        Ok(Restored {
            model,
            train: rc.train,
            epochs_done,
        })
    }
}

/// Load only the segmenter from a bundle file.
pub fn load_segmenter(path: impl AsRef<Path>) -> Result<Segmenter> {
    let bundle = load(path)?;
    let seg_prefix = format!("{SEGMENTER_PREFIX}.");
    let mut store = ParamStore::new();
    for (name, t) in &bundle.tensors {
        if name.starts_with(&seg_prefix) {
            store.add(name.clone(), t.clone())?;
        }
    }
    if store.is_empty() {
        return Err(Error::Format("the model file holds no segmenter".into()));
    }
    let entries = bundle.vocabs.get("segmenter").cloned().unwrap_or_default();
    let alphabet = Vocab::from_symbols(entries.iter().filter_map(|e| e.chars().next()));
    Segmenter::from_parts(store, alphabet)
}

/// Save a segmenter on its own.
pub fn segmenter_bundle(seg: &Segmenter) -> ModelBundle {
    let mut b = ModelBundle::default();
    b.vocabs.insert(
        "segmenter".into(),
        seg.alphabet.symbols().iter().map(char::to_string).collect(),
    );
    for (_, p) in seg.store.iter() {
        b.tensors.insert(p.name.clone(), p.value.clone());
    }
    b
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{parse_corpus_str, VisualFeatureStore};
    use crate::encoders::EncoderDims;
    use crate::segmenter::SegmenterDims;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(with_segmenter: bool) -> (TriMod, Vec<crate::data::Post>) {
        let posts = parse_corpus_str("# img: a\nAlice\tB-PER\nin\tO\nParis\tB-LOC\n#BigDay\tO\n", "c").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let seg = with_segmenter.then(|| {
            let dims = SegmenterDims { embedding: 3, filters: 2, hidden: 2 };
            Segmenter::new("bigday".chars(), dims, &mut rng).unwrap()
        });
        let cfg = ModelConfig {
            encoder: EncoderDims { word: 4, char_embedding: 3, char_hidden: 2, word_hidden: 3 },
            fused: 4,
            visual: 3,
            ..Default::default()
        };
        (TriMod::new(cfg, &posts, None, seg, &mut rng).unwrap(), posts)
    }

    #[test]
    fn escapes_round_trip() {
        for s in ["plain", "a\\b", "tab\there", "new\nline", "\r\\n"] {
            assert_eq!(unescape(&escape(s)).unwrap(), s);
        }
        assert!(unescape("bad\\x").is_err());
    }

    #[test]
    fn round_trip_preserves_predictions() {
        let (m, posts) = model(true);
        let bytes = m.to_bundle(&TrainConfig::default(), 3).to_bytes().unwrap();
        assert!(bytes.starts_with(MAGIC));
        let restored = TriMod::from_bundle(&ModelBundle::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(restored.epochs_done, 3);
        assert_eq!(restored.train, TrainConfig::default());
        let r = restored.model;
        for (_, p) in m.store.iter() {
            let q = r.store.value(r.store.require(&p.name).unwrap());
            assert!(p.value.max_abs_diff(q) < 1e-6);
        }
        let mut visual = VisualFeatureStore::new(3);
        visual.insert("a", vec![0.1, 0.2, 0.3]).unwrap();
        let a = m.predict(&m.prepare(&posts[0], &visual).unwrap()).unwrap();
        let b = r.predict(&r.prepare(&posts[0], &visual).unwrap()).unwrap();
        assert_eq!(a.tags, b.tags);
        assert!(a.emissions.max_abs_diff(&b.emissions) < 1e-5);
        // saving the restored bundle reproduces the file
        let again = r.to_bundle(&TrainConfig::default(), 3).to_bytes().unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn identical_bundles_give_identical_bytes() {
        let (a, _) = model(false);
        let (b, _) = model(false);
        let cfg = TrainConfig::default();
        assert_eq!(a.to_bundle(&cfg, 0).to_bytes().unwrap(), b.to_bundle(&cfg, 0).to_bytes().unwrap());
    }

    #[test]
    fn truncated_payload() {
        let (m, _) = model(false);
        let bytes = m.to_bundle(&TrainConfig::default(), 0).to_bytes().unwrap();
        let err = ModelBundle::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("unexpected end of payload"), "{err}");
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(ModelBundle::from_bytes(&longer).is_err());
    }

    #[test]
    fn wrong_magic_is_version_error() {
        assert!(matches!(ModelBundle::from_bytes(b"TRIMOD2\nversion 2\nend\n"), Err(Error::Version(_))));
        assert!(matches!(ModelBundle::from_bytes(b"hello"), Err(Error::Version(_))));
        assert!(matches!(ModelBundle::from_bytes(b"TRIMOD1\nversion 9\nend\n"), Err(Error::Version(_))));
    }

    #[test]
    fn unknown_header_lines_are_ignored() {
        let b = ModelBundle::from_bytes(b"TRIMOD1\nversion 1\nfuture stuff here\nconfig a.b 1\nend\n").unwrap();
        assert_eq!(b.config_value("a.b"), Some("1"));
    }

    #[test]
    fn file_round_trip_and_io_error() {
        let (m, _) = model(true);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.trimod");
        save(&m.to_bundle(&TrainConfig::default(), 0), &path).unwrap();
        let seg = load_segmenter(&path).unwrap();
        assert_eq!(seg.dims().hidden, 2);
        let err = load(dir.path().join("missing")).unwrap_err();
        assert!(err.to_string().contains("missing"));
    }
}
