//! Corpus, visual-feature and batching utilities.
//!
//! Corpus files are UTF-8. A post is an optional `# img: <id>` header line
//! followed by one token per line as `<token>\t<tag>` (the tag column may be
//! absent for prediction input). Columns after the tag are ignored. Posts are
//! separated by a blank line.
//!
//! Visual feature files start with `dim <d>` and then hold one
//! `<image_id> <v_1> … <v_d>` row per image.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::evaluation::{extract_spans, SpanMode};
use crate::labels::{EntityType, Tag};

const IMG_HEADER: &str = "# img:";

#[derive(Debug, Clone, PartialEq)]
pub struct Post {
    pub tokens: Vec<String>,
    pub tags: Option<Vec<Tag>>,
    pub image_id: Option<String>,
    /// Hashtag bodies (leading `#` removed), in token order.
    pub hashtags: Vec<String>,
}

impl Post {
    pub fn new(tokens: Vec<String>, tags: Option<Vec<Tag>>, image_id: Option<String>) -> Result<Self> {
        if let Some(t) = &tags {
            if t.len() != tokens.len() {
                return Err(Error::Contract(format!(
                    "{} tokens but {} tags",
                    tokens.len(),
                    t.len()
                )));
            }
        }
        let hashtags = extract_hashtags(&tokens);
        Ok(Post {
            tokens,
            tags,
            image_id,
            hashtags,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Hashtag bodies of every token that starts with `#`.
///
/// Tokens that are only `#` characters or whose body contains whitespace are
/// skipped.
pub fn extract_hashtags<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    tokens
        .iter()
        .filter_map(|t| {
            let t = t.as_ref();
            let body = t.strip_prefix('#')?.trim_start_matches('#');
            (!body.is_empty() && !body.chars().any(char::is_whitespace)).then(|| body.to_string())
        })
        .collect()
}

/// Parse corpus text. `origin` names the source in error messages.
pub fn parse_corpus_str(text: &str, origin: &str) -> Result<Vec<Post>> {
    let mut posts = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    let mut tags: Vec<Option<Tag>> = Vec::new();
    let mut image: Option<String> = None;
    let mut block_start = 1;

    let mut flush = |tokens: &mut Vec<String>,
                     tags: &mut Vec<Option<Tag>>,
                     image: &mut Option<String>,
                     line: usize|
     -> Result<()> {
        if tokens.is_empty() {
            if image.is_some() {
                return Err(Error::parse(origin, line, "image header without tokens"));
            }
            return Ok(());
        }
        let tagged = tags.iter().filter(|t| t.is_some()).count();
        let tag_seq = if tagged == tags.len() {
            Some(tags.iter().map(|t| t.expect("tagged")).collect())
        } else if tagged == 0 {
            None
        } else {
            return Err(Error::parse(origin, line, "post mixes tagged and untagged tokens"));
        };
        posts.push(Post::new(std::mem::take(tokens), tag_seq, image.take())?);
        tags.clear();
        Ok(())
    };

    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            flush(&mut tokens, &mut tags, &mut image, block_start)?;
            block_start = lineno + 1;
            continue;
        }
        if let Some(rest) = line.strip_prefix(IMG_HEADER).filter(|_| !line.contains('\t')) {
            if !tokens.is_empty() {
                return Err(Error::parse(origin, lineno, "image header after tokens"));
            }
            let id = rest.trim();
            if id.is_empty() {
                return Err(Error::parse(origin, lineno, "empty image id"));
            }
            image = Some(id.to_string());
            continue;
        }
        let (token, tag) = match line.split_once('\t') {
            Some((tok, rest)) => {
                let tag = rest.split('\t').next().unwrap_or("").trim();
                let parsed = tag
                    .parse::<Tag>()
                    .map_err(|_| Error::parse(origin, lineno, format!("unknown tag `{tag}`")))?;
                (tok, Some(parsed))
            }
            None => (line, None),
        };
        if token.is_empty() {
            return Err(Error::parse(origin, lineno, "empty token"));
        }
        tokens.push(token.to_string());
        tags.push(tag);
    }
    flush(&mut tokens, &mut tags, &mut image, block_start)?;
    Ok(posts)
}

pub fn parse_corpus(path: impl AsRef<Path>) -> Result<Vec<Post>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus_str(&text, &path.display().to_string())
}

/// Serialize posts in corpus format.
pub fn write_corpus(posts: &[Post]) -> String {
    let mut out = String::new();
    for (i, post) in posts.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        if let Some(id) = &post.image_id {
            let _ = writeln!(out, "{IMG_HEADER} {id}");
        }
        for (j, tok) in post.tokens.iter().enumerate() {
            match &post.tags {
                Some(tags) => {
                    let _ = writeln!(out, "{tok}\t{}", tags[j]);
                }
                None => {
                    let _ = writeln!(out, "{tok}");
                }
            }
        }
    }
    out
}

/// Image-id keyed visual feature vectors of one fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatureStore {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl VisualFeatureStore {
    pub fn new(dim: usize) -> Self {
        VisualFeatureStore {
            dim,
            vectors: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, id: impl Into<String>, v: Vec<f64>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Contract(format!(
                "visual vector has {} values, store dimension is {}",
                v.len(),
                self.dim
            )));
        }
        let id = id.into();
        if self.vectors.insert(id.clone(), v).is_some() {
            warn!("duplicate visual feature id `{id}`; keeping the last one");
        }
        Ok(())
    }

    /// Add every vector of `other`, which must share this store's dimension.
    pub fn merge(&mut self, other: &VisualFeatureStore) -> Result<()> {
        let mut ids: Vec<&String> = other.vectors.keys().collect();
        ids.sort();
        for id in ids {
            self.insert(id.clone(), other.vectors[id].clone())?;
        }
        Ok(())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.vectors.contains_key(id)
    }

    /// The stored vector, or zeros (with a warning) for an unknown id.
    pub fn lookup(&self, id: &str) -> Vec<f64> {
        match self.vectors.get(id) {
            Some(v) => v.clone(),
            None => {
                warn!("no visual features for image `{id}`; using zeros");
                vec![0.0; self.dim]
            }
        }
    }

    /// Vector for a post; posts without an image get zeros silently.
    pub fn for_post(&self, post: &Post) -> Vec<f64> {
        match &post.image_id {
            Some(id) => self.lookup(id),
            None => vec![0.0; self.dim],
        }
    }

    pub fn to_text(&self) -> String {
        let mut ids: Vec<&String> = self.vectors.keys().collect();
        ids.sort();
        let mut out = format!("dim {}\n", self.dim);
        for id in ids {
            out.push_str(id);
            for v in &self.vectors[id] {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn parse_visual_features_str(text: &str, origin: &str) -> Result<VisualFeatureStore> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(origin, 1, "missing `dim <d>` header"))?;
    let dim: usize = header
        .trim()
        .strip_prefix("dim")
        .map(str::trim)
        .and_then(|d| d.parse().ok())
        .filter(|d| *d > 0)
        .ok_or_else(|| Error::parse(origin, 1, format!("expected `dim <d>`, found `{header}`")))?;
    let mut store = VisualFeatureStore::new(dim);
    for (i, line) in lines {
        let lineno = i + 1;
        let mut fields = line.split_whitespace();
        let id = fields.next().expect("non-empty line");
        let values = fields
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::parse(origin, lineno, format!("bad number: {e}")))?;
        if values.len() != dim {
            return Err(Error::parse(
                origin,
                lineno,
                format!("expected {dim} values, found {}", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse(origin, lineno, "non-finite value"));
        }
        store.insert(id, values)?;
    }
    Ok(store)
}

pub fn load_visual_features(path: impl AsRef<Path>) -> Result<VisualFeatureStore> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_visual_features_str(&text, &path.display().to_string())
}

/// Entity counts per type for one corpus split.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CorpusStats {
    pub per_type: [usize; 4],
}

impl CorpusStats {
    pub fn count(&self, kind: EntityType) -> usize {
        self.per_type[kind.index()]
    }

    pub fn total(&self) -> usize {
        self.per_type.iter().sum()
    }
}

/// Count entity spans (lenient BIO2 extraction) per type. Untagged posts are
/// skipped.
pub fn corpus_stats(posts: &[Post]) -> CorpusStats {
    let mut stats = CorpusStats::default();
    for tags in posts.iter().filter_map(|p| p.tags.as_ref()) {
        for span in extract_spans(tags, SpanMode::Lenient) {
            stats.per_type[span.kind.index()] += 1;
        }
    }
    stats
}

/// Entity-type × split table.
pub fn stats_table(splits: &[(&str, CorpusStats)]) -> String {
    let widths: Vec<usize> = splits.iter().map(|(name, _)| name.chars().count().max(12)).collect();
    let mut out = format!("{:<14}", "Entity Type");
    for ((name, _), w) in splits.iter().zip(&widths) {
        let _ = write!(out, " {name:>w$}");
    }
    out.push('\n');
    let mut row = |label: &str, value: &dyn Fn(&CorpusStats) -> usize| {
        let _ = write!(out, "{label:<14}");
        for ((_, s), w) in splits.iter().zip(&widths) {
            let _ = write!(out, " {:>w$}", value(s));
        }
        out.push('\n');
    };
    for kind in EntityType::ALL {
        row(kind.long_name(), &|s| s.count(kind));
    }
    row("Total", &|s| s.total());
    out
}

/// Shuffle `0..n` under `seed` and cut it into chunks of `batch_size`; the
/// last chunk may be short.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Contract("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

pub fn split_batches(posts: &[Post], batch_size: usize, seed: u64) -> Result<Vec<Vec<&Post>>> {
    Ok(batch_indices(posts.len(), batch_size, seed)?
        .into_iter()
        .map(|b| b.into_iter().map(|i| &posts[i]).collect())
        .collect())
}

/// One word per line; blank lines and surrounding whitespace ignored.
pub fn load_wordlist(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_wordlist(&text))
}

pub fn parse_wordlist(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}
