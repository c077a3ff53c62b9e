//! The full tagger: text encoder, hashtag feature, fusion, emissions and CRF.

use rand::Rng;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::crf::{CrfLayer, EmissionHead};
use crate::data::{Post, VisualFeatureStore};
use crate::dropout::Dropout;
use crate::embeddings::{CharTable, WordTable, WordVectors};
use crate::encoders::{EncoderDims, TextEncoder, CHAR_TABLE, WORD_TABLE};
use crate::error::{Error, Result};
use crate::fusion::{FusionParams, Modality};
use crate::labels::{Tag, NUM_LABELS};
use crate::segmenter::{hashtag_feature, hashtag_words, Segmenter};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderDims,
    pub fused: usize,
    pub visual: usize,
    /// Hold BIO2-invalid transitions at the forbidden score.
    pub bio2_constraints: bool,
    /// Fuse only the text feature.
    pub text_only: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderDims::default(),
            fused: 300,
            visual: 2048,
            bio2_constraints: false,
            text_only: false,
        }
    }
}

impl ModelConfig {
    /// `(key, value)` pairs for serialization.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let e = &self.encoder;
        [
            ("model.word_dim", e.word.to_string()),
            ("model.char_embedding_dim", e.char_embedding.to_string()),
            ("model.char_hidden", e.char_hidden.to_string()),
            ("model.word_hidden", e.word_hidden.to_string()),
            ("model.fused_dim", self.fused.to_string()),
            ("model.visual_dim", self.visual.to_string()),
            ("model.bio2_constraints", self.bio2_constraints.to_string()),
            ("model.text_only", self.text_only.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut c = ModelConfig::default();
        for (k, v) in pairs {
            let num = || v.parse::<usize>().map_err(|_| Error::Format(format!("bad value `{v}` for `{k}`")));
            let flag = || v.parse::<bool>().map_err(|_| Error::Format(format!("bad value `{v}` for `{k}`")));
            match k {
                "model.word_dim" => c.encoder.word = num()?,
                "model.char_embedding_dim" => c.encoder.char_embedding = num()?,
                "model.char_hidden" => c.encoder.char_hidden = num()?,
                "model.word_hidden" => c.encoder.word_hidden = num()?,
                "model.fused_dim" => c.fused = num()?,
                "model.visual_dim" => c.visual = num()?,
                "model.bio2_constraints" => c.bio2_constraints = flag()?,
                "model.text_only" => c.text_only = flag()?,
                _ => {}
            }
        }
        Ok(c)
    }
}

/// Everything the graph needs for one post, computed once.
#[derive(Debug, Clone)]
pub struct PostInput {
    pub tokens: Vec<String>,
    pub visual: Vec<f64>,
    pub hashtag_words: Vec<String>,
    pub gold: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub tags: Vec<Tag>,
    pub score: f64,
    /// Emission matrix `[n × L]`.
    pub emissions: Tensor,
    /// Per-token attention weights in text, visual, hashtag order (text only
    /// in text-only mode).
    pub weights: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct TriMod {
    pub store: ParamStore,
    pub config: ModelConfig,
    pub encoder: TextEncoder,
    pub fusion: FusionParams,
    pub emission: EmissionHead,
    pub crf: CrfLayer,
    pub segmenter: Option<Segmenter>,
}

impl TriMod {
    /// Fresh model whose vocabularies come from `posts` (and `vectors`, if
    /// given, which also fixes the word dimension).
    pub fn new<R: Rng>(
        config: ModelConfig,
        posts: &[Post],
        vectors: Option<&WordVectors>,
        segmenter: Option<Segmenter>,
        rng: &mut R,
    ) -> Result<Self> {
        let mut config = config;
        let mut store = ParamStore::new();
        let mut words: Vec<String> = Vec::new();
        let mut chars: Vec<char> = Vec::new();
        for p in posts {
            for t in &p.tokens {
                words.push(t.clone());
                chars.extend(t.chars());
            }
            words.extend(hashtag_words(&p.hashtags, segmenter.as_ref())?);
        }
        let word_table = match vectors {
            Some(v) => {
                config.encoder.word = v.dim;
                let mut merged = v.clone();
                let known: std::collections::HashSet<&str> = v.words.iter().map(String::as_str).collect();
                let mut extra: Vec<String> = words.iter().filter(|w| !known.contains(w.as_str())).cloned().collect();
                extra.sort();
                extra.dedup();
                for w in extra {
                    merged.words.push(w);
                    merged
                        .values
                        .extend((0..v.dim).map(|_| rng.gen_range(-crate::embeddings::INIT_RANGE..crate::embeddings::INIT_RANGE)));
                }
                WordTable::from_vectors(&mut store, WORD_TABLE, &merged, rng)?
            }
            None => WordTable::random(&mut store, WORD_TABLE, words, config.encoder.word, rng)?,
        };
        let char_table = CharTable::random(&mut store, CHAR_TABLE, chars, config.encoder.char_embedding, rng)?;
        let encoder = TextEncoder::new(&mut store, word_table, char_table, config.encoder, rng)?;
        let fusion = FusionParams::new(
            &mut store,
            config.fused,
            [config.encoder.sentence(), config.visual, config.encoder.word],
            rng,
        )?;
        let emission = EmissionHead::new(&mut store, config.fused, NUM_LABELS, rng)?;
        let crf = CrfLayer::new(&mut store, NUM_LABELS, config.bio2_constraints)?;
        Ok(TriMod {
            store,
            config,
            encoder,
            fusion,
            emission,
            crf,
            segmenter,
        })
    }

    /// Rebind every component to an existing store.
    pub fn from_parts(
        store: ParamStore,
        config: ModelConfig,
        words: crate::embeddings::Vocab<String>,
        chars: crate::embeddings::Vocab<char>,
        segmenter: Option<Segmenter>,
    ) -> Result<Self> {
        let word_table = WordTable::attach(&store, WORD_TABLE, words)?;
        let char_table = CharTable::attach(&store, CHAR_TABLE, chars)?;
        let encoder = TextEncoder::attach(&store, word_table, char_table)?;
        if encoder.dims() != config.encoder {
            return Err(Error::Format("stored encoder sizes disagree with the configuration".into()));
        }
        let fusion = FusionParams::attach(&store)?;
        let expected = [config.encoder.sentence(), config.visual, config.encoder.word];
        if fusion.inputs != expected || fusion.dim != config.fused {
            return Err(Error::Format("stored fusion sizes disagree with the configuration".into()));
        }
        let emission = EmissionHead::attach(&store)?;
        let crf = CrfLayer::attach(&store, NUM_LABELS, config.bio2_constraints)?;
        let mut model = TriMod {
            store,
            config,
            encoder,
            fusion,
            emission,
            crf,
            segmenter,
        };
        let crf = model.crf.clone();
        crf.apply_pins(&mut model.store);
        Ok(model)
    }

    pub fn prepare(&self, post: &Post, visual: &VisualFeatureStore) -> Result<PostInput> {
        if visual.dim() != self.config.visual {
            return Err(Error::Config(format!(
                "visual features are {}-dimensional but the model expects {}",
                visual.dim(),
                self.config.visual
            )));
        }
        Ok(PostInput {
            tokens: post.tokens.clone(),
            visual: visual.for_post(post),
            hashtag_words: hashtag_words(&post.hashtags, self.segmenter.as_ref())?,
            gold: post.tags.as_ref().map(|t| t.iter().map(|x| x.index()).collect()),
        })
    }

    /// Emission matrix and per-token fusion weights.
    pub fn emissions(&self, g: &mut Graph, input: &PostInput, dropout: &mut Dropout) -> Result<(Var, Vec<Var>)> {
        let gt = self.encoder.sentence_encode(g, &input.tokens, dropout)?;
        let visual = g.input(Tensor::vector(input.visual.clone()));
        let hashtag = hashtag_feature(g, &self.encoder.words, &input.hashtag_words)?;
        let fused = self.fusion.fuse_post(g, &gt, visual, hashtag, self.config.text_only)?;
        let vectors: Vec<Var> = fused.iter().map(|f| f.vector).collect();
        let e = self.emission.forward(g, &vectors)?;
        Ok((e, fused.iter().map(|f| f.weights).collect()))
    }

    /// Negative log-likelihood of the gold tags (summed over the sequence).
    pub fn nll(&self, g: &mut Graph, input: &PostInput, dropout: &mut Dropout) -> Result<Var> {
        let gold = input
            .gold
            .as_ref()
            .ok_or_else(|| Error::Contract("training post has no tags".into()))?;
        let (e, _) = self.emissions(g, input, dropout)?;
        let t = g.param(self.crf.transitions);
        g.crf_nll(e, t, gold)
    }

    pub fn predict(&self, input: &PostInput) -> Result<Prediction> {
        let mut g = Graph::new(&self.store);
        let (e, weights) = self.emissions(&mut g, input, &mut Dropout::off())?;
        let emissions = g.value(e).clone();
        let (path, score) = self.crf.decode(&self.store, &emissions)?;
        let tags = path
            .into_iter()
            .map(|i| Tag::from_index(i).ok_or_else(|| Error::Contract(format!("label index {i} out of range"))))
            .collect::<Result<Vec<_>>>()?;
        let weights = weights.iter().map(|w| g.value(*w).data().to_vec()).collect();
        Ok(Prediction {
            tags,
            score,
            emissions,
            weights,
        })
    }

    pub fn modalities(&self) -> Vec<Modality> {
        if self.config.text_only {
            vec![Modality::Text]
        } else {
            Modality::ALL.to_vec()
        }
    }
}
