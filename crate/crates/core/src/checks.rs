//! Gradient checks for each model component at small sizes.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::crf::{CrfLayer, EmissionHead};
use crate::data::{parse_corpus_str, VisualFeatureStore};
use crate::dropout::Dropout;
use crate::embeddings::{CharTable, WordTable};
use crate::encoders::{EncoderDims, TextEncoder, CHAR_TABLE, WORD_TABLE};
use crate::error::{Error, Result};
use crate::fusion::{FusionParams, Modality};
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::labels::NUM_LABELS;
use crate::model::{ModelConfig, TriMod};
use crate::segmenter::{SegmentationExample, Segmenter, SegmenterDims};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckModule {
    Embeddings,
    Encoders,
    Segmenter,
    Fusion,
    Emissions,
    Loss,
    EndToEnd,
}

impl CheckModule {
    pub const ALL: [CheckModule; 7] = [
        CheckModule::Embeddings,
        CheckModule::Encoders,
        CheckModule::Segmenter,
        CheckModule::Fusion,
        CheckModule::Emissions,
        CheckModule::Loss,
        CheckModule::EndToEnd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CheckModule::Embeddings => "embeddings",
            CheckModule::Encoders => "encoders",
            CheckModule::Segmenter => "segmenter",
            CheckModule::Fusion => "fusion",
            CheckModule::Emissions => "emissions",
            CheckModule::Loss => "loss",
            CheckModule::EndToEnd => "end-to-end",
        }
    }
}

impl fmt::Display for CheckModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CheckModule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        CheckModule::ALL
            .into_iter()
            .find(|m| m.as_str() == s || (s == "nll" && *m == CheckModule::Loss) || (s == "crf" && *m == CheckModule::Loss))
            .ok_or_else(|| {
                let names: Vec<_> = CheckModule::ALL.iter().map(|m| m.as_str()).collect();
                Error::Config(format!("unknown module `{s}`; expected one of {}", names.join(", ")))
            })
    }
}

/// Reduce a list of vectors to a scalar through fixed random weights.
fn project(g: &mut Graph, outputs: &[Var], seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total: Option<Var> = None;
    for &o in outputs {
        let shape = g.shape(o).to_vec();
        let w = g.input(Tensor::uniform(&shape, 1.0, &mut rng));
        let m = g.mul(o, w)?;
        let s = g.sum(m);
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    total.ok_or_else(|| Error::Contract("nothing to project".into()))
}

const WORDS: [&str; 4] = ["Alice", "visits", "Paris", "today"];

fn tiny_dims() -> EncoderDims {
    EncoderDims {
        word: 3,
        char_embedding: 2,
        char_hidden: 2,
        word_hidden: 3,
    }
}

fn tiny_encoder(rng: &mut ChaCha8Rng) -> Result<(ParamStore, TextEncoder)> {
    let dims = tiny_dims();
    let mut store = ParamStore::new();
    let words = WordTable::random(&mut store, WORD_TABLE, WORDS.iter().map(|w| w.to_string()), dims.word, rng)?;
    let chars = CharTable::random(&mut store, CHAR_TABLE, WORDS.iter().flat_map(|w| w.chars()), dims.char_embedding, rng)?;
    let enc = TextEncoder::new(&mut store, words, chars, dims, rng)?;
    Ok((store, enc))
}

/// Run the finite-difference check for one component.
pub fn check_module(module: CheckModule, eps: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc4ec + module as u64);
    match module {
        CheckModule::Embeddings => {
            let (mut store, enc) = tiny_encoder(&mut rng)?;
            let ids = vec![enc.words.matrix, enc.chars.matrix];
            grad_check(&mut store, &ids, eps, |g| {
                let mut outs = Vec::new();
                for w in WORDS.iter().chain(["unseen"].iter()) {
                    let e = enc.words.embed(g, w)?;
                    outs.push(g.tanh(e));
                    for c in enc.chars.embed(g, w)? {
                        outs.push(g.tanh(c));
                    }
                }
                project(g, &outs, 1)
            })
        }
        CheckModule::Encoders => {
            let (mut store, enc) = tiny_encoder(&mut rng)?;
            let ids: Vec<_> = (0..store.len()).collect();
            grad_check(&mut store, &ids, eps, |g| {
                let mut d = Dropout::new(0.5, 3)?;
                let outs = enc.sentence_encode(g, &WORDS, &mut d)?;
                project(g, &outs, 2)
            })
        }
        CheckModule::Segmenter => {
            let dims = SegmenterDims {
                embedding: 3,
                filters: 3,
                hidden: 3,
            };
            let ex = SegmentationExample::from_words(&["big", "day"])?;
            let mut seg = Segmenter::new(ex.chars.iter().copied(), dims, &mut rng)?;
            let ids = seg.params();
            let model = seg.clone();
            grad_check(&mut seg.store, &ids, eps, |g| model.loss(g, &ex))
        }
        CheckModule::Fusion => {
            let mut store = ParamStore::new();
            let fusion = FusionParams::new(&mut store, 3, [4, 2, 3], &mut rng)?;
            let feats = [
                (Modality::Text, Tensor::uniform(&[4], 1.0, &mut rng)),
                (Modality::Visual, Tensor::uniform(&[2], 1.0, &mut rng)),
                (Modality::Hashtag, Tensor::uniform(&[3], 1.0, &mut rng)),
            ];
            let ids = fusion.params();
            grad_check(&mut store, &ids, eps, |g| {
                let inputs: Vec<_> = feats.iter().map(|(m, t)| (*m, g.input(t.clone()))).collect();
                let fused = fusion.fuse(g, &inputs)?;
                project(g, &[fused.vector, fused.weights], 3)
            })
        }
        CheckModule::Emissions => {
            let mut store = ParamStore::new();
            let head = EmissionHead::new(&mut store, 4, NUM_LABELS, &mut rng)?;
            let xs: Vec<Tensor> = (0..3).map(|_| Tensor::uniform(&[4], 1.0, &mut rng)).collect();
            let ids = vec![head.weight, head.bias];
            grad_check(&mut store, &ids, eps, |g| {
                let vars: Vec<_> = xs.iter().map(|x| g.input(x.clone())).collect();
                let e = head.forward(g, &vars)?;
                project(g, &[e], 4)
            })
        }
        CheckModule::Loss => {
            let mut store = ParamStore::new();
            let p = store.add("emissions", Tensor::uniform(&[4, NUM_LABELS], 0.5, &mut rng))?;
            let crf = CrfLayer::new(&mut store, NUM_LABELS, true)?;
            let noise = Tensor::uniform(store.value(crf.transitions).shape(), 0.5, &mut rng);
            for (x, n) in store.value_mut(crf.transitions).data_mut().iter_mut().zip(noise.data()) {
                *x += n;
            }
            crf.apply_pins(&mut store);
            let gold = [1, 5, 0, 2];
            let ids = vec![p, crf.transitions];
            grad_check(&mut store, &ids, eps, |g| {
                let (e, t) = (g.param(p), g.param(crf.transitions));
                g.crf_nll(e, t, &gold)
            })
        }
        CheckModule::EndToEnd => {
            let corpus = "# img: p1\nAlice\tB-PER\nvisits\tO\nParis\tB-LOC\n#CityLife\tO\n";
            let posts = parse_corpus_str(corpus, "check")?;
            let config = ModelConfig {
                encoder: tiny_dims(),
                fused: 3,
                visual: 2,
                ..Default::default()
            };
            let mut m = TriMod::new(config, &posts, None, None, &mut rng)?;
            let mut visual = VisualFeatureStore::new(2);
            visual.insert("p1", vec![0.4, -0.7])?;
            let input = m.prepare(&posts[0], &visual)?;
            let ids: Vec<_> = (0..m.store.len()).collect();
            let model = m.clone();
            grad_check(&mut m.store, &ids, eps, |g| {
                let mut d = Dropout::new(0.5, 9)?;
                model.nll(g, &input, &mut d)
            })
        }
    }
}
