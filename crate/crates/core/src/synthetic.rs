//! Deterministic synthetic corpora used by the experiments and tests.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{write_corpus, Post, VisualFeatureStore};
use crate::error::Result;
use crate::labels::{EntityType, Tag};

const PER: &[&str] = &["Alice", "Bob Marley", "Carlos", "Diana Ross", "Emma", "Farid", "Grace Kelly", "Hiro"];
const LOC: &[&str] = &["Paris", "New York", "Tokyo", "Berlin", "Cairo", "San Diego", "Oslo", "Lima"];
const ORG: &[&str] = &["Google", "NASA", "Maple Leafs", "Toyota", "UNICEF", "Real Madrid", "Netflix", "Boeing"];
const MISC: &[&str] = &["German Shepherd", "Olympics", "Christmas", "iPhone", "World Cup", "Ramadan", "Oscars", "Bitcoin"];

const TEMPLATES: &[&str] = &[
    "just met {PER} in {LOC} today !",
    "{ORG} is hiring in {LOC} again",
    "watching the {MISC} with {PER} tonight",
    "can not believe {ORG} beat {ORG} lol",
    "{PER} says {LOC} is the best city",
    "my {MISC} photo from {LOC}",
    "great talk by {PER} at {ORG}",
    "who else loves the {MISC} ?",
    "flying to {LOC} for the {MISC}",
    "{PER} and {PER} at the {ORG} game",
];

const HASHTAGS: &[&str] = &["#PlayingWithDog", "#TonightGame", "#TravelDiaries", "#BreakingNews", "#BestDayEver", "#MondayMood"];

fn names(kind: EntityType) -> &'static [&'static str] {
    match kind {
        EntityType::Per => PER,
        EntityType::Loc => LOC,
        EntityType::Org => ORG,
        EntityType::Misc => MISC,
    }
}

fn push_entity(tokens: &mut Vec<String>, tags: &mut Vec<Tag>, name: &str, kind: EntityType) {
    for (i, w) in name.split(' ').enumerate() {
        tokens.push(w.to_string());
        tags.push(if i == 0 { Tag::B(kind) } else { Tag::I(kind) });
    }
}

fn fill(template: &str, rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<Tag>, Vec<EntityType>) {
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    let mut kinds = Vec::new();
    for word in template.split(' ') {
        let kind = match word {
            "{PER}" => Some(EntityType::Per),
            "{LOC}" => Some(EntityType::Loc),
            "{ORG}" => Some(EntityType::Org),
            "{MISC}" => Some(EntityType::Misc),
            _ => None,
        };
        match kind {
            Some(k) => {
                let name = names(k).choose(rng).expect("non-empty");
                push_entity(&mut tokens, &mut tags, name, k);
                kinds.push(k);
            }
            None => {
                tokens.push(word.to_string());
                tags.push(Tag::O);
            }
        }
    }
    (tokens, tags, kinds)
}

/// Prototype vector of an entity type in `dim` dimensions.
fn prototype(kind: EntityType, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed + kind.index() as u64);
    (0..dim).map(|_| normal(&mut rng)).collect()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn noisy(base: &[f64], scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    base.iter().map(|b| b + scale * normal(rng)).collect()
}

/// Templated posts with hashtags and one image each. The image vector is
/// the mean prototype of the entity types in the post plus noise.
pub fn memorization_corpus(count: usize, visual_dim: usize, seed: u64) -> Result<(Vec<Post>, VisualFeatureStore)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut posts = Vec::with_capacity(count);
    let mut visual = VisualFeatureStore::new(visual_dim);
    for i in 0..count {
        let template = TEMPLATES[i % TEMPLATES.len()];
        let (mut tokens, mut tags, kinds) = fill(template, &mut rng);
        if rng.gen_bool(0.5) {
            tokens.push(HASHTAGS.choose(&mut rng).expect("non-empty").to_string());
            tags.push(Tag::O);
        }
        let id = format!("img{i:03}");
        let mut v = vec![0.0; visual_dim];
        for k in &kinds {
            for (a, b) in v.iter_mut().zip(prototype(*k, visual_dim)) {
                *a += b / kinds.len().max(1) as f64;
            }
        }
        visual.insert(id.clone(), noisy(&v, 0.1, &mut rng))?;
        posts.push(Post::new(tokens, Some(tags), Some(id))?);
    }
    Ok((posts, visual))
}

const AMBIGUOUS: &[&str] = &["Jordan", "Phoenix", "Georgia", "Amazon", "Orion", "Victoria"];
const NEUTRAL: &[&str] = &[
    "look at {X} today",
    "{X} is everywhere right now",
    "so much news about {X}",
    "did you see {X} ?",
    "all about {X} this week",
];

/// Posts whose text never reveals the entity type: the same ambiguous names
/// appear in the same neutral templates under every type. Only the image
/// vector (the type prototype plus noise) tells the types apart.
pub fn multimodal_corpus(count: usize, visual_dim: usize, seed: u64, id_prefix: &str) -> Result<(Vec<Post>, VisualFeatureStore)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut posts = Vec::with_capacity(count);
    let mut visual = VisualFeatureStore::new(visual_dim);
    for i in 0..count {
        let kind = EntityType::ALL[i % 4];
        let template = NEUTRAL.choose(&mut rng).expect("non-empty");
        let name = AMBIGUOUS.choose(&mut rng).expect("non-empty");
        let mut tokens = Vec::new();
        let mut tags = Vec::new();
        for word in template.split(' ') {
            if word == "{X}" {
                push_entity(&mut tokens, &mut tags, name, kind);
            } else {
                tokens.push(word.to_string());
                tags.push(Tag::O);
            }
        }
        let id = format!("{id_prefix}{i:04}");
        visual.insert(id.clone(), noisy(&prototype(kind, visual_dim), 0.3, &mut rng))?;
        posts.push(Post::new(tokens, Some(tags), Some(id))?);
    }
    Ok((posts, visual))
}

pub const MEMORIZATION_POSTS: usize = 50;
pub const MULTIMODAL_TRAIN_POSTS: usize = 240;
pub const MULTIMODAL_DEV_POSTS: usize = 80;
pub const SYNTHETIC_VISUAL_DIM: usize = 16;

/// Contents of the corpus files shipped under `data/`, keyed by file name.
pub fn bundled_files() -> Result<Vec<(&'static str, String)>> {
    let (mem, mem_visual) = memorization_corpus(MEMORIZATION_POSTS, SYNTHETIC_VISUAL_DIM, 7)?;
    let (train, mut visual) = multimodal_corpus(MULTIMODAL_TRAIN_POSTS, SYNTHETIC_VISUAL_DIM, 11, "mtr")?;
    let (dev, dev_visual) = multimodal_corpus(MULTIMODAL_DEV_POSTS, SYNTHETIC_VISUAL_DIM, 12, "mdv")?;
    visual.merge(&dev_visual)?;
    Ok(vec![
        ("memorization.conll", write_corpus(&mem)),
        ("memorization.visual", mem_visual.to_text()),
        ("multimodal_train.conll", write_corpus(&train)),
        ("multimodal_dev.conll", write_corpus(&dev)),
        ("multimodal.visual", visual.to_text()),
    ])
}
