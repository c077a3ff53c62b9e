//! Multimodal named-entity tagging for social-media posts.
//!
//! Text is encoded with a character-level and a word-level Bi-GRU, hashtags
//! are segmented into words by a small character model, and the per-token
//! text features are fused with post-level visual and hashtag vectors by
//! exponentiated attention scores before a linear-chain CRF decodes BIO2
//! labels. Everything runs on a small define-by-run autodiff core.

pub mod autodiff;
pub mod bundle;
pub mod checks;
pub mod crf;
pub mod data;
pub mod dropout;
pub mod embeddings;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod gradcheck;
pub mod labels;
pub mod model;
pub mod optim;
pub mod segmenter;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
