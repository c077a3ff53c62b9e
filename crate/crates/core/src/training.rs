//! Mini-batch SGD over the CRF loss with decay, dropout, gradient
//! accumulation, clipping and L1/L2 penalties.

use std::fmt::Write as _;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::data::{batch_indices, Post, VisualFeatureStore};
use crate::dropout::Dropout;
use crate::error::{Error, Result};
use crate::evaluation::{EvalReport, SpanMode};
use crate::model::{ModelConfig, PostInput, TriMod};

pub use crate::dropout::{dropout_mask, DropoutSite};
pub use crate::optim::sgd_step;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub accumulation_steps: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub seed: u64,
    pub l1: f64,
    pub l2: f64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.005,
            lr_decay: 0.05,
            batch_size: 10,
            accumulation_steps: 9,
            dropout: 0.55,
            epochs: 50,
            seed: 1,
            l1: 0.0,
            l2: 0.0,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("learning_rate", self.learning_rate),
            ("lr_decay", self.lr_decay),
            ("l1", self.l1),
            ("l2", self.l2),
            ("clip_norm", self.clip_norm),
        ];
        for (name, v) in rates {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if self.batch_size == 0 || self.accumulation_steps == 0 {
            return Err(Error::Config("batch_size and k_steps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("train.learning_rate", self.learning_rate.to_string()),
            ("train.lr_decay", self.lr_decay.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.k_steps", self.accumulation_steps.to_string()),
            ("train.dropout", self.dropout.to_string()),
            ("train.epochs", self.epochs.to_string()),
            ("train.seed", self.seed.to_string()),
            ("train.l1", self.l1.to_string()),
            ("train.l2", self.l2.to_string()),
            ("train.clip_norm", self.clip_norm.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// Training and model settings addressed by `key = value` names.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
}

impl RunConfig {
    /// Set one key. Keys may carry a `train.` or `model.` prefix.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bare = key
            .strip_prefix("train.")
            .or_else(|| key.strip_prefix("model."))
            .unwrap_or(key);
        let bad = || Error::Config(format!("bad value `{value}` for `{key}`"));
        let f = || value.parse::<f64>().map_err(|_| bad());
        let n = || value.parse::<usize>().map_err(|_| bad());
        let b = || value.parse::<bool>().map_err(|_| bad());
        let t = &mut self.train;
        let m = &mut self.model;
        match bare {
            "learning_rate" | "lr" => t.learning_rate = f()?,
            "lr_decay" | "learning_rate_decay" => t.lr_decay = f()?,
            "batch_size" => t.batch_size = n()?,
            "k_steps" | "accumulation_steps" => t.accumulation_steps = n()?,
            "dropout" | "dropout_rate" => t.dropout = f()?,
            "epochs" => t.epochs = n()?,
            "seed" => t.seed = value.parse().map_err(|_| bad())?,
            "l1" => t.l1 = f()?,
            "l2" => t.l2 = f()?,
            "clip_norm" => t.clip_norm = f()?,
            "word_dim" => m.encoder.word = n()?,
            "char_embedding_dim" | "dce" => m.encoder.char_embedding = n()?,
            "char_hidden" => m.encoder.char_hidden = n()?,
            "word_hidden" => m.encoder.word_hidden = n()?,
            "fused_dim" => m.fused = n()?,
            "visual_dim" => m.visual = n()?,
            "bio2_constraints" => m.bio2_constraints = b()?,
            "text_only" => m.text_only = b()?,
            _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(origin, i + 1, format!("expected `key = value`, found `{line}`")))?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::parse(origin, i + 1, e.to_string()))?;
        }
        Ok(())
    }
}

/// `learning_rate / (1 + lr_decay · epoch)` with zero-based epochs.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    config.learning_rate / (1.0 + config.lr_decay * epoch as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    /// One-based.
    pub epoch: usize,
    pub learning_rate: f64,
    /// Summed sequence loss over summed token count.
    pub mean_loss: f64,
    pub updates: usize,
    pub dev_precision: f64,
    pub dev_recall: f64,
    pub dev_f1: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<EpochRow>,
}

impl TrainReport {
    pub fn best(&self) -> Option<&EpochRow> {
        let mut best: Option<&EpochRow> = None;
        for r in &self.rows {
            if best.is_none_or(|b| r.dev_f1 > b.dev_f1) {
                best = Some(r);
            }
        }
        best
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:>5} {:>10} {:>10} {:>7} {:>8} {:>8} {:>8}\n",
            "epoch", "lr", "loss", "updates", "dev P", "dev R", "dev F1"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>5} {:>10.6} {:>10.5} {:>7} {:>8.2} {:>8.2} {:>8.2}",
                r.epoch,
                r.learning_rate,
                r.mean_loss,
                r.updates,
                100.0 * r.dev_precision,
                100.0 * r.dev_recall,
                100.0 * r.dev_f1
            );
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,learning_rate,mean_loss,updates,dev_precision,dev_recall,dev_f1\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.epoch, r.learning_rate, r.mean_loss, r.updates, r.dev_precision, r.dev_recall, r.dev_f1
            );
        }
        out
    }
}

/// Prepared inputs for a corpus.
pub fn prepare_all(model: &TriMod, posts: &[Post], visual: &VisualFeatureStore) -> Result<Vec<PostInput>> {
    posts.iter().map(|p| model.prepare(p, visual)).collect()
}

/// Entity-level scores of `model` on tagged inputs.
pub fn evaluate_inputs(model: &TriMod, inputs: &[PostInput]) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for input in inputs {
        let gold = input
            .gold
            .as_ref()
            .ok_or_else(|| Error::Contract("evaluation post has no tags".into()))?;
        let gold: Vec<_> = gold.iter().map(|&i| crate::labels::Tag::ALL[i]).collect();
        let pred = model.predict(input)?;
        report.add_sentence(&gold, &pred.tags, SpanMode::Lenient)?;
    }
    Ok(report)
}

pub fn evaluate(model: &TriMod, posts: &[Post], visual: &VisualFeatureStore) -> Result<EvalReport> {
    evaluate_inputs(model, &prepare_all(model, posts, visual)?)
}

/// Backward pass for one post, added into the stored gradients unscaled.
/// Returns the sequence loss.
pub fn accumulate_post(model: &mut TriMod, input: &PostInput, dropout: &mut Dropout) -> Result<f64> {
    let (loss, grads) = {
        let mut g = Graph::new(&model.store);
        let l = model.nll(&mut g, input, dropout)?;
        (g.value(l).item(), g.backward(l)?)
    };
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    model.store.accumulate(&grads);
    Ok(loss)
}

/// Divide the accumulated gradients by the token count they cover and take
/// one SGD step.
pub fn apply_update(model: &mut TriMod, tokens: usize, lr: f64, config: &TrainConfig) -> Result<()> {
    if tokens > 0 {
        model.store.scale_grads(1.0 / tokens as f64);
    }
    sgd_step(&mut model.store, lr, config.l1, config.l2, config.clip_norm)?;
    Ok(())
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut base = ChaCha8Rng::seed_from_u64(seed);
    base.set_stream(epoch as u64 + 1);
    base
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the best dev F1.
    pub best: TriMod,
    pub best_epoch: usize,
    pub last: TriMod,
    pub report: TrainReport,
}

/// Train from scratch.
pub fn train(
    model: TriMod,
    train_posts: &[Post],
    dev_posts: &[Post],
    visual: &VisualFeatureStore,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_from(model, 0, train_posts, dev_posts, visual, config)
}

/// Continue training with `start_epoch` epochs already done. Each epoch's
/// shuffle and dropout masks depend only on the seed and the epoch number,
/// so a resumed run retraces an uninterrupted one.
pub fn train_from(
    mut model: TriMod,
    start_epoch: usize,
    train_posts: &[Post],
    dev_posts: &[Post],
    visual: &VisualFeatureStore,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_posts.is_empty() {
        return Err(Error::Contract("empty training set".into()));
    }
    let train_inputs = prepare_all(&model, train_posts, visual)?;
    if train_inputs.iter().any(|i| i.gold.is_none()) {
        return Err(Error::Contract("every training post needs tags".into()));
    }
    let dev_inputs = prepare_all(&model, dev_posts, visual)?;
    model.store.zero_grads();

    let mut report = TrainReport::default();
    let mut best: Option<(f64, usize, TriMod)> = None;
    for epoch in start_epoch..config.epochs {
        let lr = lr_schedule(epoch, config);
        let mut rng = epoch_rng(config.seed, epoch);
        let batches = batch_indices(train_inputs.len(), config.batch_size, rng.gen())?;
        let (mut loss_sum, mut token_sum) = (0.0, 0usize);
        let (mut pending, mut pending_tokens, mut updates) = (0usize, 0usize, 0usize);
        for batch in &batches {
            for &i in batch {
                let input = &train_inputs[i];
                let mut dropout = if config.dropout > 0.0 {
                    Dropout::new(config.dropout, rng.gen())?
                } else {
                    Dropout::off()
                };
                loss_sum += accumulate_post(&mut model, input, &mut dropout)?;
                token_sum += input.tokens.len();
                pending_tokens += input.tokens.len();
            }
            pending += 1;
            if pending == config.accumulation_steps {
                apply_update(&mut model, pending_tokens, lr, config)?;
                updates += 1;
                pending = 0;
                pending_tokens = 0;
            }
        }
        if pending > 0 {
            apply_update(&mut model, pending_tokens, lr, config)?;
            updates += 1;
        }
        let dev = evaluate_inputs(&model, &dev_inputs)?;
        let row = EpochRow {
            epoch: epoch + 1,
            learning_rate: lr,
            mean_loss: loss_sum / token_sum as f64,
            updates,
            dev_precision: dev.precision(),
            dev_recall: dev.recall(),
            dev_f1: dev.f1(),
        };
        info!(
            "epoch {} lr {:.6} loss {:.5} dev F1 {:.4}",
            row.epoch, row.learning_rate, row.mean_loss, row.dev_f1
        );
        let improved = match &best {
            None => true,
            Some((f1, _, _)) => row.dev_f1 > *f1 || dev_inputs.is_empty(),
        };
        if improved {
            best = Some((row.dev_f1, row.epoch, model.clone()));
        }
        report.rows.push(row);
    }
    let (best_model, best_epoch) = match best {
        Some((_, e, m)) => (m, e),
        None => (model.clone(), start_epoch),
    };
    Ok(TrainOutcome {
        best: best_model,
        best_epoch,
        last: model,
        report,
    })
}

/// One row of a regularization comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub technique: String,
    pub f1_with: Option<f64>,
    pub f1_without: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{:.2}", 100.0 * x));
        let mut out = format!(
            "{:<34} | {:>26} | {:>29}\n",
            "Regularization Technique", "F1 (%) with Regularization", "F1 (%) without Regularization"
        );
        let _ = writeln!(out, "{}", "-".repeat(34 + 26 + 29 + 6));
        for r in &self.rows {
            let _ = writeln!(out, "{:<34} | {:>26} | {:>29}", r.technique, cell(r.f1_with), cell(r.f1_without));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let mut out = String::from("technique,f1_with,f1_without\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.technique, cell(r.f1_with), cell(r.f1_without));
        }
        out
    }
}

/// Default penalty strengths for the ablation runs.
pub const ABLATION_L1: f64 = 1e-5;
pub const ABLATION_L2: f64 = 1e-4;

/// Train a baseline with every regularizer off, then one run each with
/// dropout, L1 and L2 switched on alone. `fresh` must build an identical
/// untrained model on every call.
pub fn run_ablation<F>(
    mut fresh: F,
    train_posts: &[Post],
    dev_posts: &[Post],
    visual: &VisualFeatureStore,
    config: &TrainConfig,
) -> Result<AblationTable>
where
    F: FnMut() -> Result<TriMod>,
{
    let dropout = if config.dropout > 0.0 { config.dropout } else { TrainConfig::default().dropout };
    let l1 = if config.l1 > 0.0 { config.l1 } else { ABLATION_L1 };
    let l2 = if config.l2 > 0.0 { config.l2 } else { ABLATION_L2 };
    let base = TrainConfig {
        dropout: 0.0,
        l1: 0.0,
        l2: 0.0,
        ..config.clone()
    };
    let mut best_f1 = |cfg: &TrainConfig| -> Result<f64> {
        let out = train(fresh()?, train_posts, dev_posts, visual, cfg)?;
        Ok(out.report.best().map_or(0.0, |r| r.dev_f1))
    };
    let without = best_f1(&base)?;
    let variants = [
        ("Dropout", TrainConfig { dropout, ..base.clone() }),
        ("L1 Regularization", TrainConfig { l1, ..base.clone() }),
        ("L2 Regularization (Weight Decay)", TrainConfig { l2, ..base.clone() }),
    ];
    let mut rows = Vec::new();
    for (name, cfg) in variants {
        rows.push(AblationRow {
            technique: name.to_string(),
            f1_with: Some(best_f1(&cfg)?),
            f1_without: Some(without),
        });
    }
    rows.push(AblationRow {
        technique: "Batch Normalization".to_string(),
        f1_with: None,
        f1_without: None,
    });
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::parse_corpus_str;
    use crate::encoders::EncoderDims;

    const CORPUS: &str = "# img: a\nAlice\tB-PER\nlikes\tO\nParis\tB-LOC\n\n# img: b\nBob\tB-PER\nin\tO\nNew\tB-LOC\nYork\tI-LOC\n";

    fn tiny() -> ModelConfig {
        ModelConfig {
            encoder: EncoderDims {
                word: 4,
                char_embedding: 3,
                char_hidden: 3,
                word_hidden: 4,
            },
            fused: 5,
            visual: 2,
            ..Default::default()
        }
    }

    fn setup() -> (Vec<Post>, VisualFeatureStore, TriMod) {
        let posts = parse_corpus_str(CORPUS, "c").unwrap();
        let mut visual = VisualFeatureStore::new(2);
        visual.insert("a", vec![1.0, 0.0]).unwrap();
        visual.insert("b", vec![0.0, 1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = TriMod::new(tiny(), &posts, None, None, &mut rng).unwrap();
        (posts, visual, model)
    }

    #[test]
    fn schedule() {
        let c = TrainConfig::default();
        assert_eq!(lr_schedule(0, &c), 0.005);
        assert!((lr_schedule(1, &c) - 0.005 / 1.05).abs() < 1e-18);
        assert!((lr_schedule(1, &c) - 0.0047619).abs() < 1e-7);
        for e in 0..100 {
            assert!(lr_schedule(e + 1, &c) < lr_schedule(e, &c));
        }
    }

    #[test]
    fn config_keys() {
        let mut rc = RunConfig::default();
        rc.apply_text("# comment\nlearning_rate = 0.01\nk_steps=3\n\ndropout = 0 # off\ntext_only = true\n", "cfg")
            .unwrap();
        assert_eq!(rc.train.learning_rate, 0.01);
        assert_eq!(rc.train.accumulation_steps, 3);
        assert_eq!(rc.train.dropout, 0.0);
        assert!(rc.model.text_only);
        assert!(rc.apply_text("nonsense\n", "cfg").is_err());
        assert!(rc.apply_text("bogus = 1\n", "cfg").is_err());
        assert!(rc.apply_text("epochs = -1\n", "cfg").is_err());
        let bad = TrainConfig { dropout: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn one_small_step_decreases_loss() {
        let (posts, visual, mut model) = setup();
        let input = model.prepare(&posts[0], &visual).unwrap();
        let loss = |m: &TriMod| {
            let mut g = Graph::new(&m.store);
            let l = m.nll(&mut g, &input, &mut Dropout::off()).unwrap();
            g.value(l).item()
        };
        let before = loss(&model);
        accumulate_post(&mut model, &input, &mut Dropout::off()).unwrap();
        let cfg = TrainConfig { clip_norm: 0.0, ..Default::default() };
        apply_update(&mut model, 1, 1e-4, &cfg).unwrap();
        assert!(loss(&model) < before);
    }

    #[test]
    fn accumulation_matches_one_big_batch() {
        let (posts, visual, model) = setup();
        let inputs = prepare_all(&model, &posts, &visual).unwrap();
        let cfg = TrainConfig { clip_norm: 0.0, ..Default::default() };
        let tokens: usize = inputs.iter().map(|i| i.tokens.len()).sum();

        // two accumulated batches of one post each
        let mut a = model.clone();
        for input in &inputs {
            accumulate_post(&mut a, input, &mut Dropout::off()).unwrap();
        }
        apply_update(&mut a, tokens, 0.1, &cfg).unwrap();

        // one batch holding both posts, as a single mean-reduced loss
        let mut b = model.clone();
        let grads = {
            let mut g = Graph::new(&b.store);
            let l0 = b.nll(&mut g, &inputs[0], &mut Dropout::off()).unwrap();
            let l1 = b.nll(&mut g, &inputs[1], &mut Dropout::off()).unwrap();
            let s = g.add(l0, l1).unwrap();
            let mean = g.scale(s, 1.0 / tokens as f64);
            g.backward(mean).unwrap()
        };
        b.store.accumulate(&grads);
        sgd_step(&mut b.store, 0.1, 0.0, 0.0, 0.0).unwrap();

        for ((_, pa), (_, pb)) in a.store.iter().zip(b.store.iter()) {
            assert!(pa.value.max_abs_diff(&pb.value) < 1e-9, "{}", pa.name);
        }
    }

    #[test]
    fn dropout_only_touches_embeddings() {
        let (posts, visual, model) = setup();
        let input = model.prepare(&posts[1], &visual).unwrap();
        let mut d = Dropout::new(0.5, 3).unwrap().recording();
        let mut g = Graph::new(&model.store);
        model.nll(&mut g, &input, &mut d).unwrap();
        let words = d.sites().iter().filter(|s| **s == DropoutSite::WordEmbedding).count();
        let chars = d.sites().iter().filter(|s| **s == DropoutSite::CharEmbedding).count();
        assert_eq!(words, input.tokens.len());
        assert_eq!(chars, input.tokens.iter().map(|t| t.chars().count()).sum::<usize>());
        assert_eq!(words + chars, d.sites().len());
    }

    #[test]
    fn memorizes_two_sentences_and_is_deterministic() {
        let (posts, visual, model) = setup();
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 1,
            accumulation_steps: 1,
            learning_rate: 0.5,
            dropout: 0.0,
            ..Default::default()
        };
        let a = train(model.clone(), &posts, &posts, &visual, &cfg).unwrap();
        assert_eq!(evaluate(&a.best, &posts, &visual).unwrap().f1(), 1.0);
        let first = &a.report.rows[0];
        assert!(first.mean_loss.is_finite());
        let b = train(model, &posts, &posts, &visual, &TrainConfig { epochs: 20, ..cfg.clone() }).unwrap();
        assert_eq!(a.report.rows[..20], b.report.rows[..]);
    }

    #[test]
    fn first_epoch_lowers_loss() {
        let (posts, visual, model) = setup();
        let inputs = prepare_all(&model, &posts, &visual).unwrap();
        let total = |m: &TriMod| -> f64 {
            inputs
                .iter()
                .map(|i| {
                    let mut g = Graph::new(&m.store);
                    let l = m.nll(&mut g, i, &mut Dropout::off()).unwrap();
                    g.value(l).item()
                })
                .sum()
        };
        let before = total(&model);
        let cfg = TrainConfig { epochs: 1, dropout: 0.0, ..Default::default() };
        let out = train(model, &posts, &posts, &visual, &cfg).unwrap();
        assert!(total(&out.last) < before);
    }

    #[test]
    fn resumed_run_retraces_uninterrupted_one() {
        let (posts, visual, model) = setup();
        let cfg = TrainConfig { epochs: 4, batch_size: 1, accumulation_steps: 1, ..Default::default() };
        let full = train(model.clone(), &posts, &posts, &visual, &cfg).unwrap();
        let half = train(model, &posts, &posts, &visual, &TrainConfig { epochs: 2, ..cfg.clone() }).unwrap();
        let rest = train_from(half.last, 2, &posts, &posts, &visual, &cfg).unwrap();
        assert_eq!(full.report.rows[2..], rest.report.rows[..]);
    }

    #[test]
    fn report_formats() {
        let r = TrainReport {
            rows: vec![EpochRow {
                epoch: 1,
                learning_rate: 0.005,
                mean_loss: 1.5,
                updates: 1,
                dev_precision: 0.5,
                dev_recall: 0.25,
                dev_f1: 1.0 / 3.0,
            }],
        };
        assert_eq!(r.to_csv().lines().count(), 2);
        assert!(r.to_table().contains("33.33"));
    }
}
