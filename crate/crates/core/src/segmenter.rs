//! Character-level hashtag segmentation and the pooled hashtag feature.
//!
//! Characters are embedded, passed through a width-3 convolution and a
//! bidirectional LSTM, and a decoder reads `[h_fwd; h_bwd; c_i]` to predict
//! whether a word boundary follows each character.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::embeddings::{Vocab, WordTable, UNK_ROW};
use crate::error::{Error, Result};
use crate::optim::sgd_step;
use crate::tensor::Tensor;

const WIDTH: usize = 3;
const LSTM_GATES: [&str; 4] = ["i", "f", "o", "g"];

/// A hashtag body and whether a space follows each character.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationExample {
    pub chars: Vec<char>,
    pub boundaries: Vec<bool>,
}

impl SegmentationExample {
    /// Build from the words a hashtag is made of.
    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let mut chars = Vec::new();
        let mut boundaries = Vec::new();
        for w in words {
            let w: Vec<char> = w.as_ref().chars().collect();
            if w.is_empty() {
                return Err(Error::Contract("empty word in segmentation example".into()));
            }
            boundaries.extend(std::iter::repeat_n(false, w.len() - 1));
            boundaries.push(true);
            chars.extend(w);
        }
        if let Some(last) = boundaries.last_mut() {
            *last = false;
        }
        Ok(SegmentationExample { chars, boundaries })
    }

    pub fn text(&self) -> String {
        self.chars.iter().collect()
    }

    pub fn words(&self) -> Vec<String> {
        split_at_flags(&self.chars, &self.boundaries)
    }
}

fn split_at_flags(chars: &[char], after: &[bool]) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    for (i, &c) in chars.iter().enumerate() {
        cur.push(c);
        if after[i] && i + 1 < chars.len() {
            words.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words
}

/// `count` examples of 2–4 words sampled from `wordlist`.
pub fn make_synthetic_pairs<S: AsRef<str>>(wordlist: &[S], count: usize, seed: u64) -> Result<Vec<SegmentationExample>> {
    if wordlist.is_empty() {
        return Err(Error::Contract("empty wordlist".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let n = rng.gen_range(2..=4);
            let words: Vec<&str> = (0..n).map(|_| wordlist[rng.gen_range(0..wordlist.len())].as_ref()).collect();
            SegmentationExample::from_words(&words)
        })
        .collect()
}

/// Split before internal capitals and at letter/digit changes, so that
/// `PlayingWithDog` gives `Playing`, `With`, `Dog` and `NYCMarathon` gives
/// `NYC`, `Marathon`.
pub fn segment_camel_case(hashtag: &str) -> Vec<String> {
    let chars: Vec<char> = hashtag.chars().collect();
    let mut after = vec![false; chars.len()];
    for i in 1..chars.len() {
        let (p, c) = (chars[i - 1], chars[i]);
        let next_lower = chars.get(i + 1).is_some_and(|n| n.is_lowercase());
        let split = (p.is_lowercase() && c.is_uppercase())
            || (p.is_uppercase() && c.is_uppercase() && next_lower)
            || (p.is_alphabetic() && c.is_ascii_digit())
            || (p.is_ascii_digit() && c.is_alphabetic());
        after[i - 1] = split;
    }
    split_at_flags(&chars, &after)
}

/// Training example from a hashtag the camel-case rule splits, if any.
pub fn camel_case_example(hashtag: &str) -> Option<SegmentationExample> {
    let words = segment_camel_case(hashtag);
    if words.len() < 2 {
        return None;
    }
    let lower: Vec<String> = words.iter().map(|w| w.to_lowercase()).collect();
    SegmentationExample::from_words(&lower).ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmenterDims {
    pub embedding: usize,
    pub filters: usize,
    pub hidden: usize,
}

impl Default for SegmenterDims {
    fn default() -> Self {
        SegmenterDims {
            embedding: 30,
            filters: 32,
            hidden: 50,
        }
    }
}

#[derive(Debug, Clone)]
struct LstmCell {
    hidden: usize,
    w: [ParamId; 4],
    u: [ParamId; 4],
    b: [ParamId; 4],
}

impl LstmCell {
    fn new<R: Rng>(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut ids = [[0; 4]; 3];
        for (k, gate) in LSTM_GATES.iter().enumerate() {
            ids[0][k] = store.add(format!("{prefix}.w_{gate}"), Tensor::uniform(&[hidden, input], bound, rng))?;
            ids[1][k] = store.add(format!("{prefix}.u_{gate}"), Tensor::uniform(&[hidden, hidden], bound, rng))?;
            ids[2][k] = store.add(format!("{prefix}.b_{gate}"), Tensor::uniform(&[hidden], bound, rng))?;
        }
        Ok(LstmCell { hidden, w: ids[0], u: ids[1], b: ids[2] })
    }

    fn attach(store: &ParamStore, prefix: &str) -> Result<Self> {
        let mut ids = [[0; 4]; 3];
        for (k, gate) in LSTM_GATES.iter().enumerate() {
            for (j, kind) in ["w", "u", "b"].iter().enumerate() {
                ids[j][k] = store.require(&format!("{prefix}.{kind}_{gate}"))?;
            }
        }
        let hidden = store.value(ids[2][0]).len();
        Ok(LstmCell { hidden, w: ids[0], u: ids[1], b: ids[2] })
    }

    fn params(&self) -> Vec<ParamId> {
        self.w.iter().chain(&self.u).chain(&self.b).copied().collect()
    }

    fn step(&self, g: &mut Graph, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let mut pre = [x; 4];
        for (k, slot) in pre.iter_mut().enumerate() {
            let w = g.param(self.w[k]);
            let u = g.param(self.u[k]);
            let b = g.param(self.b[k]);
            let wx = g.matmul(w, x)?;
            let uh = g.matmul(u, h)?;
            let s = g.add(wx, uh)?;
            *slot = g.add(s, b)?;
        }
        let i = g.sigmoid(pre[0]);
        let f = g.sigmoid(pre[1]);
        let o = g.sigmoid(pre[2]);
        let cand = g.tanh(pre[3]);
        let kept = g.mul(f, c)?;
        let added = g.mul(i, cand)?;
        let c = g.add(kept, added)?;
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        Ok((h, c))
    }
}

/// The neural segmenter. It owns a separate parameter store.
#[derive(Debug, Clone)]
pub struct Segmenter {
    pub store: ParamStore,
    pub alphabet: Vocab<char>,
    table: ParamId,
    conv_w: ParamId,
    conv_b: ParamId,
    fwd: LstmCell,
    bwd: LstmCell,
    dec_w: ParamId,
    dec_b: ParamId,
}

pub const PREFIX: &str = "segmenter";

impl Segmenter {
    /// Fresh model over the lowercased `chars`.
    pub fn new<R: Rng>(chars: impl IntoIterator<Item = char>, dims: SegmenterDims, rng: &mut R) -> Result<Self> {
        let alphabet = Vocab::from_symbols(chars.into_iter().flat_map(char::to_lowercase));
        let mut store = ParamStore::new();
        let d = dims.embedding;
        let table = store.add(
            format!("{PREFIX}.char_embedding"),
            Tensor::uniform(&[alphabet.rows(), d], crate::embeddings::INIT_RANGE, rng),
        )?;
        let conv_bound = 1.0 / ((WIDTH * d) as f64).sqrt();
        let conv_w = store.add(format!("{PREFIX}.conv.weight"), Tensor::uniform(&[dims.filters, WIDTH * d], conv_bound, rng))?;
        let conv_b = store.add(format!("{PREFIX}.conv.bias"), Tensor::zeros(&[dims.filters]))?;
        let fwd = LstmCell::new(&mut store, &format!("{PREFIX}.lstm.fwd"), dims.filters, dims.hidden, rng)?;
        let bwd = LstmCell::new(&mut store, &format!("{PREFIX}.lstm.bwd"), dims.filters, dims.hidden, rng)?;
        let dec_in = 2 * dims.hidden + d;
        let dec_bound = 1.0 / (dec_in as f64).sqrt();
        let dec_w = store.add(format!("{PREFIX}.decoder.weight"), Tensor::uniform(&[2, dec_in], dec_bound, rng))?;
        let dec_b = store.add(format!("{PREFIX}.decoder.bias"), Tensor::zeros(&[2]))?;
        Ok(Segmenter { store, alphabet, table, conv_w, conv_b, fwd, bwd, dec_w, dec_b })
    }

    /// Rebuild from stored parameters.
    pub fn from_parts(store: ParamStore, alphabet: Vocab<char>) -> Result<Self> {
        let table = store.require(&format!("{PREFIX}.char_embedding"))?;
        if store.value(table).rows() != alphabet.rows() {
            return Err(Error::Format("segmenter alphabet does not match its table".into()));
        }
        let conv_w = store.require(&format!("{PREFIX}.conv.weight"))?;
        let conv_b = store.require(&format!("{PREFIX}.conv.bias"))?;
        let fwd = LstmCell::attach(&store, &format!("{PREFIX}.lstm.fwd"))?;
        let bwd = LstmCell::attach(&store, &format!("{PREFIX}.lstm.bwd"))?;
        let dec_w = store.require(&format!("{PREFIX}.decoder.weight"))?;
        let dec_b = store.require(&format!("{PREFIX}.decoder.bias"))?;
        if store.value(dec_w).shape()[0] != 2 {
            return Err(Error::Format("segmenter decoder must have two outputs".into()));
        }
        Ok(Segmenter { store, alphabet, table, conv_w, conv_b, fwd, bwd, dec_w, dec_b })
    }

    pub fn dims(&self) -> SegmenterDims {
        SegmenterDims {
            embedding: self.store.value(self.table).cols(),
            filters: self.store.value(self.conv_w).rows(),
            hidden: self.fwd.hidden,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.table, self.conv_w, self.conv_b];
        p.extend(self.fwd.params());
        p.extend(self.bwd.params());
        p.extend([self.dec_w, self.dec_b]);
        p
    }

    fn row(&self, c: char) -> usize {
        let lower = c.to_lowercase().next().unwrap_or(c);
        self.alphabet.get(&lower).unwrap_or(UNK_ROW)
    }

    /// Two boundary logits (no space, space) per character.
    pub fn logits(&self, g: &mut Graph, chars: &[char]) -> Result<Vec<Var>> {
        if chars.is_empty() {
            return Err(Error::Contract("cannot segment an empty string".into()));
        }
        let d = self.dims();
        let emb = chars
            .iter()
            .map(|&c| g.gather(self.table, self.row(c)))
            .collect::<Result<Vec<_>>>()?;
        let pad = g.input(Tensor::zeros(&[d.embedding]));
        let cw = g.param(self.conv_w);
        let cb = g.param(self.conv_b);
        let mut conv = Vec::with_capacity(chars.len());
        for i in 0..chars.len() {
            let left = if i > 0 { emb[i - 1] } else { pad };
            let right = emb.get(i + 1).copied().unwrap_or(pad);
            let window = g.concat(&[left, emb[i], right], 0)?;
            let y = g.matmul(cw, window)?;
            let y = g.add(y, cb)?;
            conv.push(g.tanh(y));
        }
        let zero = g.input(Tensor::zeros(&[d.hidden]));
        let mut hf = Vec::with_capacity(chars.len());
        let (mut h, mut c) = (zero, zero);
        for &x in &conv {
            (h, c) = self.fwd.step(g, x, h, c)?;
            hf.push(h);
        }
        let mut hb = vec![zero; chars.len()];
        let (mut h, mut c) = (zero, zero);
        for i in (0..chars.len()).rev() {
            (h, c) = self.bwd.step(g, conv[i], h, c)?;
            hb[i] = h;
        }
        let dw = g.param(self.dec_w);
        let db = g.param(self.dec_b);
        (0..chars.len())
            .map(|i| {
                let feat = g.concat(&[hf[i], hb[i], emb[i]], 0)?;
                let y = g.matmul(dw, feat)?;
                g.add(y, db)
            })
            .collect()
    }

    /// Mean per-position cross-entropy.
    pub fn loss(&self, g: &mut Graph, ex: &SegmentationExample) -> Result<Var> {
        let logits = self.logits(g, &ex.chars)?;
        let mut total: Option<Var> = None;
        for (l, &b) in logits.iter().zip(&ex.boundaries) {
            let lse = g.log_sum_exp(*l);
            let pick = g.index(*l, usize::from(b))?;
            let nll = g.sub(lse, pick)?;
            total = Some(match total {
                None => nll,
                Some(t) => g.add(t, nll)?,
            });
        }
        let total = total.expect("non-empty");
        Ok(g.scale(total, 1.0 / logits.len() as f64))
    }

    /// Probability of a boundary after each character.
    pub fn probabilities(&self, text: &str) -> Result<Vec<f64>> {
        let chars: Vec<char> = text.chars().collect();
        let mut g = Graph::new(&self.store);
        let logits = self.logits(&mut g, &chars)?;
        Ok(logits
            .iter()
            .map(|l| crate::autodiff::softmax(g.value(*l).data())[1])
            .collect())
    }

    pub fn segment(&self, hashtag: &str) -> Result<Vec<String>> {
        let chars: Vec<char> = hashtag.chars().collect();
        let probs = self.probabilities(hashtag)?;
        let flags: Vec<bool> = probs.iter().map(|p| *p > 0.5).collect();
        Ok(split_at_flags(&chars, &flags))
    }

    /// Fraction of characters whose boundary decision matches the gold one.
    /// The last position always counts as no boundary.
    pub fn boundary_accuracy(&self, examples: &[SegmentationExample]) -> Result<f64> {
        let mut hit = 0usize;
        let mut total = 0usize;
        for ex in examples {
            let probs = self.probabilities(&ex.text())?;
            let n = probs.len();
            for (i, (p, &b)) in probs.iter().zip(&ex.boundaries).enumerate() {
                let predicted = *p > 0.5 && i + 1 < n;
                hit += usize::from(predicted == b);
                total += 1;
            }
        }
        Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
    }
}

pub fn segmenter_forward(model: &Segmenter, chars: &str) -> Result<Vec<f64>> {
    model.probabilities(chars)
}

/// Split with the neural model when present, else with the camel-case rule.
pub fn segment(model: Option<&Segmenter>, hashtag: &str) -> Result<Vec<String>> {
    if hashtag.is_empty() {
        return Ok(Vec::new());
    }
    match model {
        Some(m) => m.segment(hashtag),
        None => Ok(segment_camel_case(hashtag)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmenterTrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for SegmenterTrainConfig {
    fn default() -> Self {
        SegmenterTrainConfig {
            learning_rate: 0.1,
            epochs: 20,
            batch_size: 1,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmenterEpoch {
    pub mean_loss: f64,
    pub accuracy: f64,
}

/// SGD on mean per-position cross-entropy. Returns one row per epoch with
/// the training loss and the boundary accuracy measured after the epoch.
pub fn train_segmenter(
    model: &mut Segmenter,
    examples: &[SegmentationExample],
    config: &SegmenterTrainConfig,
) -> Result<Vec<SegmenterEpoch>> {
    if examples.is_empty() {
        return Err(Error::Contract("no segmentation examples".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("segmenter batch size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let grads = {
                    let mut g = Graph::new(&model.store);
                    let l = model.loss(&mut g, &examples[i])?;
                    loss_sum += g.value(l).item();
                    g.backward(l)?
                };
                model.store.accumulate_scaled(&grads, scale);
            }
            sgd_step(&mut model.store, config.learning_rate, 0.0, 0.0, config.clip_norm)?;
        }
        let accuracy = model.boundary_accuracy(examples)?;
        let mean_loss = loss_sum / examples.len() as f64;
        log::info!("segmenter epoch loss {mean_loss:.4} accuracy {accuracy:.4}");
        trace.push(SegmenterEpoch { mean_loss, accuracy });
    }
    Ok(trace)
}

/// Words of every hashtag in `hashtags`, split by `model` or the camel-case
/// rule.
pub fn hashtag_words<S: AsRef<str>>(hashtags: &[S], model: Option<&Segmenter>) -> Result<Vec<String>> {
    let mut words = Vec::new();
    for h in hashtags {
        words.extend(segment(model, h.as_ref().trim_start_matches('#'))?);
    }
    Ok(words)
}

/// Mean word embedding of `words`; zeros when there are none.
pub fn hashtag_feature<S: AsRef<str>>(g: &mut Graph, table: &WordTable, words: &[S]) -> Result<Var> {
    if words.is_empty() {
        return Ok(g.input(Tensor::zeros(&[table.dim])));
    }
    let mut total = table.embed(g, words[0].as_ref())?;
    for w in &words[1..] {
        let e = table.embed(g, w.as_ref())?;
        total = g.add(total, e)?;
    }
    Ok(g.scale(total, 1.0 / words.len() as f64))
}
