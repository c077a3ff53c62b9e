//! GRU cells, bidirectional runs, and the character and word text encoders.

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::dropout::{Dropout, DropoutSite};
use crate::embeddings::{CharTable, WordTable};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const GATES: [&str; 3] = ["z", "r", "n"];

/// One GRU cell. Gates are ordered update, reset, candidate.
#[derive(Debug, Clone)]
pub struct GruCell {
    pub input: usize,
    pub hidden: usize,
    w: [ParamId; 3],
    u: [ParamId; 3],
    b: [ParamId; 3],
}

impl GruCell {
    /// Parameters `{prefix}.w_{g}`, `{prefix}.u_{g}`, `{prefix}.b_{g}`, all
    /// uniform in ±1/√hidden.
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut w = [0; 3];
        let mut u = [0; 3];
        let mut b = [0; 3];
        for (k, gate) in GATES.iter().enumerate() {
            w[k] = store.add(format!("{prefix}.w_{gate}"), Tensor::uniform(&[hidden, input], bound, rng))?;
            u[k] = store.add(format!("{prefix}.u_{gate}"), Tensor::uniform(&[hidden, hidden], bound, rng))?;
            b[k] = store.add(format!("{prefix}.b_{gate}"), Tensor::uniform(&[hidden], bound, rng))?;
        }
        Ok(GruCell { input, hidden, w, u, b })
    }

    pub fn attach(store: &ParamStore, prefix: &str) -> Result<Self> {
        let mut w = [0; 3];
        let mut u = [0; 3];
        let mut b = [0; 3];
        for (k, gate) in GATES.iter().enumerate() {
            w[k] = store.require(&format!("{prefix}.w_{gate}"))?;
            u[k] = store.require(&format!("{prefix}.u_{gate}"))?;
            b[k] = store.require(&format!("{prefix}.b_{gate}"))?;
        }
        let ws = store.value(w[0]).shape();
        let (hidden, input) = (ws[0], ws[1]);
        for k in 0..3 {
            let ok = store.value(w[k]).shape() == [hidden, input]
                && store.value(u[k]).shape() == [hidden, hidden]
                && store.value(b[k]).shape() == [hidden];
            if !ok {
                return Err(Error::Format(format!("inconsistent shapes in GRU cell `{prefix}`")));
            }
        }
        Ok(GruCell { input, hidden, w, u, b })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.w.iter().chain(&self.u).chain(&self.b).copied().collect()
    }

    /// `h' = (1-z)⊙h + z⊙n` with `n = tanh(W_n x + U_n (r⊙h) + b_n)`.
    pub fn step(&self, g: &mut Graph, x: Var, h: Var) -> Result<Var> {
        if g.shape(x) != [self.input] || g.shape(h) != [self.hidden] {
            return Err(Error::Shape {
                op: "gru_step",
                left: g.shape(x).to_vec(),
                right: g.shape(h).to_vec(),
            });
        }
        let gate = |g: &mut Graph, k: usize, hin: Var| -> Result<Var> {
            let w = g.param(self.w[k]);
            let u = g.param(self.u[k]);
            let b = g.param(self.b[k]);
            let wx = g.matmul(w, x)?;
            let uh = g.matmul(u, hin)?;
            let s = g.add(wx, uh)?;
            g.add(s, b)
        };
        let z = gate(g, 0, h)?;
        let z = g.sigmoid(z);
        let r = gate(g, 1, h)?;
        let r = g.sigmoid(r);
        let rh = g.mul(r, h)?;
        let n = gate(g, 2, rh)?;
        let n = g.tanh(n);
        let keep = g.one_minus(z);
        let a = g.mul(keep, h)?;
        let c = g.mul(z, n)?;
        g.add(a, c)
    }
}

pub fn gru_step(g: &mut Graph, cell: &GruCell, x: Var, h: Var) -> Result<Var> {
    cell.step(g, x, h)
}

/// Forward and backward cells over the same inputs.
#[derive(Debug, Clone)]
pub struct BiGru {
    pub fwd: GruCell,
    pub bwd: GruCell,
}

/// States of a bidirectional run. `fwd[i]` has read inputs `0..=i`, `bwd[i]`
/// has read inputs `i..n` right to left.
#[derive(Debug, Clone)]
pub struct BiStates {
    pub fwd: Vec<Var>,
    pub bwd: Vec<Var>,
}

impl BiGru {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let fwd = GruCell::new(store, &format!("{prefix}.fwd"), input, hidden, rng)?;
        let bwd = GruCell::new(store, &format!("{prefix}.bwd"), input, hidden, rng)?;
        Ok(BiGru { fwd, bwd })
    }

    pub fn attach(store: &ParamStore, prefix: &str) -> Result<Self> {
        let fwd = GruCell::attach(store, &format!("{prefix}.fwd"))?;
        let bwd = GruCell::attach(store, &format!("{prefix}.bwd"))?;
        if (fwd.input, fwd.hidden) != (bwd.input, bwd.hidden) {
            return Err(Error::Format(format!("directions of `{prefix}` disagree on sizes")));
        }
        Ok(BiGru { fwd, bwd })
    }

    pub fn hidden(&self) -> usize {
        self.fwd.hidden
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.fwd.params();
        p.extend(self.bwd.params());
        p
    }

    pub fn run(&self, g: &mut Graph, xs: &[Var]) -> Result<BiStates> {
        if xs.is_empty() {
            return Err(Error::Contract("bidirectional GRU needs at least one input".into()));
        }
        let zero = g.input(Tensor::zeros(&[self.hidden()]));
        let mut fwd = Vec::with_capacity(xs.len());
        let mut h = zero;
        for &x in xs {
            h = self.fwd.step(g, x, h)?;
            fwd.push(h);
        }
        let mut bwd = vec![zero; xs.len()];
        let mut h = zero;
        for (i, &x) in xs.iter().enumerate().rev() {
            h = self.bwd.step(g, x, h)?;
            bwd[i] = h;
        }
        Ok(BiStates { fwd, bwd })
    }
}

/// Encoder sizes. Defaults follow the reference configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderDims {
    pub word: usize,
    pub char_embedding: usize,
    pub char_hidden: usize,
    pub word_hidden: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        EncoderDims {
            word: 200,
            char_embedding: 30,
            char_hidden: 30,
            word_hidden: 150,
        }
    }
}

impl EncoderDims {
    pub fn char_repr(&self) -> usize {
        2 * self.char_hidden
    }

    pub fn token_repr(&self) -> usize {
        self.word + self.char_repr()
    }

    pub fn sentence(&self) -> usize {
        2 * self.word_hidden
    }
}

/// Word table, character table, and the two bidirectional GRUs.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub words: WordTable,
    pub chars: CharTable,
    pub char_gru: BiGru,
    pub word_gru: BiGru,
}

pub const WORD_TABLE: &str = "word.embedding";
pub const CHAR_TABLE: &str = "char.embedding";

impl TextEncoder {
    /// Build the recurrent parts around existing tables.
    pub fn new<R: Rng>(store: &mut ParamStore, words: WordTable, chars: CharTable, dims: EncoderDims, rng: &mut R) -> Result<Self> {
        if words.dim != dims.word || chars.dim != dims.char_embedding {
            return Err(Error::Config(format!(
                "embedding tables are {}/{} wide but the encoder expects {}/{}",
                words.dim, chars.dim, dims.word, dims.char_embedding
            )));
        }
        let char_gru = BiGru::new(store, "char_gru", dims.char_embedding, dims.char_hidden, rng)?;
        let word_gru = BiGru::new(store, "word_gru", dims.token_repr(), dims.word_hidden, rng)?;
        Ok(TextEncoder { words, chars, char_gru, word_gru })
    }

    pub fn attach(store: &ParamStore, words: WordTable, chars: CharTable) -> Result<Self> {
        let char_gru = BiGru::attach(store, "char_gru")?;
        let word_gru = BiGru::attach(store, "word_gru")?;
        let enc = TextEncoder { words, chars, char_gru, word_gru };
        let dims = enc.dims();
        if enc.char_gru.fwd.input != dims.char_embedding || enc.word_gru.fwd.input != dims.token_repr() {
            return Err(Error::Format("encoder sizes do not chain".into()));
        }
        Ok(enc)
    }

    pub fn dims(&self) -> EncoderDims {
        EncoderDims {
            word: self.words.dim,
            char_embedding: self.chars.dim,
            char_hidden: self.char_gru.hidden(),
            word_hidden: self.word_gru.hidden(),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.words.matrix, self.chars.matrix];
        p.extend(self.char_gru.params());
        p.extend(self.word_gru.params());
        p
    }

    /// `[last forward state; first backward state]` of the character GRU.
    pub fn char_encode(&self, g: &mut Graph, token: &str, dropout: &mut Dropout) -> Result<Var> {
        let mut xs = self.chars.embed(g, token)?;
        for x in &mut xs {
            *x = dropout.apply(g, *x, DropoutSite::CharEmbedding)?;
        }
        let states = self.char_gru.run(g, &xs)?;
        let last = *states.fwd.last().expect("non-empty");
        g.concat(&[last, states.bwd[0]], 0)
    }

    /// `[word embedding; character encoding]`.
    pub fn token_represent(&self, g: &mut Graph, token: &str, dropout: &mut Dropout) -> Result<Var> {
        let w = self.words.embed(g, token)?;
        let w = dropout.apply(g, w, DropoutSite::WordEmbedding)?;
        let c = self.char_encode(g, token, dropout)?;
        g.concat(&[w, c], 0)
    }

    /// One `[forward; backward]` sentence state per token.
    pub fn sentence_encode<S: AsRef<str>>(&self, g: &mut Graph, tokens: &[S], dropout: &mut Dropout) -> Result<Vec<Var>> {
        if tokens.is_empty() {
            return Err(Error::Contract("cannot encode an empty sentence".into()));
        }
        let reps = tokens
            .iter()
            .map(|t| self.token_represent(g, t.as_ref(), dropout))
            .collect::<Result<Vec<_>>>()?;
        self.encode_representations(g, &reps)
    }

    pub fn encode_representations(&self, g: &mut Graph, reps: &[Var]) -> Result<Vec<Var>> {
        let states = self.word_gru.run(g, reps)?;
        states
            .fwd
            .iter()
            .zip(&states.bwd)
            .map(|(&f, &b)| g.concat(&[f, b], 0))
            .collect()
    }
}
