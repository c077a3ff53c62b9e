//! Inverted dropout with optional site recording.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// Where a dropout mask was applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DropoutSite {
    WordEmbedding,
    CharEmbedding,
}

/// Zero each coordinate with probability `p` and scale survivors by `1/(1-p)`.
pub fn dropout_mask<R: Rng>(v: &[f64], p: f64, rng: &mut R) -> Vec<f64> {
    if p <= 0.0 {
        return v.to_vec();
    }
    let keep = 1.0 / (1.0 - p);
    v.iter()
        .map(|&x| if rng.gen::<f64>() < p { 0.0 } else { x * keep })
        .collect()
}

/// Dropout state for one forward pass. [`Dropout::off`] is the inference mode.
#[derive(Debug, Clone)]
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
    record: bool,
    sites: Vec<DropoutSite>,
}

impl Dropout {
    pub fn off() -> Self {
        Dropout {
            rate: 0.0,
            rng: None,
            record: false,
            sites: Vec::new(),
        }
    }

    pub fn new(rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} is outside [0, 1)")));
        }
        Ok(Dropout {
            rate,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            record: false,
            sites: Vec::new(),
        })
    }

    /// Keep a log of every site a mask is applied at.
    pub fn recording(mut self) -> Self {
        self.record = true;
        self
    }

    pub fn is_active(&self) -> bool {
        self.rng.is_some() && self.rate > 0.0
    }

    pub fn sites(&self) -> &[DropoutSite] {
        &self.sites
    }

    pub fn apply(&mut self, g: &mut Graph, v: Var, site: DropoutSite) -> Result<Var> {
        let rate = self.rate;
        let Some(rng) = self.rng.as_mut().filter(|_| rate > 0.0) else {
            return Ok(v);
        };
        if self.record {
            self.sites.push(site);
        }
        let ones = vec![1.0; g.value(v).len()];
        let mask = dropout_mask(&ones, rate, rng);
        let m = g.input(crate::tensor::Tensor::new(g.shape(v).to_vec(), mask)?);
        g.mul(v, m)
    }
}
