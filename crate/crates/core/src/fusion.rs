//! Attention-weighted fusion of text, visual and hashtag features.
//!
//! Each feature is projected to a shared width, scored against a learned
//! vector through `tanh`, and the projections are averaged with
//! softmax-normalized scores.

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Text,
    Visual,
    Hashtag,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Visual, Modality::Hashtag];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Visual => "visual",
            Modality::Hashtag => "hashtag",
        }
    }
}

#[derive(Debug, Clone)]
pub struct FusionParams {
    pub dim: usize,
    pub inputs: [usize; 3],
    weight: [ParamId; 3],
    bias: [ParamId; 3],
    u: ParamId,
}

/// A fused token inside a graph.
#[derive(Debug, Clone, Copy)]
pub struct FusedVar {
    pub vector: Var,
    /// Normalized weights, one per supplied feature, in the caller's order.
    pub weights: Var,
}

/// A fused token as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedToken {
    pub vector: Vec<f64>,
    pub weights: Vec<f64>,
}

/// A projected feature and its attention score.
#[derive(Debug, Clone, Copy)]
pub struct Projected {
    pub modality: Modality,
    pub value: Var,
    pub score: Var,
}

impl FusionParams {
    /// `inputs` are the raw widths of the text, visual and hashtag features.
    pub fn new<R: Rng>(store: &mut ParamStore, dim: usize, inputs: [usize; 3], rng: &mut R) -> Result<Self> {
        let mut weight = [0; 3];
        let mut bias = [0; 3];
        for m in Modality::ALL {
            let k = m.index();
            let bound = 1.0 / (inputs[k] as f64).sqrt();
            weight[k] = store.add(format!("fusion.{}.weight", m.as_str()), Tensor::uniform(&[dim, inputs[k]], bound, rng))?;
            bias[k] = store.add(format!("fusion.{}.bias", m.as_str()), Tensor::zeros(&[dim]))?;
        }
        let u = store.add("fusion.u", Tensor::uniform(&[dim], 1.0 / (dim as f64).sqrt(), rng))?;
        Ok(FusionParams { dim, inputs, weight, bias, u })
    }

    pub fn attach(store: &ParamStore) -> Result<Self> {
        let mut weight = [0; 3];
        let mut bias = [0; 3];
        let mut inputs = [0; 3];
        let u = store.require("fusion.u")?;
        let dim = store.value(u).len();
        for m in Modality::ALL {
            let k = m.index();
            weight[k] = store.require(&format!("fusion.{}.weight", m.as_str()))?;
            bias[k] = store.require(&format!("fusion.{}.bias", m.as_str()))?;
            let s = store.value(weight[k]).shape();
            if s[0] != dim || store.value(bias[k]).len() != dim {
                return Err(Error::Format(format!("fusion projection `{}` is not {dim} wide", m.as_str())));
            }
            inputs[k] = s[1];
        }
        Ok(FusionParams { dim, inputs, weight, bias, u })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p: Vec<ParamId> = self.weight.iter().chain(&self.bias).copied().collect();
        p.push(self.u);
        p
    }

    pub fn weight(&self, m: Modality) -> ParamId {
        self.weight[m.index()]
    }

    pub fn bias(&self, m: Modality) -> ParamId {
        self.bias[m.index()]
    }

    pub fn u(&self) -> ParamId {
        self.u
    }

    /// `f' = W f + b` and its score `uᵀ tanh(f')`.
    pub fn project(&self, g: &mut Graph, m: Modality, feature: Var) -> Result<Projected> {
        let k = m.index();
        if g.shape(feature) != [self.inputs[k]] {
            return Err(Error::Shape {
                op: "fuse",
                left: vec![self.inputs[k]],
                right: g.shape(feature).to_vec(),
            });
        }
        let w = g.param(self.weight[k]);
        let b = g.param(self.bias[k]);
        let wf = g.matmul(w, feature)?;
        let value = g.add(wf, b)?;
        let t = g.tanh(value);
        let u = g.param(self.u);
        let score = g.dot(u, t)?;
        Ok(Projected { modality: m, value, score })
    }

    /// Combine already projected features. Each modality may appear once.
    pub fn combine(&self, g: &mut Graph, parts: &[Projected]) -> Result<FusedVar> {
        if parts.is_empty() {
            return Err(Error::Contract("fusion needs at least one feature".into()));
        }
        // Fixed modality order makes the result independent of the order
        // features are supplied in.
        let mut order: Vec<usize> = (0..parts.len()).collect();
        order.sort_by_key(|&i| parts[i].modality);
        if order.windows(2).any(|w| parts[w[0]].modality == parts[w[1]].modality) {
            return Err(Error::Contract("a modality was supplied twice".into()));
        }
        let scores: Vec<Var> = order.iter().map(|&i| parts[i].score).collect();
        let scores = g.concat(&scores, 0)?;
        let w = g.softmax(scores);
        let mut acc: Option<Var> = None;
        for (slot, &i) in order.iter().enumerate() {
            let wi = g.index(w, slot)?;
            let term = g.scale_by(parts[i].value, wi)?;
            acc = Some(match acc {
                None => term,
                Some(a) => g.add(a, term)?,
            });
        }
        let mut back = vec![0; parts.len()];
        for (slot, &i) in order.iter().enumerate() {
            back[i] = slot;
        }
        let picked = back.iter().map(|&s| g.index(w, s)).collect::<Result<Vec<_>>>()?;
        let weights = g.concat(&picked, 0)?;
        Ok(FusedVar {
            vector: acc.expect("non-empty"),
            weights,
        })
    }

    pub fn fuse(&self, g: &mut Graph, features: &[(Modality, Var)]) -> Result<FusedVar> {
        let parts = features
            .iter()
            .map(|&(m, f)| self.project(g, m, f))
            .collect::<Result<Vec<_>>>()?;
        self.combine(g, &parts)
    }

    /// Fuse every token's text feature with the post-level visual and hashtag
    /// features, projecting the post-level ones once. With `text_only`, only
    /// the text feature takes part.
    pub fn fuse_post(&self, g: &mut Graph, gt: &[Var], visual: Var, hashtag: Var, text_only: bool) -> Result<Vec<FusedVar>> {
        if gt.is_empty() {
            return Err(Error::Contract("cannot fuse an empty sentence".into()));
        }
        let shared = if text_only {
            Vec::new()
        } else {
            vec![
                self.project(g, Modality::Visual, visual)?,
                self.project(g, Modality::Hashtag, hashtag)?,
            ]
        };
        gt.iter()
            .map(|&h| {
                let mut parts = vec![self.project(g, Modality::Text, h)?];
                parts.extend_from_slice(&shared);
                self.combine(g, &parts)
            })
            .collect()
    }

    /// Value-level fusion for inspection and tests.
    pub fn fuse_values(&self, store: &ParamStore, features: &[(Modality, &[f64])]) -> Result<FusedToken> {
        let mut g = Graph::new(store);
        let vars: Vec<(Modality, Var)> = features
            .iter()
            .map(|&(m, f)| (m, g.input(Tensor::vector(f.to_vec()))))
            .collect();
        let fused = self.fuse(&mut g, &vars)?;
        Ok(FusedToken {
            vector: g.value(fused.vector).data().to_vec(),
            weights: g.value(fused.weights).data().to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check_with, Coverage, DEFAULT_EPS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(dim: usize, inputs: [usize; 3]) -> (ParamStore, FusionParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = FusionParams::new(&mut store, dim, inputs, &mut rng).unwrap();
        (store, p)
    }

    fn set(store: &mut ParamStore, id: ParamId, data: Vec<f64>) {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::new(shape, data).unwrap();
    }

    #[test]
    fn single_feature_passes_through() {
        let (store, p) = params(3, [2, 2, 2]);
        let out = p.fuse_values(&store, &[(Modality::Text, &[0.5, -1.0])]).unwrap();
        assert_eq!(out.weights, [1.0]);
        let w = store.value(p.weight(Modality::Text));
        let expect: Vec<f64> = (0..3).map(|r| 0.5 * w.at(r, 0) - w.at(r, 1)).collect();
        for (a, b) in out.vector.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_features_split_evenly() {
        let (mut store, p) = params(3, [2, 2, 2]);
        let w = store.value(p.weight(Modality::Text)).data().to_vec();
        set(&mut store, p.weight(Modality::Visual), w);
        let f = [0.3, 0.7];
        let both = p.fuse_values(&store, &[(Modality::Text, &f), (Modality::Visual, &f)]).unwrap();
        let one = p.fuse_values(&store, &[(Modality::Text, &f)]).unwrap();
        assert_eq!(both.weights, [0.5, 0.5]);
        for (a, b) in both.vector.iter().zip(&one.vector) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_computed_two_dimensional_case() {
        let (mut store, p) = params(2, [2, 1, 1]);
        set(&mut store, p.u(), vec![1.0, 0.0]);
        set(&mut store, p.weight(Modality::Text), vec![1.0, 0.0, 0.0, 1.0]);
        set(&mut store, p.bias(Modality::Text), vec![0.0, 0.0]);
        set(&mut store, p.weight(Modality::Visual), vec![2.0, -1.0]);
        set(&mut store, p.bias(Modality::Visual), vec![0.0, 0.5]);
        // f'_t = [1, 2], f'_v = [2·0.5, -0.5+0.5] = [1, 0]
        // s_t = tanh(1), s_v = tanh(1): equal scores, equal weights
        let out = p
            .fuse_values(&store, &[(Modality::Text, &[1.0, 2.0]), (Modality::Visual, &[0.5])])
            .unwrap();
        assert!((out.weights[0] - 0.5).abs() < 1e-15);
        assert!((out.vector[0] - 1.0).abs() < 1e-15);
        assert!((out.vector[1] - 1.0).abs() < 1e-15);

        // f'_v = [2·(-1), 1+0.5] = [-2, 1.5]; s_v = tanh(-2)
        let out = p
            .fuse_values(&store, &[(Modality::Text, &[1.0, 2.0]), (Modality::Visual, &[-1.0])])
            .unwrap();
        let gt = 1f64.tanh().exp();
        let gv = (-2f64).tanh().exp();
        let wt = gt / (gt + gv);
        assert!((out.weights[0] - wt).abs() < 1e-15);
        assert!((out.vector[0] - (wt * 1.0 + (1.0 - wt) * -2.0)).abs() < 1e-14);
        assert!((out.vector[1] - (wt * 2.0 + (1.0 - wt) * 1.5)).abs() < 1e-14);
    }

    #[test]
    fn permutation_invariance_is_exact() {
        let (store, p) = params(4, [3, 2, 5]);
        let t = [0.1, -0.4, 0.9];
        let v = [1.5, -2.0];
        let h = [0.3, 0.3, -0.1, 0.0, 2.0];
        let a = p
            .fuse_values(&store, &[(Modality::Text, &t), (Modality::Visual, &v), (Modality::Hashtag, &h)])
            .unwrap();
        let b = p
            .fuse_values(&store, &[(Modality::Hashtag, &h), (Modality::Text, &t), (Modality::Visual, &v)])
            .unwrap();
        assert_eq!(a.vector, b.vector);
        assert_eq!(a.weights, [b.weights[1], b.weights[2], b.weights[0]]);
    }

    #[test]
    fn errors() {
        let (store, p) = params(2, [2, 2, 2]);
        assert!(p.fuse_values(&store, &[]).is_err());
        assert!(p.fuse_values(&store, &[(Modality::Text, &[1.0])]).is_err());
        assert!(p
            .fuse_values(&store, &[(Modality::Text, &[1.0, 0.0]), (Modality::Text, &[1.0, 0.0])])
            .is_err());
    }

    #[test]
    fn zero_side_features_with_zero_projections() {
        let (mut store, p) = params(3, [2, 4, 4]);
        for m in [Modality::Visual, Modality::Hashtag] {
            store.value_mut(p.weight(m)).fill(0.0);
        }
        store.value_mut(p.u()).fill(0.0);
        let mut g = Graph::new(&store);
        let h = g.input(Tensor::vector(vec![1.0, -2.0]));
        let zero = g.input(Tensor::zeros(&[4]));
        let fused = p.fuse_post(&mut g, &[h, h], zero, zero, false).unwrap();
        assert_eq!(fused.len(), 2);
        let w = store.value(p.weight(Modality::Text));
        for f in &fused {
            for r in 0..3 {
                let expect = (w.at(r, 0) - 2.0 * w.at(r, 1)) / 3.0;
                assert!((g.value(f.vector).data()[r] - expect).abs() < 1e-15);
            }
        }
        let text_only = p.fuse_post(&mut g, &[h], zero, zero, true).unwrap();
        assert_eq!(g.value(text_only[0].weights).data(), &[1.0]);
    }

    #[test]
    fn fuse_post_gradcheck() {
        let (mut store, p) = params(3, [4, 5, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let head = store.add("head", Tensor::uniform(&[3], 1.0, &mut rng)).unwrap();
        let gt: Vec<Tensor> = (0..3).map(|_| Tensor::uniform(&[4], 1.0, &mut rng)).collect();
        let vis = Tensor::uniform(&[5], 1.0, &mut rng);
        let tag = Tensor::uniform(&[2], 1.0, &mut rng);
        let mut ids = p.params();
        ids.push(head);
        let report = grad_check_with(&mut store, &ids, DEFAULT_EPS, Coverage::All, |g| {
            let hs: Vec<Var> = gt.iter().map(|t| g.input(t.clone())).collect();
            let v = g.input(vis.clone());
            let t = g.input(tag.clone());
            let fused = p.fuse_post(g, &hs, v, t, false)?;
            let hd = g.param(head);
            let mut total = None;
            for f in fused {
                let s = g.dot(f.vector, hd)?;
                let s = g.tanh(s);
                total = Some(match total {
                    None => s,
                    Some(a) => g.add(a, s)?,
                });
            }
            Ok(total.unwrap())
        })
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }
}
