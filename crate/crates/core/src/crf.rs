//! Linear-chain CRF output layer.
//!
//! Emissions `P` are `[n × L]`; transitions `T` are `[(L+2) × (L+2)]`, where
//! index `L` is a synthetic START state and `L+1` a synthetic END state. A
//! path `l_1..l_n` scores
//!
//! ```text
//! T[START, l_1] + Σ_i P[i, l_i] + Σ_i T[l_i, l_{i+1}] + T[l_n, END]
//! ```
//!
//! All normalizers are computed in log space.

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::labels::Tag;
use crate::tensor::Tensor;

/// Score pinned on transitions that can never be taken.
pub const FORBIDDEN: f64 = -10000.0;

fn check(p: &Tensor, t: &Tensor) -> Result<(usize, usize)> {
    if p.rank() != 2 {
        return Err(Error::Contract(format!("emissions must be [n × L], got {:?}", p.shape())));
    }
    let (n, l) = (p.shape()[0], p.shape()[1]);
    if t.shape() != [l + 2, l + 2] {
        return Err(Error::shape("crf", p.shape(), t.shape()));
    }
    Ok((n, l))
}

fn check_labels(labels: &[usize], n: usize, l: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Contract(format!(
            "label sequence has length {} but there are {n} tokens",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= l) {
        return Err(Error::Contract(format!("label index {bad} out of range 0..{l}")));
    }
    Ok(())
}

fn lse(xs: impl Iterator<Item = f64>) -> f64 {
    let xs: Vec<f64> = xs.collect();
    crate::autodiff::log_sum_exp(&xs)
}

/// Score of one label path, boundary transitions included.
pub fn path_score(p: &Tensor, t: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, l) = check(p, t)?;
    check_labels(labels, n, l)?;
    let (start, end) = (l, l + 1);
    let mut s = t.at(start, labels[0]);
    for (i, &y) in labels.iter().enumerate() {
        s += p.at(i, y);
        let next = labels.get(i + 1).copied().unwrap_or(end);
        s += t.at(y, next);
    }
    Ok(s)
}

/// Forward log-messages `alpha[i][y]` (START and emissions up to `i` included).
fn forward(p: &Tensor, t: &Tensor, n: usize, l: usize) -> Vec<Vec<f64>> {
    let start = l;
    let mut alpha = Vec::with_capacity(n);
    alpha.push((0..l).map(|y| t.at(start, y) + p.at(0, y)).collect::<Vec<_>>());
    for i in 1..n {
        let prev = &alpha[i - 1];
        let row: Vec<f64> = (0..l)
            .map(|y| p.at(i, y) + lse((0..l).map(|q| prev[q] + t.at(q, y))))
            .collect();
        alpha.push(row);
    }
    alpha
}

/// Backward log-messages `beta[i][y]` (everything after token `i`, END included).
fn backward(p: &Tensor, t: &Tensor, n: usize, l: usize) -> Vec<Vec<f64>> {
    let end = l + 1;
    let mut beta = vec![vec![0.0; l]; n];
    for y in 0..l {
        beta[n - 1][y] = t.at(y, end);
    }
    for i in (0..n - 1).rev() {
        for y in 0..l {
            beta[i][y] = lse((0..l).map(|q| t.at(y, q) + p.at(i + 1, q) + beta[i + 1][q]));
        }
    }
    beta
}

/// log Σ over all `L^n` paths of `exp(path_score)`.
pub fn log_partition(p: &Tensor, t: &Tensor) -> Result<f64> {
    let (n, l) = check(p, t)?;
    if n == 0 {
        return Err(Error::Contract("empty sequence".into()));
    }
    let alpha = forward(p, t, n, l);
    Ok(lse((0..l).map(|y| alpha[n - 1][y] + t.at(y, l + 1))))
}

/// `log_partition − path_score(gold)`.
pub fn nll(p: &Tensor, t: &Tensor, gold: &[usize]) -> Result<f64> {
    let gold_score = path_score(p, t, gold)?;
    Ok(log_partition(p, t)? - gold_score)
}

pub fn sequence_prob(p: &Tensor, t: &Tensor, labels: &[usize]) -> Result<f64> {
    Ok((path_score(p, t, labels)? - log_partition(p, t)?).exp())
}

/// Per-token label marginals `[n × L]`.
pub fn marginals(p: &Tensor, t: &Tensor) -> Result<Tensor> {
    let (n, l) = check(p, t)?;
    let alpha = forward(p, t, n, l);
    let beta = backward(p, t, n, l);
    let log_z = lse((0..l).map(|y| alpha[n - 1][y] + t.at(y, l + 1)));
    let data = (0..n)
        .flat_map(|i| (0..l).map(move |y| (i, y)))
        .map(|(i, y)| (alpha[i][y] + beta[i][y] - log_z).exp())
        .collect();
    Tensor::matrix(n, l, data)
}

/// Gradients of [`nll`] with respect to `P` and `T`: expected minus observed counts.
pub fn nll_gradients(p: &Tensor, t: &Tensor, gold: &[usize]) -> Result<(Tensor, Tensor)> {
    let (n, l) = check(p, t)?;
    check_labels(gold, n, l)?;
    let (start, end) = (l, l + 1);
    let alpha = forward(p, t, n, l);
    let beta = backward(p, t, n, l);
    let log_z = lse((0..l).map(|y| alpha[n - 1][y] + t.at(y, end)));

    let mut dp = Tensor::zeros(&[n, l]);
    let mut dt = Tensor::zeros(&[l + 2, l + 2]);
    for i in 0..n {
        for y in 0..l {
            let m = (alpha[i][y] + beta[i][y] - log_z).exp();
            dp.set(i, y, m);
        }
    }
    for y in 0..l {
        dt.set(start, y, dp.at(0, y));
        dt.set(y, end, dp.at(n - 1, y));
    }
    for i in 1..n {
        for q in 0..l {
            for y in 0..l {
                let m = (alpha[i - 1][q] + t.at(q, y) + p.at(i, y) + beta[i][y] - log_z).exp();
                dt.set(q, y, dt.at(q, y) + m);
            }
        }
    }
    dt.set(start, gold[0], dt.at(start, gold[0]) - 1.0);
    for (i, &y) in gold.iter().enumerate() {
        dp.set(i, y, dp.at(i, y) - 1.0);
        let next = gold.get(i + 1).copied().unwrap_or(end);
        dt.set(y, next, dt.at(y, next) - 1.0);
    }
    Ok((dp, dt))
}

/// Highest-scoring path and its score. Ties go to the lower label index.
pub fn viterbi_decode(p: &Tensor, t: &Tensor) -> Result<(Vec<usize>, f64)> {
    let (n, l) = check(p, t)?;
    if n == 0 {
        return Err(Error::Contract("empty sequence".into()));
    }
    let (start, end) = (l, l + 1);
    let mut score: Vec<f64> = (0..l).map(|y| t.at(start, y) + p.at(0, y)).collect();
    let mut back = vec![vec![0usize; l]; n];
    for i in 1..n {
        let mut next = vec![0.0; l];
        for y in 0..l {
            let mut best = 0;
            let mut best_s = score[0] + t.at(0, y);
            for q in 1..l {
                let s = score[q] + t.at(q, y);
                if s > best_s {
                    best_s = s;
                    best = q;
                }
            }
            back[i][y] = best;
            next[y] = best_s + p.at(i, y);
        }
        score = next;
    }
    let mut last = 0;
    let mut best_s = score[0] + t.at(0, end);
    for y in 1..l {
        let s = score[y] + t.at(y, end);
        if s > best_s {
            best_s = s;
            last = y;
        }
    }
    let mut path = vec![last; n];
    for i in (1..n).rev() {
        path[i - 1] = back[i][path[i]];
    }
    Ok((path, best_s))
}

/// Transition entries that are never allowed: anything into START, anything
/// out of END, and (optionally) every BIO2-invalid move.
pub fn forbidden_transitions(num_labels: usize, bio2: bool) -> Vec<(usize, f64)> {
    let size = num_labels + 2;
    let (start, end) = (num_labels, num_labels + 1);
    let mut out = Vec::new();
    for from in 0..size {
        for to in 0..size {
            let blocked = to == start
                || from == end
                || (from == start && to == end)
                || (bio2 && to < num_labels && {
                    let next = Tag::from_index(to).expect("label");
                    let prev = if from == start { None } else { Tag::from_index(from) };
                    from != end && !Tag::can_follow(prev, next)
                });
            if blocked {
                out.push((from * size + to, FORBIDDEN));
            }
        }
    }
    out
}

/// Transition matrix parameter plus the BIO2 constraint switch.
#[derive(Debug, Clone)]
pub struct CrfLayer {
    pub transitions: ParamId,
    pub num_labels: usize,
    pub constrained: bool,
}

impl CrfLayer {
    pub fn new(store: &mut ParamStore, num_labels: usize, constrained: bool) -> Result<Self> {
        let size = num_labels + 2;
        let transitions = store.add("crf.transitions", Tensor::zeros(&[size, size]))?;
        store.pin(transitions, forbidden_transitions(num_labels, constrained));
        Ok(CrfLayer {
            transitions,
            num_labels,
            constrained,
        })
    }

    pub fn attach(store: &ParamStore, num_labels: usize, constrained: bool) -> Result<Self> {
        let transitions = store.require("crf.transitions")?;
        Ok(CrfLayer {
            transitions,
            num_labels,
            constrained,
        })
    }

    pub fn apply_pins(&self, store: &mut ParamStore) {
        store.pin(self.transitions, forbidden_transitions(self.num_labels, self.constrained));
    }

    pub fn decode(&self, store: &ParamStore, emissions: &Tensor) -> Result<(Vec<usize>, f64)> {
        viterbi_decode(emissions, store.value(self.transitions))
    }
}

/// Affine map from fused token vectors to per-label scores.
#[derive(Debug, Clone)]
pub struct EmissionHead {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl EmissionHead {
    pub fn new<R: Rng>(store: &mut ParamStore, input: usize, num_labels: usize, rng: &mut R) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = store.add("emission.weight", Tensor::uniform(&[num_labels, input], bound, rng))?;
        let bias = store.add("emission.bias", Tensor::zeros(&[num_labels]))?;
        Ok(EmissionHead { weight, bias })
    }

    pub fn attach(store: &ParamStore) -> Result<Self> {
        Ok(EmissionHead {
            weight: store.require("emission.weight")?,
            bias: store.require("emission.bias")?,
        })
    }

    /// Emission matrix `[n × L]` for a sequence of fused vectors.
    pub fn forward(&self, g: &mut Graph, fused: &[Var]) -> Result<Var> {
        if fused.is_empty() {
            return Err(Error::Contract("emissions for an empty sequence".into()));
        }
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        let mut rows = Vec::with_capacity(fused.len());
        for &f in fused {
            let s = g.matmul(w, f)?;
            rows.push(g.add(s, b)?);
        }
        let flat = g.concat(&rows, 0)?;
        let l = g.shape(b)[0];
        g.reshape(flat, vec![fused.len(), l])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::is_well_formed;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_instance(rng: &mut ChaCha8Rng, n: usize, l: usize) -> (Tensor, Tensor) {
        (
            Tensor::uniform(&[n, l], 2.0, rng),
            Tensor::uniform(&[l + 2, l + 2], 2.0, rng),
        )
    }

    /// Every label sequence of length `n` over `l` labels, lexicographic.
    fn all_paths(n: usize, l: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for _ in 0..n {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..l).map(move |y| {
                        let mut q = p.clone();
                        q.push(y);
                        q
                    })
                })
                .collect();
        }
        out
    }

    #[test]
    fn single_emission_score() {
        let p = Tensor::from_rows(&[vec![2.0, -1.0]]).unwrap();
        let t = Tensor::zeros(&[4, 4]);
        assert_eq!(path_score(&p, &t, &[0]).unwrap(), 2.0);
    }

    #[test]
    fn hand_summed_two_token_path() {
        // L = 2, START = 2, END = 3
        let p = Tensor::from_rows(&[vec![1.0, 0.5], vec![-0.25, 2.0]]).unwrap();
        let mut t = Tensor::zeros(&[4, 4]);
        t.set(2, 1, 0.3); // START -> 1
        t.set(1, 0, -0.7); // 1 -> 0
        t.set(0, 3, 0.2); // 0 -> END
        // path [1, 0]: 0.3 + 0.5 + (-0.7) + (-0.25) + 0.2
        let expected = 0.3 + 0.5 - 0.7 - 0.25 + 0.2;
        assert!((path_score(&p, &t, &[1, 0]).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn emission_shift_raises_every_path_by_n_c() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (p, t) = random_instance(&mut rng, 3, 4);
        let c = 0.75;
        let shifted = Tensor::new(p.shape().to_vec(), p.data().iter().map(|x| x + c).collect()).unwrap();
        for path in all_paths(3, 4) {
            let a = path_score(&p, &t, &path).unwrap();
            let b = path_score(&shifted, &t, &path).unwrap();
            assert!((b - a - 3.0 * c).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_scores_give_n_log_l() {
        for n in 1..5 {
            let p = Tensor::zeros(&[n, 9]);
            let t = Tensor::zeros(&[11, 11]);
            let z = log_partition(&p, &t).unwrap();
            assert!((z - n as f64 * 9f64.ln()).abs() < 1e-12);
            let gold = vec![0; n];
            assert!((nll(&p, &t, &gold).unwrap() - n as f64 * 9f64.ln()).abs() < 1e-12);
            let prob = sequence_prob(&p, &t, &gold).unwrap();
            assert!((prob - 9f64.powi(-(n as i32))).abs() < 1e-14);
        }
    }

    #[test]
    fn log_partition_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for n in 1..=4 {
            let (p, t) = random_instance(&mut rng, n, 9);
            let scores: Vec<f64> = all_paths(n, 9)
                .iter()
                .map(|path| path_score(&p, &t, path).unwrap())
                .collect();
            let brute = crate::autodiff::log_sum_exp(&scores);
            let fast = log_partition(&p, &t).unwrap();
            assert!(((fast - brute) / brute.abs()).abs() < 1e-10);
            assert!(scores.iter().all(|s| *s <= fast));
        }
    }

    #[test]
    fn probabilities_sum_to_one_and_viterbi_is_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for n in 1..=3 {
            for l in 1..=4 {
                let (p, t) = random_instance(&mut rng, n, l);
                let paths = all_paths(n, l);
                let probs: Vec<f64> = paths.iter().map(|q| sequence_prob(&p, &t, q).unwrap()).collect();
                assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                let (best, score) = viterbi_decode(&p, &t).unwrap();
                let best_prob = sequence_prob(&p, &t, &best).unwrap();
                assert!(probs.iter().all(|q| *q <= best_prob + 1e-15));
                assert!((score - path_score(&p, &t, &best).unwrap()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_token_viterbi_uses_boundary_transitions() {
        let p = Tensor::from_rows(&[vec![1.0, 1.5, 0.0]]).unwrap();
        let mut t = Tensor::zeros(&[5, 5]);
        t.set(3, 0, 1.0); // START -> 0 makes label 0 best
        let (path, score) = viterbi_decode(&p, &t).unwrap();
        assert_eq!(path, vec![0]);
        assert_eq!(score, 2.0);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let p = Tensor::zeros(&[3, 4]);
        let t = Tensor::zeros(&[6, 6]);
        assert_eq!(viterbi_decode(&p, &t).unwrap().0, vec![0, 0, 0]);
    }

    #[test]
    fn constrained_decoding_is_well_formed() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut t = Tensor::uniform(&[11, 11], 3.0, &mut rng);
        for (i, v) in forbidden_transitions(9, true) {
            t.data_mut()[i] = v;
        }
        for _ in 0..200 {
            let n = rng.gen_range(1..8);
            let p = Tensor::uniform(&[n, 9], 5.0, &mut rng);
            let (path, _) = viterbi_decode(&p, &t).unwrap();
            let tags: Vec<Tag> = path.iter().map(|&i| Tag::from_index(i).unwrap()).collect();
            assert!(is_well_formed(&tags), "{tags:?}");
        }
    }

    #[test]
    fn nll_is_positive_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (p, t) = random_instance(&mut rng, 4, 5);
        let gold = [1, 0, 3, 3];
        let base = nll(&p, &t, &gold).unwrap();
        assert!(base > 0.0);
        // Shift one emission row: every path moves equally.
        let mut p2 = p.clone();
        for v in p2.row_mut(2) {
            *v += 4.0;
        }
        assert!((nll(&p2, &t, &gold).unwrap() - base).abs() < 1e-10);
        // Shift the END column: every path takes exactly one such transition.
        let mut t2 = t.clone();
        for y in 0..5 {
            t2.set(y, 6, t2.at(y, 6) - 2.5);
        }
        assert!((nll(&p, &t2, &gold).unwrap() - base).abs() < 1e-10);
    }

    #[test]
    fn marginals_are_distributions_matching_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (p, t) = random_instance(&mut rng, 3, 4);
        let m = marginals(&p, &t).unwrap();
        let mut brute = Tensor::zeros(&[3, 4]);
        for path in all_paths(3, 4) {
            let pr = sequence_prob(&p, &t, &path).unwrap();
            for (i, &y) in path.iter().enumerate() {
                brute.set(i, y, brute.at(i, y) + pr);
            }
        }
        assert!(m.max_abs_diff(&brute) < 1e-12);
        for i in 0..3 {
            assert!((m.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // d logZ / dP = marginals: the emission gradient of nll is marginals - onehot.
        let (dp, _) = nll_gradients(&p, &t, &[0, 1, 2]).unwrap();
        for i in 0..3 {
            assert!((dp.row(i).iter().sum::<f64>()).abs() < 1e-12);
        }
    }

    #[test]
    fn label_errors() {
        let p = Tensor::zeros(&[2, 3]);
        let t = Tensor::zeros(&[5, 5]);
        assert!(path_score(&p, &t, &[0]).is_err());
        assert!(path_score(&p, &t, &[0, 3]).is_err());
        assert!(log_partition(&p, &Tensor::zeros(&[4, 4])).is_err());
    }

    #[test]
    fn zero_head_gives_zero_emissions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let head = EmissionHead::new(&mut store, 6, 9, &mut rng).unwrap();
        store.value_mut(head.weight).fill(0.0);
        let mut g = Graph::new(&store);
        let xs: Vec<Var> = (0..4).map(|_| g.constant_vector(vec![0.5; 6])).collect();
        let e = head.forward(&mut g, &xs).unwrap();
        assert_eq!(g.shape(e), &[4, 9]);
        assert!(g.value(e).data().iter().all(|x| *x == 0.0));
    }
}
