//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied during one forward pass and
//! borrows the [`ParamStore`] read-only. [`Graph::backward`] walks the record
//! in reverse and returns [`Gradients`], which the caller folds into the store
//! with [`ParamStore::accumulate`]. Graphs are cheap and built per example.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::tensor::{dot, matmul_into, Tensor};

pub type ParamId = usize;

/// A trainable tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Flat indices held at a constant value. They receive no gradient and
    /// are never moved by an optimizer step.
    pinned: Vec<(usize, f64)>,
}

impl Parameter {
    pub fn pinned(&self) -> &[(usize, f64)] {
        &self.pinned
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        let id = self.params.len();
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            grad,
            pinned: Vec::new(),
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id].grad
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    /// Like [`ParamStore::id`] but a missing name is a format error.
    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::Format(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Hold the given flat indices at fixed values from now on.
    pub fn pin(&mut self, id: ParamId, entries: Vec<(usize, f64)>) {
        let p = &mut self.params[id];
        for &(i, v) in &entries {
            p.value.data_mut()[i] = v;
            p.grad.data_mut()[i] = 0.0;
        }
        p.pinned = entries;
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Add `grads` (scaled by `scale`) into the stored gradient slots.
    pub fn accumulate_scaled(&mut self, grads: &Gradients, scale: f64) {
        for (&id, g) in &grads.dense {
            let dst = self.params[id].grad.data_mut();
            for (d, s) in dst.iter_mut().zip(g) {
                *d += scale * s;
            }
        }
        for (&(id, row), g) in &grads.rows {
            let dst = self.params[id].grad.row_mut(row);
            for (d, s) in dst.iter_mut().zip(g) {
                *d += scale * s;
            }
        }
        for p in &mut self.params {
            for &(i, _) in &p.pinned {
                p.grad.data_mut()[i] = 0.0;
            }
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients) {
        self.accumulate_scaled(grads, 1.0);
    }

    /// Re-assert pinned values after an external update.
    pub fn enforce_pins(&mut self) {
        for p in &mut self.params {
            for &(i, v) in &p.pinned {
                p.value.data_mut()[i] = v;
            }
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Gradients produced by one backward pass.
///
/// Embedding lookups contribute per-row entries so that large tables never
/// need a dense buffer per example.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    dense: BTreeMap<ParamId, Vec<f64>>,
    rows: BTreeMap<(ParamId, usize), Vec<f64>>,
}

impl Gradients {
    /// Dense gradient for one parameter (zeros if unreached).
    pub fn for_param(&self, store: &ParamStore, id: ParamId) -> Tensor {
        let mut t = Tensor::zeros(store.value(id).shape());
        if let Some(g) = self.dense.get(&id) {
            for (d, s) in t.data_mut().iter_mut().zip(g) {
                *d += s;
            }
        }
        for (&(pid, row), g) in &self.rows {
            if pid == id {
                for (d, s) in t.row_mut(row).iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
        for &(i, _) in store.get(id).pinned() {
            t.data_mut()[i] = 0.0;
        }
        t
    }

    /// Parameters that received any gradient.
    pub fn touched(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.dense.keys().copied().collect();
        ids.extend(self.rows.keys().map(|&(id, _)| id));
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    Gather { param: ParamId, row: usize },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `mul * a + shift` (shift only matters forward)
    Affine { a: Var, mul: f64 },
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Reshape(Var),
    Sum(Var),
    Index { a: Var, i: usize },
    ScaleBy { a: Var, s: Var },
    Softmax(Var),
    LogSumExp(Var),
    CrfNll { emissions: Var, transitions: Var, gold: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Option<Tensor>,
    needs_grad: bool,
}

/// Elementwise operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Tanh,
    Sigmoid,
    Exp,
    Log,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Option<Tensor>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.store.value(id),
            _ => node.value.as_ref().expect("non-param node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Input, Some(t), false)
    }

    pub fn constant_vector(&mut self, data: Vec<f64>) -> Var {
        self.input(Tensor::vector(data))
    }

    /// The node for a stored parameter (one node per parameter per graph).
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        let v = self.push(Op::Param(id), None, true);
        self.param_vars[id] = Some(v);
        v
    }

    /// Row `row` of a matrix parameter, as a vector.
    pub fn gather(&mut self, param: ParamId, row: usize) -> Result<Var> {
        let table = self.store.value(param);
        if table.rank() != 2 || row >= table.rows() {
            return Err(Error::Contract(format!(
                "gather row {row} from `{}` of shape {:?}",
                self.store.get(param).name,
                table.shape()
            )));
        }
        let t = Tensor::vector(table.row(row).to_vec());
        Ok(self.push(Op::Gather { param, row }, Some(t), true))
    }

    /// `a[m×k] · b[k×n]`; a rank-1 `b` of length k is treated as `k×1` and
    /// yields a rank-1 result of length m.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.is_empty() || sb.len() > 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let n = if sb.len() == 2 { sb[1] } else { 1 };
        let mut out = vec![0.0; m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n);
        let shape = if sb.len() == 2 { vec![m, n] } else { vec![m] };
        let t = Tensor::new(shape, out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), Some(t), ng))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(name, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let av = self.value(a);
        let data = av.data().iter().map(|x| f(*x)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), Some(t), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), Some(t), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), Some(t), ng))
    }

    /// `mul * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, mul: f64, shift: f64) -> Var {
        let t = self.unary(a, |x| mul * x + shift);
        let ng = self.needs(a);
        self.push(Op::Affine { a, mul }, Some(t), ng)
    }

    pub fn scale(&mut self, a: Var, mul: f64) -> Var {
        self.affine(a, mul, 0.0)
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 1.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.unary(a, f64::tanh);
        let ng = self.needs(a);
        self.push(Op::Tanh(a), Some(t), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.unary(a, sigmoid);
        let ng = self.needs(a);
        self.push(Op::Sigmoid(a), Some(t), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.unary(a, f64::exp);
        let ng = self.needs(a);
        self.push(Op::Exp(a), Some(t), ng)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|x| !(**x > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("non-positive argument {bad}"),
            });
        }
        let t = self.unary(a, f64::ln);
        let ng = self.needs(a);
        Ok(self.push(Op::Log(a), Some(t), ng))
    }

    /// Dispatch by operator; binary ops take exactly two arguments.
    pub fn elementwise(&mut self, op: Elementwise, args: &[Var]) -> Result<Var> {
        let arity = match op {
            Elementwise::Add | Elementwise::Mul => 2,
            _ => 1,
        };
        if args.len() != arity {
            return Err(Error::Contract(format!(
                "{op:?} takes {arity} operand(s), got {}",
                args.len()
            )));
        }
        match op {
            Elementwise::Add => self.add(args[0], args[1]),
            Elementwise::Mul => self.mul(args[0], args[1]),
            Elementwise::Tanh => Ok(self.tanh(args[0])),
            Elementwise::Sigmoid => Ok(self.sigmoid(args[0])),
            Elementwise::Exp => Ok(self.exp(args[0])),
            Elementwise::Log => self.log(args[0]),
        }
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = match parts.first() {
            Some(v) => self.value(*v).shape().to_vec(),
            None => return Err(Error::Contract("concat of zero tensors".into())),
        };
        if axis >= first.len() {
            return Err(Error::Domain {
                op: "concat",
                msg: format!("axis {axis} out of range for rank {}", first.len()),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(shape, data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            Some(t),
            ng,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let ng = self.needs(a);
        Ok(self.push(Op::Reshape(a), Some(t), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.needs(a);
        self.push(Op::Sum(a), Some(Tensor::scalar(s)), ng)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let m = self.mul(a, b)?;
        Ok(self.sum(m))
    }

    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let v = self.value(a);
        if i >= v.len() {
            return Err(Error::Contract(format!("index {i} out of range for {:?}", v.shape())));
        }
        let t = Tensor::scalar(v.data()[i]);
        let ng = self.needs(a);
        Ok(self.push(Op::Index { a, i }, Some(t), ng))
    }

    /// `a * s` where `s` is a one-element node.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(Error::shape("scale_by", self.value(a).shape(), sv.shape()));
        }
        let k = sv.item();
        let t = self.unary(a, |x| k * x);
        let ng = self.needs(a) || self.needs(s);
        Ok(self.push(Op::ScaleBy { a, s }, Some(t), ng))
    }

    /// Softmax over all elements, max-shifted.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = Tensor::new(self.value(a).shape().to_vec(), softmax(self.value(a).data())).expect("shape");
        let ng = self.needs(a);
        self.push(Op::Softmax(a), Some(t), ng)
    }

    pub fn log_sum_exp(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(log_sum_exp(self.value(a).data()));
        let ng = self.needs(a);
        self.push(Op::LogSumExp(a), Some(t), ng)
    }

    /// Negative log-likelihood of `gold` under a linear-chain CRF with
    /// emissions `[n×L]` and transitions `[(L+2)×(L+2)]`.
    pub fn crf_nll(&mut self, emissions: Var, transitions: Var, gold: &[usize]) -> Result<Var> {
        let loss = crate::crf::nll(self.value(emissions), self.value(transitions), gold)?;
        let ng = self.needs(emissions) || self.needs(transitions);
        Ok(self.push(
            Op::CrfNll {
                emissions,
                transitions,
                gold: gold.to_vec(),
            },
            Some(Tensor::scalar(loss)),
            ng,
        ))
    }

    /// Reverse pass from a one-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        let mut result = Gradients::default();

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    add_into(result.dense.entry(*id).or_insert_with(|| vec![0.0; g.len()]), &g);
                }
                Op::Gather { param, row } => {
                    add_into(
                        result.rows.entry((*param, *row)).or_insert_with(|| vec![0.0; g.len()]),
                        &g,
                    );
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = bv.len() / k;
                    if self.needs(*a) {
                        // dA = dC · Bᵀ
                        let ga = slot(&mut grads, *a, m * k);
                        let bd = bv.data();
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            let arow = &mut ga[i * k..(i + 1) * k];
                            if n == 1 {
                                let gi = grow[0];
                                if gi != 0.0 {
                                    for (x, bvv) in arow.iter_mut().zip(bd) {
                                        *x += gi * bvv;
                                    }
                                }
                            } else {
                                for (p, x) in arow.iter_mut().enumerate() {
                                    *x += dot(grow, &bd[p * n..(p + 1) * n]);
                                }
                            }
                        }
                    }
                    if self.needs(*b) {
                        // dB = Aᵀ · dC
                        let gb = slot(&mut grads, *b, k * n);
                        let ad = av.data();
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let aip = ad[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                for (x, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *x += aip * gv;
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if self.needs(v) {
                            add_into(slot(&mut grads, v, g.len()), &g);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*a) {
                        add_into(slot(&mut grads, *a, g.len()), &g);
                    }
                    if self.needs(*b) {
                        let gb = slot(&mut grads, *b, g.len());
                        for (x, y) in gb.iter_mut().zip(&g) {
                            *x -= y;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let bd = self.value(*b).data();
                        let ga = slot(&mut grads, *a, g.len());
                        for ((x, gv), bv) in ga.iter_mut().zip(&g).zip(bd) {
                            *x += gv * bv;
                        }
                    }
                    if self.needs(*b) {
                        let ad = self.value(*a).data();
                        let gb = slot(&mut grads, *b, g.len());
                        for ((x, gv), av) in gb.iter_mut().zip(&g).zip(ad) {
                            *x += gv * av;
                        }
                    }
                }
                Op::Affine { a, mul } => {
                    let ga = slot(&mut grads, *a, g.len());
                    for (x, gv) in ga.iter_mut().zip(&g) {
                        *x += mul * gv;
                    }
                }
                Op::Tanh(a) => {
                    let y = node.value.as_ref().unwrap().data();
                    let ga = slot(&mut grads, *a, g.len());
                    for ((x, gv), yv) in ga.iter_mut().zip(&g).zip(y) {
                        *x += gv * (1.0 - yv * yv);
                    }
                }
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref().unwrap().data();
                    let ga = slot(&mut grads, *a, g.len());
                    for ((x, gv), yv) in ga.iter_mut().zip(&g).zip(y) {
                        *x += gv * yv * (1.0 - yv);
                    }
                }
                Op::Exp(a) => {
                    let y = node.value.as_ref().unwrap().data();
                    let ga = slot(&mut grads, *a, g.len());
                    for ((x, gv), yv) in ga.iter_mut().zip(&g).zip(y) {
                        *x += gv * yv;
                    }
                }
                Op::Log(a) => {
                    let ad = self.value(*a).data();
                    let ga = slot(&mut grads, *a, g.len());
                    for ((x, gv), av) in ga.iter_mut().zip(&g).zip(ad) {
                        *x += gv / av;
                    }
                }
                Op::Concat { parts, axis } => {
                    let shape = node.value.as_ref().unwrap().shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let total = shape[*axis];
                    let mut offset = 0;
                    for &p in parts {
                        let width = self.value(p).shape()[*axis];
                        if self.needs(p) {
                            let len = self.value(p).len();
                            let gp = slot(&mut grads, p, len);
                            let chunk = width * inner;
                            for o in 0..outer {
                                let src = &g[o * total * inner + offset * inner..][..chunk];
                                add_into(&mut gp[o * chunk..(o + 1) * chunk], src);
                            }
                        }
                        offset += width;
                    }
                }
                Op::Reshape(a) => add_into(slot(&mut grads, *a, g.len()), &g),
                Op::Sum(a) => {
                    let len = self.value(*a).len();
                    let ga = slot(&mut grads, *a, len);
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
                Op::Index { a, i } => {
                    let len = self.value(*a).len();
                    slot(&mut grads, *a, len)[*i] += g[0];
                }
                Op::ScaleBy { a, s } => {
                    let k = self.value(*s).item();
                    if self.needs(*a) {
                        let ga = slot(&mut grads, *a, g.len());
                        for (x, gv) in ga.iter_mut().zip(&g) {
                            *x += k * gv;
                        }
                    }
                    if self.needs(*s) {
                        let ds = dot(&g, self.value(*a).data());
                        slot(&mut grads, *s, 1)[0] += ds;
                    }
                }
                Op::Softmax(a) => {
                    let y = node.value.as_ref().unwrap().data();
                    let gy = dot(&g, y);
                    let ga = slot(&mut grads, *a, g.len());
                    for ((x, gv), yv) in ga.iter_mut().zip(&g).zip(y) {
                        *x += yv * (gv - gy);
                    }
                }
                Op::LogSumExp(a) => {
                    let p = softmax(self.value(*a).data());
                    let ga = slot(&mut grads, *a, p.len());
                    for (x, pv) in ga.iter_mut().zip(&p) {
                        *x += g[0] * pv;
                    }
                }
                Op::CrfNll {
                    emissions,
                    transitions,
                    gold,
                } => {
                    let (dp, dt) =
                        crate::crf::nll_gradients(self.value(*emissions), self.value(*transitions), gold)?;
                    if self.needs(*emissions) {
                        let ge = slot(&mut grads, *emissions, dp.len());
                        for (x, d) in ge.iter_mut().zip(dp.data()) {
                            *x += g[0] * d;
                        }
                    }
                    if self.needs(*transitions) {
                        let gt = slot(&mut grads, *transitions, dt.len());
                        for (x, d) in gt.iter_mut().zip(dt.data()) {
                            *x += g[0] * d;
                        }
                    }
                }
            }
        }
        Ok(result)
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub(crate) fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}
