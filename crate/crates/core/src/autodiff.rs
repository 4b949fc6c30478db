//! Minimal reverse-mode automatic differentiation over dense vectors.
//!
//! A [`Tape`] records vector-valued nodes for one forward pass. Weight
//! matrices live in a [`ParamStore`] and are referenced by id, so matrix
//! products never copy parameters onto the tape. [`Tape::backward`] returns
//! gradients shaped like the store.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::linalg::{sigmoid, softplus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Row-major.
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub tensors: Vec<Tensor>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, data: Vec<f64>) -> ParamId {
        assert_eq!(data.len(), rows * cols, "tensor {name} has wrong size");
        assert!(!self.index.contains_key(name), "duplicate tensor {name}");
        self.index.insert(name.to_string(), self.tensors.len());
        self.tensors.push(Tensor {
            name: name.to_string(),
            rows,
            cols,
            data,
        });
        ParamId(self.tensors.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn data(&self, id: ParamId) -> &[f64] {
        &self.tensors[id.0].data
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| self.get(i))
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads(self.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect())
    }

    /// Rebuild the name index (needed after deserialization).
    pub fn reindex(&mut self) {
        self.index = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (t.name.clone(), i))
            .collect();
    }

    /// Flat coordinate `k` across all tensors, in store order.
    pub fn flat_locate(&self, mut k: usize) -> Option<(ParamId, usize)> {
        for (i, t) in self.tensors.iter().enumerate() {
            if k < t.data.len() {
                return Some((ParamId(i), k));
            }
            k -= t.data.len();
        }
        None
    }
}

/// Gradients aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().flatten().for_each(|x| *x *= s);
    }

    pub fn global_norm(&self) -> f64 {
        self.0.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatVec { w: ParamId, x: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Neg(Var),
    OneMinus(Var),
    Exp(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Norm(Var),
    Dot(Var, Var),
    Sum(Var),
    SumScalars(Vec<Var>),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Softmax(Var),
    /// `out_i = q . k_i`
    DotEach { q: Var, keys: Vec<Var> },
    /// `out = sum_i w_i v_i`
    WeightedSum { w: Var, items: Vec<Var> },
    /// Cosine similarity of `x` with fixed rows; zero rows and zero `x` give 0.
    CosineConst { x: Var, rows: Vec<Vec<f64>> },
    /// `sum (x - target)^2`
    SqErr { x: Var, target: Vec<f64> },
    /// Binary cross-entropy on a logit.
    BceLogit { x: Var, target: f64 },
    /// Negative log-softmax at the target class.
    CrossEntropy { x: Var, class: usize },
}

struct Node {
    value: Vec<f64>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(4096),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x).iter().map(|&a| f(a)).collect();
        self.push(v, op)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len(), "elementwise length mismatch");
        let v = va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect();
        self.push(v, op)
    }

    pub fn leaf(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Whole tensor as a vector node.
    pub fn param(&mut self, id: ParamId) -> Var {
        let v = self.params.data(id).to_vec();
        self.push(v, Op::Param(id))
    }

    pub fn matvec(&mut self, w: ParamId, x: Var) -> Var {
        let t = self.params.get(w);
        let xv = self.value(x);
        assert_eq!(t.cols, xv.len(), "matvec {}: cols mismatch", t.name);
        let y = crate::linalg::matvec(&t.data, t.rows, t.cols, xv);
        self.push(y, Op::MatVec { w, x })
    }

    /// `W x + b`.
    pub fn affine(&mut self, w: ParamId, b: Var, x: Var) -> Var {
        let y = self.matvec(w, x);
        self.add(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.map(a, |x| -x, Op::Neg(a))
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        self.map(a, |x| 1.0 - x, Op::OneMinus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, softplus, Op::Softplus(a))
    }

    pub fn norm(&mut self, a: Var) -> Var {
        let n = crate::linalg::norm(self.value(a));
        self.push(vec![n], Op::Norm(a))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let d = crate::linalg::dot(self.value(a), self.value(b));
        self.push(vec![d], Op::Dot(a, b))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![s], Op::Sum(a))
    }

    /// Sum of scalar nodes.
    pub fn sum_scalars(&mut self, xs: Vec<Var>) -> Var {
        let s = xs.iter().map(|&x| self.scalar(x)).sum();
        self.push(vec![s], Op::SumScalars(xs))
    }

    pub fn concat(&mut self, xs: Vec<Var>) -> Var {
        let v = xs.iter().flat_map(|&x| self.value(x).iter().copied()).collect();
        self.push(v, Op::Concat(xs))
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x)[start..start + len].to_vec();
        self.push(v, Op::Slice { x, start })
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let v = crate::linalg::softmax(self.value(x));
        self.push(v, Op::Softmax(x))
    }

    pub fn dot_each(&mut self, q: Var, keys: Vec<Var>) -> Var {
        let qv = self.value(q);
        let v = keys
            .iter()
            .map(|&k| crate::linalg::dot(qv, self.value(k)))
            .collect();
        self.push(v, Op::DotEach { q, keys })
    }

    pub fn weighted_sum(&mut self, w: Var, items: Vec<Var>) -> Var {
        let wv = self.value(w);
        assert_eq!(wv.len(), items.len());
        let dim = self.value(items[0]).len();
        let mut out = vec![0.0; dim];
        for (&wi, &it) in wv.iter().zip(&items) {
            for (o, x) in out.iter_mut().zip(self.value(it)) {
                *o += wi * x;
            }
        }
        self.push(out, Op::WeightedSum { w, items })
    }

    pub fn cosine_const(&mut self, x: Var, rows: Vec<Vec<f64>>) -> Var {
        let v = rows.iter().map(|r| cosine(self.value(x), r)).collect();
        self.push(v, Op::CosineConst { x, rows })
    }

    pub fn sq_err(&mut self, x: Var, target: Vec<f64>) -> Var {
        let s = self
            .value(x)
            .iter()
            .zip(&target)
            .map(|(a, t)| (a - t) * (a - t))
            .sum();
        self.push(vec![s], Op::SqErr { x, target })
    }

    pub fn bce_logit(&mut self, x: Var, target: f64) -> Var {
        let l = bce_with_logit(self.scalar(x), target);
        self.push(vec![l], Op::BceLogit { x, target })
    }

    pub fn cross_entropy(&mut self, x: Var, class: usize) -> Var {
        let v = self.value(x);
        let l = crate::linalg::log_sum_exp(v) - v[class];
        self.push(vec![l], Op::CrossEntropy { x, class })
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, root: Var) -> Grads {
        let mut pg = self.params.zero_grads();
        let mut g: Vec<Vec<f64>> = vec![Vec::new(); self.nodes.len()];
        g[root.0] = vec![1.0; self.nodes[root.0].value.len()];

        fn acc(g: &mut [Vec<f64>], v: Var, delta: impl Iterator<Item = f64>, len: usize) {
            let slot = &mut g[v.0];
            if slot.is_empty() {
                slot.resize(len, 0.0);
            }
            for (s, d) in slot.iter_mut().zip(delta) {
                *s += d;
            }
        }

        for i in (0..=root.0).rev() {
            if g[i].is_empty() {
                continue;
            }
            let gi = std::mem::take(&mut g[i]);
            let node = &self.nodes[i];
            let y = &node.value;
            let len_of = |v: Var| self.nodes[v.0].value.len();
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    for (p, d) in pg.0[id.0].iter_mut().zip(&gi) {
                        *p += d;
                    }
                }
                Op::MatVec { w, x } => {
                    let t = self.params.get(*w);
                    let xv = val(*x);
                    let gw = &mut pg.0[w.0];
                    let mut gx = vec![0.0; t.cols];
                    for (r, &gr) in gi.iter().enumerate() {
                        if gr == 0.0 {
                            continue;
                        }
                        let row = &t.data[r * t.cols..(r + 1) * t.cols];
                        let grow = &mut gw[r * t.cols..(r + 1) * t.cols];
                        for (gwc, xc) in grow.iter_mut().zip(xv) {
                            *gwc += gr * xc;
                        }
                        for (gxc, wc) in gx.iter_mut().zip(row) {
                            *gxc += gr * wc;
                        }
                    }
                    acc(&mut g, *x, gx.into_iter(), t.cols);
                }
                Op::Add(a, b) => {
                    acc(&mut g, *a, gi.iter().copied(), gi.len());
                    acc(&mut g, *b, gi.iter().copied(), gi.len());
                }
                Op::Sub(a, b) => {
                    acc(&mut g, *a, gi.iter().copied(), gi.len());
                    acc(&mut g, *b, gi.iter().map(|d| -d), gi.len());
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a).clone(), val(*b).clone());
                    acc(&mut g, *a, gi.iter().zip(&vb).map(|(d, y)| d * y), gi.len());
                    acc(&mut g, *b, gi.iter().zip(&va).map(|(d, x)| d * x), gi.len());
                }
                Op::Scale(a, s) => acc(&mut g, *a, gi.iter().map(|d| d * s), gi.len()),
                Op::Neg(a) | Op::OneMinus(a) => acc(&mut g, *a, gi.iter().map(|d| -d), gi.len()),
                Op::Exp(a) => acc(&mut g, *a, gi.iter().zip(y).map(|(d, e)| d * e), gi.len()),
                Op::Tanh(a) => acc(
                    &mut g,
                    *a,
                    gi.iter().zip(y).map(|(d, t)| d * (1.0 - t * t)),
                    gi.len(),
                ),
                Op::Sigmoid(a) => acc(
                    &mut g,
                    *a,
                    gi.iter().zip(y).map(|(d, s)| d * s * (1.0 - s)),
                    gi.len(),
                ),
                Op::Softplus(a) => {
                    let x = val(*a).clone();
                    acc(&mut g, *a, gi.iter().zip(&x).map(|(d, &x)| d * sigmoid(x)), gi.len())
                }
                Op::Norm(a) => {
                    let x = val(*a).clone();
                    let n = y[0];
                    let s = if n > 0.0 { gi[0] / n } else { 0.0 };
                    acc(&mut g, *a, x.iter().map(|v| v * s), x.len());
                }
                Op::Dot(a, b) => {
                    let (va, vb) = (val(*a).clone(), val(*b).clone());
                    acc(&mut g, *a, vb.iter().map(|v| v * gi[0]), vb.len());
                    acc(&mut g, *b, va.iter().map(|v| v * gi[0]), va.len());
                }
                Op::Sum(a) => {
                    let n = len_of(*a);
                    acc(&mut g, *a, std::iter::repeat_n(gi[0], n), n);
                }
                Op::SumScalars(xs) => {
                    for &x in xs {
                        acc(&mut g, x, std::iter::once(gi[0]), 1);
                    }
                }
                Op::Concat(xs) => {
                    let mut off = 0;
                    for &x in xs {
                        let n = len_of(x);
                        acc(&mut g, x, gi[off..off + n].iter().copied(), n);
                        off += n;
                    }
                }
                Op::Slice { x, start } => {
                    let n = len_of(*x);
                    let mut full = vec![0.0; n];
                    full[*start..*start + gi.len()].copy_from_slice(&gi);
                    acc(&mut g, *x, full.into_iter(), n);
                }
                Op::Softmax(x) => {
                    let dot: f64 = gi.iter().zip(y).map(|(d, p)| d * p).sum();
                    acc(&mut g, *x, gi.iter().zip(y).map(|(d, p)| p * (d - dot)), y.len());
                }
                Op::DotEach { q, keys } => {
                    let qv = val(*q).clone();
                    let mut gq = vec![0.0; qv.len()];
                    for (&k, &d) in keys.iter().zip(&gi) {
                        let kv = val(k);
                        for (gqj, kj) in gq.iter_mut().zip(kv) {
                            *gqj += d * kj;
                        }
                        acc(&mut g, k, qv.iter().map(|x| x * d), qv.len());
                    }
                    acc(&mut g, *q, gq.into_iter(), qv.len());
                }
                Op::WeightedSum { w, items } => {
                    let wv = val(*w).clone();
                    let gw: Vec<f64> = items
                        .iter()
                        .map(|&it| crate::linalg::dot(val(it), &gi))
                        .collect();
                    for (&it, &wi) in items.iter().zip(&wv) {
                        acc(&mut g, it, gi.iter().map(|d| d * wi), gi.len());
                    }
                    acc(&mut g, *w, gw.into_iter(), wv.len());
                }
                Op::CosineConst { x, rows } => {
                    let xv = val(*x).clone();
                    let nx = crate::linalg::norm(&xv);
                    let mut gx = vec![0.0; xv.len()];
                    if nx > COS_EPS {
                        for (r, &d) in rows.iter().zip(&gi) {
                            let nr = crate::linalg::norm(r);
                            if nr <= COS_EPS {
                                continue;
                            }
                            let c = crate::linalg::dot(&xv, r) / (nx * nr);
                            for j in 0..xv.len() {
                                gx[j] += d * (r[j] / (nx * nr) - c * xv[j] / (nx * nx));
                            }
                        }
                    }
                    acc(&mut g, *x, gx.into_iter(), xv.len());
                }
                Op::SqErr { x, target } => {
                    let xv = val(*x).clone();
                    acc(
                        &mut g,
                        *x,
                        xv.iter().zip(target).map(|(a, t)| 2.0 * (a - t) * gi[0]),
                        xv.len(),
                    );
                }
                Op::BceLogit { x, target } => {
                    let z = val(*x)[0];
                    acc(&mut g, *x, std::iter::once((sigmoid(z) - target) * gi[0]), 1);
                }
                Op::CrossEntropy { x, class } => {
                    let p = crate::linalg::softmax(val(*x));
                    let n = p.len();
                    acc(
                        &mut g,
                        *x,
                        p.iter()
                            .enumerate()
                            .map(|(j, pj)| (pj - f64::from(u8::from(j == *class))) * gi[0]),
                        n,
                    );
                }
            }
        }
        pg
    }
}

const COS_EPS: f64 = 1e-12;

/// Cosine similarity; zero when either side is (numerically) zero.
pub fn cosine(x: &[f64], r: &[f64]) -> f64 {
    let (nx, nr) = (crate::linalg::norm(x), crate::linalg::norm(r));
    if nx <= COS_EPS || nr <= COS_EPS {
        0.0
    } else {
        crate::linalg::dot(x, r) / (nx * nr)
    }
}

/// `-[y ln s(z) + (1-y) ln(1-s(z))]` computed from the logit.
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    softplus(z) - y * z
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Builds a graph touching every op and returns the scalar loss.
    fn graph(t: &mut Tape, w: ParamId, b: ParamId, x: &[f64]) -> Var {
        let xv = t.leaf(x.to_vec());
        let bv = t.param(b);
        let h = t.affine(w, bv, xv);
        let a1 = t.tanh(h);
        let a2 = t.sigmoid(h);
        let a3 = t.softplus(h);
        let m = t.mul(a1, a2);
        let s = t.sub(m, a3);
        let sc3 = t.scale(s, 0.3);
        let e = t.exp(sc3);
        let om = t.one_minus(a2);
        let n = t.neg(om);
        let sum = t.add(e, n);
        let c = t.concat(vec![sum, a1]);
        let sl = t.slice(c, 2, 4);
        let sm = t.softmax(sl);
        let keys = vec![a1, a2, a3];
        let q = t.slice(h, 0, 4);
        let qk: Vec<Var> = keys.iter().map(|&k| t.slice(k, 0, 4)).collect();
        let sc = t.dot_each(q, qk.clone());
        let att = t.softmax(sc);
        let ctx = t.weighted_sum(att, qk);
        let cs = t.cosine_const(ctx, vec![vec![1.0, -0.5, 0.2, 0.3], vec![0.0; 4]]);
        let l1 = t.sq_err(sm, vec![0.1, 0.2, 0.3, 0.4]);
        let l2 = t.cross_entropy(ctx, 2);
        let zl = t.slice(h, 3, 1);
        let l3 = t.bce_logit(zl, 1.0);
        let l4 = t.norm(ctx);
        let l5 = t.dot(a1, a3);
        let l6 = t.sum(cs);
        t.sum_scalars(vec![l1, l2, l3, l4, l5, l6])
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ps = ParamStore::new();
        let w = ps.add("w", 6, 5, rand_vec(&mut rng, 30));
        let b = ps.add("b", 6, 1, rand_vec(&mut rng, 6));
        let x = rand_vec(&mut rng, 5);

        let grads = {
            let mut t = Tape::new(&ps);
            let l = graph(&mut t, w, b, &x);
            t.backward(l)
        };
        let h = 1e-5;
        for k in 0..ps.num_params() {
            let (id, j) = ps.flat_locate(k).unwrap();
            let eval = |delta: f64| {
                let mut p = ps.clone();
                p.tensors[id.0].data[j] += delta;
                let mut t = Tape::new(&p);
                let l = graph(&mut t, w, b, &x);
                t.scalar(l)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = grads.0[id.0][j];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(rel < 1e-6 || (fd - an).abs() < 1e-9, "k={k} fd={fd} an={an}");
        }
    }

    #[test]
    fn bce_matches_direct_formula() {
        for (z, y) in [(0.3, 1.0), (-2.0, 0.0), (4.0, 0.0), (-1.0, 1.0)] {
            let s = sigmoid(z);
            let direct = -(y * s.ln() + (1.0 - y) * (1.0 - s).ln());
            assert!((bce_with_logit(z, y) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_handles_zero() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((cosine(&[2.0, 0.0], &[1.0, 0.0]) - 1.0).abs() < 1e-15);
    }
}
