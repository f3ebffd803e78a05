//! Reverse-mode differentiation on an explicit, per-pass tape.
//!
//! A [`Tape`] records every operation of one forward pass. [`Tape::backward`]
//! consumes it and returns the gradients of a scalar loss with respect to
//! every node, addressable by [`Var`] or by the [`Param`] that produced a leaf.

use std::collections::HashMap;

use crate::attention::{attention_backward, attention_forward};
use crate::backend::{self, Backend, ScanArgs};
use crate::error::TensorError;
use crate::mamba::{scan_backward, scan_forward, SavedScan, ScanGrads, ScanOptions};
use crate::param::{Param, ParamId};
use crate::tensor::{self, Activation, Element, FlopCounter, Tensor};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul { a: Var, w: Var, transpose: bool },
    Add(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, bias: Var },
    Act { a: Var, kind: Activation },
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, means: Vec<T>, rstds: Vec<T> },
    Conv1d { x: Var, filters: Var, bias: Var },
    Scan { u: Var, dt: Var, a_log: Var, b: Var, c: Var, d: Var, saved: SavedScan<T> },
    Embedding { table: Var, ids: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, n_heads: usize, probs: Vec<T> },
    Gather { x: Var, idx: Vec<usize> },
    Scatter { parts: Vec<(Var, Vec<usize>)> },
    Select { x: Var, cols: Vec<usize> },
    ScaleRows { x: Var, s: Var },
    Reshape(Var),
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<T>, probs: Tensor<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    counter: FlopCounter,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), counter: FlopCounter::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable leaf not tied to any [`Param`].
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn flops(&self) -> &FlopCounter {
        &self.counter
    }

    /// Runs reverse accumulation from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let loss_shape = self.nodes[loss.0].value.shape().to_vec();
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(TensorError::NonScalarLoss(loss_shape));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::from_parts(n.value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads, params: self.params })
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, w, transpose } => {
                let (av, wv) = (val(*a), val(*w));
                let m = av.last_dim();
                let k = av.rows();
                let j = node.value.last_dim();
                {
                    let ga = slot(grads, *a, av.len());
                    // da = g · wᵀ
                    let w_t = if *transpose { (m as isize, 1) } else { (1, j as isize) };
                    T::gemm(k, j, m, T::one(), g, (j as isize, 1), wv.data(), w_t, T::one(), ga, (m as isize, 1));
                }
                let gw = slot(grads, *w, wv.len());
                if *transpose {
                    // dw[J, M] = gᵀ · a
                    T::gemm(j, k, m, T::one(), g, (1, j as isize), av.data(), (m as isize, 1), T::one(), gw, (m as isize, 1));
                } else {
                    // dw[M, J] = aᵀ · g
                    T::gemm(m, k, j, T::one(), av.data(), (1, m as isize), g, (j as isize, 1), T::one(), gw, (j as isize, 1));
                }
            }
            Op::Add(a, b) => {
                add_into(slot(grads, *a, g.len()), g);
                add_into(slot(grads, *b, g.len()), g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let ga = slot(grads, *a, g.len());
                for ((d, &gi), &bi) in ga.iter_mut().zip(g).zip(bv) {
                    *d = *d + gi * bi;
                }
                let gb = slot(grads, *b, g.len());
                for ((d, &gi), &ai) in gb.iter_mut().zip(g).zip(av) {
                    *d = *d + gi * ai;
                }
            }
            Op::AddRow { a, bias } => {
                add_into(slot(grads, *a, g.len()), g);
                let w = val(*bias).len();
                let gb = slot(grads, *bias, w);
                for row in g.chunks(w) {
                    add_into(gb, row);
                }
            }
            Op::Act { a, kind } => {
                let x = val(*a).data();
                let y = node.value.data();
                let ga = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] = ga[i] + g[i] * kind.derivative(x[i], y[i]);
                }
            }
            Op::Softmax(a) => {
                let w = node.value.last_dim();
                let y = node.value.data();
                let ga = slot(grads, *a, g.len());
                for ((gr, yr), dr) in g.chunks(w).zip(y.chunks(w)).zip(ga.chunks_mut(w)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for c in 0..w {
                        dr[c] = dr[c] + yr[c] * (gr[c] - dot);
                    }
                }
            }
            Op::LayerNorm { x, gain, means, rstds } => {
                let xv = val(*x);
                let gv = val(*gain).data();
                let d = xv.last_dim();
                let n = T::of(d as f64);
                let mut dgain = vec![T::zero(); d];
                let mut dx = vec![T::zero(); xv.len()];
                for r in 0..xv.rows() {
                    let xr = xv.row(r);
                    let gr = &g[r * d..(r + 1) * d];
                    let (mu, rs) = (means[r], rstds[r]);
                    let mut mean_dxhat = T::zero();
                    let mut mean_dxhat_xhat = T::zero();
                    for c in 0..d {
                        let xhat = (xr[c] - mu) * rs;
                        dgain[c] = dgain[c] + gr[c] * xhat;
                        let dxhat = gr[c] * gv[c];
                        mean_dxhat = mean_dxhat + dxhat;
                        mean_dxhat_xhat = mean_dxhat_xhat + dxhat * xhat;
                    }
                    mean_dxhat = mean_dxhat / n;
                    mean_dxhat_xhat = mean_dxhat_xhat / n;
                    for c in 0..d {
                        let xhat = (xr[c] - mu) * rs;
                        let dxhat = gr[c] * gv[c];
                        dx[r * d + c] = rs * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
                add_into(slot(grads, *x, dx.len()), &dx);
                add_into(slot(grads, *gain, d), &dgain);
            }
            Op::Conv1d { x, filters, bias } => {
                let xv = val(*x);
                let fv = val(*filters);
                let (b, l, i) = tensor::seq_dims(xv.shape()).expect("conv input rank");
                let c = fv.last_dim();
                let mut dx = vec![T::zero(); xv.len()];
                let mut df = vec![T::zero(); fv.len()];
                let mut db = vec![T::zero(); i];
                for bb in 0..b {
                    let base = bb * l * i;
                    for t in 0..l {
                        for ch in 0..i {
                            let go = g[base + t * i + ch];
                            db[ch] = db[ch] + go;
                            for tap in 0..c {
                                let back = c - 1 - tap;
                                if back <= t {
                                    let xi = base + (t - back) * i + ch;
                                    dx[xi] = dx[xi] + go * fv.data()[ch * c + tap];
                                    df[ch * c + tap] = df[ch * c + tap] + go * xv.data()[xi];
                                }
                            }
                        }
                    }
                }
                add_into(slot(grads, *x, dx.len()), &dx);
                add_into(slot(grads, *filters, df.len()), &df);
                add_into(slot(grads, *bias, i), &db);
            }
            Op::Scan { u, dt, a_log, b, c, d, saved } => {
                let ScanGrads { du, ddt, da_log, db, dc, dd } =
                    scan_backward(val(*u), val(*dt), val(*a_log), val(*b), val(*c), val(*d), saved, g);
                add_into(slot(grads, *u, du.len()), &du);
                add_into(slot(grads, *dt, ddt.len()), &ddt);
                add_into(slot(grads, *a_log, da_log.len()), &da_log);
                add_into(slot(grads, *b, db.len()), &db);
                add_into(slot(grads, *c, dc.len()), &dc);
                add_into(slot(grads, *d, dd.len()), &dd);
            }
            Op::Embedding { table, ids } => {
                let tv = val(*table);
                let w = tv.last_dim();
                let gt = slot(grads, *table, tv.len());
                for (k, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * w..(id + 1) * w], &g[k * w..(k + 1) * w]);
                }
            }
            Op::Attention { q, k, v, n_heads, probs } => {
                let (dq, dk, dv) = attention_backward(val(*q), val(*k), val(*v), *n_heads, probs, g);
                add_into(slot(grads, *q, dq.len()), &dq);
                add_into(slot(grads, *k, dk.len()), &dk);
                add_into(slot(grads, *v, dv.len()), &dv);
            }
            Op::Gather { x, idx } => {
                let xv = val(*x);
                let w = xv.last_dim();
                let gx = slot(grads, *x, xv.len());
                for (k, &r) in idx.iter().enumerate() {
                    add_into(&mut gx[r * w..(r + 1) * w], &g[k * w..(k + 1) * w]);
                }
            }
            Op::Scatter { parts } => {
                let w = node.value.last_dim();
                for (p, idx) in parts {
                    let gp = slot(grads, *p, idx.len() * w);
                    for (k, &r) in idx.iter().enumerate() {
                        add_into(&mut gp[k * w..(k + 1) * w], &g[r * w..(r + 1) * w]);
                    }
                }
            }
            Op::Select { x, cols } => {
                let xv = val(*x);
                let w = xv.last_dim();
                let gx = slot(grads, *x, xv.len());
                for (r, &c) in cols.iter().enumerate() {
                    gx[r * w + c] = gx[r * w + c] + g[r];
                }
            }
            Op::ScaleRows { x, s } => {
                let xv = val(*x);
                let sv = val(*s).data();
                let w = xv.last_dim();
                {
                    let gx = slot(grads, *x, xv.len());
                    for (r, &k) in sv.iter().enumerate() {
                        for c in 0..w {
                            gx[r * w + c] = gx[r * w + c] + g[r * w + c] * k;
                        }
                    }
                }
                let gs = slot(grads, *s, sv.len());
                for (r, gsr) in gs.iter_mut().enumerate() {
                    let dot: T = (0..w).map(|c| g[r * w + c] * xv.data()[r * w + c]).sum();
                    *gsr = *gsr + dot;
                }
            }
            Op::Reshape(x) => add_into(slot(grads, *x, g.len()), g),
            Op::Sum(x) => {
                let n = val(*x).len();
                let gx = slot(grads, *x, n);
                for v in gx.iter_mut() {
                    *v = *v + g[0];
                }
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let lv = val(*logits);
                let w = lv.last_dim();
                let wsum: T = weights.iter().copied().sum();
                let denom = if wsum > T::zero() { wsum } else { T::one() };
                let gl = slot(grads, *logits, lv.len());
                for (r, (&t, &wt)) in targets.iter().zip(weights).enumerate() {
                    if wt == T::zero() {
                        continue;
                    }
                    let s = g[0] * wt / denom;
                    for c in 0..w {
                        let onehot = if c == t { T::one() } else { T::zero() };
                        gl[r * w + c] = gl[r * w + c] + s * (probs.row(r)[c] - onehot);
                    }
                }
            }
        }
    }
}

fn slot<T: Element>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Element> Gradients<T> {
    /// Gradient at `v`; `None` when the loss does not depend on it.
    pub fn of(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for a parameter used during the pass.
    pub fn wrt(&self, p: &Param<T>) -> Option<&Tensor<T>> {
        self.params.get(&p.id()).and_then(|v| self.of(*v))
    }
}

impl<T: Element> Backend<T> for Tape<T> {
    type V = Var;

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        self.val(*v)
    }

    fn param(&mut self, p: &Param<T>) -> Var {
        if let Some(v) = self.params.get(&p.id()) {
            return *v;
        }
        let v = self.push(p.value.clone(), Op::Leaf);
        self.params.insert(p.id(), v);
        v
    }

    fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    fn counter(&mut self) -> &mut FlopCounter {
        &mut self.counter
    }

    fn matmul(&mut self, a: &Var, w: &Var, transpose_w: bool) -> Var {
        let out = tensor::matmul(self.val(*a), self.val(*w), transpose_w).unwrap_or_else(|e| panic!("{e}"));
        backend::record_matmul(&mut self.counter, self.nodes[a.0].value.shape(), out.last_dim());
        self.push(out, Op::MatMul { a: *a, w: *w, transpose: transpose_w })
    }

    fn add(&mut self, a: &Var, b: &Var) -> Var {
        let out = self.val(*a).add(self.val(*b)).unwrap_or_else(|e| panic!("{e}"));
        self.push(out, Op::Add(*a, *b))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Var {
        let out = self.val(*a).mul(self.val(*b)).unwrap_or_else(|e| panic!("{e}"));
        self.push(out, Op::Mul(*a, *b))
    }

    fn add_row(&mut self, a: &Var, bias: &Var) -> Var {
        let out = self.val(*a).add_row(self.val(*bias)).unwrap_or_else(|e| panic!("{e}"));
        self.push(out, Op::AddRow { a: *a, bias: *bias })
    }

    fn activation(&mut self, a: &Var, kind: Activation) -> Var {
        let out = self.val(*a).activation(kind);
        self.push(out, Op::Act { a: *a, kind })
    }

    fn softmax(&mut self, a: &Var) -> Var {
        let out = self.val(*a).softmax();
        self.push(out, Op::Softmax(*a))
    }

    fn layernorm(&mut self, x: &Var, gain: &Var) -> Var {
        let (out, means, rstds) = tensor::layernorm_forward(self.val(*x), self.val(*gain)).unwrap_or_else(|e| panic!("{e}"));
        self.push(out, Op::LayerNorm { x: *x, gain: *gain, means, rstds })
    }

    fn conv1d(&mut self, x: &Var, filters: &Var, bias: &Var) -> Var {
        let nodes = &self.nodes;
        let out = nodes[x.0].value.causal_depthwise_conv1d(&nodes[filters.0].value, &nodes[bias.0].value, &mut self.counter);
        let out = out.unwrap_or_else(|e| panic!("{e}"));
        self.push(out, Op::Conv1d { x: *x, filters: *filters, bias: *bias })
    }

    fn selective_scan(&mut self, args: ScanArgs<'_, Var>, opts: &ScanOptions) -> Var {
        let ScanArgs { u, dt, a_log, b, c, d } = args;
        backend::record_scan(&mut self.counter, self.nodes[u.0].value.shape(), self.nodes[a_log.0].value.last_dim());
        let (y, saved) = scan_forward(self.val(*u), self.val(*dt), self.val(*a_log), self.val(*b), self.val(*c), self.val(*d), opts, true);
        let saved = saved.expect("states saved for backward");
        self.push(y, Op::Scan { u: *u, dt: *dt, a_log: *a_log, b: *b, c: *c, d: *d, saved })
    }

    fn embedding(&mut self, table: &Var, ids: &[usize]) -> Var {
        let out = backend::embedding_value(self.val(*table), ids);
        self.push(out, Op::Embedding { table: *table, ids: ids.to_vec() })
    }

    fn attention(&mut self, q: &Var, k: &Var, v: &Var, n_heads: usize) -> Var {
        backend::record_attention(&mut self.counter, self.nodes[q.0].value.shape(), n_heads);
        let (out, probs) = attention_forward(self.val(*q), self.val(*k), self.val(*v), n_heads);
        self.push(out, Op::Attention { q: *q, k: *k, v: *v, n_heads, probs })
    }

    fn gather_rows(&mut self, x: &Var, idx: &[usize]) -> Var {
        let out = backend::gather_rows_value(self.val(*x), idx);
        self.push(out, Op::Gather { x: *x, idx: idx.to_vec() })
    }

    fn scatter_rows(&mut self, parts: &[(Var, Vec<usize>)], rows: usize, width: usize) -> Var {
        let refs: Vec<(&Tensor<T>, &[usize])> = parts.iter().map(|(v, i)| (self.val(*v), i.as_slice())).collect();
        let out = backend::scatter_rows_value(&refs, rows, width);
        self.push(out, Op::Scatter { parts: parts.to_vec() })
    }

    fn select_per_row(&mut self, x: &Var, cols: &[usize]) -> Var {
        let out = backend::select_per_row_value(self.val(*x), cols);
        self.push(out, Op::Select { x: *x, cols: cols.to_vec() })
    }

    fn scale_rows(&mut self, x: &Var, s: &Var) -> Var {
        let out = backend::scale_rows_value(self.val(*x), self.val(*s));
        self.push(out, Op::ScaleRows { x: *x, s: *s })
    }

    fn reshape(&mut self, x: &Var, shape: &[usize]) -> Var {
        let out = self.val(*x).reshape(shape).unwrap_or_else(|e| panic!("{e}"));
        self.push(out, Op::Reshape(*x))
    }

    fn sum(&mut self, x: &Var) -> Var {
        let out = Tensor::scalar(self.val(*x).sum());
        self.push(out, Op::Sum(*x))
    }

    fn cross_entropy(&mut self, logits: &Var, targets: &[usize], weights: &[T]) -> Var {
        let (loss, probs) = backend::cross_entropy_value(self.val(*logits), targets, weights);
        let op = Op::CrossEntropy { logits: *logits, targets: targets.to_vec(), weights: weights.to_vec(), probs };
        self.push(Tensor::scalar(loss), op)
    }
}

/// Central differences `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate.
pub fn finite_diff_gradient<T: Element>(f: impl Fn(&Tensor<T>) -> f64, x: &Tensor<T>, h: f64) -> Tensor<T> {
    let coords: Vec<usize> = (0..x.len()).collect();
    let partials = finite_diff_at(&f, x, h, &coords);
    Tensor::from_parts(x.shape().to_vec(), partials.into_iter().map(T::of).collect())
}

/// Central differences for a subset of coordinates.
pub fn finite_diff_at<T: Element>(f: impl Fn(&Tensor<T>) -> f64, x: &Tensor<T>, h: f64, coords: &[usize]) -> Vec<f64> {
    let mut probe = x.clone();
    coords
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = T::of(orig.f64() + h);
            let fp = f(&probe);
            probe.data_mut()[i] = T::of(orig.f64() - h);
            let fm = f(&probe);
            probe.data_mut()[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Fourth-order central differences
/// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h` for a subset of coordinates.
pub fn finite_diff5_at<T: Element>(f: impl Fn(&Tensor<T>) -> f64, x: &Tensor<T>, h: f64, coords: &[usize]) -> Vec<f64> {
    let mut probe = x.clone();
    coords
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            let mut at = |k: f64| {
                probe.data_mut()[i] = T::of(orig.f64() + k * h);
                f(&probe)
            };
            let (p2, p1, m1, m2) = (at(2.0), at(1.0), at(-1.0), at(-2.0));
            probe.data_mut()[i] = orig;
            (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h)
        })
        .collect()
}

/// Relative error used by every gradient check: `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]));
        let sq = tape.mul(&x, &x);
        let loss = tape.sum(&sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.of(x).unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn linear_map_gradient_is_column_sums() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 3], &[0.3, -1., 2.]));
        let av = tape.constant(a);
        // (A·x) written as x·Aᵀ with x a row vector
        let y = tape.matmul(&x, &av, true);
        let loss = tape.sum(&y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.of(x).unwrap().data(), &[5., 7., 9.]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1., 2.]));
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn finite_differences_of_simple_functions() {
        let x = t(&[4], &[0.1, -2., 3., 0.5]);
        let g = finite_diff_gradient(|x| x.sum(), &x, 1e-5);
        assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-9));
        let g = finite_diff_gradient(|x| x.data()[0] * x.data()[1], &t(&[2], &[3., 5.]), 1e-5);
        assert!((g.data()[0] - 5.0).abs() < 1e-6 && (g.data()[1] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn shared_param_maps_to_one_leaf() {
        let p = Param::new(t(&[2], &[1., 3.]));
        let mut tape = Tape::new();
        let a = tape.param(&p);
        let b = tape.param(&p);
        assert_eq!(a, b);
        let prod = tape.mul(&a, &b);
        let loss = tape.sum(&prod);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(&p).unwrap().data(), &[2., 6.]);
    }
}
