//! Execution backends. Model code is written once against [`Backend`] and
//! runs either eagerly on plain tensors or on a gradient [`Tape`](crate::autodiff::Tape).
//!
//! Shapes inside the model are fixed by construction, so backend methods
//! panic on mismatch instead of returning errors; public entry points
//! validate their inputs first.

use crate::attention::attention_forward;
use crate::mamba::{scan_forward, ScanOptions};
use crate::param::Param;
use crate::tensor::{self, Activation, Element, FlopCounter, Tensor};

/// Inputs of the fused selective scan. `u`, `dt` are `[B, L, I]`, `b`, `c`
/// are `[B, L, H]`, `a_log` is `[I, H]` and `d` is `[I]`.
pub struct ScanArgs<'a, V> {
    pub u: &'a V,
    pub dt: &'a V,
    pub a_log: &'a V,
    pub b: &'a V,
    pub c: &'a V,
    pub d: &'a V,
}

pub trait Backend<T: Element> {
    type V: Clone;

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor<T>;
    fn param(&mut self, p: &Param<T>) -> Self::V;
    fn constant(&mut self, t: Tensor<T>) -> Self::V;
    fn counter(&mut self) -> &mut FlopCounter;

    /// `a[.., M] · w[M, J]`, or `a · wᵀ` for `w[J, M]` when `transpose_w`.
    fn matmul(&mut self, a: &Self::V, w: &Self::V, transpose_w: bool) -> Self::V;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn add_row(&mut self, a: &Self::V, bias: &Self::V) -> Self::V;
    fn activation(&mut self, a: &Self::V, kind: Activation) -> Self::V;
    fn softmax(&mut self, a: &Self::V) -> Self::V;
    fn layernorm(&mut self, x: &Self::V, gain: &Self::V) -> Self::V;
    fn conv1d(&mut self, x: &Self::V, filters: &Self::V, bias: &Self::V) -> Self::V;
    fn selective_scan(&mut self, args: ScanArgs<'_, Self::V>, opts: &ScanOptions) -> Self::V;
    fn embedding(&mut self, table: &Self::V, ids: &[usize]) -> Self::V;
    /// Fused causal multi-head attention over `[B, L, n_heads·d]` inputs.
    fn attention(&mut self, q: &Self::V, k: &Self::V, v: &Self::V, n_heads: usize) -> Self::V;
    fn gather_rows(&mut self, x: &Self::V, idx: &[usize]) -> Self::V;
    /// Assembles `[rows, D]` from disjoint row groups; uncovered rows are zero.
    fn scatter_rows(&mut self, parts: &[(Self::V, Vec<usize>)], rows: usize, width: usize) -> Self::V;
    /// Picks `x[r, cols[r]]` for every row, giving `[rows]`.
    fn select_per_row(&mut self, x: &Self::V, cols: &[usize]) -> Self::V;
    fn scale_rows(&mut self, x: &Self::V, s: &Self::V) -> Self::V;
    fn reshape(&mut self, x: &Self::V, shape: &[usize]) -> Self::V;
    fn sum(&mut self, x: &Self::V) -> Self::V;
    /// Weighted mean token negative log-likelihood.
    fn cross_entropy(&mut self, logits: &Self::V, targets: &[usize], weights: &[T]) -> Self::V;
}

/// Plain forward evaluation with FLOP counting and no recording.
#[derive(Debug, Default)]
pub struct Eager {
    pub counter: FlopCounter,
}

impl Eager {
    pub fn new() -> Self {
        Self::default()
    }
}

pub(crate) fn record_matmul(counter: &mut FlopCounter, a: &[usize], out_last: usize) {
    let m = *a.last().expect("rank >= 1");
    let k: usize = a.iter().product::<usize>() / m;
    counter.record("matmul", k, m, out_last);
}

pub(crate) fn record_scan(counter: &mut FlopCounter, u: &[usize], h: usize) {
    let rows: usize = u.iter().product();
    // state update dA·h + dBx, then the C contraction
    counter.record("scan_update", rows, h, 1);
    counter.record("scan_output", rows, h, 1);
}

pub(crate) fn record_attention(counter: &mut FlopCounter, q: &[usize], n_heads: usize) {
    let (b, l, w) = tensor::seq_dims(q).expect("attention input is [B, L, W]");
    let d = w / n_heads;
    for _ in 0..b * n_heads {
        counter.record("attn_scores", l, d, l);
        counter.record("attn_values", l, l, d);
    }
}

pub(crate) fn gather_rows_value<T: Element>(x: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let w = x.last_dim();
    let mut data = Vec::with_capacity(idx.len() * w);
    for &r in idx {
        data.extend_from_slice(x.row(r));
    }
    Tensor::from_parts(vec![idx.len(), w], data)
}

pub(crate) fn scatter_rows_value<T: Element>(parts: &[(&Tensor<T>, &[usize])], rows: usize, width: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); rows * width];
    for (t, idx) in parts {
        assert_eq!(t.last_dim(), width, "scatter_rows width");
        for (k, &r) in idx.iter().enumerate() {
            data[r * width..(r + 1) * width].copy_from_slice(t.row(k));
        }
    }
    Tensor::from_parts(vec![rows, width], data)
}

pub(crate) fn select_per_row_value<T: Element>(x: &Tensor<T>, cols: &[usize]) -> Tensor<T> {
    assert_eq!(x.rows(), cols.len(), "select_per_row rows");
    Tensor::from_parts(vec![cols.len()], cols.iter().enumerate().map(|(r, &c)| x.row(r)[c]).collect())
}

pub(crate) fn scale_rows_value<T: Element>(x: &Tensor<T>, s: &Tensor<T>) -> Tensor<T> {
    let w = x.last_dim();
    assert_eq!(x.rows(), s.len(), "scale_rows rows");
    let mut out = x.clone();
    for (row, &k) in out.data_mut().chunks_mut(w).zip(s.data()) {
        for v in row {
            *v = *v * k;
        }
    }
    out
}

pub(crate) fn embedding_value<T: Element>(table: &Tensor<T>, ids: &[usize]) -> Tensor<T> {
    assert_eq!(table.rank(), 2, "embedding table is [V, D]");
    for &id in ids {
        assert!(id < table.shape()[0], "token id {id} out of range");
    }
    gather_rows_value(table, ids)
}

/// Returns `(mean loss, softmax probabilities)`.
pub(crate) fn cross_entropy_value<T: Element>(logits: &Tensor<T>, targets: &[usize], weights: &[T]) -> (T, Tensor<T>) {
    let v = logits.last_dim();
    assert_eq!(logits.rows(), targets.len(), "cross_entropy rows");
    assert_eq!(targets.len(), weights.len(), "cross_entropy weights");
    let probs = logits.softmax();
    let wsum: T = weights.iter().copied().sum();
    let mut loss = T::zero();
    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
        if w == T::zero() {
            continue;
        }
        assert!(t < v, "target {t} out of range");
        let row = logits.row(r);
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
        loss = loss + w * (lse - row[t]);
    }
    let denom = if wsum > T::zero() { wsum } else { T::one() };
    (loss / denom, probs)
}

impl<T: Element> Backend<T> for Eager {
    type V = Tensor<T>;

    fn value<'a>(&'a self, v: &'a Tensor<T>) -> &'a Tensor<T> {
        v
    }

    fn param(&mut self, p: &Param<T>) -> Tensor<T> {
        p.value.clone()
    }

    fn constant(&mut self, t: Tensor<T>) -> Tensor<T> {
        t
    }

    fn counter(&mut self) -> &mut FlopCounter {
        &mut self.counter
    }

    fn matmul(&mut self, a: &Tensor<T>, w: &Tensor<T>, transpose_w: bool) -> Tensor<T> {
        let out = tensor::matmul(a, w, transpose_w).unwrap_or_else(|e| panic!("{e}"));
        record_matmul(&mut self.counter, a.shape(), out.last_dim());
        out
    }

    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        a.add(b).unwrap_or_else(|e| panic!("{e}"))
    }

    fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        a.mul(b).unwrap_or_else(|e| panic!("{e}"))
    }

    fn add_row(&mut self, a: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
        a.add_row(bias).unwrap_or_else(|e| panic!("{e}"))
    }

    fn activation(&mut self, a: &Tensor<T>, kind: Activation) -> Tensor<T> {
        a.activation(kind)
    }

    fn softmax(&mut self, a: &Tensor<T>) -> Tensor<T> {
        a.softmax()
    }

    fn layernorm(&mut self, x: &Tensor<T>, gain: &Tensor<T>) -> Tensor<T> {
        x.layernorm_nobias(gain).unwrap_or_else(|e| panic!("{e}"))
    }

    fn conv1d(&mut self, x: &Tensor<T>, filters: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
        x.causal_depthwise_conv1d(filters, bias, &mut self.counter).unwrap_or_else(|e| panic!("{e}"))
    }

    fn selective_scan(&mut self, args: ScanArgs<'_, Tensor<T>>, opts: &ScanOptions) -> Tensor<T> {
        record_scan(&mut self.counter, args.u.shape(), args.a_log.last_dim());
        scan_forward(args.u, args.dt, args.a_log, args.b, args.c, args.d, opts, false).0
    }

    fn embedding(&mut self, table: &Tensor<T>, ids: &[usize]) -> Tensor<T> {
        embedding_value(table, ids)
    }

    fn attention(&mut self, q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, n_heads: usize) -> Tensor<T> {
        record_attention(&mut self.counter, q.shape(), n_heads);
        attention_forward(q, k, v, n_heads).0
    }

    fn gather_rows(&mut self, x: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
        gather_rows_value(x, idx)
    }

    fn scatter_rows(&mut self, parts: &[(Tensor<T>, Vec<usize>)], rows: usize, width: usize) -> Tensor<T> {
        let refs: Vec<(&Tensor<T>, &[usize])> = parts.iter().map(|(t, i)| (t, i.as_slice())).collect();
        scatter_rows_value(&refs, rows, width)
    }

    fn select_per_row(&mut self, x: &Tensor<T>, cols: &[usize]) -> Tensor<T> {
        select_per_row_value(x, cols)
    }

    fn scale_rows(&mut self, x: &Tensor<T>, s: &Tensor<T>) -> Tensor<T> {
        scale_rows_value(x, s)
    }

    fn reshape(&mut self, x: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
        x.reshape(shape).unwrap_or_else(|e| panic!("{e}"))
    }

    fn sum(&mut self, x: &Tensor<T>) -> Tensor<T> {
        Tensor::scalar(x.sum())
    }

    fn cross_entropy(&mut self, logits: &Tensor<T>, targets: &[usize], weights: &[T]) -> Tensor<T> {
        Tensor::scalar(cross_entropy_value(logits, targets, weights).0)
    }
}
