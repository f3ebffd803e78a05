//! Causal multi-head self-attention with a KV cache: the comparison baseline.

use crate::backend::Backend;
use crate::error::{Error, Result};
use crate::param::{join, Init, Param, Parameters};
use crate::tensor::{self, softmax_in_place, Element, FlopCounter, Tensor};

#[derive(Clone, Debug)]
pub struct AttnParams<T> {
    pub n_heads: usize,
    /// `[D, D]` each; the projection width is `n_heads · head_dim = D`.
    pub w_q: Param<T>,
    pub w_k: Param<T>,
    pub w_v: Param<T>,
    pub w_o: Param<T>,
}

impl<T: Element> AttnParams<T> {
    pub fn init(d_model: usize, n_heads: usize, init: &Init, key: &str, residual_scale: f64) -> Self {
        assert!(n_heads > 0 && d_model % n_heads == 0, "d_model must be divisible by n_heads");
        let k = |n: &str| format!("{key}.{n}");
        Self {
            n_heads,
            w_q: init.normal(&k("w_q"), &[d_model, d_model], 0.02),
            w_k: init.normal(&k("w_k"), &[d_model, d_model], 0.02),
            w_v: init.normal(&k("w_v"), &[d_model, d_model], 0.02),
            w_o: init.normal(&k("w_o"), &[d_model, d_model], 0.02 * residual_scale),
        }
    }

    pub fn d_model(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.d_model() / self.n_heads
    }

    pub fn zero_output(&mut self) {
        self.w_o.value = Tensor::zeros(self.w_o.shape());
    }

    pub fn forward<B: Backend<T>>(&self, be: &mut B, x: &B::V) -> B::V {
        let wq = be.param(&self.w_q);
        let wk = be.param(&self.w_k);
        let wv = be.param(&self.w_v);
        let q = be.matmul(x, &wq, false);
        let k = be.matmul(x, &wk, false);
        let v = be.matmul(x, &wv, false);
        let att = be.attention(&q, &k, &v, self.n_heads);
        let wo = be.param(&self.w_o);
        be.matmul(&att, &wo, false)
    }

    /// Cached single-token decode: appends this token's key/value and attends
    /// over the whole cache.
    pub fn step(&self, cache: &mut KvCache<T>, x_t: &[T], counter: &mut FlopCounter) -> Result<Vec<T>> {
        let d = self.d_model();
        if x_t.len() != d || cache.width != d {
            return Err(Error::Input(format!("attention step expects width {d}, got {}", x_t.len())));
        }
        let row = Tensor::from_parts(vec![1, d], x_t.to_vec());
        let q = row.matmul_counted(&self.w_q.value, counter)?;
        let k = row.matmul_counted(&self.w_k.value, counter)?;
        let v = row.matmul_counted(&self.w_v.value, counter)?;
        cache.keys.extend_from_slice(k.data());
        cache.values.extend_from_slice(v.data());
        cache.len += 1;

        let hd = self.head_dim();
        let scale = T::one() / T::of(hd as f64).sqrt();
        let n = cache.len;
        let mut out = vec![T::zero(); d];
        let mut scores = vec![T::zero(); n];
        for head in 0..self.n_heads {
            let off = head * hd;
            for (j, s) in scores.iter_mut().enumerate() {
                let kj = &cache.keys[j * d + off..j * d + off + hd];
                *s = q.data()[off..off + hd].iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
            }
            softmax_in_place(&mut scores);
            for (j, &p) in scores.iter().enumerate() {
                let vj = &cache.values[j * d + off..j * d + off + hd];
                for c in 0..hd {
                    out[off + c] = out[off + c] + p * vj[c];
                }
            }
            counter.record("attn_scores", 1, hd, n);
            counter.record("attn_values", 1, n, hd);
        }
        let o = Tensor::from_parts(vec![1, d], out).matmul_counted(&self.w_o.value, counter)?;
        Ok(o.into_data())
    }
}

impl<T: Element> Parameters<T> for AttnParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        f(join(prefix, "w_q"), &self.w_q);
        f(join(prefix, "w_k"), &self.w_k);
        f(join(prefix, "w_v"), &self.w_v);
        f(join(prefix, "w_o"), &self.w_o);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        f(join(prefix, "w_q"), &mut self.w_q);
        f(join(prefix, "w_k"), &mut self.w_k);
        f(join(prefix, "w_v"), &mut self.w_v);
        f(join(prefix, "w_o"), &mut self.w_o);
    }
}

/// Keys and values of every token decoded so far for one attention layer.
#[derive(Clone, Debug)]
pub struct KvCache<T> {
    keys: Vec<T>,
    values: Vec<T>,
    width: usize,
    len: usize,
}

impl<T: Element> KvCache<T> {
    pub fn new(width: usize) -> Self {
        Self { keys: Vec::new(), values: Vec::new(), width, len: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Bytes held by cached keys and values: `2 · len · width · elem`.
    pub fn size_bytes(&self) -> usize {
        2 * self.len * self.width * T::DTYPE.size_of()
    }
}

/// Causal scaled dot-product attention over `[B, L, H·d]` inputs. Returns the
/// concatenated head outputs and the attention probabilities `[B, H, L, L]`.
pub(crate) fn attention_forward<T: Element>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, n_heads: usize) -> (Tensor<T>, Vec<T>) {
    let (b, l, w) = tensor::seq_dims(q.shape()).expect("attention input is [B, L, W]");
    assert_eq!(q.shape(), k.shape(), "attention q/k shape");
    assert_eq!(q.shape(), v.shape(), "attention q/v shape");
    let hd = w / n_heads;
    let scale = T::one() / T::of(hd as f64).sqrt();
    let mut out = vec![T::zero(); q.len()];
    let mut probs = vec![T::zero(); b * n_heads * l * l];
    for bb in 0..b {
        for head in 0..n_heads {
            let off = head * hd;
            let pbase = (bb * n_heads + head) * l * l;
            for i in 0..l {
                let qi = &q.data()[(bb * l + i) * w + off..][..hd];
                let row = &mut probs[pbase + i * l..pbase + i * l + i + 1];
                for (j, p) in row.iter_mut().enumerate() {
                    let kj = &k.data()[(bb * l + j) * w + off..][..hd];
                    *p = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                }
                softmax_in_place(row);
                let o = &mut out[(bb * l + i) * w + off..][..hd];
                for (j, &p) in row.iter().enumerate() {
                    let vj = &v.data()[(bb * l + j) * w + off..][..hd];
                    for c in 0..hd {
                        o[c] = o[c] + p * vj[c];
                    }
                }
            }
        }
    }
    (Tensor::from_parts(q.shape().to_vec(), out), probs)
}

pub(crate) fn attention_backward<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    n_heads: usize,
    probs: &[T],
    g: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (b, l, w) = tensor::seq_dims(q.shape()).expect("attention input is [B, L, W]");
    let hd = w / n_heads;
    let scale = T::one() / T::of(hd as f64).sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dp = vec![T::zero(); l];
    for bb in 0..b {
        for head in 0..n_heads {
            let off = head * hd;
            let pbase = (bb * n_heads + head) * l * l;
            for i in 0..l {
                let gi = &g[(bb * l + i) * w + off..][..hd];
                let p = &probs[pbase + i * l..pbase + i * l + i + 1];
                let mut dot = T::zero();
                for j in 0..=i {
                    let vrow = (bb * l + j) * w + off;
                    dp[j] = gi.iter().zip(&v.data()[vrow..vrow + hd]).map(|(&a, &b)| a * b).sum();
                    dot = dot + dp[j] * p[j];
                    for c in 0..hd {
                        dv[vrow + c] = dv[vrow + c] + p[j] * gi[c];
                    }
                }
                let qrow = (bb * l + i) * w + off;
                for j in 0..=i {
                    let ds = p[j] * (dp[j] - dot) * scale;
                    let krow = (bb * l + j) * w + off;
                    for c in 0..hd {
                        dq[qrow + c] = dq[qrow + c] + ds * k.data()[krow + c];
                        dk[krow + c] = dk[krow + c] + ds * q.data()[qrow + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::Eager;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_token_output_is_value_projection() {
        let p = AttnParams::<f64>::init(8, 2, &Init::new(0), "a", 1.0);
        let x = Tensor::from_fn(&[1, 1, 8], |k| k as f64 * 0.1 - 0.2);
        let y = p.forward(&mut Eager::new(), &x);
        let mut c = FlopCounter::new();
        let expect = x.matmul_counted(&p.w_v.value, &mut c).unwrap().matmul_counted(&p.w_o.value, &mut c).unwrap();
        assert!(y.max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let l = 5;
        let q = Tensor::from_fn(&[1, l, 4], |k| (k as f64).sin());
        let k = Tensor::from_fn(&[1, l, 4], |k| [0.3, -0.1, 0.7, 0.2][k % 4]);
        let v = Tensor::from_fn(&[1, l, 4], |k| k as f64);
        let (_, probs) = attention_forward(&q, &k, &v, 1);
        for i in 0..l {
            for j in 0..=i {
                assert!((probs[i * l + j] - 1.0 / (i + 1) as f64).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn cached_decode_matches_full_sequence() {
        let p = AttnParams::<f64>::init(8, 2, &Init::new(1), "a", 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::from_fn(&[1, 12, 8], |_| rng.random_range(-1.0..1.0));
        let full = p.forward(&mut Eager::new(), &x);
        let mut cache = KvCache::new(8);
        let mut c = FlopCounter::new();
        for t in 0..12 {
            let y = p.step(&mut cache, x.row(t), &mut c).unwrap();
            for (a, b) in y.iter().zip(full.row(t)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert_eq!(cache.size_bytes(), 2 * 12 * 8 * 8);
    }

    #[test]
    fn decode_flops_grow_linearly_with_position() {
        let p = AttnParams::<f32>::init(8, 2, &Init::new(3), "a", 1.0);
        let mut cache = KvCache::new(8);
        let mut per_token = Vec::new();
        for _ in 0..4 {
            let mut c = FlopCounter::new();
            p.step(&mut cache, &[0.1; 8], &mut c).unwrap();
            per_token.push(c.total());
        }
        let deltas: Vec<u64> = per_token.windows(2).map(|w| w[1] - w[0]).collect();
        assert!(deltas.iter().all(|&d| d == deltas[0] && d > 0));
    }

    #[test]
    fn output_is_causal() {
        let p = AttnParams::<f64>::init(8, 4, &Init::new(4), "a", 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_fn(&[1, 10, 8], |_| rng.random_range(-1.0..1.0));
        let mut x2 = x.clone();
        x2.data_mut()[7 * 8] += 0.5;
        let y1 = p.forward(&mut Eager::new(), &x);
        let y2 = p.forward(&mut Eager::new(), &x2);
        assert_eq!(&y1.data()[..7 * 8], &y2.data()[..7 * 8]);
    }
}
