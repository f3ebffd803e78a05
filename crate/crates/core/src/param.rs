//! Learnable parameter arrays and name-based traversal.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::tensor::{Element, Tensor};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// Identity of a parameter array on a gradient tape. Clones share the id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

#[derive(Clone, Debug)]
pub struct Param<T> {
    id: ParamId,
    pub value: Tensor<T>,
}

impl<T: Element> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Self { id: ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed)), value }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Anything holding named parameter arrays.
pub trait Parameters<T: Element> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>));

    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, p| out.push((name, p)));
        out
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.numel());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Deterministic per-array initializer: every array draws from its own
/// stream derived from `(seed, key)`, so variants that share a key get
/// identical values no matter what else they allocate.
#[derive(Clone, Copy, Debug)]
pub struct Init {
    pub seed: u64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn rng(&self, key: &str) -> ChaCha8Rng {
        // FNV-1a over the key, mixed with the seed
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in key.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        ChaCha8Rng::seed_from_u64(h ^ self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }

    pub fn normal<T: Element>(&self, key: &str, shape: &[usize], std: f64) -> Param<T> {
        let mut rng = self.rng(key);
        let dist = Normal::new(0.0, std).expect("std >= 0");
        Param::new(Tensor::from_fn(shape, |_| T::of(dist.sample(&mut rng))))
    }

    pub fn uniform<T: Element>(&self, key: &str, shape: &[usize], lo: f64, hi: f64) -> Param<T> {
        let mut rng = self.rng(key);
        let dist = Uniform::new(lo, hi).expect("lo < hi");
        Param::new(Tensor::from_fn(shape, |_| T::of(dist.sample(&mut rng))))
    }

    pub fn constant<T: Element>(shape: &[usize], v: f64) -> Param<T> {
        Param::new(Tensor::full(shape, T::of(v)))
    }
}
