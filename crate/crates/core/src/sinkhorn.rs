//! Sinkhorn routing: balance router logits so that every sample's expert
//! weights sum to one and every expert receives `S/N` total weight, then pick
//! one expert per sample.
//!
//! The plan is `π[α][i] = exp(τ·L[α][i]) · d0[i] · d1[α]` and the scaling
//! factors are found by alternating fixed-point updates. The loop runs on
//! `ln d0`, `ln d1` so large logits cannot overflow.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Element, Tensor};

/// Router logits `L[α][i]` for `S` samples and `N` experts, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterLogits {
    samples: usize,
    experts: usize,
    data: Vec<f64>,
}

impl RouterLogits {
    pub fn new(samples: usize, experts: usize, data: Vec<f64>) -> Result<Self> {
        if samples == 0 || experts == 0 {
            return Err(Error::Input(format!("router logits need S >= 1 and N >= 1, got S={samples}, N={experts}")));
        }
        if data.len() != samples * experts {
            return Err(Error::Input(format!("router logits: {} values for {samples}x{experts}", data.len())));
        }
        if let Some(k) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLogits { sample: k / experts, expert: k % experts });
        }
        Ok(Self { samples, experts, data })
    }

    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Result<Self> {
        Self::new(t.rows(), t.last_dim(), t.data().iter().map(|v| v.f64()).collect())
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    pub fn get(&self, sample: usize, expert: usize) -> f64 {
        self.data[sample * self.experts + expert]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SinkhornInit {
    /// `d0 = 1`, `d1 = 1`.
    Uniform,
    /// Per-expert softmax over samples scaled by `S/N`: the expert-balance
    /// constraint holds before the first iteration.
    #[default]
    Fast,
    /// `d0 = 1`, `d1[α] = (S/N)·Σᵢ exp(τ·L[α][i])`, the formula as printed.
    FastLiteral,
}

impl SinkhornInit {
    pub fn name(self) -> &'static str {
        match self {
            SinkhornInit::Uniform => "uniform",
            SinkhornInit::Fast => "fast",
            SinkhornInit::FastLiteral => "fast-literal",
        }
    }
}

/// When the loop stops. `Residual` checks both constraint families directly;
/// `ScalingChange` stops once an iteration moves `ln d0` by less than `tol`,
/// which says nothing about how well the constraints hold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopRule {
    #[default]
    Residual,
    ScalingChange,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinkhornConfig {
    pub temperature: f64,
    pub init: SinkhornInit,
    pub tol: f64,
    pub max_iters: usize,
    pub stop: StopRule,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self { temperature: 2.0, init: SinkhornInit::Fast, tol: 1e-3, max_iters: 100, stop: StopRule::Residual }
    }
}

/// Result of one Sinkhorn call.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutePlan {
    pub samples: usize,
    pub experts: usize,
    /// `[S, N]` balanced assignment weights.
    pub pi: Vec<f64>,
    /// Top-1 expert per sample.
    pub expert_of: Vec<usize>,
    /// `sigmoid(L[α][expert_of[α]])` per sample.
    pub coeff: Vec<f64>,
    pub iters_used: usize,
    /// Largest relative violation over both constraint families.
    pub residual: f64,
    pub converged: bool,
}

impl RoutePlan {
    pub fn row_sums(&self) -> Vec<f64> {
        self.pi.chunks(self.experts).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.experts];
        for row in self.pi.chunks(self.experts) {
            for (acc, &v) in s.iter_mut().zip(row) {
                *acc += v;
            }
        }
        s
    }

    pub fn pi_at(&self, sample: usize, expert: usize) -> f64 {
        self.pi[sample * self.experts + expert]
    }
}

fn log_sum_exp(vals: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = vals.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + vals.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Log-domain scaling state: `ln d0` per expert, `ln d1` per sample.
struct Scaling<'a> {
    k: Vec<f64>,
    s: usize,
    n: usize,
    log_d0: Vec<f64>,
    log_d1: Vec<f64>,
    _logits: &'a RouterLogits,
}

impl<'a> Scaling<'a> {
    fn new(logits: &'a RouterLogits, temperature: f64, init: SinkhornInit) -> Self {
        let (s, n) = (logits.samples, logits.experts);
        let k: Vec<f64> = logits.data.iter().map(|&v| temperature * v).collect();
        let mut sc = Self { k, s, n, log_d0: vec![0.0; n], log_d1: vec![0.0; s], _logits: logits };
        let target = (s as f64 / n as f64).ln();
        match init {
            SinkhornInit::Uniform => {}
            SinkhornInit::Fast => {
                for i in 0..n {
                    sc.log_d0[i] = target - log_sum_exp((0..s).map(|a| sc.k[a * n + i]));
                }
            }
            SinkhornInit::FastLiteral => {
                for a in 0..s {
                    sc.log_d1[a] = target + log_sum_exp((0..n).map(|i| sc.k[a * n + i]));
                }
            }
        }
        sc
    }

    fn update_samples(&mut self) {
        let n = self.n;
        for a in 0..self.s {
            let row = &self.k[a * n..(a + 1) * n];
            self.log_d1[a] = -log_sum_exp(row.iter().zip(&self.log_d0).map(|(&k, &d)| k + d));
        }
    }

    fn update_experts(&mut self) {
        let (s, n) = (self.s, self.n);
        let target = (s as f64 / n as f64).ln();
        for i in 0..n {
            self.log_d0[i] = target - log_sum_exp((0..s).map(|a| self.k[a * n + i] + self.log_d1[a]));
        }
    }

    fn plan(&self) -> Vec<f64> {
        let n = self.n;
        (0..self.s * n).map(|idx| (self.k[idx] + self.log_d0[idx % n] + self.log_d1[idx / n]).exp()).collect()
    }

    fn residual(&self, pi: &[f64]) -> f64 {
        let (s, n) = (self.s, self.n);
        let target = s as f64 / n as f64;
        let mut worst = 0.0f64;
        let mut cols = vec![0.0; n];
        for row in pi.chunks(n) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            for (c, &v) in cols.iter_mut().zip(row) {
                *c += v;
            }
        }
        for c in cols {
            worst = worst.max((c - target).abs() / target);
        }
        worst
    }
}

/// Initial scaling factors `(d0[N], d1[S])` for an initialization mode.
pub fn initial_factors(logits: &RouterLogits, temperature: f64, init: SinkhornInit) -> (Vec<f64>, Vec<f64>) {
    let sc = Scaling::new(logits, temperature, init);
    (sc.log_d0.iter().map(|v| v.exp()).collect(), sc.log_d1.iter().map(|v| v.exp()).collect())
}

/// The fast initialization: per-expert softmax over samples scaled by `S/N`.
pub fn fast_init(logits: &RouterLogits, temperature: f64) -> (Vec<f64>, Vec<f64>) {
    initial_factors(logits, temperature, SinkhornInit::Fast)
}

/// Plan implied by a pair of factors, `π = exp(τL)·d0·d1`.
pub fn plan_from_factors(logits: &RouterLogits, temperature: f64, d0: &[f64], d1: &[f64]) -> Vec<f64> {
    let n = logits.experts;
    (0..logits.samples * n)
        .map(|idx| (temperature * logits.data[idx]).exp() * d0[idx % n] * d1[idx / n])
        .collect()
}

/// Runs the alternating fixed-point loop. A plan that fails to converge is
/// still returned, with `converged = false` and its final residual.
pub fn sinkhorn(logits: &RouterLogits, cfg: &SinkhornConfig) -> RoutePlan {
    let mut sc = Scaling::new(logits, cfg.temperature, cfg.init);
    let mut pi = sc.plan();
    let mut residual = sc.residual(&pi);
    let mut iters = 0;
    let mut converged = cfg.stop == StopRule::Residual && residual < cfg.tol;
    while !converged && iters < cfg.max_iters {
        let before = sc.log_d0.clone();
        sc.update_samples();
        sc.update_experts();
        iters += 1;
        pi = sc.plan();
        residual = sc.residual(&pi);
        converged = match cfg.stop {
            StopRule::Residual => residual < cfg.tol,
            StopRule::ScalingChange => before.iter().zip(&sc.log_d0).all(|(a, b)| (a - b).abs() < cfg.tol),
        };
    }
    let expert_of = route_top1(&pi, logits.experts);
    let coeff = expert_of.iter().enumerate().map(|(a, &e)| sigmoid(logits.get(a, e))).collect();
    RoutePlan { samples: logits.samples, experts: logits.experts, pi, expert_of, coeff, iters_used: iters, residual, converged }
}

/// Argmax per row of an `[S, N]` matrix; ties go to the lowest index.
pub fn route_top1(probs: &[f64], experts: usize) -> Vec<usize> {
    probs
        .chunks(experts)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// `sigmoid(W_r[:, expert_of[α]] · x_α)` for router weights `[D, N]` and tokens `[S, D]`.
pub fn gate_coefficients<T: Element>(router: &Tensor<T>, x: &Tensor<T>, expert_of: &[usize]) -> Result<Vec<T>> {
    let d = x.last_dim();
    if router.rank() != 2 || router.shape()[0] != d {
        return Err(Error::Input(format!("router {:?} does not match tokens {:?}", router.shape(), x.shape())));
    }
    if x.rows() != expert_of.len() {
        return Err(Error::Input("one expert index per token required".into()));
    }
    let n = router.shape()[1];
    Ok(expert_of
        .iter()
        .enumerate()
        .map(|(a, &e)| {
            let logit = x.row(a).iter().enumerate().map(|(c, &v)| v * router.data()[c * n + e]).sum::<T>();
            sigmoid(logit)
        })
        .collect())
}

/// One row of the routing diagnostic output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinkhornDiagRow {
    pub trial: usize,
    pub init: String,
    pub stop: String,
    pub samples: usize,
    pub experts: usize,
    pub temperature: f64,
    pub logit_std: f64,
    pub iters_used: usize,
    pub residual: f64,
    pub converged: bool,
}

/// Iteration study over Gaussian logits: for each trial and size, runs every
/// requested initialization on the same logits.
#[derive(Clone, Debug)]
pub struct SinkhornStudy {
    pub sizes: Vec<(usize, usize)>,
    pub inits: Vec<SinkhornInit>,
    pub trials: usize,
    pub logit_std: f64,
    pub seed: u64,
    pub cfg: SinkhornConfig,
}

impl SinkhornStudy {
    pub fn run(&self) -> Vec<SinkhornDiagRow> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut rows = Vec::new();
        for &(s, n) in &self.sizes {
            for trial in 0..self.trials {
                let data: Vec<f64> = (0..s * n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        self.logit_std * z
                    })
                    .collect();
                let logits = RouterLogits::new(s, n, data).expect("finite gaussian logits");
                for &init in &self.inits {
                    let cfg = SinkhornConfig { init, ..self.cfg };
                    let plan = sinkhorn(&logits, &cfg);
                    rows.push(SinkhornDiagRow {
                        trial,
                        init: init.name().into(),
                        stop: match cfg.stop {
                            StopRule::Residual => "residual".into(),
                            StopRule::ScalingChange => "scaling-change".into(),
                        },
                        samples: s,
                        experts: n,
                        temperature: cfg.temperature,
                        logit_std: self.logit_std,
                        iters_used: plan.iters_used,
                        residual: plan.residual,
                        converged: plan.converged,
                    });
                }
            }
        }
        rows
    }
}

pub fn write_diag_csv<W: Write>(rows: &[SinkhornDiagRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Median of a list of iteration counts (lower median for even lengths).
pub fn median_iters(iters: &[usize]) -> usize {
    let mut v = iters.to_vec();
    v.sort_unstable();
    v[(v.len() - 1) / 2]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gaussian(s: usize, n: usize, seed: u64) -> RouterLogits {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..s * n).map(|_| StandardNormal.sample(&mut rng)).collect();
        RouterLogits::new(s, n, data).unwrap()
    }

    #[test]
    fn equal_logits_converge_immediately() {
        let l = RouterLogits::new(4, 2, vec![0.7; 8]).unwrap();
        let plan = sinkhorn(&l, &SinkhornConfig::default());
        assert_eq!(plan.iters_used, 0);
        assert!(plan.pi.iter().all(|&p| (p - 0.5).abs() < 1e-12));
        assert!(plan.row_sums().iter().all(|&s| (s - 1.0).abs() < 1e-12));
        assert!(plan.col_sums().iter().all(|&s| (s - 2.0).abs() < 1e-12));
    }

    #[test]
    fn single_expert_takes_everything() {
        let l = gaussian(16, 1, 1);
        let plan = sinkhorn(&l, &SinkhornConfig::default());
        assert!(plan.pi.iter().all(|&p| (p - 1.0).abs() < 1e-9));
        assert!(plan.expert_of.iter().all(|&e| e == 0));
    }

    #[test]
    fn converged_plans_meet_both_constraints() {
        let l = gaussian(256, 8, 2);
        for init in [SinkhornInit::Uniform, SinkhornInit::Fast, SinkhornInit::FastLiteral] {
            let plan = sinkhorn(&l, &SinkhornConfig { init, ..Default::default() });
            assert!(plan.converged, "{init:?}");
            assert!(plan.row_sums().iter().all(|&s| (s - 1.0).abs() < 1e-3));
            assert!(plan.col_sums().iter().all(|&s| (s - 32.0).abs() / 32.0 < 1e-3));
            assert!(plan.pi.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn fast_init_is_column_balanced() {
        let mut data = vec![0.0; 64 * 4];
        for a in 0..64 {
            data[a * 4 + 2] = 5.0;
        }
        for l in [RouterLogits::new(64, 4, data).unwrap(), gaussian(100, 8, 3)] {
            let (d0, d1) = fast_init(&l, 2.0);
            let pi = plan_from_factors(&l, 2.0, &d0, &d1);
            let target = l.samples() as f64 / l.experts() as f64;
            for i in 0..l.experts() {
                let col: f64 = (0..l.samples()).map(|a| pi[a * l.experts() + i]).sum();
                assert!((col - target).abs() < 1e-9);
            }
        }
        let l = RouterLogits::new(6, 3, vec![1.5; 18]).unwrap();
        let (d0, d1) = fast_init(&l, 2.0);
        assert!(plan_from_factors(&l, 2.0, &d0, &d1).iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn top1_examples() {
        assert_eq!(route_top1(&[0.2, 0.8], 2), vec![1]);
        assert_eq!(route_top1(&[0.5, 0.5], 2), vec![0]);
    }

    #[test]
    fn gate_coefficient_range() {
        let router = Tensor::<f64>::zeros(&[3, 2]);
        let x = Tensor::<f64>::full(&[2, 3], 1.0);
        assert_eq!(gate_coefficients(&router, &x, &[0, 1]).unwrap(), vec![0.5, 0.5]);
        let router = Tensor::<f64>::full(&[3, 2], 20.0);
        let c = gate_coefficients(&router, &x, &[1, 1]).unwrap();
        assert!(c.iter().all(|&v| v > 1.0 - 1e-12));
    }

    #[test]
    fn non_finite_logits_rejected() {
        let err = RouterLogits::new(2, 2, vec![0.0, f64::NAN, 0.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLogits { sample: 0, expert: 1 }));
    }

    #[test]
    fn non_convergence_is_reported_not_fatal() {
        let l = gaussian(64, 8, 4);
        let plan = sinkhorn(&l, &SinkhornConfig { max_iters: 1, tol: 1e-12, init: SinkhornInit::Uniform, ..Default::default() });
        assert!(!plan.converged);
        assert_eq!(plan.iters_used, 1);
        assert!(plan.residual > 1e-12);
    }

    #[test]
    fn permuting_experts_permutes_plan() {
        let l = gaussian(32, 4, 5);
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<f64> = (0..32).flat_map(|a| perm.iter().map(move |&p| (a, p))).map(|(a, p)| l.get(a, p)).collect();
        let lp = RouterLogits::new(32, 4, permuted).unwrap();
        let cfg = SinkhornConfig { tol: 1e-10, max_iters: 1000, ..Default::default() };
        let (p1, p2) = (sinkhorn(&l, &cfg), sinkhorn(&lp, &cfg));
        for a in 0..32 {
            for (j, &p) in perm.iter().enumerate() {
                assert!((p2.pi_at(a, j) - p1.pi_at(a, p)).abs() < 1e-9);
            }
        }
    }

    proptest! {
        #[test]
        fn argmax_invariant_under_increasing_maps(row in prop::collection::vec(-5.0f64..5.0, 1..12), scale in 0.1f64..10.0) {
            let base = route_top1(&row, row.len());
            let scaled: Vec<f64> = row.iter().map(|v| v * scale).collect();
            let cubed: Vec<f64> = row.iter().map(|v| v.powi(3) + v.exp()).collect();
            prop_assert_eq!(&route_top1(&scaled, row.len()), &base);
            prop_assert_eq!(&route_top1(&cubed, row.len()), &base);
        }

        #[test]
        fn fast_init_columns_always_balanced(s in 1usize..40, n in 1usize..9, seed in 0u64..1000) {
            let l = gaussian(s, n, seed);
            let (d0, d1) = fast_init(&l, 2.0);
            let pi = plan_from_factors(&l, 2.0, &d0, &d1);
            for i in 0..n {
                let col: f64 = (0..s).map(|a| pi[a * n + i]).sum();
                prop_assert!((col - s as f64 / n as f64).abs() < 1e-9);
            }
        }
    }
}
