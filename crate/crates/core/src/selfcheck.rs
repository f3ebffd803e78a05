//! Fast invariant suite: streaming/scan equivalence, the `dt → 0` fixed
//! point, Sinkhorn constraints and initialization speed, gradient checks and
//! FLOP/parameter reconciliation. Each check is usable on its own with
//! explicit sizes; [`run`] strings them together at default sizes.

use std::cell::Cell;
use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::accounting::{exact_count, exact_count_of, measure_moe_block, moe_flops_formula, reconcile_blocks};
use crate::attention::AttnParams;
use crate::autodiff::{finite_diff5_at, relative_error, Tape, Var};
use crate::backend::{Backend, Eager};
use crate::mamba::{MambaDims, MambaParams, ScanMode, ScanOptions};
use crate::model::{ForwardOptions, ModelConfig, ModelParams, TokenBatch, Variant};
use crate::moe::{ExpertKind, ExpertParams};
use crate::param::{Init, Parameters};
use crate::sinkhorn::{median_iters, sinkhorn, RouterLogits, SinkhornConfig, SinkhornInit};
use crate::tensor::{FlopCounter, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub id: usize,
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{:>2}  {verdict}  {:<28} {:>7.2}s  {}", self.id, self.name, self.seconds, self.detail)
    }
}

fn timed(id: usize, name: &str, body: impl FnOnce() -> (bool, String)) -> CheckOutcome {
    let start = Instant::now();
    let (passed, detail) = body();
    CheckOutcome { id, name: name.into(), passed, detail, seconds: start.elapsed().as_secs_f64() }
}

fn gaussian(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}

fn random_dims(rng: &mut impl Rng) -> MambaDims {
    let d_model = rng.random_range(4..=16);
    MambaDims {
        d_model,
        d_inner: d_model * rng.random_range(1..=3),
        d_state: rng.random_range(2..=8),
        dt_rank: rng.random_range(1..=4),
        d_conv: rng.random_range(2..=4),
    }
}

/// Step mode against sequence mode in f64, and the associative scan against
/// the sequential one in f32, over `configs` random blocks of length
/// `seq_len`. `flip_da_sign` corrupts the sequence path only.
pub fn check_streaming(configs: usize, seq_len: usize, seed: u64, flip_da_sign: bool) -> CheckOutcome {
    timed(1, "streaming/scan equivalence", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut worst_step, mut worst_scan) = (0.0f64, 0.0f64);
        for k in 0..configs {
            let dims = random_dims(&mut rng);
            let init = Init::new(seed.wrapping_add(k as u64));
            let x = Tensor::<f64>::from_f64(vec![seq_len, dims.d_model], &gaussian(&mut rng, seq_len * dims.d_model, 1.0)).expect("shape");

            let p = MambaParams::<f64>::init(dims, &init, "m", 1.0);
            let seq_opts = ScanOptions { flip_da_sign, ..Default::default() };
            let Ok(seq) = p.forward_sequence(&x, &seq_opts, &mut FlopCounter::new()) else {
                return (false, format!("config {k}: sequence forward failed"));
            };
            let mut state = p.fresh_state();
            let mut counter = FlopCounter::new();
            for t in 0..seq_len {
                let Ok(y) = p.step(&mut state, x.row(t), &ScanOptions::default(), &mut counter) else {
                    return (false, format!("config {k}: step failed"));
                };
                let diff = y.iter().zip(seq.row(t)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                worst_step = worst_step.max(if diff.is_nan() { f64::INFINITY } else { diff });
            }

            let p32 = MambaParams::<f32>::init(dims, &init, "m", 1.0);
            let x32 = Tensor::<f32>::from_f64(vec![seq_len, dims.d_model], &x.data().to_vec()).expect("shape");
            let seq_mode = ScanOptions { flip_da_sign, ..Default::default() };
            let assoc_mode = ScanOptions { mode: ScanMode::Associative, flip_da_sign, ..Default::default() };
            let a = p32.forward_sequence(&x32, &seq_mode, &mut FlopCounter::new());
            let b = p32.forward_sequence(&x32, &assoc_mode, &mut FlopCounter::new());
            match (a, b) {
                (Ok(a), Ok(b)) => {
                    let d = a.max_abs_diff(&b);
                    worst_scan = worst_scan.max(if d.is_nan() { f64::INFINITY } else { d });
                }
                _ => return (false, format!("config {k}: f32 forward failed")),
            }
        }
        let passed = worst_step < 1e-10 && worst_scan < 1e-6;
        (passed, format!("{configs} configs, L={seq_len}: step vs sequence {worst_step:.2e} (< 1e-10), associative vs sequential {worst_scan:.2e} (< 1e-6)"))
    })
}

/// With `dt` clamped to zero the hidden state must be bitwise unchanged.
pub fn check_dt_zero(seed: u64) -> CheckOutcome {
    timed(2, "dt -> 0 fixed point", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut changed = 0;
        let mut checked = 0;
        for k in 0..5 {
            let dims = random_dims(&mut rng);
            let p = MambaParams::<f64>::init(dims, &Init::new(seed + k), "m", 1.0);
            let mut state = p.fresh_state();
            let mut c = FlopCounter::new();
            for _ in 0..8 {
                let x = gaussian(&mut rng, dims.d_model, 1.0);
                p.step(&mut state, &x, &ScanOptions::default(), &mut c).expect("width matches");
            }
            let frozen = ScanOptions { zero_dt: true, ..Default::default() };
            for _ in 0..8 {
                let before = state.h.clone();
                let x = gaussian(&mut rng, dims.d_model, 1.0);
                p.step(&mut state, &x, &frozen, &mut c).expect("width matches");
                changed += before.iter().zip(&state.h).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
                checked += before.len();
            }
        }
        (changed == 0, format!("{changed} of {checked} state entries changed"))
    })
}

fn gaussian_logits(rng: &mut impl Rng, s: usize, n: usize) -> RouterLogits {
    RouterLogits::new(s, n, gaussian(rng, s * n, 1.0)).expect("finite")
}

/// Converged plans satisfy row sums 1 and column sums `S/N` within 1e-3.
pub fn check_sinkhorn_constraints(trials: usize, s: usize, n: usize, seed: u64) -> CheckOutcome {
    timed(3, "sinkhorn constraints", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = SinkhornConfig::default();
        let target = s as f64 / n as f64;
        let (mut ok, mut unconverged, mut worst) = (0, 0, 0.0f64);
        for _ in 0..trials {
            let plan = sinkhorn(&gaussian_logits(&mut rng, s, n), &cfg);
            let row = plan.row_sums().iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
            let col = plan.col_sums().iter().map(|v| (v - target).abs()).fold(0.0, f64::max);
            worst = worst.max(row.max(col));
            if !plan.converged {
                unconverged += 1;
            } else if row <= 1e-3 && col <= 1e-3 {
                ok += 1;
            }
        }
        (ok == trials, format!("{ok}/{trials} converged within 1e-3 (S={s}, N={n}); {unconverged} unconverged; worst abs deviation {worst:.2e}"))
    })
}

/// Iterations to tolerance with the fast and the uniform initialization on
/// identical logits.
pub fn check_fast_init(trials: usize, s: usize, n: usize, seed: u64) -> CheckOutcome {
    timed(4, "sinkhorn fast-init speedup", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut fast, mut uniform, mut fewer) = (Vec::new(), Vec::new(), 0);
        for _ in 0..trials {
            let logits = gaussian_logits(&mut rng, s, n);
            let f = sinkhorn(&logits, &SinkhornConfig { init: SinkhornInit::Fast, ..Default::default() }).iters_used;
            let u = sinkhorn(&logits, &SinkhornConfig { init: SinkhornInit::Uniform, ..Default::default() }).iters_used;
            fewer += usize::from(f < u);
            fast.push(f);
            uniform.push(u);
        }
        let (mf, mu) = (median_iters(&fast), median_iters(&uniform));
        let share = fewer as f64 / trials as f64;
        let passed = mf <= 2 && mu >= 5 && share >= 0.95;
        (passed, format!("median iters fast {mf} (<= 2), uniform {mu} (>= 5); fast strictly fewer in {:.1}% (>= 95%)", 100.0 * share))
    })
}

/// Result of comparing reverse-mode gradients with finite differences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientCheck {
    pub worst: f64,
    pub checked: usize,
    /// Coordinates redrawn because a probe changed a discrete routing choice.
    pub redrawn: usize,
}

/// Worst relative error of reverse-mode gradients against central
/// differences over `coords` random coordinates of `params`.
///
/// `eager_loss` returns the loss and the discrete routing choices behind it.
/// The loss is only piecewise smooth in the parameters, so a coordinate whose
/// probes change any choice sits on a boundary and is replaced by a fresh one.
pub fn gradient_error<P: Parameters<f64> + Clone>(
    params: &P,
    tape_loss: impl Fn(&P, &mut Tape<f64>) -> Var,
    eager_loss: impl Fn(&P) -> (f64, Vec<usize>),
    coords: usize,
    rng: &mut impl Rng,
) -> GradientCheck {
    let mut tape = Tape::new();
    let loss = tape_loss(params, &mut tape);
    let grads = tape.backward(loss).expect("scalar loss");
    let named = params.named_params();
    let analytic: Vec<Tensor<f64>> =
        named.iter().map(|(_, p)| grads.wrt(p).cloned().unwrap_or_else(|| Tensor::zeros(p.shape()))).collect();
    let (_, choices) = eager_loss(params);
    let mut out = GradientCheck { worst: 0.0, checked: 0, redrawn: 0 };
    while out.checked < coords {
        let which = rng.random_range(0..named.len());
        let (name, p) = &named[which];
        let idx = rng.random_range(0..p.numel());
        let crossed = Cell::new(false);
        let f = |t: &Tensor<f64>| {
            let mut probe = params.clone();
            probe.visit_mut("", &mut |n, q| {
                if &n == name {
                    q.value = t.clone();
                }
            });
            let (loss, c) = eager_loss(&probe);
            if c != choices {
                crossed.set(true);
            }
            loss
        };
        let fd = finite_diff5_at(f, &p.value, 1e-3, &[idx])[0];
        if crossed.get() {
            out.redrawn += 1;
            assert!(out.redrawn <= 10 * coords, "routing changes under every probe");
            continue;
        }
        let err = relative_error(analytic[which].data()[idx], fd, 1e-6);
        out.worst = out.worst.max(if err.is_nan() { f64::INFINITY } else { err });
        out.checked += 1;
    }
    out
}

/// `Σ y ⊙ r` for a fixed random `r`, so every output coordinate matters.
fn weighted_sum<B: Backend<f64>>(be: &mut B, y: &B::V, r: &Tensor<f64>) -> B::V {
    let rv = be.constant(r.clone());
    let prod = be.mul(y, &rv);
    be.sum(&prod)
}

fn scalar(t: &Tensor<f64>) -> f64 {
    t.data()[0]
}

/// Reverse mode against central differences for the Mamba block, both
/// expert kinds, the attention layer and full model losses.
pub fn check_gradients(coords: usize, seed: u64) -> CheckOutcome {
    timed(5, "gradient correctness", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = Init::new(seed);
        let mut parts: Vec<(String, GradientCheck)> = Vec::new();
        let (l, d) = (12, 8);
        let x = Tensor::<f64>::from_f64(vec![2, l, d], &gaussian(&mut rng, 2 * l * d, 1.0)).expect("shape");
        let r = Tensor::<f64>::from_f64(vec![2, l, d], &gaussian(&mut rng, 2 * l * d, 1.0)).expect("shape");

        let dims = MambaDims { d_model: d, d_inner: 16, d_state: 4, dt_rank: 2, d_conv: 4 };
        let mamba = MambaParams::<f64>::init(dims, &init, "mamba", 1.0);
        let opts = ScanOptions::default();
        let check = gradient_error(
            &mamba,
            |p, tape| {
                let xv = tape.constant(x.clone());
                let y = p.forward(tape, &xv, &opts);
                weighted_sum(tape, &y, &r)
            },
            |p| {
                let mut be = Eager::new();
                let y = p.forward(&mut be, &x, &opts);
                (scalar(&weighted_sum(&mut be, &y, &r)), Vec::new())
            },
            coords,
            &mut rng,
        );
        parts.push(("mamba".into(), check));

        for kind in [ExpertKind::Standard, ExpertKind::Swiglu] {
            let expert = ExpertParams::<f64>::init(kind, d, 24, &init, &format!("expert.{kind:?}"), 1.0);
            let check = gradient_error(
                &expert,
                |p, tape| {
                    let xv = tape.constant(x.clone());
                    let y = p.forward(tape, &xv);
                    weighted_sum(tape, &y, &r)
                },
                |p| {
                    let mut be = Eager::new();
                    let y = p.forward(&mut be, &x);
                    (scalar(&weighted_sum(&mut be, &y, &r)), Vec::new())
                },
                coords,
                &mut rng,
            );
            parts.push((format!("{kind:?} expert").to_lowercase(), check));
        }

        let attn = AttnParams::<f64>::init(d, 2, &init, "attn", 1.0);
        let check = gradient_error(
            &attn,
            |p, tape| {
                let xv = tape.constant(x.clone());
                let y = p.forward(tape, &xv);
                weighted_sum(tape, &y, &r)
            },
            |p| {
                let mut be = Eager::new();
                let y = p.forward(&mut be, &x);
                (scalar(&weighted_sum(&mut be, &y, &r)), Vec::new())
            },
            coords,
            &mut rng,
        );
        parts.push(("attention".into(), check));

        for variant in [Variant::MambaMoe, Variant::TransformerMoe] {
            let cfg = ModelConfig { vocab_size: 32, d_model: 16, d_state: 4, d_ff: 32, ..ModelConfig::tiny(variant) };
            let model = ModelParams::<f64>::new(cfg, seed).expect("valid config");
            let (b, l) = (2, 10);
            let tokens: Vec<usize> = (0..b * (l + 1)).map(|_| rng.random_range(0..32)).collect();
            let mut inputs = Vec::new();
            let mut targets = Vec::new();
            for row in tokens.chunks(l + 1) {
                inputs.extend_from_slice(&row[..l]);
                targets.extend_from_slice(&row[1..]);
            }
            let batch = TokenBatch { batch: b, seq_len: l, inputs, targets, weights: vec![1.0; b * l] };
            let fo = ForwardOptions::default();
            let check = gradient_error(
                &model,
                |p, tape| p.loss(tape, &batch, &fo).expect("loss").0,
                |p| {
                    let (loss, routing) = p.loss(&mut Eager::new(), &batch, &fo).expect("loss");
                    (scalar(&loss), routing.into_iter().flat_map(|r| r.expert_of).collect())
                },
                coords,
                &mut rng,
            );
            parts.push((format!("{} loss", variant.name()), check));
        }

        let worst = parts.iter().map(|(_, c)| c.worst).fold(0.0, f64::max);
        let redrawn: usize = parts.iter().map(|(_, c)| c.redrawn).sum();
        let detail = parts.iter().map(|(n, c)| format!("{n} {:.1e}", c.worst)).collect::<Vec<_>>().join(", ");
        let detail = format!("{detail}; {redrawn} coords redrawn at routing boundaries");
        (worst < 1e-4, format!("{coords} coords each, max rel err < 1e-4: {detail}"))
    })
}

/// Measured MoE FLOPs against the formula, symbolic against instantiated
/// parameter counts, and the block parameter formula against exact counts.
pub fn check_accounting() -> CheckOutcome {
    timed(6, "flop/param reconciliation", || {
        let mut notes = Vec::new();
        let mut passed = true;

        for d in [16usize, 64] {
            let measured = measure_moe_block(ExpertKind::Standard, d, 4 * d, 1, 1);
            let formula = moe_flops_formula(d as u64, 1);
            passed &= measured == formula;
            notes.push(format!("moe flops D={d}: measured {measured} formula {formula}"));
        }

        for v in Variant::ALL {
            let cfg = ModelConfig::tiny(v);
            let symbolic = exact_count(&cfg).total;
            let model = ModelParams::<f32>::new(cfg, 0).expect("tiny preset");
            let instantiated = exact_count_of(&model).total;
            passed &= symbolic == instantiated;
            if symbolic != instantiated {
                notes.push(format!("{}: shapes {symbolic} vs arrays {instantiated}", v.name()));
            }
        }
        notes.push("exact counts match shape enumeration".into());

        let cfg = ModelConfig::preset("tiny-mamba-moe-std").expect("preset");
        let rec = reconcile_blocks(&cfg);
        let itemized: i64 = rec.residuals.iter().map(|t| t.count).sum();
        let per_pair_gap = (rec.mamba_exact + rec.moe_exact) as i64 - (rec.mamba_formula + rec.moe_formula) as i64;
        passed &= rec.relative_gap.abs() <= 0.02 && itemized == per_pair_gap;
        let terms = rec.residuals.iter().map(|t| format!("{} {:+}", t.term, t.count)).collect::<Vec<_>>().join(", ");
        notes.push(format!("tiny-mamba-moe-std formula gap {:.2}% (<= 2%), residuals [{terms}]", 100.0 * rec.relative_gap));
        (passed, notes.join("; "))
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SelfcheckOptions {
    pub seed: u64,
    /// Fault injection: negate `dA` in the sequence path.
    pub flip_da_sign: bool,
}

impl Default for SelfcheckOptions {
    fn default() -> Self {
        Self { seed: 0, flip_da_sign: false }
    }
}

/// Checks 1–6 at their acceptance sizes.
pub fn run(opts: &SelfcheckOptions) -> Vec<CheckOutcome> {
    vec![
        check_streaming(20, 64, opts.seed, opts.flip_da_sign),
        check_dt_zero(opts.seed),
        check_sinkhorn_constraints(100, 256, 8, opts.seed),
        check_fast_init(200, 256, 8, opts.seed),
        check_gradients(60, opts.seed),
        check_accounting(),
    ]
}

pub fn render_table(outcomes: &[CheckOutcome]) -> String {
    let mut out = String::from(" #  RESULT  CHECK                          TIME    DETAIL\n");
    for o in outcomes {
        out.push_str(&o.to_string());
        out.push('\n');
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    out.push_str(&format!("{} checks, {failed} failed\n", outcomes.len()));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_streaming_check_passes_and_fault_is_caught() {
        assert!(check_streaming(3, 16, 1, false).passed);
        let bad = check_streaming(3, 16, 1, true);
        assert!(!bad.passed, "{}", bad.detail);
    }

    #[test]
    fn dt_zero_and_constraints() {
        assert!(check_dt_zero(2).passed);
        let c = check_sinkhorn_constraints(5, 64, 4, 3);
        assert!(c.passed, "{}", c.detail);
    }

    #[test]
    fn accounting_check_passes() {
        let c = check_accounting();
        assert!(c.passed, "{}", c.detail);
    }

    #[test]
    fn small_gradient_check_passes() {
        let c = check_gradients(8, 4);
        assert!(c.passed, "{}", c.detail);
    }

    #[test]
    fn table_lists_every_check() {
        let rows = vec![check_dt_zero(0), check_accounting()];
        let t = render_table(&rows);
        assert_eq!(t.lines().count(), 4);
        assert!(t.contains("0 failed"));
    }
}
