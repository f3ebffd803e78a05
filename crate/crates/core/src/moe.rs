//! Routed expert layer: a linear router, top-1 dispatch and gated expert MLPs.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::backend::Backend;
use crate::error::Result;
use crate::param::{join, Init, Param, Parameters};
use crate::sinkhorn::{route_top1, sinkhorn, RouterLogits, SinkhornConfig};
use crate::tensor::{self, silu, Activation, Element, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertKind {
    /// `W_out · silu(W_in · x)`
    Standard,
    /// `W_out · (silu(W_gate · x) ∘ (W_in · x))`
    #[default]
    Swiglu,
}

#[derive(Clone, Debug)]
pub struct ExpertParams<T> {
    pub kind: ExpertKind,
    /// `[D, F]`
    pub w_in: Param<T>,
    /// `[D, F]`, SwiGLU only
    pub w_gate: Option<Param<T>>,
    /// `[F, D]`
    pub w_out: Param<T>,
}

impl<T: Element> ExpertParams<T> {
    pub fn init(kind: ExpertKind, d_model: usize, d_ff: usize, init: &Init, key: &str, residual_scale: f64) -> Self {
        let k = |n: &str| format!("{key}.{n}");
        Self {
            kind,
            w_in: init.normal(&k("w_in"), &[d_model, d_ff], 0.02),
            w_gate: (kind == ExpertKind::Swiglu).then(|| init.normal(&k("w_gate"), &[d_model, d_ff], 0.02)),
            w_out: init.normal(&k("w_out"), &[d_ff, d_model], 0.02 * residual_scale),
        }
    }

    pub fn d_model(&self) -> usize {
        self.w_in.shape()[0]
    }

    pub fn zero_output(&mut self) {
        self.w_out.value = Tensor::zeros(self.w_out.shape());
    }

    /// Applies the expert to every row of `x`.
    pub fn forward<B: Backend<T>>(&self, be: &mut B, x: &B::V) -> B::V {
        let w_in = be.param(&self.w_in);
        let h = be.matmul(x, &w_in, false);
        let act = match &self.w_gate {
            None => be.activation(&h, Activation::Silu),
            Some(gate) => {
                let w_gate = be.param(gate);
                let g = be.matmul(x, &w_gate, false);
                let g = be.activation(&g, Activation::Silu);
                be.mul(&g, &h)
            }
        };
        let w_out = be.param(&self.w_out);
        be.matmul(&act, &w_out, false)
    }

    /// Single-vector reference evaluation.
    pub fn apply(&self, x: &[T]) -> Vec<T> {
        let d = self.d_model();
        let f = self.w_in.shape()[1];
        let project = |w: &Tensor<T>| -> Vec<T> {
            (0..f).map(|j| (0..d).map(|c| x[c] * w.data()[c * f + j]).sum()).collect()
        };
        let h = project(&self.w_in.value);
        let act: Vec<T> = match &self.w_gate {
            None => h.iter().map(|&v| silu(v)).collect(),
            Some(gate) => project(&gate.value).iter().zip(&h).map(|(&g, &v)| silu(g) * v).collect(),
        };
        let w = self.w_out.value.data();
        (0..d).map(|c| (0..f).map(|j| act[j] * w[j * d + c]).sum()).collect()
    }
}

impl<T: Element> Parameters<T> for ExpertParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        f(join(prefix, "w_in"), &self.w_in);
        if let Some(g) = &self.w_gate {
            f(join(prefix, "w_gate"), g);
        }
        f(join(prefix, "w_out"), &self.w_out);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        f(join(prefix, "w_in"), &mut self.w_in);
        if let Some(g) = &mut self.w_gate {
            f(join(prefix, "w_gate"), g);
        }
        f(join(prefix, "w_out"), &mut self.w_out);
    }
}

/// How tokens pick their expert. Training balances the whole batch with
/// Sinkhorn; generation sees one token at a time, where a balanced plan over
/// a single sample is uniform, so it takes the argmax of the raw logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoutingMode {
    #[default]
    Sinkhorn,
    Argmax,
}

/// What multiplies the chosen expert's output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateMode {
    /// `sigmoid` of the chosen expert's logit, the only differentiable path
    /// into the router.
    #[default]
    Sigmoid,
    /// Always 1.
    Unit,
    /// The plan weight `π[α][i]`, treated as a constant.
    PlanWeight,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MoEOptions {
    pub routing: RoutingMode,
    pub gate: GateMode,
    pub sinkhorn: SinkhornConfig,
}

#[derive(Clone, Debug)]
pub struct MoEParams<T> {
    /// `[D, N]`
    pub router: Param<T>,
    pub experts: Vec<ExpertParams<T>>,
}

/// Routing outcome of one layer call.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerRouting {
    pub expert_of: Vec<usize>,
    pub counts: Vec<usize>,
    /// Sinkhorn iterations, or 0 for argmax routing.
    pub iters_used: usize,
    pub residual: f64,
    pub converged: bool,
}

impl<T: Element> MoEParams<T> {
    /// Expert `e` draws from `{key}.experts.{e}`.
    pub fn init(kind: ExpertKind, d_model: usize, d_ff: usize, n_experts: usize, init: &Init, key: &str, residual_scale: f64) -> Self {
        assert!(n_experts >= 1, "at least one expert");
        Self {
            router: init.normal(&format!("{key}.router"), &[d_model, n_experts], 0.02),
            experts: (0..n_experts)
                .map(|e| ExpertParams::init(kind, d_model, d_ff, init, &format!("{key}.experts.{e}"), residual_scale))
                .collect(),
        }
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn d_model(&self) -> usize {
        self.router.shape()[0]
    }

    pub fn zero_output(&mut self) {
        for e in &mut self.experts {
            e.zero_output();
        }
    }

    /// Picks one expert per row of the `[S, N]` logits.
    pub fn route(&self, logits: &Tensor<T>, opts: &MoEOptions) -> Result<(LayerRouting, Option<Vec<f64>>)> {
        let router_logits = RouterLogits::from_tensor(logits)?;
        let n = self.n_experts();
        let (expert_of, iters_used, residual, converged, pi) = match opts.routing {
            RoutingMode::Sinkhorn => {
                let plan = sinkhorn(&router_logits, &opts.sinkhorn);
                (plan.expert_of, plan.iters_used, plan.residual, plan.converged, Some(plan.pi))
            }
            RoutingMode::Argmax => (route_top1(router_logits.data(), n), 0, 0.0, true, None),
        };
        let mut counts = vec![0; n];
        for &e in &expert_of {
            counts[e] += 1;
        }
        Ok((LayerRouting { expert_of, counts, iters_used, residual, converged }, pi))
    }

    /// `y[α] = coeff[α] · E_{expert_of[α]}(x[α])` over rows of `x` (`[.., D]`).
    /// Tokens are gathered per expert, processed as one batch and scattered
    /// back. `x` is expected to be normalized already.
    pub fn forward<B: Backend<T>>(&self, be: &mut B, x: &B::V, opts: &MoEOptions) -> Result<(B::V, LayerRouting)> {
        let shape = be.value(x).shape().to_vec();
        let d = self.d_model();
        let s = be.value(x).len() / d;
        let xs = be.reshape(x, &[s, d]);
        let w_r = be.param(&self.router);
        let logits = be.matmul(&xs, &w_r, false);
        let (routing, pi) = self.route(be.value(&logits), opts)?;

        let mut parts = Vec::new();
        for (e, expert) in self.experts.iter().enumerate() {
            let idx: Vec<usize> = routing.expert_of.iter().enumerate().filter(|&(_, &c)| c == e).map(|(a, _)| a).collect();
            if idx.is_empty() {
                continue;
            }
            let xe = be.gather_rows(&xs, &idx);
            let ye = expert.forward(be, &xe);
            parts.push((ye, idx));
        }
        let y = be.scatter_rows(&parts, s, d);
        let y = match opts.gate {
            GateMode::Unit => y,
            GateMode::Sigmoid => {
                let chosen = be.select_per_row(&logits, &routing.expert_of);
                let coeff = be.activation(&chosen, Activation::Sigmoid);
                be.scale_rows(&y, &coeff)
            }
            GateMode::PlanWeight => {
                let n = self.n_experts();
                let weights: Vec<f64> = match &pi {
                    Some(pi) => routing.expert_of.iter().enumerate().map(|(a, &e)| pi[a * n + e]).collect(),
                    None => {
                        let probs = be.value(&logits).softmax();
                        routing.expert_of.iter().enumerate().map(|(a, &e)| probs.row(a)[e].f64()).collect()
                    }
                };
                let w = be.constant(Tensor::from_parts(vec![s], weights.into_iter().map(T::of).collect()));
                be.scale_rows(&y, &w)
            }
        };
        Ok((be.reshape(&y, &shape), routing))
    }

    /// Token-by-token reference for `forward` with a given assignment.
    pub fn forward_reference(&self, x: &Tensor<T>, expert_of: &[usize], gate: GateMode) -> Tensor<T> {
        let d = self.d_model();
        let n = self.n_experts();
        let mut out = Vec::with_capacity(x.len());
        for (a, &e) in expert_of.iter().enumerate() {
            let row = x.row(a);
            let mut y = self.experts[e].apply(row);
            if gate == GateMode::Sigmoid {
                let logit: T = (0..d).map(|c| row[c] * self.router.value.data()[c * n + e]).sum();
                let c = tensor::sigmoid(logit);
                y.iter_mut().for_each(|v| *v = *v * c);
            }
            out.extend(y);
        }
        Tensor::from_parts(vec![expert_of.len(), d], out)
    }

    /// Backpropagates through the layer for a single token and reports whether
    /// every expert other than the chosen one received exactly zero gradient.
    pub fn unchosen_experts_get_no_gradient(&self, x_row: &[T], opts: &MoEOptions) -> Result<bool> {
        let mut tape = Tape::<T>::new();
        let x = tape.leaf(Tensor::from_parts(vec![1, x_row.len()], x_row.to_vec()));
        let (y, routing) = self.forward(&mut tape, &x, opts)?;
        let loss = tape.sum(&y);
        let grads = tape.backward(loss)?;
        let chosen = routing.expert_of[0];
        let mut clean = true;
        for (e, expert) in self.experts.iter().enumerate() {
            if e == chosen {
                continue;
            }
            expert.visit("", &mut |_, p| {
                if let Some(g) = grads.wrt(p) {
                    clean &= g.data().iter().all(|v| *v == T::zero());
                }
            });
        }
        Ok(clean)
    }
}

impl<T: Element> Parameters<T> for MoEParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        f(join(prefix, "router"), &self.router);
        for (e, expert) in self.experts.iter().enumerate() {
            expert.visit(&join(prefix, &format!("experts.{e}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        f(join(prefix, "router"), &mut self.router);
        for (e, expert) in self.experts.iter_mut().enumerate() {
            expert.visit_mut(&join(prefix, &format!("experts.{e}")), f);
        }
    }
}

/// One CSV row of routing statistics.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub layer: usize,
    pub expert: usize,
    pub token_count: usize,
    pub step: usize,
}

/// Per-layer, per-expert token counts, optionally split by training step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    pub records: Vec<RoutingRecord>,
    /// Layer calls whose Sinkhorn loop stopped without meeting tolerance.
    pub unconverged: usize,
}

impl RoutingStats {
    /// Adds the counts of one forward pass; `layers` lists MoE layers in depth order.
    pub fn add(&mut self, step: usize, layers: &[LayerRouting]) {
        for (layer, r) in layers.iter().enumerate() {
            if !r.converged {
                self.unconverged += 1;
            }
            for (expert, &c) in r.counts.iter().enumerate() {
                match self.records.iter_mut().find(|x| x.layer == layer && x.expert == expert && x.step == step) {
                    Some(rec) => rec.token_count += c,
                    None => self.records.push(RoutingRecord { layer, expert, token_count: c, step }),
                }
            }
        }
    }

    /// Counts per layer summed over steps: `result[layer][expert]`.
    pub fn totals(&self) -> Vec<Vec<usize>> {
        let layers = self.records.iter().map(|r| r.layer + 1).max().unwrap_or(0);
        let experts = self.records.iter().map(|r| r.expert + 1).max().unwrap_or(0);
        let mut out = vec![vec![0; experts]; layers];
        for r in &self.records {
            out[r.layer][r.expert] += r.token_count;
        }
        out
    }

    /// Max over mean expert load for each layer.
    pub fn imbalance(&self) -> Vec<f64> {
        self.totals()
            .iter()
            .map(|c| {
                let total: usize = c.iter().sum();
                let max = c.iter().copied().max().unwrap_or(0);
                if total == 0 {
                    0.0
                } else {
                    max as f64 * c.len() as f64 / total as f64
                }
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_at, relative_error};
    use crate::backend::Eager;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_x(s: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[s, d], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_input_gives_zero_output() {
        for kind in [ExpertKind::Standard, ExpertKind::Swiglu] {
            let e = ExpertParams::<f64>::init(kind, 8, 16, &Init::new(1), "e", 1.0);
            assert!(e.apply(&[0.0; 8]).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_gate_weights_annihilate_swiglu() {
        let mut e = ExpertParams::<f64>::init(ExpertKind::Swiglu, 8, 16, &Init::new(1), "e", 1.0);
        e.w_gate = Some(Param::new(Tensor::zeros(&[8, 16])));
        assert!(e.apply(&[0.3; 8]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batched_dispatch_matches_reference() {
        let layer = MoEParams::<f64>::init(ExpertKind::Swiglu, 8, 16, 4, &Init::new(2), "moe", 1.0);
        let x = random_x(40, 8, 3);
        for gate in [GateMode::Sigmoid, GateMode::Unit] {
            let opts = MoEOptions { gate, ..Default::default() };
            let (y, routing) = layer.forward(&mut Eager::new(), &x, &opts).unwrap();
            let reference = layer.forward_reference(&x, &routing.expert_of, gate);
            assert!(y.max_abs_diff(&reference) < 1e-12);
            assert_eq!(routing.counts.iter().sum::<usize>(), 40);
        }
    }

    #[test]
    fn single_expert_is_gated_dense_mlp() {
        let layer = MoEParams::<f64>::init(ExpertKind::Standard, 8, 32, 1, &Init::new(4), "moe", 1.0);
        let x = random_x(10, 8, 5);
        let (y, routing) = layer.forward(&mut Eager::new(), &x, &MoEOptions::default()).unwrap();
        assert_eq!(routing.counts, vec![10]);
        let logits = tensor::matmul(&x, &layer.router.value, false).unwrap();
        for a in 0..10 {
            let dense = layer.experts[0].apply(x.row(a));
            let c = tensor::sigmoid(logits.row(a)[0]);
            for (got, want) in y.row(a).iter().zip(dense) {
                assert!((got - c * want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cloned_experts_make_choice_irrelevant() {
        let mut layer = MoEParams::<f64>::init(ExpertKind::Swiglu, 8, 16, 4, &Init::new(6), "moe", 1.0);
        let first = layer.experts[0].clone();
        for e in &mut layer.experts {
            *e = first.clone();
        }
        let x = random_x(32, 8, 7);
        let opts = MoEOptions { gate: GateMode::Unit, ..Default::default() };
        let (y, _) = layer.forward(&mut Eager::new(), &x, &opts).unwrap();
        let dense = first.forward(&mut Eager::new(), &x);
        assert_eq!(y.data(), dense.data());
    }

    #[test]
    fn only_the_chosen_expert_learns_from_a_token() {
        let layer = MoEParams::<f64>::init(ExpertKind::Swiglu, 8, 16, 4, &Init::new(8), "moe", 1.0);
        let x = random_x(5, 8, 9);
        for a in 0..5 {
            assert!(layer.unchosen_experts_get_no_gradient(x.row(a), &MoEOptions::default()).unwrap());
        }
    }

    #[test]
    fn expert_gradients_match_finite_differences() {
        for kind in [ExpertKind::Standard, ExpertKind::Swiglu] {
            let expert = ExpertParams::<f64>::init(kind, 6, 12, &Init::new(10), "e", 1.0);
            let x = random_x(4, 6, 11);
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let y = expert.forward(&mut tape, &xv);
            let sq = tape.mul(&y, &y);
            let loss = tape.sum(&sq);
            let grads = tape.backward(loss).unwrap();
            let g = grads.wrt(&expert.w_in).unwrap();
            let f = |w: &Tensor<f64>| {
                let mut e = expert.clone();
                e.w_in.value = w.clone();
                let y = e.forward(&mut Eager::new(), &x);
                y.data().iter().map(|v| v * v).sum::<f64>()
            };
            let coords: Vec<usize> = (0..g.len()).step_by(5).collect();
            let fd = finite_diff_at(f, &expert.w_in.value, 1e-5, &coords);
            for (&c, &want) in coords.iter().zip(&fd) {
                assert!(relative_error(g.data()[c], want, 1e-8) < 1e-4, "{kind:?} coord {c}");
            }
        }
    }

    #[test]
    fn stats_conserve_tokens() {
        let layer = MoEParams::<f64>::init(ExpertKind::Swiglu, 8, 16, 4, &Init::new(12), "moe", 1.0);
        let mut stats = RoutingStats::default();
        for step in 0..3 {
            let x = random_x(50, 8, 13 + step as u64);
            let (_, r) = layer.forward(&mut Eager::new(), &x, &MoEOptions::default()).unwrap();
            stats.add(step, &[r.clone(), r]);
        }
        for layer_counts in stats.totals() {
            assert_eq!(layer_counts.iter().sum::<usize>(), 150);
        }
        let mut buf = Vec::new();
        stats.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("layer,expert,token_count,step\n"));
    }
}
