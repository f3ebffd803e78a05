//! Parameter and FLOP accounting: closed-form block formulas, exact
//! enumeration of parameter arrays, instrumented FLOP measurement and the
//! reconciliation between them.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backend::Eager;
use crate::error::Result;
use crate::mamba::{MambaParams, ScanOptions};
use crate::model::{ForwardOptions, ModelConfig, ModelParams};
use crate::moe::{ExpertKind, MoEOptions, MoEParams, RoutingMode};
use crate::param::Init;
use crate::tensor::{FlopCounter, Tensor};

/// `3ID + 2I(H + dt + C/2) + I + 2D` parameters per Mamba block. `C` is
/// expected to be even; an odd `C` rounds the half term down.
pub fn mamba_params_formula(d: u64, i: u64, h: u64, dt: u64, c: u64) -> u64 {
    3 * i * d + 2 * i * (h + dt) + i * c + i + 2 * d
}

/// `8D²E + DE` parameters per MoE block (standard `4D` MLP experts plus router).
pub fn moe_params_formula(d: u64, e: u64) -> u64 {
    8 * d * d * e + d * e
}

/// `BLI(11H + 4dt + 1) + IH` FLOPs for a Mamba block over `B` sequences of length `L`.
pub fn mamba_flops_formula(b: u64, l: u64, i: u64, h: u64, dt: u64) -> u64 {
    b * l * i * (11 * h + 4 * dt + 1) + i * h
}

/// `DE(16D + 2)` FLOPs per token for an MoE block, charging every expert.
pub fn moe_flops_formula(d: u64, e: u64) -> u64 {
    d * e * (16 * d + 2)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayCount {
    pub name: String,
    pub shape: Vec<usize>,
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub arrays: Vec<ArrayCount>,
    pub total: u64,
}

impl ParamCount {
    fn from_shapes(shapes: Vec<(String, Vec<usize>)>) -> Self {
        let arrays: Vec<ArrayCount> = shapes
            .into_iter()
            .map(|(name, shape)| {
                let count = shape.iter().map(|&s| s as u64).product();
                ArrayCount { name, shape, count }
            })
            .collect();
        let total = arrays.iter().map(|a| a.count).sum();
        Self { arrays, total }
    }

    /// Sum over arrays whose name contains `needle`.
    pub fn matching(&self, needle: &str) -> u64 {
        self.arrays.iter().filter(|a| a.name.contains(needle)).map(|a| a.count).sum()
    }
}

/// Every array of a configuration, from declared shapes alone.
pub fn exact_count(config: &ModelConfig) -> ParamCount {
    ParamCount::from_shapes(config.param_shapes())
}

/// Every array of an instantiated model.
pub fn exact_count_of<T: crate::tensor::Element>(model: &ModelParams<T>) -> ParamCount {
    use crate::param::Parameters;
    ParamCount::from_shapes(model.named_params().into_iter().map(|(n, p)| (n, p.shape().to_vec())).collect())
}

fn expert_params(config: &ModelConfig) -> u64 {
    let (d, f) = (config.d_model as u64, config.d_ff as u64);
    match config.expert_kind {
        ExpertKind::Standard => 2 * d * f,
        ExpertKind::Swiglu => 3 * d * f,
    }
}

/// Parameters touched by one token: all arrays except the experts a token
/// does not visit.
pub fn forward_params(config: &ModelConfig) -> u64 {
    let total = exact_count(config).total;
    if config.variant.uses_moe() {
        total - config.n_pairs() as u64 * (config.n_experts as u64 - 1) * expert_params(config)
    } else {
        total
    }
}

/// One itemized difference between a formula and the exact count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualTerm {
    pub term: String,
    pub count: i64,
}

/// Formula against exact count for the mixer and channel blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockReconciliation {
    pub mamba_formula: u64,
    pub mamba_exact: u64,
    pub moe_formula: u64,
    pub moe_exact: u64,
    pub pairs: u64,
    /// `pairs · (mamba_formula + moe_formula)`
    pub formula_total: u64,
    /// Exact count of the same arrays, including both layer-norm gains.
    pub exact_total: u64,
    /// `(exact − formula) / exact`
    pub relative_gap: f64,
    /// Per-pair terms that account for `exact − formula`.
    pub residuals: Vec<ResidualTerm>,
    /// Which arrays share the formula's `2IH` term under each reading.
    pub ih_readings: Vec<String>,
}

/// Compares the block formulas with the exact arrays of a Mamba-MoE config.
/// The formula's `2D` is read as the two layer-norm gains of a block pair.
pub fn reconcile_blocks(config: &ModelConfig) -> BlockReconciliation {
    let (d, i, h, r, c, e) = (
        config.d_model as u64,
        config.d_inner() as u64,
        config.d_state as u64,
        config.dt_rank as u64,
        config.d_conv as u64,
        config.n_experts as u64,
    );
    let count = exact_count(config);
    let pairs = config.n_pairs() as u64;
    let mamba_exact = count.matching(".mixer.") / pairs + d;
    let moe_exact = count.matching(".moe.") / pairs + count.matching(".mlp.") / pairs + d;
    let mamba_formula = mamba_params_formula(d, i, h, r, c);
    let moe_formula = moe_params_formula(d, e);
    let exact_total = pairs * (mamba_exact + moe_exact);
    let formula_total = pairs * (mamba_formula + moe_formula);
    let mut residuals = vec![
        ResidualTerm { term: "third I×H array (A, W_B, W_C all exist; the formula charges two)".into(), count: (i * h) as i64 },
        ResidualTerm { term: "conv bias I".into(), count: i as i64 },
        ResidualTerm { term: "dt bias I".into(), count: i as i64 },
    ];
    let expert_gap = (e * expert_params(config)) as i64 - (8 * d * d * e) as i64;
    if expert_gap != 0 {
        residuals.push(ResidualTerm { term: format!("experts: E·{} exact vs 8D²E", if config.expert_kind == ExpertKind::Swiglu { "3DF" } else { "2DF" }), count: expert_gap });
    }
    BlockReconciliation {
        mamba_formula,
        mamba_exact,
        moe_formula,
        moe_exact,
        pairs,
        formula_total,
        exact_total,
        relative_gap: (exact_total as f64 - formula_total as f64) / exact_total as f64,
        residuals,
        ih_readings: vec!["{A, W_B} in 2IH, W_C unattributed".into(), "{W_B, W_C} in 2IH, A unattributed".into()],
    }
}

/// FLOPs of each label recorded during one instrumented pass.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopTerm {
    pub label: String,
    pub flops: u64,
}

fn group_by_label(counter: &FlopCounter) -> Vec<FlopTerm> {
    let mut out: Vec<FlopTerm> = Vec::new();
    for rec in counter.records() {
        match out.iter_mut().find(|t| t.label == rec.label) {
            Some(t) => t.flops += rec.flops(),
            None => out.push(FlopTerm { label: rec.label.to_string(), flops: rec.flops() }),
        }
    }
    out
}

/// Instrumented FLOPs of one Mamba block over `[batch, seq_len, D]`, by label.
pub fn measure_mamba_block(config: &ModelConfig, batch: usize, seq_len: usize) -> Vec<FlopTerm> {
    let block = MambaParams::<f32>::init(config.mamba_dims(), &Init::new(0), "probe", 1.0);
    let x = Tensor::<f32>::zeros(&[batch, seq_len, config.d_model]);
    let mut be = Eager::new();
    block.forward(&mut be, &x, &ScanOptions::default());
    group_by_label(&be.counter)
}

/// Instrumented FLOPs of one MoE block over `tokens` tokens with top-1 routing.
pub fn measure_moe_block(kind: ExpertKind, d_model: usize, d_ff: usize, n_experts: usize, tokens: usize) -> u64 {
    let layer = MoEParams::<f32>::init(kind, d_model, d_ff, n_experts, &Init::new(0), "probe", 1.0);
    let x = Tensor::<f32>::full(&[tokens, d_model], 0.1);
    let mut be = Eager::new();
    let opts = MoEOptions { routing: RoutingMode::Argmax, ..Default::default() };
    layer.forward(&mut be, &x, &opts).expect("finite probe input");
    be.counter.total()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasuredFlops {
    pub batch: usize,
    pub seq_len: usize,
    /// Whole-model forward total.
    pub model_total: u64,
    pub model_terms: Vec<FlopTerm>,
    pub mamba_block_terms: Vec<FlopTerm>,
    pub mamba_block_total: u64,
    /// `mamba_block_total / mamba_flops_formula`
    pub mamba_ratio: f64,
    pub moe_block_per_token: u64,
    /// `moe_block_per_token / moe_flops_formula`; top-1 routing runs one expert per token.
    pub moe_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub name: String,
    pub config: ModelConfig,
    pub exact_params: u64,
    pub forward_params: u64,
    /// Sum of the block formulas over all pairs.
    pub formula_params: u64,
    pub blocks: BlockReconciliation,
    /// Formula FLOPs per token for all blocks.
    pub formula_flops_per_token: u64,
    pub measured: Option<MeasuredFlops>,
    pub notes: Vec<String>,
}

/// Report for a configuration; `measure` runs an instrumented forward of
/// `seq_len` tokens, which is only sensible at small sizes.
pub fn report(name: &str, config: &ModelConfig, measure: Option<usize>) -> Result<FlopReport> {
    config.validate()?;
    let blocks = reconcile_blocks(config);
    let (d, i, h, r, e) = (config.d_model as u64, config.d_inner() as u64, config.d_state as u64, config.dt_rank as u64, config.n_experts as u64);
    let pairs = config.n_pairs() as u64;
    let formula_flops_per_token = pairs * (mamba_flops_formula(1, 1, i, h, r) + moe_flops_formula(d, e));
    let measured = match measure {
        None => None,
        Some(seq_len) => {
            let model = ModelParams::<f32>::new(config.clone(), 0)?;
            let tokens: Vec<usize> = (0..seq_len).map(|t| t % config.vocab_size).collect();
            let mut counter = FlopCounter::new();
            model.logits(&tokens, &ForwardOptions::inference(), &mut counter)?;
            let mamba_block_terms = measure_mamba_block(config, 1, seq_len);
            let mamba_block_total = mamba_block_terms.iter().map(|t| t.flops).sum();
            let moe_block_per_token = measure_moe_block(config.expert_kind, config.d_model, config.d_ff, config.n_experts, 1);
            Some(MeasuredFlops {
                batch: 1,
                seq_len,
                model_total: counter.total(),
                model_terms: group_by_label(&counter),
                mamba_block_terms,
                mamba_block_total,
                mamba_ratio: mamba_block_total as f64 / mamba_flops_formula(1, seq_len as u64, i, h, r) as f64,
                moe_block_per_token,
                moe_ratio: moe_block_per_token as f64 / moe_flops_formula(d, e) as f64,
            })
        }
    };
    let mut notes = vec![
        format!("dt_rank = {} (not given by the hyperparameter table for full-size presets; ceil(D/32) is used there)", config.dt_rank),
        "block formulas assume standard 4D MLP experts; SwiGLU experts have 3DF parameters each".into(),
        "moe flops formula charges every expert; measured top-1 routing runs one expert per token".into(),
        "mamba flops formula omits the input/output projections, which dominate measured cost".into(),
    ];
    if config.n_layers % 2 == 0 {
        notes.push(format!("n_layers = {} counts mixer and channel blocks separately ({} of each)", config.n_layers, pairs));
    }
    Ok(FlopReport {
        name: name.to_string(),
        config: config.clone(),
        exact_params: exact_count(config).total,
        forward_params: forward_params(config),
        formula_params: blocks.formula_total,
        blocks,
        formula_flops_per_token,
        measured,
        notes,
    })
}

/// Report for a named preset. Tiny presets include an instrumented forward.
pub fn preset_report(name: &str) -> Result<FlopReport> {
    let config = ModelConfig::preset(name)?;
    let measure = name.starts_with("tiny").then_some(64);
    report(name, &config, measure)
}

fn human(n: u64) -> String {
    let f = n as f64;
    if f >= 1e9 {
        format!("{:.3}B", f / 1e9)
    } else if f >= 1e6 {
        format!("{:.2}M", f / 1e6)
    } else if f >= 1e3 {
        format!("{:.1}K", f / 1e3)
    } else {
        n.to_string()
    }
}

impl fmt::Display for FlopReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = &self.blocks;
        writeln!(f, "{} ({})", self.name, self.config.variant.name())?;
        writeln!(f, "  total parameters      {:>14}  ({})", self.exact_params, human(self.exact_params))?;
        writeln!(f, "  forward parameters    {:>14}  ({})", self.forward_params, human(self.forward_params))?;
        writeln!(f, "  block formula         {:>14}", b.formula_total)?;
        writeln!(f, "  block exact           {:>14}  gap {:+.3}%", b.exact_total, 100.0 * b.relative_gap)?;
        writeln!(f, "    mamba per block     formula {:>12}  exact {:>12}", b.mamba_formula, b.mamba_exact)?;
        writeln!(f, "    moe per block       formula {:>12}  exact {:>12}", b.moe_formula, b.moe_exact)?;
        for r in &b.residuals {
            writeln!(f, "    residual {:+12}  {}", r.count, r.term)?;
        }
        writeln!(f, "  formula flops/token   {:>14}", self.formula_flops_per_token)?;
        if let Some(m) = &self.measured {
            writeln!(f, "  measured forward      {:>14}  ({} tokens)", m.model_total, m.seq_len)?;
            for t in &m.model_terms {
                writeln!(f, "    {:<18}{:>14}", t.label, t.flops)?;
            }
            writeln!(f, "  mamba block measured/formula  {:.3}", m.mamba_ratio)?;
            writeln!(f, "  moe block measured/formula    {:.3}", m.moe_ratio)?;
        }
        for n in &self.notes {
            writeln!(f, "  note: {n}")?;
        }
        Ok(())
    }
}
