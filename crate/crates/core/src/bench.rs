//! Generation latency and memory sweeps, and routing histograms.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backend::Eager;
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, ModelConfig, ModelParams, TokenBatch, Variant};
use crate::moe::RoutingStats;
use crate::sinkhorn::route_top1;
use crate::tensor::{Element, FlopCounter};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencySample {
    pub variant: String,
    /// Tokens already in the sequence when the timed window ends.
    pub position: usize,
    /// Median over repeats of the mean step time inside the window.
    pub ns_per_token: f64,
    /// Recurrent state plus KV cache at `position`.
    pub state_bytes: usize,
    /// Matmul FLOPs of the step at `position`.
    pub step_flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepOptions {
    pub lengths: Vec<usize>,
    pub repeats: usize,
    pub warmup: usize,
    /// Steps averaged per sample, ending at the target position.
    pub window: usize,
    pub seed: u64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self { lengths: vec![128, 512, 2048], repeats: 5, warmup: 3, window: 32, seed: 0 }
    }
}

/// Bytes of generation state after `position` tokens, from the configuration alone.
pub fn expected_state_bytes(config: &ModelConfig, position: usize, elem: usize) -> usize {
    let mixers = config.n_pairs();
    if config.variant.uses_mamba() {
        mixers * (config.d_inner() * config.d_state + (config.d_conv - 1) * config.d_inner()) * elem
    } else {
        mixers * 2 * position * config.d_model * elem
    }
}

/// Greedy generation from a one-token prompt, timing every step.
/// Returns per-step nanoseconds, bytes and FLOPs after each step.
fn timed_generation<T: Element>(model: &ModelParams<T>, n: usize) -> Result<(Vec<f64>, Vec<usize>, Vec<u64>)> {
    let opts = ForwardOptions::inference();
    let mut state = model.fresh_state();
    let mut token = 1 % model.config.vocab_size;
    let (mut times, mut bytes, mut flops) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let mut counter = FlopCounter::new();
        let start = Instant::now();
        let logits = model.step(&mut state, token, &opts, &mut counter)?;
        times.push(start.elapsed().as_nanos() as f64);
        let row: Vec<f64> = logits.iter().map(|v| v.f64()).collect();
        token = route_top1(&row, row.len())[0];
        bytes.push(state.size_bytes());
        flops.push(counter.total());
    }
    Ok((times, bytes, flops))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-token generation latency of one model at each requested length.
pub fn latency_sweep<T: Element>(name: &str, model: &ModelParams<T>, opts: &SweepOptions) -> Result<Vec<LatencySample>> {
    if opts.repeats == 0 || opts.lengths.is_empty() || opts.window == 0 {
        return Err(Error::Input("sweep needs at least one length, one repeat and a positive window".into()));
    }
    let mut lengths = opts.lengths.clone();
    lengths.sort_unstable();
    lengths.dedup();
    let longest = *lengths.last().expect("non-empty");
    if !model.config.variant.uses_mamba() && longest > model.config.max_seq_len {
        return Err(Error::Input(format!("length {longest} exceeds max_seq_len {}", model.config.max_seq_len)));
    }
    let mut per_length: Vec<Vec<f64>> = vec![Vec::new(); lengths.len()];
    let mut bytes = Vec::new();
    let mut flops = Vec::new();
    for run in 0..opts.warmup + opts.repeats {
        let (times, b, f) = timed_generation(model, longest)?;
        if run < opts.warmup {
            continue;
        }
        for (k, &len) in lengths.iter().enumerate() {
            let w = opts.window.min(len);
            per_length[k].push(times[len - w..len].iter().sum::<f64>() / w as f64);
        }
        bytes = b;
        flops = f;
    }
    Ok(lengths
        .iter()
        .zip(per_length)
        .map(|(&len, samples)| LatencySample {
            variant: name.to_string(),
            position: len,
            ns_per_token: median(samples),
            state_bytes: bytes[len - 1],
            step_flops: flops[len - 1],
        })
        .collect())
}

/// Sweeps every requested variant at the same tiny dimensions, one after another.
pub fn latency_sweep_variants(base: &ModelConfig, variants: &[Variant], opts: &SweepOptions) -> Result<Vec<LatencySample>> {
    let mut out = Vec::new();
    for &v in variants {
        let mut cfg = ModelConfig { variant: v, ..base.clone() };
        cfg.n_experts = if v.uses_moe() { base.n_experts.max(1) } else { 1 };
        cfg.max_seq_len = cfg.max_seq_len.max(opts.lengths.iter().copied().max().unwrap_or(0));
        let model = ModelParams::<f32>::new(cfg, opts.seed)?;
        out.extend(latency_sweep(v.name(), &model, opts)?);
    }
    Ok(out)
}

/// Shape of one variant's sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub variant: String,
    /// `t(longest) / t(shortest)`
    pub time_ratio: f64,
    pub time_strictly_increasing: bool,
    pub bytes_constant: bool,
    /// `bytes(longest) / bytes(shortest)`
    pub bytes_ratio: f64,
}

pub fn summarize(samples: &[LatencySample]) -> Vec<SweepSummary> {
    let mut names: Vec<&str> = Vec::new();
    for s in samples {
        if !names.contains(&s.variant.as_str()) {
            names.push(&s.variant);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let mut rows: Vec<&LatencySample> = samples.iter().filter(|s| s.variant == name).collect();
            rows.sort_by_key(|s| s.position);
            let (first, last) = (rows[0], rows[rows.len() - 1]);
            SweepSummary {
                variant: name.to_string(),
                time_ratio: last.ns_per_token / first.ns_per_token,
                time_strictly_increasing: rows.windows(2).all(|w| w[1].ns_per_token > w[0].ns_per_token),
                bytes_constant: rows.iter().all(|r| r.state_bytes == first.state_bytes),
                bytes_ratio: last.state_bytes as f64 / first.state_bytes.max(1) as f64,
            }
        })
        .collect()
}

pub fn write_latency_csv<W: Write>(samples: &[LatencySample], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for s in samples {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

/// Token counts per MoE layer and expert over a set of batches, using the
/// given routing mode.
pub fn routing_histogram<T: Element>(model: &ModelParams<T>, batches: &[TokenBatch], opts: &ForwardOptions) -> Result<RoutingStats> {
    let mut stats = RoutingStats::default();
    for b in batches {
        let mut be = Eager::new();
        let (_, layers) = model.forward(&mut be, &b.inputs, b.batch, opts)?;
        stats.add(0, &layers);
    }
    Ok(stats)
}
