//! Toy training: synthetic sequence tasks, Adam with warmup and cosine decay,
//! NDJSON metrics and periodic checkpoints.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::backend::{Backend, Eager};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::model::{Channel, ForwardOptions, ModelConfig, ModelParams, TokenBatch};
use crate::moe::{LayerRouting, RoutingStats};
use crate::param::Parameters;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// `prefix, DELIM, prefix`; only the copied half is scored.
    #[default]
    Copy,
    /// Key-value pairs followed by queries; only the answers are scored.
    AssociativeRecall,
}

/// Token reserved as the copy delimiter.
pub const DELIM: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub task: Task,
    pub steps: usize,
    pub batch_size: usize,
    /// Input length per sequence.
    pub seq_len: usize,
    pub lr: f64,
    pub min_lr: f64,
    /// Fraction of steps spent in linear warmup.
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub log_every: usize,
    /// 0 disables periodic checkpoints; a final one is always written when
    /// an output directory is given.
    pub checkpoint_every: usize,
    /// Distinct key-value pairs per recall sequence.
    pub recall_pairs: usize,
    pub eval_batches: usize,
}

impl TrainConfig {
    /// Associative recall at length 64.
    pub fn recall_default() -> Self {
        Self { task: Task::AssociativeRecall, steps: 5000, seq_len: 64, recall_pairs: 4, lr: 1e-2, min_lr: 1e-3, ..Self::default() }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::Copy,
            steps: 2000,
            batch_size: 16,
            seq_len: 12,
            lr: 3e-3,
            min_lr: 3e-4,
            warmup_frac: 0.01,
            weight_decay: 0.0,
            seed: 0,
            log_every: 50,
            checkpoint_every: 0,
            recall_pairs: 8,
            eval_batches: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_lr <= self.lr) {
            return Err(Error::Config(format!("min_lr ({}) must not exceed lr ({})", self.min_lr, self.lr)));
        }
        if self.min_lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rates must be finite and non-negative (lr = {}, min_lr = {})", self.lr, self.min_lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!("warmup_frac must lie in [0, 1], got {}", self.warmup_frac)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Builds `batch` sequences of `seq_len` inputs with next-token targets.
pub fn make_task_batch(task: Task, rng: &mut impl Rng, batch: usize, seq_len: usize, vocab: usize, recall_pairs: usize) -> Result<TokenBatch> {
    let mut out = TokenBatch { batch, seq_len, inputs: Vec::new(), targets: Vec::new(), weights: Vec::new() };
    for _ in 0..batch {
        let (seq, scored) = match task {
            Task::Copy => copy_sequence(rng, seq_len, vocab)?,
            Task::AssociativeRecall => recall_sequence(rng, seq_len, vocab, recall_pairs)?,
        };
        out.inputs.extend_from_slice(&seq[..seq_len]);
        out.targets.extend_from_slice(&seq[1..]);
        out.weights.extend(scored.into_iter().map(|s| if s { 1.0 } else { 0.0 }));
    }
    Ok(out)
}

/// `seq_len + 1` tokens and, per input position, whether its target is scored.
fn copy_sequence(rng: &mut impl Rng, seq_len: usize, vocab: usize) -> Result<(Vec<usize>, Vec<bool>)> {
    if seq_len < 2 || seq_len % 2 != 0 || vocab < 3 {
        return Err(Error::Input(format!("copy task needs an even seq_len >= 2 and vocab >= 3, got {seq_len} and {vocab}")));
    }
    let p = seq_len / 2;
    let prefix: Vec<usize> = (0..p).map(|_| rng.random_range(1..vocab)).collect();
    Ok(copy_from_prefix(&prefix))
}

/// The copy layout for a given prefix.
pub fn copy_from_prefix(prefix: &[usize]) -> (Vec<usize>, Vec<bool>) {
    let p = prefix.len();
    let mut seq = prefix.to_vec();
    seq.push(DELIM);
    seq.extend_from_slice(prefix);
    let scored = (0..2 * p).map(|t| t >= p).collect();
    (seq, scored)
}

fn recall_sequence(rng: &mut impl Rng, seq_len: usize, vocab: usize, pairs: usize) -> Result<(Vec<usize>, Vec<bool>)> {
    let half = vocab / 2;
    if pairs == 0 || pairs >= half || 2 * pairs + 2 > seq_len || seq_len % 2 != 0 {
        return Err(Error::Input(format!(
            "recall task needs 0 < pairs < vocab/2 and an even seq_len >= 2·pairs + 2 (pairs {pairs}, vocab {vocab}, seq_len {seq_len})"
        )));
    }
    let mut keys: Vec<usize> = (1..half).collect();
    keys.shuffle(rng);
    keys.truncate(pairs);
    let values: Vec<usize> = (0..pairs).map(|_| rng.random_range(half..vocab)).collect();
    let queries = (seq_len - 2 * pairs) / 2;
    let order: Vec<usize> = (0..queries).map(|_| rng.random_range(0..pairs)).collect();
    let pair_list: Vec<(usize, usize)> = keys.iter().copied().zip(values.iter().copied()).collect();
    let query_list: Vec<(usize, usize)> = order.iter().map(|&q| (keys[q], values[q])).collect();
    Ok(recall_from_pairs(&pair_list, &query_list, seq_len))
}

/// The recall layout: `k₁ v₁ … kₙ vₙ q₁ a₁ q₂ a₂ …`, truncated to `seq_len + 1`.
/// Inputs at query keys are scored (their target is the answer).
pub fn recall_from_pairs(pairs: &[(usize, usize)], queries: &[(usize, usize)], seq_len: usize) -> (Vec<usize>, Vec<bool>) {
    let mut seq: Vec<usize> = pairs.iter().flat_map(|&(k, v)| [k, v]).collect();
    let start = seq.len();
    seq.extend(queries.iter().flat_map(|&(q, a)| [q, a]));
    seq.resize(seq_len + 1, DELIM);
    let scored = (0..seq_len).map(|t| t >= start && (t - start) % 2 == 0 && (t - start) / 2 < queries.len()).collect();
    (seq, scored)
}

/// Learning rate at `step`: linear warmup then cosine decay to `min_lr`.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    let warmup = ((cfg.steps as f64 * cfg.warmup_frac).ceil() as usize).max(1);
    if step < warmup {
        return cfg.lr * (step + 1) as f64 / warmup as f64;
    }
    let span = cfg.steps.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Adam with decoupled weight decay. Parameters without a gradient in a step
/// are left untouched.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>, u64)>,
}

impl Adam {
    pub fn new(weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay, moments: HashMap::new() }
    }

    /// One update of a single named array.
    pub fn update<T: Element>(&mut self, name: &str, value: &mut Tensor<T>, grad: &Tensor<T>, lr: f64) {
        let n = value.len();
        let (m, v, t) = self.moments.entry(name.to_string()).or_insert_with(|| (vec![0.0; n], vec![0.0; n], 0));
        *t += 1;
        let c1 = 1.0 - self.beta1.powi(*t as i32);
        let c2 = 1.0 - self.beta2.powi(*t as i32);
        for (k, (p, g)) in value.data_mut().iter_mut().zip(grad.data()).enumerate() {
            let g = g.f64();
            m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
            v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
            let step = lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            let decayed = p.f64() * (1.0 - lr * self.weight_decay);
            *p = T::of(decayed - step);
        }
    }
}

/// One metrics line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// `[layer][expert]` token counts of this step's batch.
    pub expert_counts: Vec<Vec<usize>>,
    pub sinkhorn_unconverged: usize,
    /// Whether experts not chosen for a probe token received zero gradient.
    pub unchosen_grad_zero: Option<bool>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: ModelParams<T>,
    pub losses: Vec<f64>,
    pub initial_eval: Evaluation,
    pub final_eval: Evaluation,
    pub routing: RoutingStats,
    pub checkpoints: Vec<PathBuf>,
}

/// Loss and exact-match accuracy on scored positions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub scored: usize,
}

pub fn evaluate<T: Element>(model: &ModelParams<T>, batches: &[TokenBatch], opts: &ForwardOptions) -> Result<Evaluation> {
    let v = model.config.vocab_size;
    let (mut loss, mut correct, mut scored, mut weight) = (0.0, 0usize, 0usize, 0.0);
    for b in batches {
        let mut be = Eager::new();
        let (logits, _) = model.forward(&mut be, &b.inputs, b.batch, opts)?;
        let flat = logits.reshape(&[b.inputs.len(), v])?;
        let w: f64 = b.weights.iter().sum();
        let ws: Vec<T> = b.weights.iter().map(|&x| T::of(x)).collect();
        loss += be.cross_entropy(&flat, &b.targets, &ws).item().f64() * w;
        weight += w;
        for (r, (&t, &wt)) in b.targets.iter().zip(&b.weights).enumerate() {
            if wt > 0.0 {
                scored += 1;
                let row: Vec<f64> = flat.row(r).iter().map(|x| x.f64()).collect();
                if crate::sinkhorn::route_top1(&row, v)[0] == t {
                    correct += 1;
                }
            }
        }
    }
    Ok(Evaluation { loss: loss / weight.max(1.0), accuracy: correct as f64 / scored.max(1) as f64, scored })
}

fn expert_counts(layers: &[LayerRouting]) -> Vec<Vec<usize>> {
    layers.iter().map(|l| l.counts.clone()).collect()
}

/// Checks the routing gradient contract on the first token of a batch.
fn probe_unchosen_gradients<T: Element>(model: &ModelParams<T>, token: usize, opts: &ForwardOptions) -> Result<Option<bool>> {
    let d = model.config.d_model;
    let x = Tensor::new(vec![1, d], model.embedding.value.row(token).to_vec())?;
    let mut result = None;
    for layer in &model.layers {
        if let Channel::MoE(moe) = &layer.channel {
            let u = x.layernorm_nobias(&layer.ln_channel.value)?;
            let ok = moe.unchosen_experts_get_no_gradient(u.data(), &opts.moe)?;
            result = Some(result.unwrap_or(true) && ok);
        }
    }
    Ok(result)
}

/// One optimizer step. Returns the batch loss and the routing of each MoE layer.
pub fn train_step<T: Element>(
    model: &mut ModelParams<T>,
    adam: &mut Adam,
    batch: &TokenBatch,
    lr: f64,
    opts: &ForwardOptions,
) -> Result<(f64, Vec<LayerRouting>)> {
    let mut tape = Tape::new();
    let (loss, routing) = model.loss(&mut tape, batch, opts)?;
    let value = tape.val(loss).item().f64();
    if !value.is_finite() {
        return Ok((value, routing));
    }
    let grads = tape.backward(loss)?;
    model.visit_mut("", &mut |name, p| {
        if let Some(g) = grads.wrt(p) {
            adam.update(&name, &mut p.value, g, lr);
        }
    });
    Ok((value, routing))
}

/// Gradients of the first step as `(name, values)`, for determinism checks.
pub fn first_step_gradients<T: Element>(model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Vec<(String, Vec<T>)>> {
    let model = ModelParams::<T>::new(model_cfg.clone(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let batch = make_task_batch(cfg.task, &mut rng, cfg.batch_size, cfg.seq_len, model_cfg.vocab_size, cfg.recall_pairs)?;
    let mut tape = Tape::new();
    let (loss, _) = model.loss(&mut tape, &batch, &ForwardOptions::default())?;
    let grads = tape.backward(loss)?;
    Ok(model
        .named_params()
        .into_iter()
        .filter_map(|(n, p)| grads.wrt(p).map(|g| (n, g.data().to_vec())))
        .collect())
}

/// Trains from a fresh initialization. With `out`, writes `metrics.ndjson`,
/// periodic `checkpoints/step_N.ckpt` and `checkpoints/final.ckpt`.
/// Where a training run writes `metrics.ndjson` and its checkpoints.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainOutputs {
    pub metrics_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
}

impl TrainOutputs {
    /// `dir/metrics.ndjson` and `dir/checkpoints/`.
    pub fn under(dir: &Path) -> Self {
        Self { metrics_dir: dir.to_path_buf(), checkpoint_dir: dir.join("checkpoints") }
    }
}

pub fn train_loop<T: Element>(model_cfg: &ModelConfig, cfg: &TrainConfig, out: Option<&TrainOutputs>) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let mut model = ModelParams::<T>::new(model_cfg.clone(), cfg.seed)?;
    let vocab = model_cfg.vocab_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xe7a1);
    let eval_set = (0..cfg.eval_batches)
        .map(|_| make_task_batch(cfg.task, &mut eval_rng, cfg.batch_size, cfg.seq_len, vocab, cfg.recall_pairs))
        .collect::<Result<Vec<_>>>()?;
    let opts = ForwardOptions::default();
    let initial_eval = evaluate(&model, &eval_set, &opts)?;

    let mut metrics = match out {
        Some(o) => {
            fs::create_dir_all(&o.metrics_dir)?;
            Some(BufWriter::new(File::create(o.metrics_dir.join("metrics.ndjson"))?))
        }
        None => None,
    };
    let mut checkpoints = Vec::new();
    let mut adam = Adam::new(cfg.weight_decay);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut routing = RoutingStats::default();

    for step in 0..cfg.steps {
        let batch = make_task_batch(cfg.task, &mut rng, cfg.batch_size, cfg.seq_len, vocab, cfg.recall_pairs)?;
        let lr = lr_at(cfg, step);
        let (loss, layers) = train_step(&mut model, &mut adam, &batch, lr, &opts)?;
        if !loss.is_finite() {
            if let Some(m) = metrics.as_mut() {
                m.flush()?;
            }
            return Err(Error::Diverged { step, loss });
        }
        losses.push(loss);
        let logged = cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps);
        if logged {
            routing.add(step, &layers);
            if let Some(m) = metrics.as_mut() {
                let rec = MetricsRecord {
                    step,
                    loss,
                    lr,
                    expert_counts: expert_counts(&layers),
                    sinkhorn_unconverged: layers.iter().filter(|l| !l.converged).count(),
                    unchosen_grad_zero: probe_unchosen_gradients(&model, batch.inputs[0], &opts)?,
                };
                serde_json::to_writer(&mut *m, &rec)?;
                m.write_all(b"\n")?;
            }
        }
        if let Some(o) = out {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                let path = o.checkpoint_dir.join(format!("step_{}.ckpt", step + 1));
                checkpoint::save(&model, Some(step + 1), &path)?;
                checkpoints.push(path);
            }
        }
    }
    if let Some(m) = metrics.as_mut() {
        m.flush()?;
    }
    if let Some(o) = out {
        let path = o.checkpoint_dir.join("final.ckpt");
        checkpoint::save(&model, Some(cfg.steps), &path)?;
        checkpoints.push(path);
    }
    let final_eval = evaluate(&model, &eval_set, &opts)?;
    Ok(TrainOutcome { model, losses, initial_eval, final_eval, routing, checkpoints })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    #[test]
    fn copy_layout() {
        let (seq, scored) = copy_from_prefix(&[5, 9, 2]);
        assert_eq!(seq, vec![5, 9, 2, DELIM, 5, 9, 2]);
        let targets = &seq[1..];
        let got: Vec<usize> = targets.iter().zip(&scored).filter(|(_, &s)| s).map(|(&t, _)| t).collect();
        assert_eq!(got, vec![5, 9, 2]);
    }

    #[test]
    fn recall_layout() {
        let (seq, scored) = recall_from_pairs(&[(3, 40), (7, 50)], &[(7, 50)], 6);
        assert_eq!(seq, vec![3, 40, 7, 50, 7, 50, DELIM]);
        assert_eq!(scored, vec![false, false, false, false, true, false]);
        assert_eq!(seq[5], 50);
    }

    #[test]
    fn batches_are_reproducible_and_in_range() {
        for task in [Task::Copy, Task::AssociativeRecall] {
            let a = make_task_batch(task, &mut ChaCha8Rng::seed_from_u64(1), 4, 64, 64, 8).unwrap();
            let b = make_task_batch(task, &mut ChaCha8Rng::seed_from_u64(1), 4, 64, 64, 8).unwrap();
            assert_eq!(a, b);
            assert!(a.inputs.iter().chain(&a.targets).all(|&t| t < 64));
            assert_eq!(a.inputs.len(), 256);
            assert!(a.weights.iter().sum::<f64>() > 0.0);
        }
        let b = make_task_batch(Task::AssociativeRecall, &mut ChaCha8Rng::seed_from_u64(2), 1, 64, 64, 8).unwrap();
        for t in 0..64 {
            if b.weights[t] > 0.0 {
                let key = b.inputs[t];
                let first = b.inputs.iter().position(|&k| k == key).unwrap();
                assert_eq!(b.inputs[first + 1], b.targets[t]);
            }
        }
    }

    #[test]
    fn schedule_shape() {
        let cfg = TrainConfig { steps: 1000, lr: 1e-3, min_lr: 1e-4, ..Default::default() };
        assert!((lr_at(&cfg, 9) - 1e-3).abs() < 1e-15);
        assert!(lr_at(&cfg, 0) < lr_at(&cfg, 5));
        assert!((lr_at(&cfg, 999) - 1e-4).abs() < 1e-6);
        for s in 10..999 {
            assert!(lr_at(&cfg, s + 1) <= lr_at(&cfg, s) + 1e-18);
        }
    }

    #[test]
    fn adam_moves_toward_quadratic_minimum() {
        let mut adam = Adam::new(0.0);
        let mut x = Tensor::<f64>::from_f64(vec![2], &[3.0, -2.0]).unwrap();
        let before = x.data().iter().map(|v| v * v).sum::<f64>();
        let grad = x.scale(2.0);
        adam.update("x", &mut x, &grad, 0.1);
        assert!(x.data().iter().map(|v| v * v).sum::<f64>() < before);
        assert!((x.data()[0] - 2.9).abs() < 1e-9 && (x.data()[1] + 1.9).abs() < 1e-9);
    }

    #[test]
    fn min_lr_above_peak_rejected() {
        let cfg = TrainConfig { lr: 1e-4, min_lr: 1e-3, ..Default::default() };
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("0.001") && msg.contains("0.0001"), "{msg}");
    }

    fn params_equal(a: &ModelParams<f32>, b: &ModelParams<f32>) -> bool {
        a.named_params().iter().zip(b.named_params()).all(|((_, x), (_, y))| x.value.data() == y.value.data())
    }

    #[test]
    fn zero_steps_and_zero_lr_leave_parameters_alone() {
        let mcfg = ModelConfig::tiny(Variant::MambaMoe);
        let init = ModelParams::<f32>::new(mcfg.clone(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { steps: 0, seed: 3, ..Default::default() };
        let out = train_loop::<f32>(&mcfg, &cfg, Some(&TrainOutputs::under(dir.path()))).unwrap();
        let (saved, _) = checkpoint::load::<f32>(&out.checkpoints[0]).unwrap();
        assert!(params_equal(&saved, &init));
        let cfg = TrainConfig { steps: 3, lr: 0.0, min_lr: 0.0, seed: 3, batch_size: 2, ..Default::default() };
        let out = train_loop::<f32>(&mcfg, &cfg, None).unwrap();
        assert!(params_equal(&out.model, &init));
    }

    #[test]
    fn first_step_gradients_are_deterministic() {
        let mcfg = ModelConfig::tiny(Variant::MambaMoe);
        let cfg = TrainConfig { batch_size: 2, ..Default::default() };
        let a = first_step_gradients::<f32>(&mcfg, &cfg).unwrap();
        let b = first_step_gradients::<f32>(&mcfg, &cfg).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b);
    }

    #[test]
    fn metrics_and_checkpoints_written() {
        let mcfg = ModelConfig::tiny(Variant::MambaMoe);
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { steps: 4, batch_size: 2, log_every: 2, checkpoint_every: 2, ..Default::default() };
        let out = train_loop::<f32>(&mcfg, &cfg, Some(&TrainOutputs::under(dir.path()))).unwrap();
        assert_eq!(out.checkpoints.len(), 3);
        let text = fs::read_to_string(dir.path().join("metrics.ndjson")).unwrap();
        let recs: Vec<MetricsRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(recs.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 2, 3]);
        for r in &recs {
            assert_eq!(r.expert_counts.len(), 2);
            assert_eq!(r.expert_counts[0].iter().sum::<usize>(), cfg.batch_size * cfg.seq_len);
            assert_eq!(r.unchosen_grad_zero, Some(true));
        }
    }
}
