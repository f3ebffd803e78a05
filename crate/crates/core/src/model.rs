//! The four architecture variants (dense transformer, dense Mamba,
//! transformer-MoE, Mamba-MoE) with embeddings, pre-norm blocks, final norm
//! and LM head, plus streaming generation.
//!
//! Every pair of blocks computes `x ← x + Channel(LN(x + Mixer(LN(x))))`.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttnParams, KvCache};
use crate::backend::{Backend, Eager};
use crate::error::{Error, Result};
use crate::mamba::{MambaDims, MambaParams, MambaState, ScanOptions};
use crate::moe::{ExpertKind, ExpertParams, GateMode, LayerRouting, MoEOptions, MoEParams, RoutingMode};
use crate::param::{join, Init, Param, Parameters};
use crate::tensor::{Element, FlopCounter, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Transformer,
    Mamba,
    TransformerMoe,
    MambaMoe,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Transformer, Variant::Mamba, Variant::TransformerMoe, Variant::MambaMoe];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Transformer => "transformer",
            Variant::Mamba => "mamba",
            Variant::TransformerMoe => "transformer-moe",
            Variant::MambaMoe => "mamba-moe",
        }
    }

    pub fn uses_mamba(self) -> bool {
        matches!(self, Variant::Mamba | Variant::MambaMoe)
    }

    pub fn uses_moe(self) -> bool {
        matches!(self, Variant::TransformerMoe | Variant::MambaMoe)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown variant `{s}` (expected transformer, mamba, transformer-moe or mamba-moe)")))
    }
}

/// Architecture hyperparameters. `n_layers` counts mixer and channel blocks
/// separately, so a model has `n_layers / 2` of each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub n_layers: usize,
    pub d_model: usize,
    /// Mamba inner width is `expand · d_model`.
    pub expand: usize,
    pub d_state: usize,
    pub dt_rank: usize,
    pub d_conv: usize,
    pub n_experts: usize,
    pub d_ff: usize,
    pub expert_kind: ExpertKind,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub n_heads: usize,
    pub tie_embeddings: bool,
}

pub const PRESETS: [&str; 8] = [
    "tiny-mamba-moe",
    "tiny-mamba-moe-std",
    "tiny-mamba",
    "tiny-transformer",
    "tiny-transformer-moe",
    "recall-mamba-moe",
    "340m-1.5b",
    "630m-2.8b",
];

impl ModelConfig {
    pub fn tiny(variant: Variant) -> Self {
        Self {
            variant,
            n_layers: 4,
            d_model: 64,
            expand: 2,
            d_state: 16,
            dt_rank: 4,
            d_conv: 4,
            n_experts: if variant.uses_moe() { 4 } else { 1 },
            d_ff: 128,
            expert_kind: ExpertKind::Swiglu,
            vocab_size: 256,
            max_seq_len: 4096,
            n_heads: 4,
            tie_embeddings: true,
        }
    }

    /// Table-sized configurations for counting. They are never instantiated.
    fn large(d_model: usize, n_layers: usize, d_ff: usize) -> Self {
        Self {
            variant: Variant::MambaMoe,
            n_layers,
            d_model,
            expand: 2,
            d_state: 16,
            dt_rank: d_model.div_ceil(32),
            d_conv: 4,
            n_experts: 8,
            d_ff,
            expert_kind: ExpertKind::Swiglu,
            vocab_size: 50304,
            max_seq_len: 2048,
            n_heads: d_model / 64,
            tie_embeddings: true,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "tiny-mamba-moe" => Self::tiny(Variant::MambaMoe),
            "tiny-mamba-moe-std" => Self { expert_kind: ExpertKind::Standard, d_ff: 256, ..Self::tiny(Variant::MambaMoe) },
            "tiny-mamba" => Self::tiny(Variant::Mamba),
            "tiny-transformer" => Self::tiny(Variant::Transformer),
            "tiny-transformer-moe" => Self::tiny(Variant::TransformerMoe),
            "recall-mamba-moe" => Self { vocab_size: 64, ..Self::tiny(Variant::MambaMoe) },
            "340m-1.5b" => Self::large(1152, 30, 3072),
            "630m-2.8b" => Self::large(1472, 36, 3872),
            other => return Err(Error::UnknownPreset(other.to_string())),
        })
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn n_pairs(&self) -> usize {
        self.n_layers / 2
    }

    pub fn mamba_dims(&self) -> MambaDims {
        MambaDims { d_model: self.d_model, d_inner: self.d_inner(), d_state: self.d_state, dt_rank: self.dt_rank, d_conv: self.d_conv }
    }

    /// Scale applied to projections that write into the residual stream.
    pub fn residual_scale(&self) -> f64 {
        1.0 / (2.0 * self.n_layers as f64).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_layers < 2 || self.n_layers % 2 != 0 {
            return bad(format!("n_layers must be even and at least 2, got {}", self.n_layers));
        }
        for (name, v) in [
            ("d_model", self.d_model),
            ("expand", self.expand),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("n_experts", self.n_experts),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.variant.uses_mamba() {
            for (name, v) in [("d_state", self.d_state), ("dt_rank", self.dt_rank), ("d_conv", self.d_conv)] {
                if v == 0 {
                    return bad(format!("{name} must be positive"));
                }
            }
        } else if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if !self.variant.uses_moe() && self.n_experts != 1 {
            return bad(format!("dense variant {} needs n_experts = 1, got {}", self.variant.name(), self.n_experts));
        }
        Ok(())
    }

    /// Every parameter array as `(name, shape)`, in the order the model visits them.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, i, h, r, c, f, v) = (self.d_model, self.d_inner(), self.d_state, self.dt_rank, self.d_conv, self.d_ff, self.vocab_size);
        let mut out = vec![("embedding".to_string(), vec![v, d])];
        if !self.variant.uses_mamba() {
            out.push(("positions".into(), vec![self.max_seq_len, d]));
        }
        let expert = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str| {
            out.push((join(prefix, "w_in"), vec![d, f]));
            if self.expert_kind == ExpertKind::Swiglu {
                out.push((join(prefix, "w_gate"), vec![d, f]));
            }
            out.push((join(prefix, "w_out"), vec![f, d]));
        };
        for p in 0..self.n_pairs() {
            let pre = format!("layers.{p}");
            out.push((join(&pre, "ln_mixer"), vec![d]));
            let mixer = join(&pre, "mixer");
            if self.variant.uses_mamba() {
                for (name, shape) in [
                    ("w_x", vec![d, i]),
                    ("w_z", vec![d, i]),
                    ("w_y", vec![i, d]),
                    ("conv_filters", vec![i, c]),
                    ("conv_bias", vec![i]),
                    ("w_b", vec![i, h]),
                    ("w_c", vec![i, h]),
                    ("w_dt_down", vec![i, r]),
                    ("w_dt_up", vec![r, i]),
                    ("dt_bias", vec![i]),
                    ("a_log", vec![i, h]),
                    ("d_skip", vec![i]),
                ] {
                    out.push((join(&mixer, name), shape));
                }
            } else {
                for name in ["w_q", "w_k", "w_v", "w_o"] {
                    out.push((join(&mixer, name), vec![d, d]));
                }
            }
            out.push((join(&pre, "ln_channel"), vec![d]));
            if self.variant.uses_moe() {
                let moe = join(&pre, "moe");
                out.push((join(&moe, "router"), vec![d, self.n_experts]));
                for e in 0..self.n_experts {
                    expert(&mut out, &join(&moe, &format!("experts.{e}")));
                }
            } else {
                expert(&mut out, &join(&pre, "mlp"));
            }
        }
        out.push(("ln_final".into(), vec![d]));
        if !self.tie_embeddings {
            out.push(("unembed".into(), vec![d, v]));
        }
        out
    }
}

#[derive(Clone, Debug)]
pub enum Mixer<T> {
    Mamba(MambaParams<T>),
    Attention(AttnParams<T>),
}

#[derive(Clone, Debug)]
pub enum Channel<T> {
    Dense(ExpertParams<T>),
    MoE(MoEParams<T>),
}

#[derive(Clone, Debug)]
pub struct Layer<T> {
    pub ln_mixer: Param<T>,
    pub mixer: Mixer<T>,
    pub ln_channel: Param<T>,
    pub channel: Channel<T>,
}

#[derive(Clone, Debug)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    /// `[V, D]`, also the LM head when embeddings are tied.
    pub embedding: Param<T>,
    /// `[max_seq_len, D]` learned absolute positions, attention variants only.
    pub positions: Option<Param<T>>,
    pub layers: Vec<Layer<T>>,
    pub ln_final: Param<T>,
    /// `[D, V]` when untied.
    pub unembed: Option<Param<T>>,
}

/// Per-call behaviour that is not part of the parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ForwardOptions {
    pub scan: ScanOptions,
    pub moe: MoEOptions,
}

impl ForwardOptions {
    /// Routing as used during generation: per-token argmax.
    pub fn inference() -> Self {
        Self { moe: MoEOptions { routing: RoutingMode::Argmax, ..Default::default() }, ..Default::default() }
    }

    pub fn with_gate(mut self, gate: GateMode) -> Self {
        self.moe.gate = gate;
        self
    }
}

/// Token ids for a batch of equal-length sequences, with next-token targets
/// and per-position loss weights.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq_len: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub weights: Vec<f64>,
}

impl<T: Element> ModelParams<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let init = Init::new(seed);
        let (d, v) = (config.d_model, config.vocab_size);
        let rs = config.residual_scale();
        let layers = (0..config.n_pairs())
            .map(|p| {
                let key = format!("layers.{p}");
                let mixer = if config.variant.uses_mamba() {
                    Mixer::Mamba(MambaParams::init(config.mamba_dims(), &init, &format!("{key}.mixer"), rs))
                } else {
                    Mixer::Attention(AttnParams::init(d, config.n_heads, &init, &format!("{key}.mixer"), rs))
                };
                let channel_key = format!("{key}.channel");
                let channel = if config.variant.uses_moe() {
                    Channel::MoE(MoEParams::init(config.expert_kind, d, config.d_ff, config.n_experts, &init, &channel_key, rs))
                } else {
                    // shares its random stream with expert 0 of the routed variant
                    Channel::Dense(ExpertParams::init(config.expert_kind, d, config.d_ff, &init, &format!("{channel_key}.experts.0"), rs))
                };
                Layer { ln_mixer: Init::constant(&[d], 1.0), mixer, ln_channel: Init::constant(&[d], 1.0), channel }
            })
            .collect();
        Ok(Self {
            embedding: init.normal("embedding", &[v, d], 0.02),
            positions: (!config.variant.uses_mamba()).then(|| init.normal("positions", &[config.max_seq_len, d], 0.02)),
            layers,
            ln_final: Init::constant(&[d], 1.0),
            unembed: (!config.tie_embeddings).then(|| init.normal("unembed", &[d, v], 0.02)),
            config,
        })
    }

    /// Zeroes every projection that writes into the residual stream, making
    /// each block pair an identity map.
    pub fn zero_blocks(&mut self) {
        for layer in &mut self.layers {
            match &mut layer.mixer {
                Mixer::Mamba(m) => m.zero_output(),
                Mixer::Attention(a) => a.zero_output(),
            }
            match &mut layer.channel {
                Channel::Dense(e) => e.zero_output(),
                Channel::MoE(m) => m.zero_output(),
            }
        }
    }

    fn check_tokens(&self, tokens: &[usize], seq_len: usize) -> Result<()> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Input(format!("token id {bad} out of range for vocabulary of {}", self.config.vocab_size)));
        }
        if self.positions.is_some() && seq_len > self.config.max_seq_len {
            return Err(Error::Input(format!("sequence length {seq_len} exceeds max_seq_len {}", self.config.max_seq_len)));
        }
        Ok(())
    }

    /// Logits `[batch, L, V]` for `batch` sequences stored back to back in
    /// `tokens`, plus routing of each MoE layer.
    pub fn forward<B: Backend<T>>(&self, be: &mut B, tokens: &[usize], batch: usize, opts: &ForwardOptions) -> Result<(B::V, Vec<LayerRouting>)> {
        if batch == 0 || tokens.is_empty() || tokens.len() % batch != 0 {
            return Err(Error::Input(format!("{} tokens cannot form {batch} equal non-empty sequences", tokens.len())));
        }
        let l = tokens.len() / batch;
        self.check_tokens(tokens, l)?;
        let (d, v) = (self.config.d_model, self.config.vocab_size);

        let table = be.param(&self.embedding);
        let x = be.embedding(&table, tokens);
        let mut x = match &self.positions {
            Some(pos) => {
                let pos = be.param(pos);
                let ids: Vec<usize> = (0..batch).flat_map(|_| 0..l).collect();
                let p = be.embedding(&pos, &ids);
                be.add(&x, &p)
            }
            None => x,
        };
        x = be.reshape(&x, &[batch, l, d]);

        let mut routing = Vec::new();
        for layer in &self.layers {
            let g = be.param(&layer.ln_mixer);
            let h = be.layernorm(&x, &g);
            let m = match &layer.mixer {
                Mixer::Mamba(p) => p.forward(be, &h, &opts.scan),
                Mixer::Attention(p) => p.forward(be, &h),
            };
            let r = be.add(&x, &m);
            let g = be.param(&layer.ln_channel);
            let u = be.layernorm(&r, &g);
            let c = match &layer.channel {
                Channel::Dense(e) => e.forward(be, &u),
                Channel::MoE(moe) => {
                    let (y, info) = moe.forward(be, &u, &opts.moe)?;
                    routing.push(info);
                    y
                }
            };
            x = be.add(&x, &c);
        }
        let g = be.param(&self.ln_final);
        let x = be.layernorm(&x, &g);
        let logits = match &self.unembed {
            Some(w) => {
                let w = be.param(w);
                be.matmul(&x, &w, false)
            }
            None => {
                let w = be.param(&self.embedding);
                be.matmul(&x, &w, true)
            }
        };
        Ok((be.reshape(&logits, &[batch, l, v]), routing))
    }

    /// Logits `[L, V]` of a single sequence.
    pub fn logits(&self, tokens: &[usize], opts: &ForwardOptions, counter: &mut FlopCounter) -> Result<Tensor<T>> {
        let mut be = Eager { counter: std::mem::take(counter) };
        let (out, _) = self.forward(&mut be, tokens, 1, opts)?;
        *counter = be.counter;
        Ok(out.reshape(&[tokens.len(), self.config.vocab_size])?)
    }

    /// Weighted next-token cross-entropy of a batch.
    pub fn loss<B: Backend<T>>(&self, be: &mut B, batch: &TokenBatch, opts: &ForwardOptions) -> Result<(B::V, Vec<LayerRouting>)> {
        let (logits, routing) = self.forward(be, &batch.inputs, batch.batch, opts)?;
        let flat = be.reshape(&logits, &[batch.inputs.len(), self.config.vocab_size]);
        let weights: Vec<T> = batch.weights.iter().map(|&w| T::of(w)).collect();
        Ok((be.cross_entropy(&flat, &batch.targets, &weights), routing))
    }

    pub fn fresh_state(&self) -> ModelState<T> {
        let layers = self
            .layers
            .iter()
            .map(|layer| match &layer.mixer {
                Mixer::Mamba(m) => MixerState::Mamba(m.fresh_state()),
                Mixer::Attention(_) => MixerState::Attention(KvCache::new(self.config.d_model)),
            })
            .collect();
        ModelState { layers, position: 0 }
    }

    /// Feeds one token and returns the logits for the next one. Routed layers
    /// use per-token argmax routing.
    pub fn step(&self, state: &mut ModelState<T>, token: usize, opts: &ForwardOptions, counter: &mut FlopCounter) -> Result<Vec<T>> {
        self.check_tokens(&[token], state.position + 1)?;
        let d = self.config.d_model;
        let mut x = self.embedding.value.row(token).to_vec();
        if let Some(pos) = &self.positions {
            for (a, &p) in x.iter_mut().zip(pos.value.row(state.position)) {
                *a = *a + p;
            }
        }
        let row = |v: Vec<T>| Tensor::from_parts(vec![1, d], v);
        let mut be = Eager { counter: std::mem::take(counter) };
        let moe_opts = MoEOptions { routing: RoutingMode::Argmax, ..opts.moe };
        let result = (|| -> Result<Vec<T>> {
            for (layer, ls) in self.layers.iter().zip(&mut state.layers) {
                let h = row(x.clone()).layernorm_nobias(&layer.ln_mixer.value)?;
                let m = match (&layer.mixer, ls) {
                    (Mixer::Mamba(p), MixerState::Mamba(s)) => p.step(s, h.data(), &opts.scan, &mut be.counter)?,
                    (Mixer::Attention(p), MixerState::Attention(c)) => p.step(c, h.data(), &mut be.counter)?,
                    _ => return Err(Error::Input("state does not match the model".into())),
                };
                let r: Vec<T> = x.iter().zip(&m).map(|(&a, &b)| a + b).collect();
                let u = row(r).layernorm_nobias(&layer.ln_channel.value)?;
                let c = match &layer.channel {
                    Channel::Dense(e) => e.forward(&mut be, &u),
                    Channel::MoE(moe) => moe.forward(&mut be, &u, &moe_opts)?.0,
                };
                for (a, &b) in x.iter_mut().zip(c.data()) {
                    *a = *a + b;
                }
            }
            let h = row(x).layernorm_nobias(&self.ln_final.value)?;
            let logits = match &self.unembed {
                Some(w) => be.matmul(&h, &w.value, false),
                None => be.matmul(&h, &self.embedding.value, true),
            };
            Ok(logits.into_data())
        })();
        *counter = be.counter;
        state.position += 1;
        result
    }

    /// Streams `prompt` through the model and then produces `n_tokens` more,
    /// never recomputing the prefix.
    pub fn generate(&self, prompt: &[usize], n_tokens: usize, sampling: Sampling, seed: u64) -> Result<Vec<usize>> {
        if prompt.is_empty() {
            return Err(Error::Input("prompt must contain at least one token".into()));
        }
        let mut out = prompt.to_vec();
        if n_tokens == 0 {
            return Ok(out);
        }
        let opts = ForwardOptions::inference();
        let mut state = self.fresh_state();
        let mut counter = FlopCounter::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut logits = Vec::new();
        for &t in prompt {
            logits = self.step(&mut state, t, &opts, &mut counter)?;
        }
        for k in 0..n_tokens {
            let next = sampling.pick(&logits, &mut rng)?;
            out.push(next);
            if k + 1 < n_tokens {
                logits = self.step(&mut state, next, &opts, &mut counter)?;
            }
        }
        Ok(out)
    }
}

impl<T: Element> Parameters<T> for ModelParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        f(join(prefix, "embedding"), &self.embedding);
        if let Some(p) = &self.positions {
            f(join(prefix, "positions"), p);
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let pre = join(prefix, &format!("layers.{i}"));
            f(join(&pre, "ln_mixer"), &layer.ln_mixer);
            match &layer.mixer {
                Mixer::Mamba(m) => m.visit(&join(&pre, "mixer"), f),
                Mixer::Attention(a) => a.visit(&join(&pre, "mixer"), f),
            }
            f(join(&pre, "ln_channel"), &layer.ln_channel);
            match &layer.channel {
                Channel::Dense(e) => e.visit(&join(&pre, "mlp"), f),
                Channel::MoE(m) => m.visit(&join(&pre, "moe"), f),
            }
        }
        f(join(prefix, "ln_final"), &self.ln_final);
        if let Some(u) = &self.unembed {
            f(join(prefix, "unembed"), u);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        f(join(prefix, "embedding"), &mut self.embedding);
        if let Some(p) = &mut self.positions {
            f(join(prefix, "positions"), p);
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let pre = join(prefix, &format!("layers.{i}"));
            f(join(&pre, "ln_mixer"), &mut layer.ln_mixer);
            match &mut layer.mixer {
                Mixer::Mamba(m) => m.visit_mut(&join(&pre, "mixer"), f),
                Mixer::Attention(a) => a.visit_mut(&join(&pre, "mixer"), f),
            }
            f(join(&pre, "ln_channel"), &mut layer.ln_channel);
            match &mut layer.channel {
                Channel::Dense(e) => e.visit_mut(&join(&pre, "mlp"), f),
                Channel::MoE(m) => m.visit_mut(&join(&pre, "moe"), f),
            }
        }
        f(join(prefix, "ln_final"), &mut self.ln_final);
        if let Some(u) = &mut self.unembed {
            f(join(prefix, "unembed"), u);
        }
    }
}

#[derive(Clone, Debug)]
pub enum MixerState<T> {
    Mamba(MambaState<T>),
    Attention(KvCache<T>),
}

/// Everything a sequence carries between generation steps.
#[derive(Clone, Debug)]
pub struct ModelState<T> {
    pub layers: Vec<MixerState<T>>,
    pub position: usize,
}

impl<T: Element> ModelState<T> {
    /// Bytes of recurrent state plus KV cache.
    pub fn size_bytes(&self) -> usize {
        self.layers
            .iter()
            .map(|s| match s {
                MixerState::Mamba(m) => m.size_bytes(),
                MixerState::Attention(c) => c.size_bytes(),
            })
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampling {
    Greedy,
    Temperature(f64),
}

impl Sampling {
    fn pick<T: Element>(&self, logits: &[T], rng: &mut ChaCha8Rng) -> Result<usize> {
        match *self {
            Sampling::Greedy => Ok(crate::sinkhorn::route_top1(&logits.iter().map(|v| v.f64()).collect::<Vec<_>>(), logits.len())[0]),
            Sampling::Temperature(t) => {
                if !(t > 0.0) {
                    return Err(Error::Input(format!("temperature must be positive, got {t}")));
                }
                let max = logits.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = logits.iter().map(|v| ((v.f64() - max) / t).exp()).collect();
                let dist = WeightedIndex::new(&w).map_err(|e| Error::Input(e.to_string()))?;
                Ok(dist.sample(rng))
            }
        }
    }
}

/// Mean negative log-likelihood of `targets` under row-wise `logits` (`[.., V]`).
pub fn cross_entropy_loss<T: Element>(logits: &Tensor<T>, targets: &[usize]) -> Result<f64> {
    if logits.rows() != targets.len() {
        return Err(Error::Input(format!("{} logit rows for {} targets", logits.rows(), targets.len())));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= logits.last_dim()) {
        return Err(Error::Input(format!("target {t} out of range")));
    }
    let ones = vec![T::one(); targets.len()];
    Ok(crate::backend::cross_entropy_value(logits, targets, &ones).0.f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn tokens(n: usize, vocab: usize, seed: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rand::Rng::random_range(&mut rng, 0..vocab)).collect()
    }

    #[test]
    fn single_token_logit_shape() {
        for v in Variant::ALL {
            let m = ModelParams::<f64>::new(ModelConfig::tiny(v), 1).unwrap();
            let out = m.logits(&[3], &ForwardOptions::default(), &mut FlopCounter::new()).unwrap();
            assert_eq!(out.shape(), &[1, 256]);
        }
    }

    #[test]
    fn zero_blocks_pass_embeddings_through() {
        for v in Variant::ALL {
            let mut m = ModelParams::<f64>::new(ModelConfig::tiny(v), 2).unwrap();
            m.zero_blocks();
            let toks = tokens(6, 256, 3);
            let out = m.logits(&toks, &ForwardOptions::default(), &mut FlopCounter::new()).unwrap();
            let mut x = crate::backend::embedding_value(&m.embedding.value, &toks);
            if let Some(p) = &m.positions {
                x = x.add(&crate::backend::gather_rows_value(&p.value, &[0, 1, 2, 3, 4, 5])).unwrap();
            }
            let want = crate::tensor::matmul(&x.layernorm_nobias(&m.ln_final.value).unwrap(), &m.embedding.value, true).unwrap();
            assert!(out.max_abs_diff(&want) < 1e-12, "{v:?}");
        }
    }

    #[test]
    fn out_of_range_token_rejected() {
        let m = ModelParams::<f32>::new(ModelConfig::tiny(Variant::Mamba), 1).unwrap();
        assert!(matches!(m.logits(&[256], &ForwardOptions::default(), &mut FlopCounter::new()), Err(Error::Input(_))));
    }

    #[test]
    fn instantiated_shapes_match_declared_shapes() {
        for name in ["tiny-mamba-moe", "tiny-mamba-moe-std", "tiny-mamba", "tiny-transformer", "tiny-transformer-moe"] {
            let mut cfg = ModelConfig::preset(name).unwrap();
            for tie in [true, false] {
                cfg.tie_embeddings = tie;
                let m = ModelParams::<f32>::new(cfg.clone(), 0).unwrap();
                let got: Vec<(String, Vec<usize>)> = m.named_params().into_iter().map(|(n, p)| (n, p.shape().to_vec())).collect();
                assert_eq!(got, cfg.param_shapes(), "{name} tied={tie}");
            }
        }
    }

    #[test]
    fn streaming_matches_recompute() {
        for v in Variant::ALL {
            let m = ModelParams::<f64>::new(ModelConfig::tiny(v), 4).unwrap();
            let toks = tokens(12, 256, 5);
            let opts = ForwardOptions::inference();
            let full = m.logits(&toks, &opts, &mut FlopCounter::new()).unwrap();
            let mut state = m.fresh_state();
            for (t, &tok) in toks.iter().enumerate() {
                let step = m.step(&mut state, tok, &opts, &mut FlopCounter::new()).unwrap();
                let diff = step.iter().zip(full.row(t)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(diff < 1e-9, "{v:?} position {t}: {diff}");
            }
        }
    }

    #[test]
    fn greedy_generation_is_deterministic() {
        let m = ModelParams::<f32>::new(ModelConfig::tiny(Variant::MambaMoe), 6).unwrap();
        let a = m.generate(&[1, 2], 10, Sampling::Greedy, 0).unwrap();
        let b = m.generate(&[1, 2], 10, Sampling::Greedy, 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 12);
        assert_eq!(m.generate(&[7], 0, Sampling::Greedy, 0).unwrap(), vec![7]);
        let s1 = m.generate(&[1], 8, Sampling::Temperature(1.0), 3).unwrap();
        let s2 = m.generate(&[1], 8, Sampling::Temperature(1.0), 3).unwrap();
        assert_eq!(s1, s2);
        assert!(m.generate(&[], 3, Sampling::Greedy, 0).is_err());
    }

    #[test]
    fn variants_collapse_with_one_ungated_expert() {
        for (routed, dense) in [(Variant::MambaMoe, Variant::Mamba), (Variant::TransformerMoe, Variant::Transformer)] {
            let a = ModelParams::<f64>::new(ModelConfig { n_experts: 1, ..ModelConfig::tiny(routed) }, 9).unwrap();
            let b = ModelParams::<f64>::new(ModelConfig::tiny(dense), 9).unwrap();
            let toks = tokens(16, 256, 10);
            let opts = ForwardOptions::default().with_gate(GateMode::Unit);
            let la = a.logits(&toks, &opts, &mut FlopCounter::new()).unwrap();
            let lb = b.logits(&toks, &opts, &mut FlopCounter::new()).unwrap();
            assert_eq!(la.data(), lb.data(), "{routed:?}");
        }
    }

    #[test]
    fn uniform_logits_loss_is_log_vocab() {
        let logits = Tensor::<f64>::zeros(&[3, 10]);
        assert!((cross_entropy_loss(&logits, &[1, 2, 3]).unwrap() - 10f64.ln()).abs() < 1e-12);
        let mut confident = Tensor::<f64>::zeros(&[1, 10]);
        confident.data_mut()[4] = 50.0;
        assert!(cross_entropy_loss(&confident, &[4]).unwrap() < 1e-12);
    }

    #[test]
    fn tied_embedding_gets_both_gradient_contributions() {
        let m = ModelParams::<f64>::new(ModelConfig::tiny(Variant::Mamba), 11).unwrap();
        let batch = TokenBatch { batch: 1, seq_len: 4, inputs: vec![1, 2, 3, 4], targets: vec![2, 3, 4, 5], weights: vec![1.0; 4] };
        let mut tape = Tape::new();
        let (loss, _) = m.loss(&mut tape, &batch, &ForwardOptions::default()).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.wrt(&m.embedding).unwrap();
        // row 200 only appears in the output head
        assert!(g.row(200).iter().any(|&v| v != 0.0));
    }
}
