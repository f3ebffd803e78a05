use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use mambamoe::accounting;
use mambamoe::bench::{self, SweepOptions};
use mambamoe::checkpoint;
use mambamoe::config::{parse_config, Paths, RunConfig};
use mambamoe::model::{ForwardOptions, ModelConfig, ModelParams, Sampling, Variant, PRESETS};
use mambamoe::selfcheck::{self, SelfcheckOptions};
use mambamoe::sinkhorn::{median_iters, write_diag_csv, SinkhornConfig, SinkhornInit, SinkhornStudy, StopRule};
use mambamoe::train::{self, make_task_batch, Task, TrainConfig, TrainOutputs};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_SELFCHECK: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "mambamoe", version, about = "Mamba + Sinkhorn-routed mixture-of-experts models at desk scale")]
#[command(after_help = "Exit codes: 0 success, 1 validation error, 2 runtime failure, 3 selfcheck failure.\n\
Path overrides: MAMBAMOE_OUT, MAMBAMOE_CHECKPOINT_DIR, MAMBAMOE_METRICS_DIR.")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Model preset; replaces the model section of --config
    #[arg(long, global = true, value_name = "NAME")]
    preset: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Directory every output is written under [default: out]
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on a synthetic task; writes metrics.ndjson, checkpoints/, routing.csv and summary.json
    Train {
        #[arg(long, value_parser = parse_task)]
        task: Option<Task>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Stream a prompt through the model and continue it
    Generate {
        /// Comma-separated token ids
        #[arg(long, default_value = "1")]
        prompt: String,
        #[arg(long, default_value_t = 32)]
        tokens: usize,
        /// Sampling temperature; greedy when omitted
        #[arg(long)]
        temperature: Option<f64>,
        /// Checkpoint to load instead of a fresh initialization
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Per-token generation latency sweep.
    ///
    /// latency.csv columns: variant, position (tokens generated when the
    /// window ends), ns_per_token (median over repeats of the window mean),
    /// state_bytes (recurrent state or KV cache), step_flops.
    BenchLatency {
        /// Comma-separated variants [default: all four]
        #[arg(long, value_delimiter = ',', value_parser = parse_variant)]
        variants: Vec<Variant>,
        /// Comma-separated lengths [default: from config, else 128,512,2048]
        #[arg(long, value_delimiter = ',')]
        lengths: Vec<usize>,
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Parameter and FLOP report for a preset or configuration
    Count,
    /// Token counts per MoE layer and expert.
    ///
    /// routing.csv columns: layer, expert, token_count, step.
    RouteStats {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        batches: usize,
        /// Argmax of router logits instead of a Sinkhorn plan per batch
        #[arg(long)]
        argmax: bool,
    },
    /// Fast invariant suite
    Selfcheck {
        #[arg(long, hide = true)]
        flip_da_sign: bool,
    },
    /// Sinkhorn iteration counts per initialization.
    ///
    /// sinkhorn_diag.csv columns: trial, init, stop, samples, experts,
    /// temperature, logit_std, iters_used, residual, converged.
    SinkhornDiag {
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 256)]
        samples: usize,
        #[arg(long, default_value_t = 8)]
        experts: usize,
        #[arg(long, default_value_t = 1.0)]
        logit_std: f64,
        /// residual or scaling-change
        #[arg(long, default_value = "residual", value_parser = parse_stop)]
        stop: StopRule,
    },
}

fn parse_stop(s: &str) -> Result<StopRule, String> {
    match s {
        "residual" => Ok(StopRule::Residual),
        "scaling-change" => Ok(StopRule::ScalingChange),
        _ => Err(format!("unknown stop rule `{s}` (residual, scaling-change)")),
    }
}

fn parse_task(s: &str) -> Result<Task, String> {
    match s {
        "copy" => Ok(Task::Copy),
        "associative-recall" | "recall" => Ok(Task::AssociativeRecall),
        _ => Err(format!("unknown task `{s}` (copy, associative-recall)")),
    }
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse::<Variant>().map_err(|e| e.to_string())
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let validation = error.chain().any(|c| {
            matches!(
                c.downcast_ref::<mambamoe::Error>(),
                Some(mambamoe::Error::Config(_) | mambamoe::Error::Input(_) | mambamoe::Error::UnknownPreset(_))
            )
        });
        Self { code: if validation { EXIT_VALIDATION } else { EXIT_RUNTIME }, error }
    }
}

impl From<mambamoe::Error> for Failure {
    fn from(e: mambamoe::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn resolve(common: &Common) -> Result<RunConfig, Failure> {
    let mut run = match &common.config {
        Some(path) => parse_config(path)?,
        None => {
            let mut r = RunConfig::from_model(ModelConfig::preset("tiny-mamba-moe")?);
            r.paths.apply_env();
            r
        }
    };
    if let Some(name) = &common.preset {
        run.model = ModelConfig::preset(name)?;
    }
    if let Some(seed) = common.seed {
        run.seed = seed;
        if let Some(t) = run.train.as_mut() {
            t.seed = seed;
        }
    }
    if let Some(out) = &common.out {
        run.paths.out = Some(out.clone());
    }
    Ok(run)
}

fn out_dir(paths: &Paths) -> anyhow::Result<PathBuf> {
    let dir = paths.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

fn load_or_init(run: &RunConfig, ckpt: Option<&Path>) -> anyhow::Result<ModelParams<f32>> {
    Ok(match ckpt {
        Some(p) => checkpoint::load::<f32>(p).with_context(|| format!("loading {}", p.display()))?.0,
        None => ModelParams::new(run.model.clone(), run.seed)?,
    })
}

fn cmd_train(run: &RunConfig, task: Option<Task>, steps: Option<usize>) -> Result<(), Failure> {
    let mut cfg = match (&run.train, task) {
        (None, Some(Task::AssociativeRecall)) => TrainConfig { seed: run.seed, ..TrainConfig::recall_default() },
        _ => run.train_or_default(),
    };
    if let Some(t) = task {
        cfg.task = t;
    }
    if let Some(s) = steps {
        cfg.steps = s;
    }
    cfg.validate()?;
    let dir = out_dir(&run.paths)?;
    let outputs = TrainOutputs {
        metrics_dir: run.paths.metrics_dir.clone().unwrap_or_else(|| dir.clone()),
        checkpoint_dir: run.paths.checkpoint_dir.clone().unwrap_or_else(|| dir.join("checkpoints")),
    };
    let outcome = train::train_loop::<f32>(&run.model, &cfg, Some(&outputs))?;
    let mut csv = Vec::new();
    outcome.routing.write_csv(&mut csv)?;
    fs::write(dir.join("routing.csv"), csv).context("writing routing.csv")?;
    let summary = serde_json::json!({
        "task": cfg.task,
        "steps": cfg.steps,
        "initial": outcome.initial_eval,
        "final": outcome.final_eval,
        "loss_ratio": outcome.final_eval.loss / outcome.initial_eval.loss,
        "checkpoints": outcome.checkpoints,
    });
    write_json(&dir.join("summary.json"), &summary)?;
    println!(
        "loss {:.4} -> {:.4}, accuracy {:.3} -> {:.3} on {} scored positions",
        outcome.initial_eval.loss, outcome.final_eval.loss, outcome.initial_eval.accuracy, outcome.final_eval.accuracy, outcome.final_eval.scored
    );
    Ok(())
}

fn cmd_generate(run: &RunConfig, format: Format, prompt: &str, tokens: usize, temperature: Option<f64>, ckpt: Option<&Path>) -> Result<(), Failure> {
    let prompt: Vec<usize> = prompt
        .split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| mambamoe::Error::Input(format!("prompt must be comma-separated token ids: {e}")))?;
    let model = load_or_init(run, ckpt)?;
    if let Some(&bad) = prompt.iter().find(|&&t| t >= model.config.vocab_size) {
        return Err(mambamoe::Error::Input(format!("prompt token {bad} outside vocabulary of {}", model.config.vocab_size)).into());
    }
    let sampling = match temperature {
        Some(t) if t > 0.0 => Sampling::Temperature(t),
        Some(t) => return Err(mambamoe::Error::Input(format!("temperature must be positive, got {t}")).into()),
        None => Sampling::Greedy,
    };
    let out = model.generate(&prompt, tokens, sampling, run.seed)?;
    let dir = out_dir(&run.paths)?;
    match format {
        Format::Json => write_json(&dir.join("generate.json"), &serde_json::json!({ "prompt": prompt, "tokens": out }))?,
        Format::Csv => {
            let text: String = out.iter().enumerate().map(|(i, t)| format!("{i},{t}\n")).collect();
            fs::write(dir.join("generate.csv"), format!("position,token\n{text}")).context("writing generate.csv")?;
        }
    }
    println!("{}", out.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(","));
    Ok(())
}

fn cmd_bench(run: &RunConfig, format: Format, variants: &[Variant], lengths: &[usize], repeats: Option<usize>) -> Result<(), Failure> {
    let mut opts: SweepOptions = run.bench.clone();
    opts.seed = run.seed;
    if !lengths.is_empty() {
        opts.lengths = lengths.to_vec();
    }
    if let Some(r) = repeats {
        opts.repeats = r;
    }
    let variants = if variants.is_empty() { Variant::ALL.to_vec() } else { variants.to_vec() };
    let samples = bench::latency_sweep_variants(&run.model, &variants, &opts)?;
    let summary = bench::summarize(&samples);
    let dir = out_dir(&run.paths)?;
    match format {
        Format::Csv => bench::write_latency_csv(&samples, fs::File::create(dir.join("latency.csv")).context("creating latency.csv")?)?,
        Format::Json => write_json(&dir.join("latency.json"), &samples)?,
    }
    write_json(&dir.join("latency_summary.json"), &summary)?;
    for s in &samples {
        println!("{:<16} {:>6} {:>12.0} ns/token {:>10} bytes", s.variant, s.position, s.ns_per_token, s.state_bytes);
    }
    for s in &summary {
        println!("{:<16} time ratio {:.2}, bytes ratio {:.2}", s.variant, s.time_ratio, s.bytes_ratio);
    }
    Ok(())
}

fn cmd_count(run: &RunConfig, common: &Common) -> Result<(), Failure> {
    let name = common.preset.clone().unwrap_or_else(|| match &common.config {
        Some(p) => p.display().to_string(),
        None => "tiny-mamba-moe".into(),
    });
    let measure = (accounting::exact_count(&run.model).total < 50_000_000).then_some(64);
    let report = accounting::report(&name, &run.model, measure)?;
    let dir = out_dir(&run.paths)?;
    write_json(&dir.join("count.json"), &report)?;
    match common.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?),
        Format::Csv => print!("{report}"),
    }
    Ok(())
}

fn cmd_route_stats(run: &RunConfig, format: Format, ckpt: Option<&Path>, batches: usize, argmax: bool) -> Result<(), Failure> {
    let model = load_or_init(run, ckpt)?;
    if !model.config.variant.uses_moe() {
        return Err(mambamoe::Error::Input(format!("route-stats needs an MoE variant, got {}", model.config.variant.name())).into());
    }
    let cfg = run.train_or_default();
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let data = (0..batches)
        .map(|_| make_task_batch(cfg.task, &mut rng, cfg.batch_size, cfg.seq_len, model.config.vocab_size, cfg.recall_pairs))
        .collect::<Result<Vec<_>, _>>()?;
    let opts = if argmax { ForwardOptions::inference() } else { ForwardOptions::default() };
    let stats = bench::routing_histogram(&model, &data, &opts)?;
    let dir = out_dir(&run.paths)?;
    match format {
        Format::Csv => stats.write_csv(fs::File::create(dir.join("routing.csv")).context("creating routing.csv")?)?,
        Format::Json => write_json(&dir.join("routing.json"), &stats.records)?,
    }
    let summary = serde_json::json!({ "totals": stats.totals(), "max_over_mean": stats.imbalance(), "sinkhorn_unconverged": stats.unconverged });
    write_json(&dir.join("routing_summary.json"), &summary)?;
    for (layer, (counts, ratio)) in stats.totals().iter().zip(stats.imbalance()).enumerate() {
        println!("layer {layer}: {counts:?} max/mean {ratio:.2}");
    }
    Ok(())
}

fn cmd_selfcheck(run: &RunConfig, flip_da_sign: bool) -> Result<bool, Failure> {
    let outcomes = selfcheck::run(&SelfcheckOptions { seed: run.seed, flip_da_sign });
    print!("{}", selfcheck::render_table(&outcomes));
    Ok(outcomes.iter().all(|o| o.passed))
}

fn cmd_sinkhorn_diag(run: &RunConfig, format: Format, d: &Diag) -> Result<(), Failure> {
    let Diag { trials, samples, experts, logit_std, stop } = *d;
    if trials == 0 || samples == 0 || experts == 0 {
        return Err(mambamoe::Error::Input("trials, samples and experts must be positive".into()).into());
    }
    let study = SinkhornStudy {
        sizes: vec![(samples, experts)],
        inits: vec![SinkhornInit::Uniform, SinkhornInit::Fast, SinkhornInit::FastLiteral],
        trials,
        logit_std,
        seed: run.seed,
        cfg: SinkhornConfig { stop, ..Default::default() },
    };
    let rows = study.run();
    let dir = out_dir(&run.paths)?;
    match format {
        Format::Csv => write_diag_csv(&rows, fs::File::create(dir.join("sinkhorn_diag.csv")).context("creating sinkhorn_diag.csv")?)?,
        Format::Json => write_json(&dir.join("sinkhorn_diag.json"), &rows)?,
    }
    for init in &study.inits {
        let iters: Vec<usize> = rows.iter().filter(|r| r.init == init.name()).map(|r| r.iters_used).collect();
        let converged = rows.iter().filter(|r| r.init == init.name() && r.converged).count();
        println!("{:<13} median iterations {} ({converged}/{trials} converged)", init.name(), median_iters(&iters));
    }
    Ok(())
}

#[derive(Clone, Copy)]
struct Diag {
    trials: usize,
    samples: usize,
    experts: usize,
    logit_std: f64,
    stop: StopRule,
}

fn dispatch(cli: &Cli) -> Result<ExitCode, Failure> {
    let run = resolve(&cli.common)?;
    let fmt = cli.common.format;
    match &cli.command {
        Command::Train { task, steps } => cmd_train(&run, *task, *steps)?,
        Command::Generate { prompt, tokens, temperature, checkpoint } => {
            cmd_generate(&run, fmt, prompt, *tokens, *temperature, checkpoint.as_deref())?
        }
        Command::BenchLatency { variants, lengths, repeats } => cmd_bench(&run, fmt, variants, lengths, *repeats)?,
        Command::Count => cmd_count(&run, &cli.common)?,
        Command::RouteStats { checkpoint, batches, argmax } => cmd_route_stats(&run, fmt, checkpoint.as_deref(), *batches, *argmax)?,
        Command::Selfcheck { flip_da_sign } => {
            if !cmd_selfcheck(&run, *flip_da_sign)? {
                return Ok(ExitCode::from(EXIT_SELFCHECK));
            }
        }
        Command::SinkhornDiag { trials, samples, experts, logit_std, stop } => cmd_sinkhorn_diag(
            &run,
            fmt,
            &Diag { trials: *trials, samples: *samples, experts: *experts, logit_std: *logit_std, stop: *stop },
        )?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(name) = &cli.common.preset {
        if !PRESETS.contains(&name.as_str()) {
            eprintln!("error: unknown preset `{name}`; available: {}", PRESETS.join(", "));
            return ExitCode::from(EXIT_VALIDATION);
        }
    }
    match dispatch(&cli) {
        Ok(code) => code,
        Err(Failure { code, error }) => {
            eprintln!("error: {error:#}");
            ExitCode::from(code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn runtime_and_validation_errors_map_to_codes() {
        assert_eq!(Failure::from(mambamoe::Error::Config("x".into())).code, EXIT_VALIDATION);
        assert_eq!(Failure::from(mambamoe::Error::Checkpoint("x".into())).code, EXIT_RUNTIME);
        let wrapped = anyhow::Error::from(mambamoe::Error::Input("y".into())).context("outer");
        assert_eq!(Failure::from(wrapped).code, EXIT_VALIDATION);
    }

    #[test]
    fn tasks_parse() {
        assert_eq!(parse_task("recall"), Ok(Task::AssociativeRecall));
        assert!(parse_task("sort").is_err());
    }
}
