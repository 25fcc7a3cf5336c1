//! Command-line front end. Every subcommand is a thin wrapper over a library
//! call; files are only written below `--out`.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::analysis::{eval_perplexity, generate, layer_utilization, sparsity_sweep, throughput_bench, topk_grid, Sampler};
use crate::corpus::{next_batch, ByteTokenizer, TokenStream};
use crate::error::{Error, Result};
use crate::gating::SelectionStrategy;
use crate::gradcheck::{check_gradients, DEFAULT_FRACTION, DEFAULT_TOLERANCE};
use crate::model::{load_checkpoint, DsMoeModel, ModelConfig, ParamBreakdown, TrainMode};
use crate::train::{train, TrainConfig, CHECKPOINT_DIR, METRICS_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "dsmoe", version, about = "Dense-trained, sparsely evaluated mixture-of-experts LM")]
struct Cli {
    /// Worker threads for evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write metrics and checkpoints.
    Train(TrainArgs),
    /// Perplexity and active parameters under one strategy.
    Eval(EvalArgs),
    /// Perplexity across a grid of strategies, as CSV.
    Sweep(SweepArgs),
    /// Per-layer expert utilization.
    Stats(EvalArgs),
    /// Finite-difference check of analytic gradients.
    Gradcheck(GradcheckArgs),
    /// Parameter counts.
    Params(ParamsArgs),
    /// Prefill and decode throughput.
    Bench(BenchArgs),
    /// Continue a text prompt.
    Generate(GenerateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Dsmoe,
    Smoe,
    Dense,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Dsmoe => TrainMode::DenseGradient,
            ModeArg::Smoe => TrainMode::SparseGradient,
            ModeArg::Dense => TrainMode::SingleExpert,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum StrategyKind {
    Dense,
    Topk,
    Threshold,
    ThresholdTopk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Validation,
    All,
}

#[derive(Args, Debug)]
struct StrategyArgs {
    #[arg(long, value_enum, default_value = "dense")]
    strategy: StrategyKind,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    eps: Option<f64>,
}

/// Flag problems detected before any work starts.
struct Usage(String);

impl StrategyArgs {
    fn build(&self) -> std::result::Result<SelectionStrategy, Usage> {
        let need_eps = || self.eps.ok_or_else(|| Usage("--eps is required for this strategy".into()));
        let s = match self.strategy {
            StrategyKind::Dense => SelectionStrategy::Dense,
            StrategyKind::Topk => SelectionStrategy::TopK {
                k: self.k.ok_or_else(|| Usage("--k is required for --strategy topk".into()))?,
            },
            StrategyKind::Threshold => SelectionStrategy::Threshold { eps: need_eps()? },
            StrategyKind::ThresholdTopk => SelectionStrategy::ThresholdTopK { eps: need_eps()? },
        };
        match s {
            SelectionStrategy::TopK { k: 0 } => Err(Usage("--k must be at least 1".into())),
            SelectionStrategy::Threshold { eps } | SelectionStrategy::ThresholdTopK { eps } if !(eps >= 0.0 && eps.is_finite()) => {
                Err(Usage(format!("--eps must be finite and non-negative, got {eps}")))
            }
            s => Ok(s),
        }
    }
}

#[derive(Args, Debug)]
struct ModelSource {
    /// Checkpoint directory.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// `tiny` or a JSON model config, used when no checkpoint is given.
    #[arg(long)]
    config: Option<String>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ModelSource {
    fn load(&self) -> Result<DsMoeModel> {
        match (&self.ckpt, &self.config) {
            (Some(dir), _) => Ok(load_checkpoint(dir)?.0),
            (None, name) => {
                let mut cfg = ModelConfig::load(name.as_deref().unwrap_or("tiny"))?;
                if let Some(m) = self.mode {
                    cfg = cfg.with_mode(m.into());
                }
                DsMoeModel::new(&cfg, self.seed)
            }
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, default_value = "tiny")]
    config: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 64)]
    seq_len: usize,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    alpha_att: Option<f64>,
    #[arg(long)]
    alpha_ffd: Option<f64>,
    #[arg(long, default_value_t = 500)]
    eval_interval: usize,
    #[arg(long, default_value_t = 64)]
    eval_windows: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelSource,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "validation")]
    split: Split,
    #[arg(long, default_value_t = 64)]
    seq_len: usize,
    #[arg(long)]
    max_windows: Option<usize>,
    #[command(flatten)]
    strategy: StrategyArgs,
    /// Directory for a copy of the report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    model: ModelSource,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "validation")]
    split: Split,
    #[arg(long, default_value_t = 64)]
    seq_len: usize,
    #[arg(long)]
    max_windows: Option<usize>,
    /// Strategy family swept over.
    #[arg(long, value_enum, default_value = "topk")]
    strategy: StrategyKind,
    /// Comma-separated K or epsilon values.
    #[arg(long, value_delimiter = ',')]
    grid: Vec<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[command(flatten)]
    model: ModelSource,
    #[arg(long, default_value_t = DEFAULT_FRACTION)]
    fraction: f64,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tolerance: f64,
    #[arg(long, default_value_t = 2)]
    batch_size: usize,
    #[arg(long, default_value_t = 8)]
    seq_len: usize,
}

#[derive(Args, Debug)]
struct ParamsArgs {
    #[command(flatten)]
    model: ModelSource,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelSource,
    #[command(flatten)]
    strategy: StrategyArgs,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = 64)]
    seq_len: usize,
    #[arg(long, default_value_t = 32)]
    n_decode: usize,
    #[arg(long, default_value_t = 5)]
    reps: usize,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    model: ModelSource,
    #[command(flatten)]
    strategy: StrategyArgs,
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 64)]
    n_tokens: usize,
    /// Sample at this temperature instead of greedy decoding.
    #[arg(long)]
    temperature: Option<f64>,
    /// Recompute the full prefix every step instead of using KV caches.
    #[arg(long)]
    no_cache: bool,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<Usage> for Failure {
    fn from(u: Usage) -> Self {
        Failure::Usage(u.0)
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn split_tokens(data: &Path, split: Split) -> Result<Vec<usize>> {
    let stream = TokenStream::from_file(data)?;
    Ok(match split {
        Split::Train => stream.train().to_vec(),
        Split::Validation => stream.validation().to_vec(),
        Split::All => stream.ids().to_vec(),
    })
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

fn run_train(a: &TrainArgs, out: &mut dyn Write) -> CmdResult {
    let mut cfg = ModelConfig::load(&a.config)?;
    if let Some(m) = a.mode {
        cfg = cfg.with_mode(m.into());
    }
    if let Some(v) = a.alpha_att {
        cfg.alpha_att = v;
    }
    if let Some(v) = a.alpha_ffd {
        cfg.alpha_ffd = v;
    }
    cfg.validate()?;
    if a.steps == 0 {
        return Err(Failure::Usage("--steps must be positive".into()));
    }
    let mut tc = TrainConfig::for_steps(a.steps, a.batch_size, a.seq_len);
    tc.seed = a.seed;
    tc.eval_interval = a.eval_interval;
    tc.eval_windows = a.eval_windows;
    if let Some(lr) = a.lr {
        tc.lr_peak = lr;
    }
    tc.validate()?;
    let data = TokenStream::from_file(&a.data)?;
    let mut model = DsMoeModel::new(&cfg, a.seed)?;
    let report = train(&mut model, &data, &tc, Some(&a.out))?;
    write_file(&a.out, "train_config.json", &(serde_json::to_string_pretty(&tc)? + "\n"))?;
    let summary = json!({
        "mode": cfg.train_mode.as_str(),
        "steps": report.steps,
        "tokens": report.tokens,
        "initial_val_loss": report.initial_val_loss,
        "final_val_loss": report.final_val_loss,
        "final_entropy_ffd": report.final_entropy_ffd,
        "metrics": a.out.join(METRICS_FILE),
        "checkpoint": a.out.join(CHECKPOINT_DIR),
    });
    emit(out, &format!("{summary}\n"))?;
    Ok(())
}

fn run_eval(a: &EvalArgs, out: &mut dyn Write) -> CmdResult {
    let strategy = a.strategy.build()?;
    let model = a.model.load()?;
    let tokens = split_tokens(&a.data, a.split)?;
    let r = eval_perplexity(&model, &tokens, a.seq_len, strategy, a.max_windows)?;
    let report = json!({
        "strategy": r.strategy,
        "ppl": r.ppl,
        "mean_nll": r.mean_nll,
        "tokens": r.tokens,
        "windows": r.windows,
        "active_params": r.active.active_total,
        "active_hidden_params": r.active.active_hidden,
        "active_hidden_fraction": r.active.active_hidden_fraction,
        "hidden_params": r.active.hidden_total,
        "total_params": r.active.total,
    });
    let text = format!("{report}\n");
    if let Some(dir) = &a.out {
        write_file(dir, "eval.json", &text)?;
    }
    emit(out, &text)?;
    Ok(())
}

fn run_stats(a: &EvalArgs, out: &mut dyn Write) -> CmdResult {
    let strategy = a.strategy.build()?;
    let model = a.model.load()?;
    let tokens = split_tokens(&a.data, a.split)?;
    let r = eval_perplexity(&model, &tokens, a.seq_len, strategy, a.max_windows)?;
    let mut text = String::new();
    for u in layer_utilization(&r.gates) {
        text.push_str(&serde_json::to_string(&u)?);
        text.push('\n');
    }
    if let Some(dir) = &a.out {
        write_file(dir, "utilization.ndjson", &text)?;
    }
    emit(out, &text)?;
    Ok(())
}

fn sweep_grid(a: &SweepArgs, n_ffd: usize) -> std::result::Result<Vec<SelectionStrategy>, Usage> {
    let as_k = |v: f64| -> std::result::Result<usize, Usage> {
        if v >= 1.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(Usage(format!("TopK grid values must be positive integers, got {v}")))
        }
    };
    let eps_grid = || {
        if a.grid.is_empty() {
            vec![0.0, 0.5, 1.0, 1.5, 2.0]
        } else {
            a.grid.clone()
        }
    };
    Ok(match a.strategy {
        StrategyKind::Dense => vec![SelectionStrategy::Dense],
        StrategyKind::Topk if a.grid.is_empty() => topk_grid(n_ffd),
        StrategyKind::Topk => a
            .grid
            .iter()
            .map(|&v| as_k(v).map(|k| SelectionStrategy::TopK { k }))
            .collect::<std::result::Result<_, _>>()?,
        StrategyKind::Threshold => eps_grid().into_iter().map(|eps| SelectionStrategy::Threshold { eps }).collect(),
        StrategyKind::ThresholdTopk => eps_grid()
            .into_iter()
            .map(|eps| SelectionStrategy::ThresholdTopK { eps })
            .collect(),
    })
}

fn run_sweep(a: &SweepArgs, out: &mut dyn Write) -> CmdResult {
    let model = a.model.load()?;
    let grid = sweep_grid(a, model.config.n_ffd)?;
    let tokens = split_tokens(&a.data, a.split)?;
    let report = sparsity_sweep(&model, &tokens, a.seq_len, &grid, a.max_windows)?;
    let csv = report.to_csv()?;
    if let Some(dir) = &a.out {
        write_file(dir, "sweep.csv", &csv)?;
        let mut lines = String::new();
        for p in &report.points {
            lines.push_str(&serde_json::to_string(p)?);
            lines.push('\n');
        }
        write_file(dir, "sweep.ndjson", &lines)?;
    }
    emit(out, &csv)?;
    Ok(())
}

fn run_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> CmdResult {
    if !(a.fraction > 0.0 && a.fraction <= 1.0) {
        return Err(Failure::Usage(format!("--fraction must lie in (0, 1], got {}", a.fraction)));
    }
    let model = a.model.load()?;
    let tokens: Vec<usize> = TokenStream::from_bytes(GRADCHECK_TEXT.as_bytes())?.ids().to_vec();
    let batch = next_batch(&tokens, a.batch_size, a.seq_len, a.model.seed, 0)?;
    let checks = check_gradients(&model, &batch, a.fraction, a.model.seed, a.tolerance)?;
    let mut text = String::new();
    for c in &checks {
        text.push_str(&format!(
            "{} {} sampled={} compared={} max_rel_err={:.3e}\n",
            if c.passed { "PASS" } else { "FAIL" },
            c.group,
            c.sampled,
            c.compared,
            c.max_rel_err
        ));
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    text.push_str(&format!("{} of {} groups passed\n", checks.len() - failed, checks.len()));
    emit(out, &text)?;
    if failed > 0 {
        return Err(Failure::Runtime(Error::NonFinite(format!("{failed} gradient groups out of tolerance"))));
    }
    Ok(())
}

const GRADCHECK_TEXT: &str = "Gradients are checked against central differences on a short passage of text. \
The same passage is used for every run so the result depends only on the seed.";

fn run_params(a: &ParamsArgs, out: &mut dyn Write) -> CmdResult {
    let model = a.model.load()?;
    let b = ParamBreakdown::from_config(&model.config);
    let report = json!({
        "mode": model.config.train_mode.as_str(),
        "total": b.total(),
        "hidden": b.hidden(),
        "non_hidden": b.non_hidden(),
        "breakdown": b,
    });
    emit(out, &format!("{report}\n"))?;
    Ok(())
}

fn run_bench(a: &BenchArgs, out: &mut dyn Write) -> CmdResult {
    let strategy = a.strategy.build()?;
    let model = a.model.load()?;
    let r = throughput_bench(&model, a.batch_size, a.seq_len, a.n_decode, strategy, a.reps, a.model.seed)?;
    emit(out, &format!("{}\n", serde_json::to_string(&r)?))?;
    Ok(())
}

fn run_generate(a: &GenerateArgs, out: &mut dyn Write) -> CmdResult {
    let strategy = a.strategy.build()?;
    let sampler = match a.temperature {
        Some(t) if !(t > 0.0) => return Err(Failure::Usage(format!("--temperature must be positive, got {t}"))),
        Some(temperature) => Sampler::Temperature {
            temperature,
            seed: a.model.seed,
        },
        None => Sampler::Greedy,
    };
    let model = a.model.load()?;
    let prompt = ByteTokenizer.encode(a.prompt.as_bytes());
    let g = generate(&model, &prompt, a.n_tokens, strategy, sampler, !a.no_cache)?;
    let bytes = ByteTokenizer.decode(&g.tokens)?;
    emit(out, &format!("{}{}\n", a.prompt, String::from_utf8_lossy(&bytes)))?;
    Ok(())
}

fn run(cli: &Cli, out: &mut dyn Write) -> CmdResult {
    match &cli.command {
        Command::Train(a) => run_train(a, out),
        Command::Eval(a) => run_eval(a, out),
        Command::Sweep(a) => run_sweep(a, out),
        Command::Stats(a) => run_stats(a, out),
        Command::Gradcheck(a) => run_gradcheck(a, out),
        Command::Params(a) => run_params(a, out),
        Command::Bench(a) => run_bench(a, out),
        Command::Generate(a) => run_generate(a, out),
    }
}

/// Parses `argv` (program name first) and runs the command. Returns the
/// process exit code: 0 on success, 1 on usage errors, 2 on runtime errors.
pub fn dispatch<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            if e.use_stderr() {
                let _ = err.write_all(text.as_bytes());
            } else {
                let _ = out.write_all(text.as_bytes());
            }
            return code;
        }
    };
    if cli.threads == 0 {
        let _ = writeln!(err, "error: --threads must be at least 1");
        return EXIT_USAGE;
    }
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_RUNTIME;
        }
    };
    let mut buf = Vec::new();
    let result = pool.install(|| run(&cli, &mut buf));
    if let Err(e) = out.write_all(&buf).and_then(|_| out.flush()) {
        let _ = writeln!(err, "error: writing output: {e}");
        return EXIT_RUNTIME;
    }
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_RUNTIME
        }
    }
}
