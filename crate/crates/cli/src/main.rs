//! `circat` command-line tool.
//!
//! Exit codes: 0 success, 1 a property or training failure (or an I/O
//! error while running), 2 a usage error. Every run first echoes its fully
//! resolved settings; with `--json` stdout carries a single JSON document.

mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use circat::bench::{self, BenchCase, Measure, Precision};
use circat::circulant::{ExecPath, Orientation};
use circat::maps;
use circat::model::{self, Input, InputKind, TaskKind, TrainConfig};
use circat::rng::SeededRng;
use circat::variants::Mechanism;
use circat::verify::{self, Suite};
use circat::{Shape, Tensor};

use config::{load_file, resolve, Flags};

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self { code: 2, msg: msg.into() }
    }

    fn failed(msg: impl Into<String>) -> Self {
        Self { code: 1, msg: msg.into() }
    }
}

impl From<circat::Error> for CliError {
    fn from(e: circat::Error) -> Self {
        match e {
            circat::Error::Unsupported(_) | circat::Error::ShapeMismatch { .. } | circat::Error::InvalidShape(_) => {
                CliError::usage(e.to_string())
            }
            _ => CliError::failed(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "circat", version, about = "Circular-convolutional attention toolkit")]
struct Cli {
    /// Print one JSON document on stdout instead of text.
    #[arg(long, global = true)]
    json: bool,
    /// JSON settings file; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run property suites against reference implementations.
    Verify(VerifyArgs),
    /// Time mixers and write a CSV.
    Bench(BenchArgs),
    /// Train a small model on a synthetic task.
    TrainToy(TrainArgs),
    /// Export per-head mixing matrices of a checkpoint as PGM images.
    ExportMaps(ExportArgs),
    /// Compare GQA and CAT projection FLOPs.
    CostModel(CostArgs),
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(Suite::NAMES))]
    suite: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct VerifySettings {
    suite: String,
    seed: u64,
}

impl Default for VerifySettings {
    fn default() -> Self {
        Self {
            suite: "all".into(),
            seed: 0,
        }
    }
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    mech: Option<Mechanism>,
    #[arg(long)]
    path: Option<ExecPath>,
    /// Comma-separated ascending sequence lengths.
    #[arg(long, value_delimiter = ',')]
    n_list: Option<Vec<usize>>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    measure: Option<Measure>,
    #[arg(long)]
    precision: Option<Precision>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct BenchSettings {
    mech: Mechanism,
    path: ExecPath,
    n_list: Vec<usize>,
    d: usize,
    heads: usize,
    reps: usize,
    warmup: usize,
    measure: Measure,
    precision: Precision,
    out: Option<PathBuf>,
    seed: u64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            mech: Mechanism::Cat,
            path: ExecPath::Fft,
            n_list: vec![256, 512, 1024],
            d: 64,
            heads: 4,
            reps: 10,
            warmup: 1,
            measure: Measure::Forward,
            precision: Precision::F64,
            out: None,
            seed: 0,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    task: Option<TaskKind>,
    /// attention, cat, cat-alter, or another layer mechanism.
    #[arg(long)]
    mixer: Option<Mechanism>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    max_grad_norm: Option<f64>,
    #[arg(long)]
    log_every: Option<usize>,
    #[arg(long)]
    eval_size: Option<usize>,
    #[arg(long)]
    path: Option<ExecPath>,
    #[arg(long)]
    orientation: Option<Orientation>,
    #[arg(long)]
    checkpoint_out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize, Default)]
#[serde(default)]
struct TrainSettings {
    #[serde(flatten)]
    train: TrainConfig,
    checkpoint_out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Comma-separated token ids; random tokens of the model's length otherwise.
    #[arg(long, value_delimiter = ',')]
    tokens: Option<Vec<usize>>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    max_n: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct ExportSettings {
    checkpoint: Option<PathBuf>,
    tokens: Option<Vec<usize>>,
    out: PathBuf,
    max_n: usize,
    seed: u64,
}

impl Default for ExportSettings {
    fn default() -> Self {
        Self {
            checkpoint: None,
            tokens: None,
            out: PathBuf::from("maps"),
            max_n: maps::DEFAULT_MAX_N,
            seed: 0,
        }
    }
}

#[derive(Args)]
struct CostArgs {
    #[arg(long)]
    n: Option<f64>,
    #[arg(long)]
    d: Option<f64>,
    #[arg(long)]
    heads: Option<f64>,
    #[arg(long)]
    gqa_k: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct CostSettings {
    n: f64,
    d: f64,
    heads: f64,
    gqa_k: f64,
    seed: u64,
}

impl Default for CostSettings {
    fn default() -> Self {
        Self {
            n: 256.0,
            d: 1024.0,
            heads: 16.0,
            gqa_k: 0.25,
            seed: 0,
        }
    }
}

struct Out {
    json: bool,
}

impl Out {
    fn line(&self, s: impl AsRef<str>) {
        if self.json {
            eprintln!("{}", s.as_ref());
        } else {
            println!("{}", s.as_ref());
        }
    }

    fn echo<C: Serialize>(&self, command: &str, settings: &C) {
        if !self.json {
            println!("{command} config: {}", serde_json::to_string(settings).expect("settings serialize"));
        }
    }

    fn finish<C: Serialize>(&self, command: &str, settings: &C, passed: bool, result: Value) {
        if self.json {
            let doc = json!({ "command": command, "config": settings, "passed": passed, "result": result });
            println!("{}", serde_json::to_string_pretty(&doc).expect("report serializes"));
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            eprintln!("\n{}", Cli::command().render_usage());
            return ExitCode::from(2);
        }
        Err(e) => e.exit(),
    };
    let out = Out { json: cli.json };
    match run(cli, &out) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {}", e.msg);
            if e.code == 2 {
                eprintln!("Usage: circat [--json] [--config FILE] [--seed N] <COMMAND>; see circat --help");
            }
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli, out: &Out) -> Result<bool, CliError> {
    let name = match &cli.command {
        Command::Verify(_) => "verify",
        Command::Bench(_) => "bench",
        Command::TrainToy(_) => "train-toy",
        Command::ExportMaps(_) => "export-maps",
        Command::CostModel(_) => "cost-model",
    };
    let file = cli.config.as_deref().map(|p| load_file(p, name)).transpose()?;
    let mut flags = Flags::default();
    flags.set("seed", cli.seed);
    match cli.command {
        Command::Verify(a) => {
            flags.set("suite", a.suite);
            cmd_verify(resolve(file, flags)?, out)
        }
        Command::Bench(a) => {
            flags.set("mech", a.mech);
            flags.set("path", a.path);
            flags.set("n_list", a.n_list);
            flags.set("d", a.d);
            flags.set("heads", a.heads);
            flags.set("reps", a.reps);
            flags.set("warmup", a.warmup);
            flags.set("measure", a.measure);
            flags.set("precision", a.precision);
            flags.set("out", a.out);
            cmd_bench(resolve(file, flags)?, out)
        }
        Command::TrainToy(a) => {
            flags.set("task", a.task);
            flags.set("mixer", a.mixer);
            flags.set("layers", a.layers);
            flags.set("d", a.d);
            flags.set("heads", a.heads);
            flags.set("n", a.n);
            flags.set("vocab", a.vocab);
            flags.set("steps", a.steps);
            flags.set("batch", a.batch);
            flags.set("lr", a.lr);
            flags.set("weight_decay", a.weight_decay);
            flags.set("max_grad_norm", a.max_grad_norm);
            flags.set("log_every", a.log_every);
            flags.set("eval_size", a.eval_size);
            flags.set("path", a.path);
            flags.set("orientation", a.orientation);
            flags.set("checkpoint_out", a.checkpoint_out);
            cmd_train(resolve(file, flags)?, out)
        }
        Command::ExportMaps(a) => {
            flags.set("checkpoint", a.checkpoint);
            flags.set("tokens", a.tokens);
            flags.set("out", a.out);
            flags.set("max_n", a.max_n);
            cmd_export(resolve(file, flags)?, out)
        }
        Command::CostModel(a) => {
            flags.set("n", a.n);
            flags.set("d", a.d);
            flags.set("heads", a.heads);
            flags.set("gqa_k", a.gqa_k);
            cmd_cost(resolve(file, flags)?, out)
        }
    }
}

fn cmd_verify(s: VerifySettings, out: &Out) -> Result<bool, CliError> {
    let suite: Suite = s.suite.parse().map_err(|e: circat::Error| CliError::usage(e.to_string()))?;
    out.echo("verify", &s);
    let report = verify::run(suite, s.seed)?;
    for c in &report.checks {
        out.line(format!(
            "{} [{}] {}: worst {:.3e} (tol {:.0e}, {} cases)",
            if c.passed { "PASS" } else { "FAIL" },
            c.suite,
            c.property,
            c.worst_error,
            c.tolerance,
            c.cases
        ));
    }
    let failed = report.checks.iter().filter(|c| !c.passed).count();
    out.line(format!("{} checks, {failed} failed", report.checks.len()));
    out.finish("verify", &s, report.passed, serde_json::to_value(&report).expect("report serializes"));
    Ok(report.passed)
}

fn cmd_bench(s: BenchSettings, out: &Out) -> Result<bool, CliError> {
    bench::check_combo(s.mech, s.path)?;
    if s.n_list.is_empty() {
        return Err(CliError::usage("--n-list is empty"));
    }
    let template = BenchCase {
        mechanism: s.mech,
        path: s.path,
        n: s.n_list[0],
        d: s.d,
        heads: s.heads,
        precision: s.precision,
        reps: s.reps,
        warmup: s.warmup,
        measure: s.measure,
        seed: s.seed,
    };
    template.validate().map_err(|e| CliError::usage(e.to_string()))?;
    out.echo("bench", &s);
    let sweep = bench::scaling_sweep(&template, &s.n_list).map_err(|e| match e {
        circat::Error::Invalid(m) if m.contains("ascending") || m.contains("divisible") => CliError::usage(m),
        other => other.into(),
    })?;
    out.line(format!(
        "{:>8} {:>14} {:>14} {:>14} {:>12} {:>12}",
        "N", "median_ns", "mean_ns", "min_ns", "peak", "coeffs"
    ));
    for r in &sweep.results {
        out.line(format!(
            "{:>8} {:>14.0} {:>14.0} {:>14} {:>12} {:>12}",
            r.case.n, r.timing.median_ns, r.timing.mean_ns, r.timing.min_ns, r.peak_scalars, r.attn_coeffs
        ));
    }
    for g in &sweep.ratios {
        out.line(format!("ratio T({})/T({}) = {}", g.n_to, g.n_from, g.ratio));
    }
    if let Some(path) = &s.out {
        bench::write_csv(&sweep.results, path)?;
        out.line(format!("wrote {}", path.display()));
    }
    let rows: Vec<bench::BenchRow> = sweep.results.iter().map(bench::BenchRow::from).collect();
    out.finish("bench", &s, true, json!({ "rows": rows, "ratios": sweep.ratios }));
    Ok(true)
}

fn cmd_train(s: TrainSettings, out: &Out) -> Result<bool, CliError> {
    s.train
        .model_config()
        .validate()
        .map_err(|e| CliError::usage(e.to_string()))?;
    out.echo("train-toy", &s);
    let outcome = model::train_toy(&s.train, |l| {
        out.line(format!(
            "step {} train_loss {:.6} eval_loss {:.6}",
            l.step,
            l.train_loss,
            l.eval_loss.unwrap_or(f64::NAN)
        ))
    })
    .map_err(|e| CliError::failed(e.to_string()))?;
    if let Some(path) = &s.checkpoint_out {
        model::save_checkpoint(path, &outcome.state, serde_json::to_value(&s.train).expect("settings serialize"))?;
        out.line(format!("wrote checkpoint {}", path.display()));
    }
    let finite = outcome.final_eval_loss.is_finite();
    out.line(format!(
        "initial eval loss {:.6}, final eval loss {:.6}",
        outcome.initial_eval_loss, outcome.final_eval_loss
    ));
    out.finish(
        "train-toy",
        &s,
        finite,
        json!({
            "steps": outcome.state.step(),
            "initial_eval_loss": outcome.initial_eval_loss,
            "final_eval_loss": outcome.final_eval_loss,
            "last_train_loss": outcome.last_train_loss,
            "parameters": outcome.state.model.params.num_scalars(),
            "log": outcome.log,
            "checkpoint": s.checkpoint_out,
        }),
    );
    Ok(finite)
}

fn cmd_export(s: ExportSettings, out: &Out) -> Result<bool, CliError> {
    let Some(ck) = &s.checkpoint else {
        return Err(CliError::usage("export-maps needs --checkpoint"));
    };
    out.echo("export-maps", &s);
    let (state, _) = model::load_checkpoint(ck)?;
    let m = &state.model;
    let cfg = &m.config;
    if cfg.n_max > s.max_n {
        return Err(CliError::usage(format!(
            "N = {} exceeds the map export cap of {}",
            cfg.n_max, s.max_n
        )));
    }
    let mut rng = SeededRng::new(s.seed);
    let input = match (&s.tokens, cfg.input) {
        (Some(t), InputKind::Tokens { .. }) if t.len() != cfg.n_max => {
            return Err(CliError::usage(format!(
                "--tokens has {} entries but the model takes {}",
                t.len(),
                cfg.n_max
            )));
        }
        (Some(t), InputKind::Tokens { .. }) => Input::Tokens(t.clone()),
        (None, InputKind::Tokens { vocab }) => Input::Tokens((0..cfg.n_max).map(|_| rng.below(vocab)).collect()),
        (None, InputKind::Patches { dim }) => {
            Input::Patches(Tensor::randn(Shape::matrix(cfg.n_max, dim)?, 1.0, &mut rng))
        }
        (Some(_), InputKind::Patches { .. }) => {
            return Err(CliError::usage("this model takes patch inputs, not --tokens"));
        }
    };
    let all = m.attention_maps(&input).map_err(|e| CliError::usage(e.to_string()))?;
    let report = maps::export_maps(&all, &s.out, s.max_n)?;
    let layers: Vec<Value> = cfg
        .schedule
        .iter()
        .zip(&all)
        .map(|(mech, ms)| {
            let circulant = ms.iter().all(maps::is_circulant);
            json!({ "mechanism": mech, "heads": ms.len(), "circulant": circulant })
        })
        .collect();
    let cat_ok = cfg
        .schedule
        .iter()
        .zip(&layers)
        .filter(|(m, _)| matches!(m, Mechanism::Cat | Mechanism::QOnly | Mechanism::VOnly | Mechanism::AvgKey) && !cfg.causal())
        .all(|(_, l)| l["circulant"] == Value::Bool(true));
    for (l, info) in layers.iter().enumerate() {
        out.line(format!("layer {l}: {info}"));
    }
    out.line(format!(
        "wrote {} maps and {} ({}x{})",
        report.files.len(),
        report.mosaic.display(),
        report.mosaic_width,
        report.mosaic_height
    ));
    out.finish(
        "export-maps",
        &s,
        cat_ok,
        json!({ "export": report, "layers": layers }),
    );
    Ok(cat_ok)
}

fn cmd_cost(s: CostSettings, out: &Out) -> Result<bool, CliError> {
    let c = bench::projection_cost(s.n, s.d, s.heads, s.gqa_k).map_err(|e| CliError::usage(e.to_string()))?;
    out.echo("cost-model", &s);
    out.line(format!("GQA  inner D + 2DK = {}  total 2ND(D + 2DK) = {}", c.gqa_inner, c.gqa_flops));
    out.line(format!("CAT  inner D + H   = {}  total 2ND(D + H)   = {}", c.cat_inner, c.cat_flops));
    out.line(format!("ratio GQA/CAT = {}", c.ratio));
    out.line(format!("regime: {}", c.regime));
    out.finish("cost-model", &s, true, serde_json::to_value(c).expect("cost serializes"));
    Ok(true)
}
