use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde_json::Value;

use mqa_core::bench::{
    emit_report, parse_csv, run_benchmark, standard_variants, Phases, ReportFormat, Workload,
};
use mqa_core::cost::{
    cost_incremental, dff_for_parity, flops_batched, memory_batched, ShapeConfig,
};
use mqa_core::model::{
    beam_decode, greedy_decode, load_checkpoint, prompt_for, save_checkpoint, token_accuracy,
    train, DecodeConfig, DecodeStrategy, ModelConfig, ModelParams, TrainSettings,
};
use mqa_core::{AttentionKind, CachePolicy, Error};

const DEFAULT_SEED: u64 = 1;

/// Multi-head and multi-query attention toolkit.
#[derive(Parser, Debug)]
#[command(name = "mqa", version)]
struct Cli {
    /// JSON config for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed applied to every seeded component.
    #[arg(long, global = true, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Override a config value by dotted key, e.g. `--set model.layers=2`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the oracle and invariant suite.
    Verify,
    /// Print operation and memory counts for a shape (default b=1 n=m=2 d=4 h=2 k=v=2).
    Cost,
    /// Solve the feed-forward width for parameter parity of `{baseline, variant}`.
    Parity,
    /// Train on a synthetic task from `{model, train}`.
    Train,
    /// Decode `{checkpoint, decode, sequences}` with a trained model.
    Decode,
    /// Benchmark the four attention variants for a workload.
    Bench {
        #[arg(long, value_enum, default_value_t = Format::Markdown)]
        format: Format,
        /// Skip the batched training pass.
        #[arg(long)]
        no_training: bool,
        /// Skip beam decoding.
        #[arg(long)]
        no_beam: bool,
    },
    /// Render a saved CSV benchmark report.
    Report {
        #[arg(long, value_enum, default_value_t = Format::Markdown)]
        format: Format,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Markdown,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => ReportFormat::Csv,
            Format::Markdown => ReportFormat::Markdown,
        }
    }
}

enum Failure {
    Verify,
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verify) => ExitCode::from(1),
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            let usage = matches!(
                e,
                Error::Usage(_) | Error::Config(_) | Error::Json(_) | Error::Parse(_)
            );
            ExitCode::from(if usage { 2 } else { 3 })
        }
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Verify => verify(cli),
        Command::Cost => cost(cli).map_err(Into::into),
        Command::Parity => parity(cli).map_err(Into::into),
        Command::Train => train_cmd(cli).map_err(Into::into),
        Command::Decode => decode(cli).map_err(Into::into),
        Command::Bench {
            format,
            no_training,
            no_beam,
        } => bench(cli, *format, *no_training, *no_beam).map_err(Into::into),
        Command::Report { format } => report(cli, *format).map_err(Into::into),
    }
}

fn read_file(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path)
        .map_err(|e| Error::Usage(format!("cannot read {}: {e}", path.display())))
}

fn write_file(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|e| Error::Usage(format!("cannot write {}: {e}", path.display())))
}

/// Replaces the value at dotted `key`; every segment must already exist.
fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), Error> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override {assignment:?} is not KEY=VALUE")))?;
    let mut slot = &mut *doc;
    for part in key.split('.') {
        slot = match slot {
            Value::Object(map) => map.get_mut(part),
            Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| Error::Usage(format!("unknown config key {key:?}")))?;
    }
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

/// Sets every `seed` field of the document to `seed`.
fn apply_seed(doc: &mut Value, seed: u64) {
    match doc {
        Value::Object(map) => {
            for (k, v) in map.iter_mut() {
                if k == "seed" {
                    *v = Value::from(seed);
                } else {
                    apply_seed(v, seed);
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(|v| apply_seed(v, seed)),
        _ => {}
    }
}

fn load_config<T: DeserializeOwned>(cli: &Cli, default: Option<Value>) -> Result<T, Error> {
    let mut doc = match (&cli.config, default) {
        (Some(path), _) => serde_json::from_str(&read_file(path)?)
            .map_err(|e| Error::Usage(format!("{}: {e}", path.display())))?,
        (None, Some(d)) => d,
        (None, None) => return Err(Error::Usage("this command needs --config".into())),
    };
    for o in &cli.overrides {
        apply_override(&mut doc, o)?;
    }
    apply_seed(&mut doc, cli.seed);
    serde_json::from_value(doc).map_err(|e| Error::Usage(format!("config: {e}")))
}

fn emit(cli: &Cli, text: &str) -> Result<(), Error> {
    print!("{text}");
    if let Some(out) = &cli.out {
        write_file(out, text)?;
    }
    Ok(())
}

fn verify(cli: &Cli) -> Result<(), Failure> {
    let outcomes = mqa_core::verify::run_checks(cli.seed);
    let mut text = String::new();
    for o in &outcomes {
        let status = if o.passed { "PASS" } else { "FAIL" };
        text += &format!("{status} {}", o.name);
        if !o.detail.is_empty() {
            text += &format!(" ({})", o.detail);
        }
        text.push('\n');
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    text += &format!("{} passed, {failed} failed\n", outcomes.len() - failed);
    emit(cli, &text)?;
    if failed > 0 {
        Err(Failure::Verify)
    } else {
        Ok(())
    }
}

fn cost(cli: &Cli) -> Result<(), Error> {
    let default = serde_json::json!({"b": 1, "n": 2, "m": 2, "d": 4, "h": 2, "k": 2, "v": 2});
    let cfg: ShapeConfig = load_config(cli, Some(default))?;
    cfg.validate()?;
    let mut text = String::new();
    for kind in [AttentionKind::MultiHead, AttentionKind::MultiQuery] {
        let traffic = flops_batched(&cfg, kind);
        let sizes = memory_batched(&cfg, kind);
        text += &format!("== {kind} batched\n");
        text += &format!("flops {}\n", traffic.flops());
        text += &format!("words {} (sum of tensor sizes)\n", sizes.memory_words());
        text += &format!("words {} (per-op traffic)\n", traffic.memory_words());
        text += &sizes.to_table();
        let inc_cfg = ShapeConfig { m: cfg.n, ..cfg };
        let inc = cost_incremental(&inc_cfg, kind, CachePolicy::Growing)?;
        text += &format!(
            "== {kind} incremental over n={} steps (growing cache)\n",
            cfg.n
        );
        text += &format!("flops {}\nkv words {}\n", inc.flops(), inc.kv_words());
        text += &inc.to_table();
    }
    emit(cli, &text)
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct ParityPair {
    baseline: ModelConfig,
    variant: ModelConfig,
}

fn parity(cli: &Cli) -> Result<(), Error> {
    let pair: ParityPair = load_config(cli, None)?;
    pair.baseline.validate()?;
    pair.variant.validate()?;
    let p = dff_for_parity(&pair.baseline, &pair.variant)?;
    let text = format!(
        "d_ff {}\nwidened {:?}\nexact {}\nattention savings {}\nbaseline non-embedding params {}\n",
        p.d_ff,
        p.widened,
        p.exact,
        p.savings,
        pair.baseline.non_embedding_params()
    );
    emit(cli, &text)
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainDoc {
    model: ModelConfig,
    train: TrainSettings,
}

fn train_cmd(cli: &Cli) -> Result<(), Error> {
    let doc: TrainDoc = load_config(cli, None)?;
    let mut params = ModelParams::init(&doc.model)?;
    let curve = train(&mut params, &doc.train)?;
    let accuracy = if doc.train.eval_samples > 0 {
        Some(token_accuracy(
            &params,
            doc.train.task,
            doc.train.seq_len,
            doc.train.eval_samples,
            doc.train.seed,
        )?)
    } else {
        None
    };
    let mut text = format!("steps {}\n", curve.losses.len());
    if let Some(loss) = curve.final_loss() {
        text += &format!("final loss {loss:.6}\n");
    }
    if let Some(acc) = accuracy {
        text += &format!("held-out token accuracy {acc:.4}\n");
    }
    print!("{text}");
    if let Some(dir) = &cli.out {
        save_checkpoint(&params, dir)?;
        let csv: String = std::iter::once("step,loss\n".to_string())
            .chain(
                curve
                    .losses
                    .iter()
                    .enumerate()
                    .map(|(i, l)| format!("{},{l:.17e}\n", i + 1)),
            )
            .collect();
        write_file(&dir.join("curve.csv"), &csv)?;
    }
    Ok(())
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct DecodeDoc {
    checkpoint: PathBuf,
    decode: DecodeConfig,
    sequences: Vec<Vec<u32>>,
}

fn decode(cli: &Cli) -> Result<(), Error> {
    let doc: DecodeDoc = load_config(cli, None)?;
    let checkpoint = match (&cli.config, doc.checkpoint.is_relative()) {
        (Some(cfg), true) => cfg.parent().unwrap_or(Path::new(".")).join(&doc.checkpoint),
        _ => doc.checkpoint.clone(),
    };
    let params = load_checkpoint(&checkpoint)?;
    let config = &params.config;
    let mut text = String::new();
    for seq in &doc.sequences {
        let prompt = prompt_for(config, seq);
        let source = config.has_encoder().then_some(seq.as_slice());
        let line = match doc.decode.strategy {
            DecodeStrategy::Greedy => {
                let src = source.map(|s| vec![s.to_vec()]);
                let out = greedy_decode(&params, src.as_deref(), &[prompt], &doc.decode)?;
                let note = if out.truncated { " (truncated)" } else { "" };
                format!("{}{note}", join(&out.tokens[0]))
            }
            DecodeStrategy::Beam => {
                let out = beam_decode(&params, source, &prompt, &doc.decode)?;
                format!(
                    "{} score {:.6} log_prob {:.6}",
                    join(&out.tokens),
                    out.score,
                    out.log_prob
                )
            }
        };
        text += &line;
        text.push('\n');
    }
    emit(cli, &text)
}

fn join(tokens: &[u32]) -> String {
    tokens
        .iter()
        .map(u32::to_string)
        .collect::<Vec<_>>()
        .join(" ")
}

fn bench(cli: &Cli, format: Format, no_training: bool, no_beam: bool) -> Result<(), Error> {
    let workload: Workload = load_config(cli, None)?;
    let phases = Phases {
        training: !no_training,
        greedy: true,
        beam: !no_beam,
    };
    let report = run_benchmark(&workload, &standard_variants(), phases)?;
    emit(cli, &emit_report(&report, format.into()))
}

fn report(cli: &Cli, format: Format) -> Result<(), Error> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Usage("report needs --config <saved csv report>".into()))?;
    let report = parse_csv(&read_file(path)?)?;
    emit(cli, &emit_report(&report, format.into()))
}
