//! Wall-clock and counted-traffic benchmarks of batched training passes and
//! incremental decoding, amortized per token.
//!
//! Decoding uses padded (or ring) caches so every step has the same shape.
//! Times are medians over repetitions after warmup, measured single-threaded
//! with a monotonic clock.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionKind;
use crate::error::{Error, Result};
use crate::model::{
    loss_and_grads, Batch, CacheMode, DecoderState, ModelConfig, ModelParams, FIRST_CONTENT,
};
use crate::tensor::tally;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workload {
    pub batch: usize,
    /// Ignored for decoder-only models.
    pub source_len: usize,
    pub target_len: usize,
    pub model: ModelConfig,
    pub repetitions: usize,
    pub warmup_reps: usize,
    #[serde(default = "default_beam")]
    pub beam_size: usize,
}

fn default_beam() -> usize {
    4
}

impl Workload {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.repetitions < 3 {
            return Err(Error::Config("repetitions must be at least 3".into()));
        }
        if self.warmup_reps < 1 {
            return Err(Error::Config("warmup_reps must be at least 1".into()));
        }
        if self.batch == 0 || self.target_len == 0 || self.beam_size == 0 {
            return Err(Error::Config(
                "batch, target_len and beam_size must be positive".into(),
            ));
        }
        if self.model.has_encoder() && self.source_len == 0 {
            return Err(Error::Config(
                "encoder-decoder workload needs source_len >= 1".into(),
            ));
        }
        let longest = self.target_len.max(if self.model.has_encoder() {
            self.source_len
        } else {
            0
        });
        if longest > self.model.max_len {
            return Err(Error::Config(format!(
                "sequence length {longest} exceeds max_len {}",
                self.model.max_len
            )));
        }
        Ok(())
    }
}

/// One row of the report: an attention kind, optionally with local
/// decoder self-attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub kind: AttentionKind,
    pub local_window: Option<usize>,
}

impl Variant {
    pub fn label(&self) -> String {
        match self.local_window {
            Some(_) => format!("{} local", self.kind.label()),
            None => self.kind.label().to_string(),
        }
    }

    fn configure(&self, model: &ModelConfig) -> ModelConfig {
        ModelConfig {
            local_window: self.local_window,
            ..model.with_kind(self.kind)
        }
    }
}

/// Multi-head and multi-query, each with full and window-32 decoder
/// self-attention.
pub fn standard_variants() -> Vec<Variant> {
    let mut out = Vec::new();
    for local_window in [None, Some(32)] {
        for kind in [AttentionKind::MultiHead, AttentionKind::MultiQuery] {
            out.push(Variant { kind, local_window });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub cpu_model: String,
    pub available_threads: usize,
    pub threads_used: usize,
}

impl Environment {
    pub fn detect() -> Self {
        let cpu_model = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|text| {
                text.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split_once(':'))
                    .map(|(_, v)| v.trim().to_string())
            })
            .unwrap_or_else(|| "unknown".into());
        let available = std::thread::available_parallelism().map_or(1, |n| n.get());
        let cap = std::env::var("MQA_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok());
        Environment {
            cpu_model,
            available_threads: cap.map_or(available, |c| c.clamp(1, available)),
            threads_used: 1,
        }
    }
}

/// Times are microseconds per token; `None` where a phase was not run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub variant: String,
    pub training_us: Option<f64>,
    pub encoder_us: Option<f64>,
    pub decoder_us: Option<f64>,
    pub beam_encoder_us: Option<f64>,
    pub beam_decoder_us: Option<f64>,
    /// Cache key and value words read by one decoder step, all layers.
    pub kv_words_per_step: u64,
    pub flops_per_step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub environment: Environment,
    pub rows: Vec<BenchRow>,
    pub notes: Vec<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Phases {
    pub training: bool,
    pub greedy: bool,
    pub beam: bool,
}

impl Phases {
    pub fn all() -> Self {
        Phases {
            training: true,
            greedy: true,
            beam: true,
        }
    }
}

/// Smallest nonzero step of the monotonic clock observed over a short probe.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::from_secs(1);
    for _ in 0..1000 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

struct Timer {
    reps: usize,
    warmup: usize,
    resolution: Duration,
}

impl Timer {
    /// Median seconds of `f` over the repetitions. Raises the repetition
    /// count when the clock is coarse relative to one run.
    fn median(
        &mut self,
        notes: &mut Vec<String>,
        mut f: impl FnMut() -> Result<()>,
    ) -> Result<f64> {
        for _ in 0..self.warmup {
            f()?;
        }
        let mut samples = Vec::with_capacity(self.reps);
        for _ in 0..self.reps {
            let start = Instant::now();
            f()?;
            samples.push(start.elapsed().as_secs_f64());
        }
        let med = median(samples.clone());
        if self.resolution.as_secs_f64() > 0.01 * med {
            let note = format!(
                "timer resolution {:?} exceeds 1% of a {med:.3e}s run; repetitions raised to {}",
                self.resolution,
                self.reps * 4
            );
            log::warn!("{note}");
            notes.push(note);
            self.reps *= 4;
            for _ in samples.len()..self.reps {
                let start = Instant::now();
                f()?;
                samples.push(start.elapsed().as_secs_f64());
            }
            return Ok(median(samples));
        }
        Ok(med)
    }
}

fn random_rows(rng: &mut ChaCha8Rng, rows: usize, len: usize, vocab: usize) -> Vec<Vec<u32>> {
    (0..rows)
        .map(|_| {
            (0..len)
                .map(|_| rng.gen_range(FIRST_CONTENT..vocab as u32))
                .collect()
        })
        .collect()
}

fn training_batch(workload: &Workload, rng: &mut ChaCha8Rng) -> Batch {
    let vocab = workload.model.vocab_size;
    let targets = random_rows(rng, workload.batch, workload.target_len, vocab);
    let inputs = random_rows(rng, workload.batch, workload.target_len, vocab);
    let source = workload
        .model
        .has_encoder()
        .then(|| random_rows(rng, workload.batch, workload.source_len, vocab));
    Batch {
        source,
        inputs,
        targets,
        loss_start: 0,
    }
}

/// Greedy decode of `steps` positions from a state, without recording output.
fn run_greedy(state: &mut DecoderState<'_>, steps: usize, vocab: usize) -> Result<()> {
    let mut tokens = vec![FIRST_CONTENT; state.rows()];
    for _ in 0..steps {
        let logits = state.step(&tokens)?;
        for (t, row) in tokens.iter_mut().zip(logits.data().chunks(vocab)) {
            *t = crate::model::argmax(row) as u32;
        }
    }
    Ok(())
}

/// Fixed-width batched beam search: each of the `groups` rows keeps `beam`
/// hypotheses; every step ranks `beam x vocab` candidates per group and
/// gathers the surviving caches.
fn run_beam(
    state: &mut DecoderState<'_>,
    groups: usize,
    beam: usize,
    steps: usize,
    vocab: usize,
) -> Result<()> {
    let mut scores = vec![0.0; groups * beam];
    let mut tokens = vec![FIRST_CONTENT; groups * beam];
    for step in 0..steps {
        let logits = state.step(&tokens)?;
        if step + 1 == steps {
            break;
        }
        let mut parents = Vec::with_capacity(groups * beam);
        let mut next_scores = Vec::with_capacity(groups * beam);
        let mut next_tokens = Vec::with_capacity(groups * beam);
        for g in 0..groups {
            let mut candidates: Vec<(f64, usize, u32)> = Vec::with_capacity(beam * vocab);
            // Before the first step all hypotheses are identical; keep one.
            let live = if step == 0 { 1 } else { beam };
            for p in 0..live {
                let row = g * beam + p;
                let r = &logits.data()[row * vocab..(row + 1) * vocab];
                let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + r.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                for (t, v) in r.iter().enumerate() {
                    candidates.push((scores[row] + v - lse, row, t as u32));
                }
            }
            candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            for &(s, row, t) in candidates.iter().take(beam) {
                parents.push(row);
                next_scores.push(s);
                next_tokens.push(t);
            }
        }
        state.reorder(&parents)?;
        scores = next_scores;
        tokens = next_tokens;
    }
    Ok(())
}

/// Counted cache words and flops of one decoder step after `warm` steps.
fn count_step(
    params: &ModelParams,
    source: Option<&[Vec<u32>]>,
    rows: usize,
    horizon: usize,
) -> Result<(u64, u64)> {
    let mut state = DecoderState::new(params, source, rows, CacheMode::Padded, horizon)?;
    let tokens = vec![FIRST_CONTENT; rows];
    state.step(&tokens)?;
    let (out, counts) = tally::measure(|| state.step(&tokens));
    out?;
    Ok((
        counts.words_of("K") + counts.words_of("V"),
        counts.total_flops(),
    ))
}

/// Benchmarks every variant over the selected phases.
pub fn run_benchmark(
    workload: &Workload,
    variants: &[Variant],
    phases: Phases,
) -> Result<BenchReport> {
    workload.validate()?;
    let mut notes = Vec::new();
    let mut timer = Timer {
        reps: workload.repetitions,
        warmup: workload.warmup_reps,
        resolution: timer_resolution(),
    };
    let mut rows = Vec::with_capacity(variants.len());
    let b = workload.batch;
    let vocab = workload.model.vocab_size;
    for variant in variants {
        let config = variant.configure(&workload.model);
        config.validate()?;
        let params = ModelParams::init(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let batch = training_batch(workload, &mut rng);
        let source = batch.source.clone();
        let decode_tokens = (b * workload.target_len) as f64;
        let us = |seconds: f64, tokens: f64| seconds * 1e6 / tokens;

        let training_us = if phases.training {
            let train_tokens = (b
                * (workload.target_len
                    + if config.has_encoder() {
                        workload.source_len
                    } else {
                        0
                    })) as f64;
            let t = timer.median(&mut notes, || loss_and_grads(&params, &batch).map(|_| ()))?;
            Some(us(t, train_tokens))
        } else {
            None
        };

        let mut phase = |beam: usize, notes: &mut Vec<String>| -> Result<(Option<f64>, f64)> {
            let rows = b * beam;
            let expanded: Option<Vec<Vec<u32>>> = source.as_ref().map(|s| {
                s.iter()
                    .flat_map(|r| std::iter::repeat_n(r.clone(), beam))
                    .collect()
            });
            let encoder = match &expanded {
                Some(src) => {
                    let src = &src[..];
                    let t =
                        timer.median(notes, || crate::model::encode(&params, src).map(|_| ()))?;
                    Some(us(t, decode_tokens))
                }
                None => None,
            };
            // Encoder work is included in state construction; time steps only.
            let t = timer.median(notes, || {
                let mut state = DecoderState::new(
                    &params,
                    expanded.as_deref(),
                    rows,
                    CacheMode::Padded,
                    workload.target_len,
                )?;
                if beam == 1 {
                    run_greedy(&mut state, workload.target_len, vocab)
                } else {
                    run_beam(&mut state, b, beam, workload.target_len, vocab)
                }
            })?;
            let construct = match &expanded {
                Some(_) => timer.median(notes, || {
                    DecoderState::new(
                        &params,
                        expanded.as_deref(),
                        rows,
                        CacheMode::Padded,
                        workload.target_len,
                    )
                    .map(|_| ())
                })?,
                None => 0.0,
            };
            Ok((encoder, us((t - construct).max(0.0), decode_tokens)))
        };
        let (encoder_us, decoder_us) = if phases.greedy {
            let (e, d) = phase(1, &mut notes)?;
            (e, Some(d))
        } else {
            (None, None)
        };
        let (beam_encoder_us, beam_decoder_us) = if phases.beam {
            let (e, d) = phase(workload.beam_size, &mut notes)?;
            (e, Some(d))
        } else {
            (None, None)
        };
        let (kv_words_per_step, flops_per_step) =
            count_step(&params, source.as_deref(), b, workload.target_len)?;
        rows.push(BenchRow {
            variant: variant.label(),
            training_us,
            encoder_us,
            decoder_us,
            beam_encoder_us,
            beam_decoder_us,
            kv_words_per_step,
            flops_per_step,
        });
    }
    Ok(BenchReport {
        environment: Environment::detect(),
        rows,
        notes,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(Error::Usage(format!(
                "unknown report format {other:?}; expected csv or markdown"
            ))),
        }
    }
}

pub const CSV_HEADER: &str = "variant,training_us,encoder_us,decoder_us,beam_encoder_us,beam_decoder_us,kv_words_per_step,flops_per_step";

fn cell(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| v.to_string())
}

fn md_cell(x: Option<f64>) -> String {
    x.map_or("-".into(), |v| format!("{v:.3}"))
}

fn enc_dec(enc: Option<f64>, dec: Option<f64>) -> String {
    match (enc, dec) {
        (Some(e), Some(d)) => format!("{e:.3} + {d:.3}"),
        (None, Some(d)) => format!("{d:.3}"),
        _ => "-".into(),
    }
}

pub fn emit_report(report: &BenchReport, format: ReportFormat) -> String {
    let env = &report.environment;
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            let _ = writeln!(out, "# cpu: {}", env.cpu_model);
            let _ = writeln!(out, "# available_threads: {}", env.available_threads);
            let _ = writeln!(out, "# threads_used: {}", env.threads_used);
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut record =
                |fields: Vec<String>| w.write_record(fields).expect("in-memory csv write");
            record(CSV_HEADER.split(',').map(String::from).collect());
            for r in &report.rows {
                record(vec![
                    r.variant.clone(),
                    cell(r.training_us),
                    cell(r.encoder_us),
                    cell(r.decoder_us),
                    cell(r.beam_encoder_us),
                    cell(r.beam_decoder_us),
                    r.kv_words_per_step.to_string(),
                    r.flops_per_step.to_string(),
                ]);
            }
            let bytes = w.into_inner().expect("in-memory csv flush");
            out.push_str(std::str::from_utf8(&bytes).expect("csv of utf-8 fields"));
        }
        ReportFormat::Markdown => {
            let _ = writeln!(
                out,
                "CPU: {} ({} threads available, {} used)\n",
                env.cpu_model, env.available_threads, env.threads_used
            );
            let _ = writeln!(
                out,
                "| Attention | Training µs/token | Inference µs/token enc + dec | Beam-4 µs/token enc + dec | KV words/step | Flops/step |"
            );
            let _ = writeln!(out, "|---|---:|---:|---:|---:|---:|");
            for r in &report.rows {
                let _ = writeln!(
                    out,
                    "| {} | {} | {} | {} | {} | {} |",
                    r.variant,
                    md_cell(r.training_us),
                    enc_dec(r.encoder_us, r.decoder_us),
                    enc_dec(r.beam_encoder_us, r.beam_decoder_us),
                    r.kv_words_per_step,
                    r.flops_per_step
                );
            }
            for note in &report.notes {
                let _ = writeln!(out, "\nNote: {note}");
            }
        }
    }
    out
}

/// Parses the CSV produced by [`emit_report`]. Notes are not carried.
pub fn parse_csv(text: &str) -> Result<BenchReport> {
    let mut env = Environment {
        cpu_model: String::new(),
        available_threads: 0,
        threads_used: 0,
    };
    let bad = |what: &str| Error::Parse(format!("report csv: {what}"));
    let mut body = text;
    while let Some(rest) = body.strip_prefix("# ") {
        let (line, next) = rest.split_once('\n').unwrap_or((rest, ""));
        let (key, value) = line.split_once(": ").ok_or_else(|| bad(line))?;
        match key {
            "cpu" => env.cpu_model = value.to_string(),
            "available_threads" => env.available_threads = value.parse().map_err(|_| bad(line))?,
            "threads_used" => env.threads_used = value.parse().map_err(|_| bad(line))?,
            _ => return Err(bad(&format!("unknown key {key}"))),
        }
        body = next;
    }
    let mut reader = csv::Reader::from_reader(body.as_bytes());
    let header = reader.headers().map_err(|e| bad(&e.to_string()))?;
    if header.iter().ne(CSV_HEADER.split(',')) {
        return Err(bad("missing header"));
    }
    let rows = reader
        .deserialize()
        .collect::<std::result::Result<Vec<BenchRow>, _>>()
        .map_err(|e| bad(&e.to_string()))?;
    Ok(BenchReport {
        environment: env,
        rows,
        notes: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_format_is_a_usage_error() {
        assert!(matches!(
            "xml".parse::<ReportFormat>(),
            Err(Error::Usage(_))
        ));
        assert_eq!("csv".parse::<ReportFormat>().unwrap(), ReportFormat::Csv);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn variant_labels() {
        let labels: Vec<String> = standard_variants().iter().map(Variant::label).collect();
        assert_eq!(
            labels,
            [
                "multi-head",
                "multi-query",
                "multi-head local",
                "multi-query local"
            ]
        );
    }
}
