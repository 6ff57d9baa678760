use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{DecodeConfig, ModelConfig};
use super::decode::greedy_decode;
use super::params::ModelParams;
use super::transformer::{loss_and_grads, Batch};
use crate::error::{Error, Result};

pub const BOS: u32 = 0;
pub const SEP: u32 = 1;
/// First content token id; ids below it are reserved.
pub const FIRST_CONTENT: u32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Copy,
    Reverse,
}

impl Task {
    pub fn target(self, sequence: &[u32]) -> Vec<u32> {
        match self {
            Task::Copy => sequence.to_vec(),
            Task::Reverse => sequence.iter().rev().copied().collect(),
        }
    }
}

/// Synthetic sequences of uniformly drawn content tokens.
#[derive(Clone, Debug)]
pub struct TaskSampler {
    task: Task,
    seq_len: usize,
    vocab_size: usize,
    rng: ChaCha8Rng,
}

impl TaskSampler {
    /// Stream 0 is used for training and stream 1 for held-out evaluation.
    pub fn new(
        task: Task,
        seq_len: usize,
        vocab_size: usize,
        seed: u64,
        stream: u64,
    ) -> Result<Self> {
        if vocab_size <= FIRST_CONTENT as usize {
            return Err(Error::Config(format!(
                "vocab_size {vocab_size} leaves no content tokens"
            )));
        }
        if seq_len == 0 {
            return Err(Error::Config("seq_len must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Ok(TaskSampler {
            task,
            seq_len,
            vocab_size,
            rng,
        })
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn sequence(&mut self) -> Vec<u32> {
        (0..self.seq_len)
            .map(|_| self.rng.gen_range(FIRST_CONTENT..self.vocab_size as u32))
            .collect()
    }

    pub fn sequences(&mut self, rows: usize) -> Vec<Vec<u32>> {
        (0..rows).map(|_| self.sequence()).collect()
    }

    pub fn batch(&mut self, config: &ModelConfig, rows: usize) -> Batch {
        let seqs = self.sequences(rows);
        make_batch(config, self.task, &seqs)
    }
}

/// Teacher-forced batch for `sequences`. Encoder-decoder models read the
/// sequence as source and predict the target after `BOS`; decoder-only
/// models read `sequence SEP target` and are scored on the target only.
pub fn make_batch(config: &ModelConfig, task: Task, sequences: &[Vec<u32>]) -> Batch {
    let n = sequences.first().map_or(0, Vec::len);
    if config.has_encoder() {
        let targets: Vec<Vec<u32>> = sequences.iter().map(|s| task.target(s)).collect();
        let inputs = targets
            .iter()
            .map(|t| {
                std::iter::once(BOS)
                    .chain(t[..n.saturating_sub(1)].iter().copied())
                    .collect()
            })
            .collect();
        Batch {
            source: Some(sequences.to_vec()),
            inputs,
            targets,
            loss_start: 0,
        }
    } else {
        let full: Vec<Vec<u32>> = sequences
            .iter()
            .map(|s| {
                let mut v = s.clone();
                v.push(SEP);
                v.extend(task.target(s));
                v
            })
            .collect();
        Batch {
            source: None,
            inputs: full.iter().map(|s| s[..2 * n].to_vec()).collect(),
            targets: full.iter().map(|s| s[1..].to_vec()).collect(),
            loss_start: n,
        }
    }
}

/// Decoder prompt for `sequence`: `[BOS]`, or `sequence SEP` without an
/// encoder.
pub fn prompt_for(config: &ModelConfig, sequence: &[u32]) -> Vec<u32> {
    if config.has_encoder() {
        vec![BOS]
    } else {
        let mut p = sequence.to_vec();
        p.push(SEP);
        p
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSettings {
    /// Peak learning rate, reached at the end of warmup.
    pub learning_rate: f64,
    pub warmup_steps: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.98
}

fn default_epsilon() -> f64 {
    1e-9
}

impl OptimizerSettings {
    pub fn new(learning_rate: f64, warmup_steps: usize) -> Self {
        OptimizerSettings {
            learning_rate,
            warmup_steps,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
        }
    }

    /// Linear warmup then inverse-square-root decay; `step` counts from 1.
    pub fn rate(&self, step: usize) -> f64 {
        let t = step.max(1) as f64;
        if self.warmup_steps == 0 {
            return self.learning_rate;
        }
        let w = self.warmup_steps as f64;
        self.learning_rate * (t / w).min((w / t).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate.is_finite()
            && self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub task: Task,
    pub seq_len: usize,
    pub batch_size: usize,
    pub steps: usize,
    /// Held-out sequences scored by [`token_accuracy`].
    pub eval_samples: usize,
    pub seed: u64,
    pub optimizer: OptimizerSettings,
}

impl TrainSettings {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let needed = if config.has_encoder() {
            self.seq_len
        } else {
            2 * self.seq_len
        };
        if needed > config.max_len {
            return Err(Error::Config(format!(
                "seq_len {} needs max_len >= {needed}",
                self.seq_len
            )));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    settings: OptimizerSettings,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: usize,
}

impl Adam {
    pub fn new(settings: OptimizerSettings, params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|(_, t)| vec![0.0; t.len()])
            .collect();
        Adam {
            settings,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        self.step += 1;
        let s = self.settings;
        let lr = s.rate(self.step);
        let c1 = 1.0 - s.beta1.powi(self.step as i32);
        let c2 = 1.0 - s.beta2.powi(self.step as i32);
        let grads = grads.tensors();
        let (first, second) = (&mut self.first, &mut self.second);
        params.for_each_mut(|i, p| {
            let g = grads[i].1.data();
            for (((w, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(&mut first[i])
                .zip(&mut second[i])
            {
                *m = s.beta1 * *m + (1.0 - s.beta1) * g;
                *v = s.beta2 * *v + (1.0 - s.beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + s.epsilon);
            }
        });
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub losses: Vec<f64>,
}

impl TrainingCurve {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }

    /// Mean of the last `window` losses.
    pub fn tail_mean(&self, window: usize) -> Option<f64> {
        let w = window.min(self.losses.len());
        (w > 0).then(|| self.losses[self.losses.len() - w..].iter().sum::<f64>() / w as f64)
    }
}

/// Trains `params` in place and returns the per-step loss.
pub fn train(params: &mut ModelParams, settings: &TrainSettings) -> Result<TrainingCurve> {
    let config = params.config.clone();
    settings.validate(&config)?;
    let mut sampler = TaskSampler::new(
        settings.task,
        settings.seq_len,
        config.vocab_size,
        settings.seed,
        0,
    )?;
    let mut adam = Adam::new(settings.optimizer, params);
    let mut curve = TrainingCurve::default();
    for step in 1..=settings.steps {
        let batch = sampler.batch(&config, settings.batch_size);
        let (loss, grads) = match loss_and_grads(params, &batch) {
            Ok(v) => v,
            Err(Error::Numeric { .. }) => {
                return Err(Error::Diverged {
                    step,
                    loss: f64::NAN,
                })
            }
            Err(e) => return Err(e),
        };
        adam.step(params, &grads);
        curve.losses.push(loss);
        if params.check_finite("parameter").is_err() {
            return Err(Error::Diverged { step, loss });
        }
        if step % 100 == 0 {
            log::info!("step {step} loss {loss:.6}");
        }
    }
    Ok(curve)
}

/// Fraction of target tokens reproduced by greedy decoding on held-out
/// sequences.
pub fn token_accuracy(
    params: &ModelParams,
    task: Task,
    seq_len: usize,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let config = &params.config;
    let mut sampler = TaskSampler::new(task, seq_len, config.vocab_size, seed, 1)?;
    let seqs = sampler.sequences(samples);
    if seqs.is_empty() {
        return Err(Error::Input("accuracy needs at least one sample".into()));
    }
    let prompts: Vec<Vec<u32>> = seqs.iter().map(|s| prompt_for(config, s)).collect();
    let source = config.has_encoder().then_some(seqs.as_slice());
    let out = greedy_decode(params, source, &prompts, &DecodeConfig::greedy(seq_len))?;
    let mut correct = 0usize;
    for (seq, got) in seqs.iter().zip(&out.tokens) {
        let want = task.target(seq);
        correct += want.iter().zip(got).filter(|(a, b)| a == b).count();
    }
    Ok(correct as f64 / (samples * seq_len) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionKind;
    use crate::model::config::{ModelMode, SiteKinds};

    fn config(mode: ModelMode) -> ModelConfig {
        ModelConfig {
            mode,
            layers: 1,
            d_model: 8,
            d_ff: 16,
            heads: 2,
            d_k: 4,
            d_v: 4,
            vocab_size: 6,
            max_len: 8,
            attention: SiteKinds::uniform(AttentionKind::MultiHead),
            local_window: None,
            seed: 1,
        }
    }

    #[test]
    fn batches_follow_token_conventions() {
        let seqs = vec![vec![2, 3, 4]];
        let b = make_batch(&config(ModelMode::EncoderDecoder), Task::Reverse, &seqs);
        assert_eq!(b.source, Some(seqs.clone()));
        assert_eq!(b.inputs, vec![vec![BOS, 4, 3]]);
        assert_eq!(b.targets, vec![vec![4, 3, 2]]);
        let b = make_batch(&config(ModelMode::DecoderOnly), Task::Copy, &seqs);
        assert_eq!(b.inputs, vec![vec![2, 3, 4, SEP, 2, 3]]);
        assert_eq!(b.targets, vec![vec![3, 4, SEP, 2, 3, 4]]);
        assert_eq!(b.loss_start, 3);
    }

    #[test]
    fn schedule_peaks_at_warmup() {
        let s = OptimizerSettings::new(1e-3, 100);
        assert!((s.rate(100) - 1e-3).abs() < 1e-18);
        assert!((s.rate(50) - 5e-4).abs() < 1e-18);
        assert!((s.rate(400) - 5e-4).abs() < 1e-18);
    }

    #[test]
    fn zero_steps_leave_params_unchanged() {
        let cfg = config(ModelMode::EncoderDecoder);
        let mut params = ModelParams::init(&cfg).unwrap();
        let before = params.clone();
        let settings = TrainSettings {
            task: Task::Copy,
            seq_len: 3,
            batch_size: 2,
            steps: 0,
            eval_samples: 1,
            seed: 0,
            optimizer: OptimizerSettings::new(1e-3, 10),
        };
        assert!(train(&mut params, &settings).unwrap().losses.is_empty());
        assert_eq!(params, before);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let cfg = config(ModelMode::DecoderOnly);
        let settings = TrainSettings {
            task: Task::Copy,
            seq_len: 3,
            batch_size: 4,
            steps: 30,
            eval_samples: 2,
            seed: 5,
            optimizer: OptimizerSettings::new(3e-3, 5),
        };
        let run = || {
            let mut p = ModelParams::init(&cfg).unwrap();
            train(&mut p, &settings).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert!(a.tail_mean(5).unwrap() < a.losses[0]);
    }
}
