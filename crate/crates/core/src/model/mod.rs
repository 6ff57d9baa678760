//! A small pre-norm transformer built on the attention kernels, with
//! hand-written backpropagation, Adam training on synthetic tasks and
//! incremental greedy and beam decoding.

mod checkpoint;
mod config;
mod decode;
pub mod gradcheck;
mod layers;
mod params;
mod train;
mod transformer;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{CacheMode, DecodeConfig, DecodeStrategy, ModelConfig, ModelMode, SiteKinds};
pub use decode::{argmax, beam_decode, greedy_decode, BeamOutput, DecoderState, GreedyOutput};
pub use params::{CrossBlock, DecoderLayer, EncoderLayer, FeedForward, LayerNorm, ModelParams};
pub use train::{
    make_batch, prompt_for, token_accuracy, train, Adam, OptimizerSettings, Task, TaskSampler,
    TrainSettings, TrainingCurve, BOS, FIRST_CONTENT, SEP,
};
pub use transformer::{encode, forward, loss_and_grads, Batch, ForwardOutput};
