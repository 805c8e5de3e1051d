//! The small trained translator used for regulariser checks: a 2 + 2 layer,
//! width-8 model over a 20-token vocabulary (4 reserved, 8 source and 8
//! target symbols), trained without dropout on a noise-free lexicon task.

use crate::data::{generate_task, sequential_batches, task_symbols, Batch, Splits, TaskKind, TaskSpec, Vocabulary};
use crate::dropout::DropoutSpec;
use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::oracle::DropoutKind;
use crate::trainer::{build_vocab, model_for_vocab, train, RunOutputs, TrainConfig};

/// Dev sentences in the probe batch.
pub const PROBE_ROWS: usize = 8;

pub struct ToyFixture {
    pub model: Model,
    pub vocab: Vocabulary,
    pub splits: Splits,
    /// The first [`PROBE_ROWS`] dev pairs as one batch.
    pub probe_batch: Batch,
}

pub fn toy_task(seed: u64) -> TaskSpec {
    TaskSpec {
        vocab: 8,
        min_len: 3,
        max_len: 6,
        ..TaskSpec::new(TaskKind::NoisyLexiconTranslation, 200, seed)
    }
}

pub fn toy_model_config(vocab: &Vocabulary) -> ModelConfig {
    model_for_vocab(
        ModelConfig {
            enc_layers: 2,
            dec_layers: 2,
            d_model: 8,
            d_ff: 16,
            heads: 2,
            max_len: 16,
            residual_dropout: 0.0,
            ..ModelConfig::default()
        },
        vocab,
    )
}

pub fn toy_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 30,
        batch_size: 16,
        peak_lr: 3e-3,
        warmup: 50,
        seed,
        dropout: DropoutSpec::none(),
        dev_bleu: false,
        ..TrainConfig::default()
    }
}

/// Trains the fixture; about a second of CPU.
pub fn toy_translator(seed: u64) -> Result<ToyFixture> {
    let task = toy_task(3);
    let splits = generate_task(&task)?;
    let vocab = build_vocab(&splits, &task_symbols(&task));
    let model = Model::new(toy_model_config(&vocab), seed)?;
    let model = train(model, &splits, &vocab, &toy_train_config(seed), &RunOutputs::default())?.final_model;
    let probe_batch = sequential_batches(&splits.dev[..PROBE_ROWS], PROBE_ROWS, &vocab).remove(0);
    Ok(ToyFixture {
        model,
        vocab,
        splits,
        probe_batch,
    })
}

/// Probe slot per dropout kind: the last decoder FFN activation, the last
/// decoder block output, and the source embeddings.
pub fn default_slot(kind: DropoutKind) -> &'static str {
    match kind {
        DropoutKind::Feature => "dec.1.ffn_act",
        DropoutKind::Structure => "dec.1.out",
        DropoutKind::Data => "src.embed",
    }
}

/// Only consumer is the following layer norm.
pub const ORTHOGONALITY_SLOT: &str = "dec.0.ffn_sum";
