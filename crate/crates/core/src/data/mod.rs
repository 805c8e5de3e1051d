//! Vocabulary, corpora, synthetic tasks and batching.

use serde::{Deserialize, Serialize};

pub mod batch;
pub mod tasks;
pub mod tsv;
pub mod vocab;

pub use batch::{make_batches, sequential_batches, train_view_with_data_dropout, Batch, PaddedSeqs};
pub use tasks::{generate_task, task_symbols, TaskKind, TaskSpec};
pub use tsv::{load_tsv, write_tsv, LoadReport, TsvOptions};
pub use vocab::{Vocabulary, BOS, EOS, PAD, UNK};

/// Whitespace-tokenized sentence pair.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pair {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
}

pub type Corpus = Vec<Pair>;

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
}
