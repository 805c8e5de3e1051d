use crate::data::vocab::{Vocabulary, BOS, EOS, PAD};
use crate::data::Pair;
use crate::dropout::{apply_two_stage_data_dropout, DropoutSpec};
use crate::error::Result;
use crate::numerics::RngStream;

/// Length-bucket width used before shuffling.
pub const BUCKET_WIDTH: usize = 8;

/// Right-padded id matrix; every row is `bos ... eos` followed by pads.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedSeqs {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub len: usize,
    /// Unpadded lengths, bos and eos included.
    pub lengths: Vec<usize>,
}

impl PaddedSeqs {
    /// Wraps each content sequence in bos/eos and pads to the longest.
    pub fn from_content(seqs: &[Vec<usize>]) -> Self {
        let len = seqs.iter().map(|s| s.len() + 2).max().unwrap_or(2);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut lengths = Vec::with_capacity(seqs.len());
        for s in seqs {
            ids.push(BOS);
            ids.extend_from_slice(s);
            ids.push(EOS);
            ids.extend(std::iter::repeat_n(PAD, len - s.len() - 2));
            lengths.push(s.len() + 2);
        }
        Self {
            ids,
            batch: seqs.len(),
            len,
            lengths,
        }
    }

    /// Pads rows that are already complete (no bos/eos added).
    pub fn from_rows(rows: &[Vec<usize>]) -> Self {
        let len = rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len() * len);
        for r in rows {
            ids.extend_from_slice(r);
            ids.extend(std::iter::repeat_n(PAD, len - r.len()));
        }
        Self {
            ids,
            batch: rows.len(),
            len,
            lengths: rows.iter().map(Vec::len).collect(),
        }
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.len..(b + 1) * self.len]
    }

    /// Row without padding.
    pub fn unpadded(&self, b: usize) -> &[usize] {
        &self.row(b)[..self.lengths[b]]
    }

    /// Content tokens between bos and eos.
    pub fn content(&self, b: usize) -> &[usize] {
        let r = self.unpadded(b);
        &r[1..r.len() - 1]
    }

    /// `true` for non-pad positions, flattened like `ids`.
    pub fn valid(&self) -> Vec<bool> {
        self.ids.iter().map(|&i| i != PAD).collect()
    }

    pub fn mask_sum(&self, b: usize) -> usize {
        self.row(b).iter().filter(|&&i| i != PAD).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub src: PaddedSeqs,
    /// Full target rows, `bos ... eos`.
    pub tgt: PaddedSeqs,
}

impl Batch {
    pub fn from_content(src: &[Vec<usize>], tgt: &[Vec<usize>]) -> Self {
        Self {
            src: PaddedSeqs::from_content(src),
            tgt: PaddedSeqs::from_content(tgt),
        }
    }

    pub fn size(&self) -> usize {
        self.src.batch
    }

    /// Decoder input: target rows without their last column.
    pub fn decoder_input(&self) -> PaddedSeqs {
        let len = self.tgt.len - 1;
        let mut ids = Vec::with_capacity(self.tgt.batch * len);
        for b in 0..self.tgt.batch {
            let row = self.tgt.row(b);
            ids.extend(row[..len].iter().map(|&t| if t == EOS { PAD } else { t }));
        }
        Self::shifted(
            ids,
            self.tgt.batch,
            len,
            self.tgt.lengths.iter().map(|l| l - 1).collect(),
        )
    }

    /// Next-token targets aligned with [`Batch::decoder_input`]; pads are `None`.
    pub fn decoder_targets(&self) -> Vec<Option<usize>> {
        let mut out = Vec::with_capacity(self.tgt.batch * (self.tgt.len - 1));
        for b in 0..self.tgt.batch {
            out.extend(self.tgt.row(b)[1..].iter().map(|&t| (t != PAD).then_some(t)));
        }
        out
    }

    fn shifted(ids: Vec<usize>, batch: usize, len: usize, lengths: Vec<usize>) -> PaddedSeqs {
        PaddedSeqs {
            ids,
            batch,
            len,
            lengths,
        }
    }

    pub fn target_tokens(&self) -> usize {
        self.decoder_targets().iter().filter(|t| t.is_some()).count()
    }
}

/// Tokenizes, buckets by length, shuffles within and across buckets, and
/// pads each batch to its own maximum.
pub fn make_batches(corpus: &[Pair], batch_size: usize, vocab: &Vocabulary, rng: &mut RngStream) -> Vec<Batch> {
    let batch_size = batch_size.max(1);
    let encoded: Vec<(Vec<usize>, Vec<usize>)> = corpus
        .iter()
        .map(|p| (vocab.encode(&p.src), vocab.encode(&p.tgt)))
        .collect();
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    rng.shuffle(&mut order);
    order.sort_by_key(|&i| encoded[i].0.len().max(encoded[i].1.len()) / BUCKET_WIDTH);

    let mut batches = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let bucket = |i: usize| encoded[i].0.len().max(encoded[i].1.len()) / BUCKET_WIDTH;
        let key = bucket(order[start]);
        let mut end = start;
        while end < order.len() && end - start < batch_size && bucket(order[end]) == key {
            end += 1;
        }
        let idx = &order[start..end];
        let src: Vec<Vec<usize>> = idx.iter().map(|&i| encoded[i].0.clone()).collect();
        let tgt: Vec<Vec<usize>> = idx.iter().map(|&i| encoded[i].1.clone()).collect();
        batches.push(Batch::from_content(&src, &tgt));
        start = end;
    }
    rng.shuffle(&mut batches);
    batches
}

/// Batches in corpus order, for evaluation.
pub fn sequential_batches(corpus: &[Pair], batch_size: usize, vocab: &Vocabulary) -> Vec<Batch> {
    corpus
        .chunks(batch_size.max(1))
        .map(|chunk| {
            let src: Vec<Vec<usize>> = chunk.iter().map(|p| vocab.encode(&p.src)).collect();
            let tgt: Vec<Vec<usize>> = chunk.iter().map(|p| vocab.encode(&p.tgt)).collect();
            Batch::from_content(&src, &tgt)
        })
        .collect()
}

/// Applies two-stage data dropout to every source row (bos/eos kept) and
/// re-pads. Targets are untouched.
pub fn train_view_with_data_dropout(batch: &Batch, spec: &DropoutSpec, rng: &mut RngStream) -> Result<Batch> {
    if !spec.has_data_dropout() {
        return Ok(batch.clone());
    }
    let mut src = Vec::with_capacity(batch.size());
    for b in 0..batch.size() {
        let content = batch.src.content(b);
        if content.is_empty() {
            src.push(Vec::new());
        } else {
            src.push(apply_two_stage_data_dropout(content, spec, rng)?);
        }
    }
    Ok(Batch {
        src: PaddedSeqs::from_content(&src),
        tgt: batch.tgt.clone(),
    })
}
