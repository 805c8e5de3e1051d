//! Greedy and beam decoding, corpus BLEU, exact match and token accuracy.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{sequential_batches, Batch, PaddedSeqs, Pair, Vocabulary, BOS, EOS};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::trainer::corpus_loss;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum DecodeMode {
    Greedy,
    Beam { width: usize, length_penalty: f64 },
}

impl DecodeMode {
    /// Width 5, length penalty 1.0.
    pub fn default_beam() -> Self {
        DecodeMode::Beam {
            width: 5,
            length_penalty: 1.0,
        }
    }
}

/// Longest output for a source of `src_len` padded positions.
fn max_steps(model: &Model, src_len: usize) -> usize {
    (src_len + 10).min(model.config().max_len - 1).max(1)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Content tokens (no bos/eos) chosen greedily for each source row.
pub fn greedy_decode(model: &Model, src: &PaddedSeqs) -> Result<Vec<Vec<usize>>> {
    let memory = model.encode(src)?;
    let mut prefixes: Vec<Vec<usize>> = vec![vec![BOS]; src.batch];
    let mut live: Vec<usize> = (0..src.batch).collect();
    let mut done = vec![false; src.batch];
    for _ in 0..max_steps(model, src.len) {
        if live.is_empty() {
            break;
        }
        let batch: Vec<Vec<usize>> = live.iter().map(|&b| prefixes[b].clone()).collect();
        let lp = model.next_token_log_probs(&memory, src, &batch, &live)?;
        for (i, &b) in live.iter().enumerate() {
            let tok = argmax(lp.row(i));
            prefixes[b].push(tok);
            if tok == EOS {
                done[b] = true;
            }
        }
        live.retain(|&b| !done[b]);
    }
    Ok(prefixes
        .into_iter()
        .map(|p| p.into_iter().skip(1).take_while(|&t| t != EOS).collect())
        .collect())
}

#[derive(Clone, Debug)]
struct Hyp {
    tokens: Vec<usize>,
    logprob: f64,
}

/// Length-normalised beam search. Scores are `logprob / len^penalty`,
/// where `len` counts generated tokens including eos. Width 1 reproduces
/// greedy decoding exactly.
pub fn beam_decode(model: &Model, src: &PaddedSeqs, width: usize, length_penalty: f64) -> Result<Vec<Vec<usize>>> {
    if width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let memory = model.encode(src)?;
    let score = |h: &Hyp| h.logprob / ((h.tokens.len() - 1) as f64).powf(length_penalty);
    let mut beams: Vec<Vec<Hyp>> = (0..src.batch)
        .map(|_| {
            vec![Hyp {
                tokens: vec![BOS],
                logprob: 0.0,
            }]
        })
        .collect();
    let mut finished: Vec<Vec<Hyp>> = vec![Vec::new(); src.batch];
    for _ in 0..max_steps(model, src.len) {
        let mut prefixes = Vec::new();
        let mut owner = Vec::new();
        for (b, hyps) in beams.iter().enumerate() {
            for h in hyps {
                prefixes.push(h.tokens.clone());
                owner.push(b);
            }
        }
        if prefixes.is_empty() {
            break;
        }
        let lp = model.next_token_log_probs(&memory, src, &prefixes, &owner)?;
        let mut cursor = 0;
        for b in 0..src.batch {
            let hyps = std::mem::take(&mut beams[b]);
            let mut cands: Vec<(f64, usize, usize)> = Vec::new();
            for (hi, h) in hyps.iter().enumerate() {
                let row = lp.row(cursor + hi);
                for (tok, &l) in row.iter().enumerate() {
                    cands.push((h.logprob + l, hi, tok));
                }
            }
            cursor += hyps.len();
            // stable: ties keep hypothesis then token order, like argmax
            cands.sort_by(|a, b| b.0.total_cmp(&a.0));
            let mut next = Vec::with_capacity(width);
            for (rank, &(logprob, hi, tok)) in cands.iter().enumerate() {
                if next.len() == width {
                    break;
                }
                let mut tokens = hyps[hi].tokens.clone();
                tokens.push(tok);
                let hyp = Hyp { tokens, logprob };
                if tok == EOS {
                    if rank < width {
                        finished[b].push(hyp);
                    }
                } else {
                    next.push(hyp);
                }
            }
            if finished[b].len() < width {
                beams[b] = next;
            }
        }
    }
    for b in 0..src.batch {
        let rest = std::mem::take(&mut beams[b]);
        finished[b].extend(rest);
    }
    Ok(finished
        .into_iter()
        .map(|hyps| {
            let best = hyps
                .iter()
                .enumerate()
                .max_by(|(i, x), (j, y)| score(x).total_cmp(&score(y)).then(j.cmp(i)))
                .map(|(_, h)| h.tokens.clone())
                .unwrap_or_default();
            best.into_iter().skip(1).take_while(|&t| t != EOS).collect()
        })
        .collect())
}

pub fn decode(model: &Model, src: &PaddedSeqs, mode: DecodeMode) -> Result<Vec<Vec<usize>>> {
    match mode {
        DecodeMode::Greedy => greedy_decode(model, src),
        DecodeMode::Beam { width, length_penalty } => beam_decode(model, src, width, length_penalty),
    }
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4 on a 0-100 scale with uniform weights and the brevity
/// penalty. Counts for n >= 2 get add-one smoothing; an empty 1-gram match
/// gives 0.
pub fn corpus_bleu(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::shape(
            "corpus_bleu",
            format!("{} candidates, {} references", candidates.len(), references.len()),
        ));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        c_len += c.len();
        r_len += r.len();
        for n in 1..=4 {
            let rc = ngrams(r, n);
            for (g, k) in ngrams(c, n) {
                matches[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += c.len().saturating_sub(n - 1);
        }
    }
    if c_len == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_p = 0.0;
    for n in 0..4 {
        let (m, t) = if n == 0 {
            (matches[0] as f64, totals[0] as f64)
        } else {
            (matches[n] as f64 + 1.0, totals[n] as f64 + 1.0)
        };
        log_p += 0.25 * (m / t).ln();
    }
    let bp = if c_len >= r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    Ok(100.0 * bp * log_p.exp())
}

fn decode_corpus(
    model: &Model,
    corpus: &[Pair],
    vocab: &Vocabulary,
    batch_size: usize,
    mode: DecodeMode,
) -> Result<Vec<Vec<String>>> {
    let mut out = Vec::with_capacity(corpus.len());
    for b in sequential_batches(corpus, batch_size, vocab) {
        for ids in decode(model, &b.src, mode)? {
            out.push(vocab.decode_tokens(&ids));
        }
    }
    Ok(out)
}

/// Greedy corpus BLEU against the reference targets.
pub fn greedy_bleu(model: &Model, corpus: &[Pair], vocab: &Vocabulary, batch_size: usize) -> Result<f64> {
    let hyps = decode_corpus(model, corpus, vocab, batch_size, DecodeMode::Greedy)?;
    let refs: Vec<Vec<String>> = corpus.iter().map(|p| p.tgt.clone()).collect();
    corpus_bleu(&hyps, &refs)
}

/// Fraction of non-pad target tokens whose teacher-forced argmax is right.
pub fn token_accuracy(model: &Model, batches: &[Batch]) -> Result<f64> {
    let (mut right, mut total) = (0usize, 0usize);
    for b in batches {
        let logits = model.logits(b, None, None)?;
        for (row, t) in b.decoder_targets().iter().enumerate() {
            if let Some(t) = t {
                total += 1;
                right += usize::from(argmax(logits.row(row)) == *t);
            }
        }
    }
    if total == 0 {
        return Err(Error::Empty("target tokens"));
    }
    Ok(right as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub decode: DecodeMode,
    pub pairs: usize,
    pub loss: f64,
    pub bleu: f64,
    pub exact_match: f64,
    pub token_accuracy: f64,
    pub hypotheses: Vec<String>,
}

pub fn evaluate(
    model: &Model,
    corpus: &[Pair],
    vocab: &Vocabulary,
    mode: DecodeMode,
    batch_size: usize,
    smoothing: f64,
) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::Empty("evaluation corpus"));
    }
    let batches = sequential_batches(corpus, batch_size, vocab);
    let hyps = decode_corpus(model, corpus, vocab, batch_size, mode)?;
    let refs: Vec<Vec<String>> = corpus.iter().map(|p| p.tgt.clone()).collect();
    let exact = hyps.iter().zip(&refs).filter(|(h, r)| h == r).count();
    Ok(EvalReport {
        decode: mode,
        pairs: corpus.len(),
        loss: corpus_loss(model, &batches, smoothing)?,
        bleu: corpus_bleu(&hyps, &refs)?,
        exact_match: exact as f64 / corpus.len() as f64,
        token_accuracy: token_accuracy(model, &batches)?,
        hypotheses: hyps.iter().map(|h| h.join(" ")).collect(),
    })
}

/// Fraction of rows whose arg-max class matches `labels`.
pub fn classification_accuracy(model: &Model, src: &PaddedSeqs, labels: &[usize]) -> Result<f64> {
    let logits = model.classify_logits(src, None, None)?;
    if labels.len() != logits.rows() || labels.is_empty() {
        return Err(Error::shape(
            "classification_accuracy",
            format!("{} labels for {} rows", labels.len(), logits.rows()),
        ));
    }
    let right = labels
        .iter()
        .enumerate()
        .filter(|(i, &l)| argmax(logits.row(*i)) == l)
        .count();
    Ok(right as f64 / labels.len() as f64)
}
