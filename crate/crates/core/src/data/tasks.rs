//! Synthetic sequence-to-sequence corpora.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::data::{Corpus, Pair, Splits};
use crate::error::{Error, Result};
use crate::numerics::{RngStream, StreamId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Copy,
    Reverse,
    Sort,
    NoisyLexiconTranslation,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Sort => "sort",
            TaskKind::NoisyLexiconTranslation => "noisy-lexicon-translation",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "sort" => Ok(TaskKind::Sort),
            "noisy-lexicon-translation" | "lexicon" => Ok(TaskKind::NoisyLexiconTranslation),
            other => Err(format!(
                "`{other}` is not one of copy, reverse, sort, noisy-lexicon-translation"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Number of content symbols on each side.
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Training pairs.
    pub pairs: usize,
    pub dev_pairs: usize,
    pub test_pairs: usize,
    /// Per-target-token probability of replacement by a random symbol.
    pub noise: f64,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, pairs: usize, seed: u64) -> Self {
        Self {
            kind,
            vocab: 20,
            min_len: 3,
            max_len: 10,
            pairs,
            dev_pairs: (pairs / 5).max(2),
            test_pairs: (pairs / 5).max(2),
            noise: 0.0,
            seed,
        }
    }
}

fn src_symbol(i: usize) -> String {
    format!("s{i}")
}

fn tgt_symbol(i: usize) -> String {
    format!("t{i}")
}

/// Generates disjoint train/dev/test splits. Sources are unique across all
/// splits, so no pair appears twice.
pub fn generate_task(spec: &TaskSpec) -> Result<Splits> {
    if spec.pairs < 10 {
        return Err(Error::Task(format!("need at least 10 pairs, got {}", spec.pairs)));
    }
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::Task(format!(
            "invalid length range {}..={}",
            spec.min_len, spec.max_len
        )));
    }
    if spec.vocab < 2 {
        return Err(Error::Task(format!(
            "vocab of {} symbols is too small for a bijection",
            spec.vocab
        )));
    }
    if !(0.0..=1.0).contains(&spec.noise) {
        return Err(Error::Task(format!("noise {} outside [0, 1]", spec.noise)));
    }
    let total = spec.pairs + spec.dev_pairs + spec.test_pairs;
    let capacity: f64 = (spec.min_len..=spec.max_len)
        .map(|l| (spec.vocab as f64).powi(l as i32))
        .sum();
    if capacity < total as f64 {
        return Err(Error::Task(format!(
            "vocab {} with lengths {}..={} admits {capacity} sequences, {total} requested",
            spec.vocab, spec.min_len, spec.max_len
        )));
    }

    let mut rng = RngStream::new(spec.seed, StreamId::TaskGen);
    let mut lexicon: Vec<usize> = (0..spec.vocab).collect();
    rng.shuffle(&mut lexicon);

    let mut seen = HashSet::new();
    let mut sources = Vec::with_capacity(total);
    let mut attempts = 0usize;
    while sources.len() < total {
        attempts += 1;
        if attempts > 1000 * total {
            return Err(Error::Task("could not draw enough distinct sources".into()));
        }
        let len = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
        let seq: Vec<usize> = (0..len).map(|_| rng.below(spec.vocab)).collect();
        if seen.insert(seq.clone()) {
            sources.push(seq);
        }
    }

    let mut pairs: Vec<Pair> = sources
        .into_iter()
        .map(|src| {
            let mut tgt = clean_target(spec.kind, &src, &lexicon);
            if spec.noise > 0.0 {
                for t in tgt.iter_mut() {
                    if rng.bernoulli(spec.noise) {
                        *t = rng.below(spec.vocab);
                    }
                }
            }
            let tgt_name = if spec.kind == TaskKind::NoisyLexiconTranslation {
                tgt_symbol
            } else {
                src_symbol
            };
            Pair {
                src: src.into_iter().map(src_symbol).collect(),
                tgt: tgt.into_iter().map(tgt_name).collect(),
            }
        })
        .collect();

    let test = pairs.split_off(spec.pairs + spec.dev_pairs);
    let dev = pairs.split_off(spec.pairs);
    Ok(Splits {
        train: pairs,
        dev,
        test,
    })
}

/// Noise-free target for `src` under `kind`.
fn clean_target(kind: TaskKind, src: &[usize], lexicon: &[usize]) -> Vec<usize> {
    match kind {
        TaskKind::Copy => src.to_vec(),
        TaskKind::Reverse => src.iter().rev().cloned().collect(),
        TaskKind::Sort => {
            let mut s = src.to_vec();
            s.sort_unstable();
            s
        }
        TaskKind::NoisyLexiconTranslation => src.iter().map(|&s| lexicon[s]).collect(),
    }
}

/// Every symbol a task can emit, so dev/test never map to `<unk>`.
pub fn task_symbols(spec: &TaskSpec) -> Corpus {
    let src: Vec<String> = (0..spec.vocab).map(src_symbol).collect();
    let tgt: Vec<String> = if spec.kind == TaskKind::NoisyLexiconTranslation {
        (0..spec.vocab).map(tgt_symbol).collect()
    } else {
        src.clone()
    };
    vec![Pair { src, tgt }]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_targets() {
        let lex = [2, 0, 1];
        assert_eq!(clean_target(TaskKind::Copy, &[0, 1, 2], &lex), vec![0, 1, 2]);
        assert_eq!(clean_target(TaskKind::Reverse, &[0, 1, 2], &lex), vec![2, 1, 0]);
        assert_eq!(clean_target(TaskKind::Sort, &[2, 0, 1], &lex), vec![0, 1, 2]);
        assert_eq!(
            clean_target(TaskKind::NoisyLexiconTranslation, &[0, 1, 2], &lex),
            vec![2, 0, 1]
        );
    }

    #[test]
    fn copy_and_reverse_targets() {
        let copy = generate_task(&TaskSpec::new(TaskKind::Copy, 20, 1)).unwrap();
        for p in copy.train.iter().chain(&copy.dev) {
            assert_eq!(p.src, p.tgt);
        }
        let rev = generate_task(&TaskSpec::new(TaskKind::Reverse, 20, 1)).unwrap();
        for p in &rev.train {
            let mut r = p.src.clone();
            r.reverse();
            assert_eq!(r, p.tgt);
        }
    }

    #[test]
    fn sort_target_is_sorted_by_symbol_index() {
        let s = generate_task(&TaskSpec::new(TaskKind::Sort, 20, 3)).unwrap();
        for p in &s.train {
            let idx: Vec<usize> = p.tgt.iter().map(|t| t[1..].parse().unwrap()).collect();
            assert!(idx.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn lexicon_is_a_bijection_without_noise() {
        let s = generate_task(&TaskSpec::new(TaskKind::NoisyLexiconTranslation, 200, 5)).unwrap();
        let mut map = std::collections::HashMap::new();
        for p in &s.train {
            for (a, b) in p.src.iter().zip(&p.tgt) {
                assert_eq!(map.entry(a.clone()).or_insert_with(|| b.clone()), b);
            }
        }
        let images: HashSet<_> = map.values().collect();
        assert_eq!(images.len(), map.len());
    }

    #[test]
    fn splits_are_disjoint() {
        let s = generate_task(&TaskSpec::new(TaskKind::Copy, 100, 9)).unwrap();
        let train: HashSet<_> = s.train.iter().collect();
        assert!(s.dev.iter().chain(&s.test).all(|p| !train.contains(p)));
        let dev: HashSet<_> = s.dev.iter().collect();
        assert!(s.test.iter().all(|p| !dev.contains(p)));
    }

    #[test]
    fn errors() {
        assert!(generate_task(&TaskSpec::new(TaskKind::Copy, 5, 0)).is_err());
        let mut spec = TaskSpec::new(TaskKind::NoisyLexiconTranslation, 10, 0);
        spec.vocab = 1;
        assert!(generate_task(&spec).is_err());
        let mut spec = TaskSpec::new(TaskKind::Copy, 100, 0);
        spec.vocab = 2;
        spec.min_len = 1;
        spec.max_len = 2;
        assert!(generate_task(&spec).is_err());
    }
}
