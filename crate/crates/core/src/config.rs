//! Flat `key = value` run configuration.
//!
//! One assignment per line; `#` starts a comment. The key set is closed:
//! an unknown key is an error that names the closest valid key.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_task, load_tsv, task_symbols, Corpus, Splits, TaskKind, TaskSpec, TsvOptions, Vocabulary};
use crate::dropout::LayerDropScope;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::{build_vocab, model_for_vocab, TrainConfig};

/// Where the corpora come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub task: TaskKind,
    pub pairs: usize,
    pub vocab: usize,
    pub min_len: usize,
    /// Longest generated sentence, or the longest TSV sentence kept.
    pub max_len: usize,
    pub noise: f64,
    pub dev_pairs: usize,
    pub test_pairs: usize,
    pub seed: u64,
    /// Directory with `train.tsv`, `dev.tsv` and optionally `test.tsv`.
    /// Replaces the synthetic task when set.
    pub path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::NoisyLexiconTranslation,
            pairs: 500,
            vocab: 20,
            min_len: 3,
            max_len: 10,
            noise: 0.1,
            dev_pairs: 100,
            test_pairs: 100,
            seed: 1,
            path: None,
        }
    }
}

impl DataConfig {
    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            kind: self.task,
            vocab: self.vocab,
            min_len: self.min_len,
            max_len: self.max_len,
            pairs: self.pairs,
            dev_pairs: self.dev_pairs,
            test_pairs: self.test_pairs,
            noise: self.noise,
            seed: self.seed,
        }
    }

    /// Splits plus a vocabulary over the training side (and, for
    /// synthetic tasks, every symbol the task can emit).
    pub fn load(&self) -> Result<(Splits, Vocabulary)> {
        match &self.path {
            None => {
                let spec = self.task_spec();
                let splits = generate_task(&spec)?;
                let vocab = build_vocab(&splits, &task_symbols(&spec));
                Ok((splits, vocab))
            }
            Some(dir) => {
                let opts = TsvOptions {
                    max_len: self.max_len,
                    strict: true,
                };
                let read = |name: &str| -> Result<Corpus> {
                    let (corpus, report) = load_tsv(&dir.join(name), opts)?;
                    for w in report.warnings {
                        eprintln!("warning: {w}");
                    }
                    Ok(corpus)
                };
                let test_path = dir.join("test.tsv");
                let splits = Splits {
                    train: read("train.tsv")?,
                    dev: read("dev.tsv")?,
                    test: if test_path.exists() {
                        read("test.tsv")?
                    } else {
                        Vec::new()
                    },
                };
                let vocab = build_vocab(&splits, &Vec::new());
                Ok((splits, vocab))
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Vocabulary sizes are filled in from the data.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

pub const KEYS: &[&str] = &[
    "model.layers",
    "model.enc_layers",
    "model.dec_layers",
    "model.d_model",
    "model.d_ff",
    "model.heads",
    "model.max_len",
    "model.share_embeddings",
    "model.ln_eps",
    "drop.fd1",
    "drop.fd2",
    "drop.fd3",
    "drop.fd4",
    "drop.residual",
    "drop.layerdrop",
    "drop.layerdrop_scope",
    "drop.qkv_proj",
    "drop.logits",
    "drop.encoder_drop",
    "drop.dd_keep",
    "drop.dd_token",
    "train.epochs",
    "train.batch",
    "train.lr",
    "train.warmup",
    "train.beta1",
    "train.beta2",
    "train.eps",
    "train.wd",
    "train.smoothing",
    "train.clip",
    "train.seed",
    "train.eval_interval",
    "train.patience",
    "train.dev_bleu",
    "data.task",
    "data.pairs",
    "data.vocab",
    "data.minlen",
    "data.maxlen",
    "data.noise",
    "data.dev_pairs",
    "data.test_pairs",
    "data.seed",
    "data.path",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| Error::BadValue {
        key: key.into(),
        msg: format!("`{value}`: {e}"),
    })
}

/// Nearest valid key by edit distance, if it is plausibly a typo.
pub fn suggest(key: &str) -> Option<String> {
    KEYS.iter()
        .map(|k| (strsim::levenshtein(key, k), *k))
        .min()
        .filter(|(d, k)| *d <= 3.max(k.len() / 3))
        .map(|(_, k)| k.to_string())
}

impl RunConfig {
    /// Defaults overridden by the assignments in `text`.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected `key = value`, found `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.iter().any(|k| k == key) {
                return Err(parse_err(format!("`{key}` is assigned twice")));
            }
            cfg.set(key, value)?;
            seen.push(key.to_string());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, path)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (m, t, d) = (&mut self.model, &mut self.train, &mut self.data);
        let s = &mut t.dropout;
        match key {
            "model.layers" => {
                m.enc_layers = parse(key, value)?;
                m.dec_layers = m.enc_layers;
            }
            "model.enc_layers" => m.enc_layers = parse(key, value)?,
            "model.dec_layers" => m.dec_layers = parse(key, value)?,
            "model.d_model" => m.d_model = parse(key, value)?,
            "model.d_ff" => m.d_ff = parse(key, value)?,
            "model.heads" => m.heads = parse(key, value)?,
            "model.max_len" => m.max_len = parse(key, value)?,
            "model.share_embeddings" => m.share_embeddings = parse(key, value)?,
            "model.ln_eps" => m.ln_eps = parse(key, value)?,
            "drop.fd1" => s.fd1_rate = parse(key, value)?,
            "drop.fd2" => s.fd2_rate = parse(key, value)?,
            "drop.fd3" => s.fd3_rate = parse(key, value)?,
            "drop.fd4" => s.fd4_rate = parse(key, value)?,
            "drop.residual" => m.residual_dropout = parse(key, value)?,
            "drop.layerdrop" => s.layerdrop_rate = parse(key, value)?,
            "drop.layerdrop_scope" => s.layerdrop_scope = parse::<LayerDropScope>(key, value)?,
            "drop.qkv_proj" => s.qkv_proj_rate = parse(key, value)?,
            "drop.logits" => s.logits_drop_rate = parse(key, value)?,
            "drop.encoder_drop" => s.encoder_drop_rate = parse(key, value)?,
            "drop.dd_keep" => s.dd_keep_prob = parse(key, value)?,
            "drop.dd_token" => s.dd_token_prob = parse(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.batch" => t.batch_size = parse(key, value)?,
            "train.lr" => t.peak_lr = parse(key, value)?,
            "train.warmup" => t.warmup = parse(key, value)?,
            "train.beta1" => t.beta1 = parse(key, value)?,
            "train.beta2" => t.beta2 = parse(key, value)?,
            "train.eps" => t.eps = parse(key, value)?,
            "train.wd" => t.weight_decay = parse(key, value)?,
            "train.smoothing" => t.label_smoothing = parse(key, value)?,
            "train.clip" => t.clip_norm = parse(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "train.eval_interval" => t.eval_interval = parse(key, value)?,
            "train.patience" => t.patience = parse(key, value)?,
            "train.dev_bleu" => t.dev_bleu = parse(key, value)?,
            "data.task" => d.task = parse(key, value)?,
            "data.pairs" => d.pairs = parse(key, value)?,
            "data.vocab" => d.vocab = parse(key, value)?,
            "data.minlen" => d.min_len = parse(key, value)?,
            "data.maxlen" => d.max_len = parse(key, value)?,
            "data.noise" => d.noise = parse(key, value)?,
            "data.dev_pairs" => d.dev_pairs = parse(key, value)?,
            "data.test_pairs" => d.test_pairs = parse(key, value)?,
            "data.seed" => d.seed = parse(key, value)?,
            "data.path" => d.path = (!value.is_empty()).then(|| PathBuf::from(value)),
            _ => {
                return Err(Error::UnknownKey {
                    key: key.into(),
                    suggestion: suggest(key),
                })
            }
        }
        Ok(())
    }

    /// Model and training settings, checked before any data is read.
    pub fn validate(&self) -> Result<()> {
        let mut probe = self.model.clone();
        probe.src_vocab = probe.src_vocab.max(1);
        probe.tgt_vocab = probe.tgt_vocab.max(1);
        probe.validate()?;
        self.train.validate()?;
        if self.data.path.is_none() && self.data.max_len + 2 > self.model.max_len {
            return Err(Error::BadValue {
                key: "data.maxlen".into(),
                msg: format!(
                    "sentences of {} tokens plus markers exceed model.max_len = {}",
                    self.data.max_len, self.model.max_len
                ),
            });
        }
        Ok(())
    }

    /// Model config sized for `vocab`.
    pub fn model_for(&self, vocab: &Vocabulary) -> ModelConfig {
        model_for_vocab(self.model.clone(), vocab)
    }

    /// Every key with its resolved value, in [`KEYS`] order. Parsing the
    /// output reproduces `self` (vocabulary sizes aside).
    pub fn to_text(&self) -> String {
        let (m, t, d) = (&self.model, &self.train, &self.data);
        let s = &t.dropout;
        let mut out = String::new();
        for key in KEYS {
            let value = match *key {
                "model.layers" => continue,
                "model.enc_layers" => m.enc_layers.to_string(),
                "model.dec_layers" => m.dec_layers.to_string(),
                "model.d_model" => m.d_model.to_string(),
                "model.d_ff" => m.d_ff.to_string(),
                "model.heads" => m.heads.to_string(),
                "model.max_len" => m.max_len.to_string(),
                "model.share_embeddings" => m.share_embeddings.to_string(),
                "model.ln_eps" => format!("{:?}", m.ln_eps),
                "drop.fd1" => format!("{:?}", s.fd1_rate),
                "drop.fd2" => format!("{:?}", s.fd2_rate),
                "drop.fd3" => format!("{:?}", s.fd3_rate),
                "drop.fd4" => format!("{:?}", s.fd4_rate),
                "drop.residual" => format!("{:?}", m.residual_dropout),
                "drop.layerdrop" => format!("{:?}", s.layerdrop_rate),
                "drop.layerdrop_scope" => s.layerdrop_scope.as_str().to_string(),
                "drop.qkv_proj" => format!("{:?}", s.qkv_proj_rate),
                "drop.logits" => format!("{:?}", s.logits_drop_rate),
                "drop.encoder_drop" => format!("{:?}", s.encoder_drop_rate),
                "drop.dd_keep" => format!("{:?}", s.dd_keep_prob),
                "drop.dd_token" => format!("{:?}", s.dd_token_prob),
                "train.epochs" => t.epochs.to_string(),
                "train.batch" => t.batch_size.to_string(),
                "train.lr" => format!("{:?}", t.peak_lr),
                "train.warmup" => t.warmup.to_string(),
                "train.beta1" => format!("{:?}", t.beta1),
                "train.beta2" => format!("{:?}", t.beta2),
                "train.eps" => format!("{:?}", t.eps),
                "train.wd" => format!("{:?}", t.weight_decay),
                "train.smoothing" => format!("{:?}", t.label_smoothing),
                "train.clip" => format!("{:?}", t.clip_norm),
                "train.seed" => t.seed.to_string(),
                "train.eval_interval" => t.eval_interval.to_string(),
                "train.patience" => t.patience.to_string(),
                "train.dev_bleu" => t.dev_bleu.to_string(),
                "data.task" => d.task.as_str().to_string(),
                "data.pairs" => d.pairs.to_string(),
                "data.vocab" => d.vocab.to_string(),
                "data.minlen" => d.min_len.to_string(),
                "data.maxlen" => d.max_len.to_string(),
                "data.noise" => format!("{:?}", d.noise),
                "data.dev_pairs" => d.dev_pairs.to_string(),
                "data.test_pairs" => d.test_pairs.to_string(),
                "data.seed" => d.seed.to_string(),
                "data.path" => d.path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
                other => unreachable!("key {other} has no printer"),
            };
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse_str(text: &str) -> Result<RunConfig> {
        RunConfig::parse(text, Path::new("run.cfg"))
    }

    #[test]
    fn comments_blank_lines_and_overrides() {
        let c = parse_str("# header\n\nmodel.d_model = 16  # narrow\ndrop.fd2=0.3\ntrain.seed = 9\n").unwrap();
        assert_eq!(c.model.d_model, 16);
        assert_eq!(c.train.dropout.fd2_rate, 0.3);
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.model.d_ff, ModelConfig::default().d_ff);
    }

    #[test]
    fn unknown_key_names_nearest() {
        match parse_str("train.warmpu = 10\n") {
            Err(Error::UnknownKey { key, suggestion }) => {
                assert_eq!(key, "train.warmpu");
                assert_eq!(suggestion.as_deref(), Some("train.warmup"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_str("zzz = 1\n"),
            Err(Error::UnknownKey { suggestion: None, .. })
        ));
    }

    #[test]
    fn bad_lines_and_values() {
        assert!(matches!(
            parse_str("model.d_model\n"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(parse_str("train.lr = fast\n"), Err(Error::BadValue { .. })));
        assert!(matches!(
            parse_str("train.seed = 1\ntrain.seed = 2\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(parse_str("drop.fd1 = 1.5\n"), Err(Error::InvalidRate { .. })));
        assert!(matches!(parse_str("train.warmup = 0\n"), Err(Error::BadValue { .. })));
    }

    #[test]
    fn printed_config_parses_back() {
        let mut c = RunConfig::default();
        c.set("drop.layerdrop_scope", "both").unwrap();
        c.set("data.path", "corpora/iwslt").unwrap();
        c.set("train.lr", "0.0007").unwrap();
        let text = c.to_text();
        assert_eq!(parse_str(&text).unwrap(), c);
        assert_eq!(text.lines().count(), KEYS.len() - 1);
    }

    #[test]
    fn layers_sets_both_stacks() {
        let c = parse_str("model.layers = 3\n").unwrap();
        assert_eq!((c.model.enc_layers, c.model.dec_layers), (3, 3));
    }
}
