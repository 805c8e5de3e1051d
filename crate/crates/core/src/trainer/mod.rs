//! Training loop, decoding and evaluation, ablation and rate sweeps.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{make_batches, sequential_batches, train_view_with_data_dropout, Batch, Corpus, Splits, Vocabulary};
use crate::dropout::DropoutSpec;
use crate::error::{Error, Result};
use crate::model::{checkpoint, Model, ModelConfig, TrainRngs};
use crate::numerics::{pairwise_sum, RngStream, StreamId, Tensor};

pub mod eval;
pub mod experiments;

pub use eval::{beam_decode, corpus_bleu, evaluate, greedy_decode, DecodeMode, EvalReport};
pub use experiments::{ablate, ablation_variants, sweep, AblationRow, SweepAxis, SweepRecord, Variant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied to every parameter.
    pub weight_decay: f64,
    pub label_smoothing: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    pub dropout: DropoutSpec,
    /// Epochs between dev evaluations.
    pub eval_interval: usize,
    /// Stop after this many evaluations without a dev-loss improvement;
    /// 0 disables early stopping.
    pub patience: usize,
    /// Greedy-decode the dev set at every evaluation for BLEU.
    pub dev_bleu: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            peak_lr: 1e-3,
            warmup: 200,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 1e-4,
            label_smoothing: 0.1,
            clip_norm: 1.0,
            seed: 1,
            dropout: DropoutSpec::unidrop(),
            eval_interval: 1,
            patience: 0,
            dev_bleu: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(Error::BadValue {
                key: key.into(),
                msg: msg.into(),
            })
        };
        if self.warmup < 1 {
            return bad("train.warmup", "must be at least 1");
        }
        if self.batch_size < 1 {
            return bad("train.batch", "must be at least 1");
        }
        if self.eval_interval < 1 {
            return bad("train.eval_interval", "must be at least 1");
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad("train.lr", "must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("train.beta1", "Adam betas must lie in [0, 1)");
        }
        if self.eps <= 0.0 {
            return bad("train.eps", "must be positive");
        }
        if self.weight_decay < 0.0 {
            return bad("train.wd", "must be non-negative");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("train.smoothing", "must lie in [0, 1)");
        }
        if self.clip_norm < 0.0 {
            return bad("train.clip", "must be non-negative (0 disables)");
        }
        self.dropout.validate()
    }
}

/// Inverse-square-root schedule with linear warmup; `step` starts at 1 and
/// the rate equals `peak` at `step == warmup`.
pub fn learning_rate(step: usize, peak: f64, warmup: usize) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    peak * (s.powf(-0.5)).min(s * w.powf(-1.5)) * w.sqrt()
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    let sq: Vec<f64> = grads.iter().map(|g| g.data().iter().map(|x| x * x).sum()).collect();
    pairwise_sum(&sq).sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(params: &[Tensor], beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::shape(
                "adam",
                format!("{} params, {} grads", params.len(), grads.len()),
            ));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            p.check_same_shape(g, "adam")?;
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                p[i] -= lr * (update + self.weight_decay * p[i]);
            }
        }
        Ok(())
    }
}

/// One record per evaluation. Wall-clock time is kept out so the metrics
/// file is reproducible byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    /// Greedy dev BLEU, when enabled.
    pub dev_bleu: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub epoch: usize,
    pub step: usize,
    pub wall_clock_seconds: f64,
}

/// State of one training run, advanced a step at a time.
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    adam: Adam,
    rngs: TrainRngs,
    data_rng: RngStream,
    shuffle_rng: RngStream,
    step: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub tokens: usize,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(
            &model.params.tensors,
            config.beta1,
            config.beta2,
            config.eps,
            config.weight_decay,
        );
        let seed = config.seed;
        Ok(Self {
            model,
            adam,
            rngs: TrainRngs::new(seed),
            data_rng: RngStream::new(seed, StreamId::DataMask),
            shuffle_rng: RngStream::new(seed, StreamId::DataShuffle),
            step: 0,
            config,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Shuffled, length-bucketed batches for the next epoch.
    pub fn epoch_batches(&mut self, corpus: &[crate::data::Pair], vocab: &Vocabulary) -> Vec<Batch> {
        make_batches(corpus, self.config.batch_size, vocab, &mut self.shuffle_rng)
    }

    /// One optimiser step. With `use_dropout == false` the forward pass
    /// takes the evaluation path and no mask stream is touched.
    pub fn train_step(&mut self, batch: &Batch, use_dropout: bool) -> Result<StepStats> {
        self.step += 1;
        let lr = learning_rate(self.step, self.config.peak_lr, self.config.warmup);
        let spec = self.config.dropout.clone();
        let (loss, mut grads, tokens) = if use_dropout {
            let view = train_view_with_data_dropout(batch, &spec, &mut self.data_rng)?;
            let (l, g) =
                self.model
                    .loss_and_grads(&view, self.config.label_smoothing, Some((&spec, &mut self.rngs)))?;
            (l, g, view.target_tokens())
        } else {
            let (l, g) = self.model.loss_and_grads(batch, self.config.label_smoothing, None)?;
            (l, g, batch.target_tokens())
        };
        let grad_norm = clip_global_norm(&mut grads, self.config.clip_norm);
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                loss,
                lr,
                grad_norm,
            });
        }
        self.adam.step(&mut self.model.params.tensors, &grads, lr)?;
        if !self.model.params.all_finite() {
            return Err(Error::Diverged {
                step: self.step,
                loss,
                lr,
                grad_norm,
            });
        }
        Ok(StepStats {
            step: self.step,
            loss,
            grad_norm,
            lr,
            tokens,
        })
    }
}

/// Token-weighted mean loss over `batches` with every dropout off.
pub fn corpus_loss(model: &Model, batches: &[Batch], smoothing: f64) -> Result<f64> {
    let mut sums = Vec::with_capacity(batches.len());
    let mut tokens = 0usize;
    for b in batches {
        let n = b.target_tokens();
        sums.push(model.loss(b, smoothing, None, None)? * n as f64);
        tokens += n;
    }
    if tokens == 0 {
        return Err(Error::Empty("target tokens"));
    }
    Ok(pairwise_sum(&sums) / tokens as f64)
}

/// Where a run writes its artifacts; all optional.
#[derive(Clone, Debug, Default)]
pub struct RunOutputs {
    pub dir: Option<PathBuf>,
    /// Print one progress line per evaluation to stdout.
    pub progress: bool,
}

impl RunOutputs {
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: Some(dir.into()),
            progress: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_model: Model,
    pub best_model: Model,
    pub records: Vec<MetricsRecord>,
    pub best_dev_loss: f64,
    pub best_epoch: usize,
    pub steps: usize,
}

impl TrainOutcome {
    pub fn final_dev_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.dev_loss)
    }
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const VOCAB_FILE: &str = "vocab.txt";

fn append_json<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(record)?)?;
    Ok(())
}

/// Trains `model` on `splits.train`, evaluating on `splits.dev` every
/// `eval_interval` epochs and keeping the best dev-loss weights.
pub fn train(
    model: Model,
    splits: &Splits,
    vocab: &Vocabulary,
    config: &TrainConfig,
    out: &RunOutputs,
) -> Result<TrainOutcome> {
    if splits.train.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    if splits.dev.is_empty() {
        return Err(Error::Empty("dev corpus"));
    }
    let started = std::time::Instant::now();
    if let Some(dir) = &out.dir {
        fs::create_dir_all(dir)?;
        for name in [METRICS_FILE, TIMING_FILE] {
            let p = dir.join(name);
            if p.exists() {
                fs::remove_file(p)?;
            }
        }
        vocab.save(&dir.join(VOCAB_FILE))?;
    }
    let dev_batches = sequential_batches(&splits.dev, config.batch_size, vocab);
    let mut trainer = Trainer::new(model, config.clone())?;
    let mut records = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut stale = 0usize;
    for epoch in 1..=config.epochs {
        let batches = trainer.epoch_batches(&splits.train, vocab);
        let mut weighted = Vec::with_capacity(batches.len());
        let mut tokens = 0usize;
        let mut lr = 0.0;
        for b in &batches {
            let s = trainer.train_step(b, true)?;
            weighted.push(s.loss * s.tokens as f64);
            tokens += s.tokens;
            lr = s.lr;
        }
        if epoch % config.eval_interval != 0 && epoch != config.epochs {
            continue;
        }
        let dev_loss = corpus_loss(&trainer.model, &dev_batches, config.label_smoothing)?;
        let dev_bleu = if config.dev_bleu {
            Some(eval::greedy_bleu(
                &trainer.model,
                &splits.dev,
                vocab,
                config.batch_size,
            )?)
        } else {
            None
        };
        let record = MetricsRecord {
            epoch,
            step: trainer.step_count(),
            train_loss: pairwise_sum(&weighted) / tokens.max(1) as f64,
            dev_loss,
            dev_bleu,
            lr,
        };
        if out.progress {
            println!(
                "epoch {:>3} step {:>6} train_loss {:.4} dev_loss {:.4}{} lr {:.2e}",
                record.epoch,
                record.step,
                record.train_loss,
                record.dev_loss,
                record.dev_bleu.map_or(String::new(), |b| format!(" dev_bleu {b:.2}")),
                record.lr
            );
        }
        let improved = best.as_ref().is_none_or(|(l, _, _)| dev_loss < *l);
        if improved {
            best = Some((dev_loss, epoch, trainer.model.clone()));
            stale = 0;
            if let Some(dir) = &out.dir {
                checkpoint::save(&trainer.model, &dir.join(BEST_CHECKPOINT))?;
            }
        } else {
            stale += 1;
        }
        if let Some(dir) = &out.dir {
            append_json(&dir.join(METRICS_FILE), &record)?;
            append_json(
                &dir.join(TIMING_FILE),
                &TimingRecord {
                    epoch,
                    step: record.step,
                    wall_clock_seconds: started.elapsed().as_secs_f64(),
                },
            )?;
        }
        records.push(record);
        if config.patience > 0 && stale >= config.patience {
            break;
        }
    }
    let steps = trainer.step_count();
    let (best_dev_loss, best_epoch, best_model) = best.ok_or(Error::Empty("evaluations (epochs = 0)"))?;
    Ok(TrainOutcome {
        final_model: trainer.model,
        best_model,
        records,
        best_dev_loss,
        best_epoch,
        steps,
    })
}

/// Source and target vocabulary shared by both sides.
pub fn build_vocab(splits: &Splits, extra: &Corpus) -> Vocabulary {
    let mut all: Corpus = extra.clone();
    all.extend(splits.train.iter().cloned());
    Vocabulary::from_corpus(&all)
}

/// Model config sized for `vocab`.
pub fn model_for_vocab(mut config: ModelConfig, vocab: &Vocabulary) -> ModelConfig {
    config.src_vocab = vocab.len();
    config.tgt_vocab = vocab.len();
    config
}
