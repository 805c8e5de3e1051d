//! Leave-one-out ablations and one-axis rate sweeps.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{sequential_batches, Splits, Vocabulary};
use crate::dropout::DropoutSpec;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::trainer::eval::greedy_bleu;
use crate::trainer::{corpus_loss, train, MetricsRecord, RunOutputs, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    /// `"table1"` for the component block, `"table6"` for the per-position
    /// block.
    pub block: &'static str,
    pub name: String,
    pub spec: DropoutSpec,
}

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect::<String>()
        .split('_')
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join("_")
}

/// The 8 component rows followed by the 6 per-position rows.
///
/// `base` must have feature, structure and data dropout all on.
pub fn ablation_variants(base: &DropoutSpec) -> Result<Vec<Variant>> {
    if !base.has_feature_dropout() || base.layerdrop_rate == 0.0 || !base.has_data_dropout() {
        return Err(Error::Config(
            "ablation needs a base config with feature, structure and data dropout all on".into(),
        ));
    }
    let none = DropoutSpec {
        qkv_proj_rate: base.qkv_proj_rate,
        logits_drop_rate: base.logits_drop_rate,
        encoder_drop_rate: base.encoder_drop_rate,
        layerdrop_scope: base.layerdrop_scope,
        ..DropoutSpec::none()
    };
    let fd_only = DropoutSpec {
        fd1_rate: base.fd1_rate,
        fd2_rate: base.fd2_rate,
        fd3_rate: base.fd3_rate,
        fd4_rate: base.fd4_rate,
        ..none.clone()
    };
    let sd_only = DropoutSpec {
        layerdrop_rate: base.layerdrop_rate,
        ..none.clone()
    };
    let dd_only = DropoutSpec {
        dd_keep_prob: base.dd_keep_prob,
        dd_token_prob: base.dd_token_prob,
        ..none.clone()
    };
    let without_fd = DropoutSpec {
        fd1_rate: 0.0,
        fd2_rate: 0.0,
        fd3_rate: 0.0,
        fd4_rate: 0.0,
        ..base.clone()
    };
    let without_sd = DropoutSpec {
        layerdrop_rate: 0.0,
        ..base.clone()
    };
    let without_dd = DropoutSpec {
        dd_keep_prob: 1.0,
        dd_token_prob: 0.0,
        ..base.clone()
    };
    let t1 = |name: &str, spec: DropoutSpec| Variant {
        block: "table1",
        name: name.into(),
        spec,
    };
    let t6 = |name: &str, spec: DropoutSpec| Variant {
        block: "table6",
        name: name.into(),
        spec,
    };
    let mut out = vec![
        t1("baseline", none),
        t1("+FD", fd_only),
        t1("+SD", sd_only),
        t1("+DD", dd_only),
        t1("+UniDrop", base.clone()),
        t1("w/o FD", without_fd),
        t1("w/o SD", without_sd),
        t1("w/o DD", without_dd),
        t6("+UniDrop", base.clone()),
    ];
    for k in 1..=4 {
        let mut s = base.clone();
        match k {
            1 => s.fd1_rate = 0.0,
            2 => s.fd2_rate = 0.0,
            3 => s.fd3_rate = 0.0,
            _ => s.fd4_rate = 0.0,
        }
        out.push(t6(&format!("w/o FD-{k}"), s));
    }
    out.push(t6(
        "w/o 2-stage DD",
        DropoutSpec {
            dd_keep_prob: 0.0,
            ..base.clone()
        },
    ));
    Ok(out)
}

/// Outcome of one training run inside an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub best_dev_loss: f64,
    pub best_epoch: usize,
    pub final_dev_loss: f64,
    pub final_dev_bleu: Option<f64>,
    /// Best-dev weights on the test split, when there is one.
    pub test_loss: Option<f64>,
    pub test_bleu: Option<f64>,
    pub records: Vec<MetricsRecord>,
}

fn run(
    model_cfg: &ModelConfig,
    config: &TrainConfig,
    splits: &Splits,
    vocab: &Vocabulary,
    dir: Option<PathBuf>,
) -> Result<RunSummary> {
    let model = Model::new(model_cfg.clone(), config.seed)?;
    let outcome = train(model, splits, vocab, config, &RunOutputs { dir, progress: false })?;
    let (test_loss, test_bleu) = if splits.test.is_empty() {
        (None, None)
    } else {
        let batches = sequential_batches(&splits.test, config.batch_size, vocab);
        (
            Some(corpus_loss(&outcome.best_model, &batches, config.label_smoothing)?),
            Some(greedy_bleu(
                &outcome.best_model,
                &splits.test,
                vocab,
                config.batch_size,
            )?),
        )
    };
    Ok(RunSummary {
        best_dev_loss: outcome.best_dev_loss,
        best_epoch: outcome.best_epoch,
        final_dev_loss: outcome.final_dev_loss(),
        final_dev_bleu: outcome.records.last().and_then(|r| r.dev_bleu),
        test_loss,
        test_bleu,
        records: outcome.records,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub block: String,
    pub variant: String,
    pub fd1: f64,
    pub fd2: f64,
    pub fd3: f64,
    pub fd4: f64,
    pub layerdrop: f64,
    pub dd_keep: f64,
    pub dd_token: f64,
    pub best_dev_loss: f64,
    pub best_epoch: usize,
    pub final_dev_loss: f64,
    pub final_dev_bleu: Option<f64>,
    pub test_loss: Option<f64>,
    pub test_bleu: Option<f64>,
}

pub const ABLATION_TABLE: &str = "ablation.csv";
pub const SWEEP_FILE: &str = "sweep.jsonl";

/// Trains every ablation variant under the same seed. Rows with identical
/// dropout settings share one run. Each run's metrics go to
/// `<out>/<variant>/`, and the table to `<out>/ablation.csv`.
pub fn ablate(
    model_cfg: &ModelConfig,
    base: &TrainConfig,
    splits: &Splits,
    vocab: &Vocabulary,
    out: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let variants = ablation_variants(&base.dropout)?;
    let mut unique: Vec<(String, DropoutSpec)> = Vec::new();
    for v in &variants {
        if !unique.iter().any(|(_, s)| *s == v.spec) {
            unique.push((slug(&v.name), v.spec.clone()));
        }
    }
    let summaries: Vec<RunSummary> = unique
        .par_iter()
        .map(|(name, spec)| {
            let cfg = TrainConfig {
                dropout: spec.clone(),
                ..base.clone()
            };
            run(model_cfg, &cfg, splits, vocab, out.map(|o| o.join(name)))
        })
        .collect::<Result<_>>()?;
    let rows: Vec<AblationRow> = variants
        .iter()
        .map(|v| {
            let i = unique
                .iter()
                .position(|(_, s)| *s == v.spec)
                .expect("every spec was run");
            let s = &summaries[i];
            AblationRow {
                block: v.block.into(),
                variant: v.name.clone(),
                fd1: v.spec.fd1_rate,
                fd2: v.spec.fd2_rate,
                fd3: v.spec.fd3_rate,
                fd4: v.spec.fd4_rate,
                layerdrop: v.spec.layerdrop_rate,
                dd_keep: v.spec.dd_keep_prob,
                dd_token: v.spec.dd_token_prob,
                best_dev_loss: s.best_dev_loss,
                best_epoch: s.best_epoch,
                final_dev_loss: s.final_dev_loss,
                final_dev_bleu: s.final_dev_bleu,
                test_loss: s.test_loss,
                test_bleu: s.test_bleu,
            }
        })
        .collect();
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join(ABLATION_TABLE)).map_err(csv_err)?;
        for r in &rows {
            w.serialize(r).map_err(csv_err)?;
        }
        w.flush()?;
    }
    Ok(rows)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Config(format!("csv: {other:?}")),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    /// All four feature-dropout rates together.
    Fd,
    /// LayerDrop rate.
    Sd,
    /// Per-token data-dropout rate `p`.
    Dd,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Fd => "fd",
            SweepAxis::Sd => "sd",
            SweepAxis::Dd => "dd",
        }
    }

    pub fn apply(self, spec: &DropoutSpec, value: f64) -> Result<DropoutSpec> {
        let mut s = spec.clone();
        match self {
            SweepAxis::Fd => s.set_feature_rates(value),
            SweepAxis::Sd => s.layerdrop_rate = value,
            SweepAxis::Dd => s.dd_token_prob = value,
        }
        s.validate()?;
        Ok(s)
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "fd" => Ok(SweepAxis::Fd),
            "sd" => Ok(SweepAxis::Sd),
            "dd" => Ok(SweepAxis::Dd),
            other => Err(format!("`{other}` is not one of fd, sd, dd")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub axis: SweepAxis,
    pub value: f64,
    #[serde(flatten)]
    pub summary: RunSummary,
}

/// One run per value along `axis`, everything else as in `base`. Records
/// go to `<out>/sweep.jsonl`, per-run metrics to `<out>/<axis>_<value>/`.
pub fn sweep(
    model_cfg: &ModelConfig,
    base: &TrainConfig,
    axis: SweepAxis,
    values: &[f64],
    splits: &Splits,
    vocab: &Vocabulary,
    out: Option<&Path>,
) -> Result<Vec<SweepRecord>> {
    if values.is_empty() {
        return Err(Error::Empty("sweep values"));
    }
    let specs: Vec<DropoutSpec> = values
        .iter()
        .map(|&v| axis.apply(&base.dropout, v))
        .collect::<Result<_>>()?;
    let records: Vec<SweepRecord> = values
        .par_iter()
        .zip(specs.par_iter())
        .map(|(&value, spec)| {
            let cfg = TrainConfig {
                dropout: spec.clone(),
                ..base.clone()
            };
            let dir = out.map(|o| o.join(format!("{}_{value}", axis.as_str())));
            Ok(SweepRecord {
                axis,
                value,
                summary: run(model_cfg, &cfg, splits, vocab, dir)?,
            })
        })
        .collect::<Result<_>>()?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut f = fs::File::create(dir.join(SWEEP_FILE))?;
        for r in &records {
            writeln!(f, "{}", serde_json::to_string(r)?)?;
        }
    }
    Ok(records)
}
