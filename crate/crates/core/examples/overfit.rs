//! Dev-loss curves of a dropout-free baseline against UniDrop on the noisy
//! lexicon task.
//!
//! `cargo run --release --example overfit -- [d_model] [noise] [epochs]`

use std::time::Instant;

use unidrop::data::{generate_task, task_symbols, TaskKind, TaskSpec};
use unidrop::dropout::DropoutSpec;
use unidrop::model::{Model, ModelConfig};
use unidrop::trainer::{build_vocab, model_for_vocab, train, RunOutputs, TrainConfig};

fn main() -> unidrop::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: f64| args.get(i).map_or(d, |s| s.parse().expect("number"));
    let d_model = arg(1, 32.0) as usize;
    let task = TaskSpec {
        noise: arg(2, 0.1),
        dev_pairs: 100,
        test_pairs: 100,
        ..TaskSpec::new(TaskKind::NoisyLexiconTranslation, 500, 7)
    };
    let splits = generate_task(&task)?;
    let vocab = build_vocab(&splits, &task_symbols(&task));
    let cfg = model_for_vocab(
        ModelConfig {
            d_model,
            d_ff: 2 * d_model,
            heads: 4,
            max_len: 16,
            residual_dropout: 0.0,
            ..ModelConfig::default()
        },
        &vocab,
    );
    for (name, dropout) in [("baseline", DropoutSpec::none()), ("unidrop", DropoutSpec::unidrop())] {
        let t = Instant::now();
        let tc = TrainConfig {
            epochs: arg(3, 60.0) as usize,
            dropout,
            dev_bleu: false,
            ..TrainConfig::default()
        };
        let out = train(
            Model::new(cfg.clone(), 1)?,
            &splits,
            &vocab,
            &tc,
            &RunOutputs::default(),
        )?;
        let curve: Vec<String> = out.records.iter().map(|r| format!("{:.3}", r.dev_loss)).collect();
        let fin = out.final_dev_loss();
        println!(
            "{name}: min {:.4} @{} final {:.4} rise {:.1}% train {:.4} ({:?})\n  {}",
            out.best_dev_loss,
            out.best_epoch,
            fin,
            100.0 * (fin - out.best_dev_loss) / out.best_dev_loss,
            out.records.last().unwrap().train_loss,
            t.elapsed(),
            curve.join(" ")
        );
    }
    Ok(())
}
