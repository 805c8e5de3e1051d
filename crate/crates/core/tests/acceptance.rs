//! One line per acceptance criterion. Runs without the libtest harness so
//! every line prints; exits non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use unidrop::data::{generate_task, task_symbols, Batch, PaddedSeqs, TaskKind, TaskSpec};
use unidrop::dropout::{sample_data_mask, sample_feature_mask, sample_layer_mask, DropoutSpec};
use unidrop::model::{Model, ModelConfig};
use unidrop::numerics::{fd_directional, RngStream, StreamId, Tensor};
use unidrop::oracle::{
    orthogonality_probe, verify, verify_ce_hessian, DropoutKind, ProbeTarget, QuadraticProbe, VerifyConfig,
};
use unidrop::toy::{default_slot, toy_translator, ToyFixture, ORTHOGONALITY_SLOT};
use unidrop::trainer::eval::{beam_decode, greedy_decode};
use unidrop::trainer::{
    ablate, build_vocab, model_for_vocab, sweep, train, RunOutputs, SweepAxis, TrainConfig, Trainer,
};

const P: f64 = 0.05;
const SAMPLES: usize = 200_000;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// `|gap - predicted| <= 3 se` for each kind on a random quadratic.
fn quadratic_z(kind: DropoutKind) -> f64 {
    let q = QuadraticProbe::random(4, 3, 21);
    let r = verify(kind, &q, &VerifyConfig::new(P, SAMPLES, 5)).unwrap();
    (r.gap - r.predicted).abs() / r.mc_std_error
}

fn feature(toy: &ToyFixture, trained_in: Duration) -> Outcome {
    let t = Instant::now();
    let slot = default_slot(DropoutKind::Feature);
    let target = ProbeTarget::new(&toy.model, toy.probe_batch.clone(), slot, 0.0).unwrap();
    let r = verify(DropoutKind::Feature, &target, &VerifyConfig::new(P, SAMPLES, 11)).unwrap();
    let mismatch = r.mismatch.unwrap_or(f64::INFINITY);
    let z = quadratic_z(DropoutKind::Feature);
    let secs = (t.elapsed() + trained_in).as_secs_f64();
    outcome(
        mismatch <= 0.15 && z <= 3.0 && secs <= 600.0,
        format!(
            "{slot}: gap {:.4e} predicted {:.4e} mismatch {mismatch:.4} (<= 0.15), quadratic {z:.2} se (<= 3), {secs:.0}s (<= 600)",
            r.gap, r.predicted
        ),
    )
}

fn structure(toy: &ToyFixture) -> Outcome {
    let z = quadratic_z(DropoutKind::Structure);
    let target = ProbeTarget::new(&toy.model, toy.probe_batch.clone(), ORTHOGONALITY_SLOT, 0.0).unwrap();
    let o = orthogonality_probe(&target).unwrap();
    let slot = default_slot(DropoutKind::Structure);
    let t = ProbeTarget::new(&toy.model, toy.probe_batch.clone(), slot, 0.0).unwrap();
    let r = verify(DropoutKind::Structure, &t, &VerifyConfig::new(P, SAMPLES, 12)).unwrap();
    outcome(
        z <= 3.0 && o.ratio <= 1e-6,
        format!(
            "quadratic {z:.2} se (<= 3), |h.g|/(|h||g|) at {ORTHOGONALITY_SLOT} {:.2e} (<= 1e-6); {slot} mismatch {:.3} (reported)",
            o.ratio,
            r.mismatch.unwrap_or(f64::NAN)
        ),
    )
}

fn data(toy: &ToyFixture) -> Outcome {
    let target = ProbeTarget::input_embeddings(&toy.model, toy.probe_batch.clone(), 0.0).unwrap();
    let r = verify(DropoutKind::Data, &target, &VerifyConfig::new(P, SAMPLES, 13)).unwrap();
    let mismatch = r.mismatch.unwrap_or(f64::INFINITY);
    let z = quadratic_z(DropoutKind::Data);
    outcome(
        mismatch <= 0.2,
        format!(
            "gap {:.4e} predicted {:.4e} (first {:.3e}, second {:.3e}, cross {:.3e}) mismatch {mismatch:.4} (<= 0.2); stated form {:.4e} mismatch {:.4}; quadratic {z:.2} se",
            r.gap,
            r.predicted,
            r.first_order.unwrap_or(0.0),
            r.second_order,
            r.cross_term.unwrap_or(0.0),
            r.stated_predicted,
            r.stated_mismatch.unwrap_or(f64::NAN)
        ),
    )
}

fn ce_hessian() -> Outcome {
    let mut rng = RngStream::new(4, StreamId::Oracle);
    let logits: Vec<f64> = (0..8).map(|_| 2.0 * rng.normal()).collect();
    let r = verify_ce_hessian(&logits).unwrap();
    outcome(
        r.max_abs_deviation <= 1e-5,
        format!("max-abs deviation {:.2e} (<= 1e-5)", r.max_abs_deviation),
    )
}

fn gradient() -> Outcome {
    let model = Model::new(
        ModelConfig {
            d_model: 8,
            d_ff: 16,
            heads: 2,
            src_vocab: 12,
            tgt_vocab: 12,
            max_len: 16,
            ..ModelConfig::default()
        },
        9,
    )
    .unwrap();
    let b = Batch::from_content(&[vec![4, 5, 6, 7], vec![8, 9]], &[vec![7, 6, 5], vec![9, 8, 10, 11]]);
    let (_, grads) = model.loss_and_grads(&b, 0.1, None).unwrap();
    let g: Vec<f64> = grads.iter().flat_map(|t| t.data().to_vec()).collect();
    let total = g.len();
    let mut rng = RngStream::new(17, StreamId::Oracle);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let v: Vec<f64> = (0..total).map(|_| rng.normal()).collect();
        let analytic: f64 = g.iter().zip(&v).map(|(a, b)| a * b).sum();
        let numeric = fd_directional(
            |t: &Tensor| {
                let mut m = model.clone();
                let mut off = 0;
                for p in m.params.tensors.iter_mut() {
                    let n = p.numel();
                    for (a, d) in p.data_mut().iter_mut().zip(&t.data()[off..off + n]) {
                        *a += d;
                    }
                    off += n;
                }
                m.loss(&b, 0.1, None, None).unwrap()
            },
            &Tensor::zeros(&[total]),
            &Tensor::new(vec![total], v).unwrap(),
            1e-5,
        )
        .unwrap();
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8));
    }
    outcome(
        worst <= 1e-5,
        format!("{total} parameters, 20 directions, max relative error {worst:.2e} (<= 1e-5)"),
    )
}

fn mask_statistics() -> Outcome {
    let n = 1_000_000;
    let p = 0.1;
    let mut rng = RngStream::new(1, StreamId::FeatureMask);
    let m = sample_feature_mask(&[n], p, &mut rng).unwrap();
    let mean_factor = m.xi.data().iter().map(|x| 1.0 + x).sum::<f64>() / n as f64;
    let mean_xi = mean_factor - 1.0;
    let var = m.xi.data().iter().map(|x| (x - mean_xi).powi(2)).sum::<f64>() / n as f64;
    let var_rel = (var / (p / (1.0 - p)) - 1.0).abs();

    let rate = DropoutSpec::unidrop().layerdrop_rate;
    let layers = 4;
    let mut rng = RngStream::new(1, StreamId::LayerMask);
    let mut dropped = vec![0usize; layers];
    let draws = n / layers;
    for _ in 0..draws {
        for (k, s) in sample_layer_mask(layers, rate, &mut rng).unwrap().iter().enumerate() {
            dropped[k] += usize::from(s.dropped());
        }
    }
    let ld_dev = dropped
        .iter()
        .map(|&d| (d as f64 / draws as f64 - rate).abs())
        .fold(0.0, f64::max);

    let keep = 0.5;
    let mut rng = RngStream::new(1, StreamId::DataMask);
    let verbatim = (0..n)
        .filter(|_| !sample_data_mask(8, keep, 0.2, &mut rng).unwrap().applied)
        .count() as f64
        / n as f64;

    outcome(
        (mean_factor - 1.0).abs() <= 0.01 && var_rel <= 0.02 && ld_dev <= 0.005 && (verbatim - keep).abs() <= 0.01,
        format!(
            "mean(1+xi) {mean_factor:.5}, Var(xi) off by {:.2}%, LayerDrop max |freq - {rate}| {ld_dev:.4}, verbatim fraction {verbatim:.4}",
            100.0 * var_rel
        ),
    )
}

fn degenerate(toy: &ToyFixture) -> Outcome {
    let zero = DropoutSpec {
        dd_keep_prob: 0.0,
        ..DropoutSpec::none()
    };
    let cfg = TrainConfig {
        dropout: zero,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let mut with_masks = Trainer::new(toy.model.clone(), cfg.clone()).unwrap();
    let mut plain = Trainer::new(toy.model.clone(), cfg).unwrap();
    let mut identical = true;
    let mut steps = 0;
    'outer: loop {
        let a = with_masks.epoch_batches(&toy.splits.train, &toy.vocab);
        let b = plain.epoch_batches(&toy.splits.train, &toy.vocab);
        for (x, y) in a.iter().zip(&b) {
            let sa = with_masks.train_step(x, true).unwrap();
            let sb = plain.train_step(y, false).unwrap();
            identical &= sa.loss.to_bits() == sb.loss.to_bits();
            steps += 1;
            if steps == 50 {
                break 'outer;
            }
        }
    }
    identical &= with_masks
        .model
        .params
        .tensors
        .iter()
        .zip(&plain.model.params.tensors)
        .all(|(a, b)| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));

    let sources: Vec<Vec<usize>> = toy.splits.train[..100]
        .iter()
        .map(|p| toy.vocab.encode(&p.src))
        .collect();
    let mut same = 0;
    for chunk in sources.chunks(20) {
        let src = PaddedSeqs::from_content(chunk);
        let g = greedy_decode(&toy.model, &src).unwrap();
        let b = beam_decode(&toy.model, &src, 1, 1.0).unwrap();
        same += g.iter().zip(&b).filter(|(x, y)| x == y).count();
    }
    outcome(
        identical && same == 100,
        format!("zero-rate vs dropout-free {steps} steps bitwise: {identical}; beam 1 == greedy on {same}/100 decodes"),
    )
}

fn overfitting() -> Outcome {
    let t = Instant::now();
    let task = TaskSpec {
        noise: 0.1,
        dev_pairs: 100,
        test_pairs: 100,
        ..TaskSpec::new(TaskKind::NoisyLexiconTranslation, 500, 7)
    };
    let splits = generate_task(&task).unwrap();
    let vocab = build_vocab(&splits, &task_symbols(&task));
    let cfg = model_for_vocab(
        ModelConfig {
            d_model: 32,
            d_ff: 64,
            heads: 4,
            max_len: 16,
            residual_dropout: 0.0,
            ..ModelConfig::default()
        },
        &vocab,
    );
    let run = |dropout: DropoutSpec| {
        let tc = TrainConfig {
            epochs: 60,
            dropout,
            dev_bleu: false,
            ..TrainConfig::default()
        };
        let out = train(
            Model::new(cfg.clone(), 1).unwrap(),
            &splits,
            &vocab,
            &tc,
            &RunOutputs::default(),
        )
        .unwrap();
        (out.best_dev_loss, out.final_dev_loss())
    };
    let (b_min, b_fin) = run(DropoutSpec::none());
    let (u_min, u_fin) = run(DropoutSpec::unidrop());
    let rise = (b_fin - b_min) / b_min;
    let secs = t.elapsed().as_secs_f64();
    outcome(
        rise >= 0.05 && u_fin < b_fin && (b_fin - b_min) > (u_fin - u_min) && secs <= 1800.0,
        format!(
            "baseline min {b_min:.4} final {b_fin:.4} (+{:.1}%, >= 5%); UniDrop min {u_min:.4} final {u_fin:.4}; {secs:.0}s (<= 1800)",
            100.0 * rise
        ),
    )
}

fn small_corpus() -> (ModelConfig, unidrop::data::Splits, unidrop::data::Vocabulary) {
    let task = TaskSpec {
        vocab: 8,
        min_len: 3,
        max_len: 5,
        ..TaskSpec::new(TaskKind::Copy, 40, 2)
    };
    let splits = generate_task(&task).unwrap();
    let vocab = build_vocab(&splits, &task_symbols(&task));
    let cfg = model_for_vocab(
        ModelConfig {
            d_model: 8,
            d_ff: 16,
            heads: 2,
            max_len: 12,
            ..ModelConfig::default()
        },
        &vocab,
    );
    (cfg, splits, vocab)
}

fn ablation() -> Outcome {
    let (cfg, splits, vocab) = small_corpus();
    let dir = tempfile::tempdir().unwrap();
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let rows = ablate(&cfg, &tc, &splits, &vocab, Some(dir.path())).unwrap();
    let names: Vec<(String, String)> = rows.iter().map(|r| (r.block.clone(), r.variant.clone())).collect();
    let expected: Vec<(String, String)> = [
        ("table1", "baseline"),
        ("table1", "+FD"),
        ("table1", "+SD"),
        ("table1", "+DD"),
        ("table1", "+UniDrop"),
        ("table1", "w/o FD"),
        ("table1", "w/o SD"),
        ("table1", "w/o DD"),
        ("table6", "+UniDrop"),
        ("table6", "w/o FD-1"),
        ("table6", "w/o FD-2"),
        ("table6", "w/o FD-3"),
        ("table6", "w/o FD-4"),
        ("table6", "w/o 2-stage DD"),
    ]
    .iter()
    .map(|(a, b)| (a.to_string(), b.to_string()))
    .collect();
    let csv_rows = std::fs::read_to_string(dir.path().join("ablation.csv"))
        .unwrap()
        .lines()
        .count();
    let unidrop_rows: Vec<_> = rows.iter().filter(|r| r.variant == "+UniDrop").collect();
    let shared = unidrop_rows.len() == 2 && unidrop_rows[0].best_dev_loss == unidrop_rows[1].best_dev_loss;
    let ordering: Vec<String> = rows
        .iter()
        .map(|r| format!("{} {:.3}", r.variant, r.best_dev_loss))
        .collect();
    outcome(
        names == expected && csv_rows == 15 && shared,
        format!(
            "{} rows (8 + 6), csv lines {csv_rows}; best dev loss: {}",
            rows.len(),
            ordering.join(", ")
        ),
    )
}

fn sweep_harness() -> Outcome {
    let (cfg, splits, vocab) = small_corpus();
    let dir = tempfile::tempdir().unwrap();
    let tc = TrainConfig {
        epochs: 3,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let values = [0.0, 0.05, 0.1, 0.2, 0.3];
    let records = sweep(&cfg, &tc, SweepAxis::Fd, &values, &splits, &vocab, Some(dir.path())).unwrap();
    let text = std::fs::read_to_string(dir.path().join("sweep.jsonl")).unwrap();
    let parsed: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let complete = parsed.len() == 5
        && parsed.iter().zip(&values).all(|(v, &x)| {
            v["axis"] == "fd"
                && v["value"].as_f64() == Some(x)
                && v["records"].as_array().map_or(0, Vec::len) == 3
                && v["best_dev_loss"].is_f64()
        });
    let curve: Vec<String> = records
        .iter()
        .map(|r| format!("{}: {:.3}", r.value, r.summary.best_dev_loss))
        .collect();
    outcome(
        records.len() == 5 && complete,
        format!(
            "{} runs, {} JSONL lines, complete {complete}; best dev loss {}",
            records.len(),
            parsed.len(),
            curve.join(", ")
        ),
    )
}

fn main() -> ExitCode {
    let t = Instant::now();
    let toy = toy_translator(1).expect("toy fixture trains");
    let trained_in = t.elapsed();
    let checks: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("Taylor check, feature dropout", Box::new(|| feature(&toy, trained_in))),
        ("Taylor check, structure dropout", Box::new(|| structure(&toy))),
        ("Taylor check, data dropout", Box::new(|| data(&toy))),
        ("cross-entropy Hessian", Box::new(ce_hessian)),
        ("gradient correctness", Box::new(gradient)),
        ("mask statistics", Box::new(mask_statistics)),
        ("degenerate configurations", Box::new(|| degenerate(&toy))),
        ("overfitting mitigation", Box::new(overfitting)),
        ("ablation harness", Box::new(ablation)),
        ("rate sweep harness", Box::new(sweep_harness)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let o = check();
        failed += usize::from(!o.pass);
        println!(
            "{} criterion {:>2} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail
        );
    }
    println!("{} of {} criteria passed", checks.len() - failed, checks.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
