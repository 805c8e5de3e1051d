use unidrop::data::Batch;
use unidrop::dropout::DropoutSpec;
use unidrop::model::{checkpoint, Model, ModelConfig, Probe, TrainRngs};
use unidrop::numerics::{fd_directional, RngStream, StreamId, Tensor};
use unidrop::Error;

fn tiny(seed: u64) -> Model {
    Model::new(
        ModelConfig {
            d_model: 8,
            d_ff: 16,
            heads: 2,
            src_vocab: 12,
            tgt_vocab: 12,
            max_len: 16,
            ..ModelConfig::default()
        },
        seed,
    )
    .unwrap()
}

fn batch() -> Batch {
    Batch::from_content(&[vec![4, 5, 6, 7], vec![8, 9]], &[vec![7, 6, 5], vec![9, 8, 10, 11]])
}

fn flat(ts: &[Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().to_vec()).collect()
}

#[test]
fn parameter_gradient_matches_finite_differences() {
    let model = tiny(3);
    let b = batch();
    let (_, grads) = model.loss_and_grads(&b, 0.1, None).unwrap();
    let g = flat(&grads);
    let sizes: Vec<usize> = model.params.tensors.iter().map(Tensor::numel).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = RngStream::new(11, StreamId::Oracle);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let v: Vec<f64> = (0..total).map(|_| rng.normal()).collect();
        let analytic: f64 = g.iter().zip(&v).map(|(a, b)| a * b).sum();
        let v = Tensor::new(vec![total], v).unwrap();
        let x = Tensor::zeros(&[total]);
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
            &x,
            &v,
            1e-5,
        )
        .unwrap();
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    assert!(worst <= 1e-5, "worst relative error {worst:e}");
}

#[test]
fn decoder_is_causal() {
    let model = tiny(4);
    let a = Batch::from_content(&[vec![4, 5, 6]], &[vec![7, 8, 9, 10]]);
    let b = Batch::from_content(&[vec![4, 5, 6]], &[vec![7, 8, 11, 4]]);
    let la = model.logits(&a, None, None).unwrap();
    let lb = model.logits(&b, None, None).unwrap();
    // rows 0..=2 see bos, 7, 8 only
    for t in 0..3 {
        assert_eq!(la.row(t), lb.row(t), "position {t}");
    }
    assert_ne!(la.row(3), lb.row(3));
}

#[test]
fn source_padding_does_not_change_logits() {
    let model = tiny(5);
    let short = Batch::from_content(&[vec![4, 5]], &[vec![6, 7]]);
    let padded = Batch::from_content(&[vec![4, 5], vec![4, 5, 6, 7, 8, 9, 10]], &[vec![6, 7], vec![6, 7]]);
    let a = model.logits(&short, None, None).unwrap();
    let b = model.logits(&padded, None, None).unwrap();
    for t in 0..a.rows() {
        for (x, y) in a.row(t).iter().zip(b.row(t)) {
            assert!((x - y).abs() <= 1e-10, "{x} vs {y}");
        }
    }
}

#[test]
fn zero_rates_are_deterministic_under_any_seed() {
    let model = tiny(6);
    let b = batch();
    let spec = DropoutSpec::none();
    let eval = model.logits(&b, None, None).unwrap();
    // residual dropout is a model knob, so it is switched off too
    let quiet = model.with_residual_dropout(0.0).unwrap();
    for seed in [1, 2, 99] {
        let mut rngs = TrainRngs::new(seed);
        let out = quiet.logits(&b, Some((&spec, &mut rngs)), None).unwrap();
        assert_eq!(out, eval);
    }
}

#[test]
fn encoder_drop_at_rate_one_ignores_the_source() {
    let model = tiny(7);
    let spec = DropoutSpec {
        encoder_drop_rate: 1.0,
        ..DropoutSpec::none()
    };
    let model = model.with_residual_dropout(0.0).unwrap();
    let a = Batch::from_content(&[vec![4, 5, 6]], &[vec![7, 8]]);
    let b = Batch::from_content(&[vec![9, 10, 11]], &[vec![7, 8]]);
    let la = model.logits(&a, Some((&spec, &mut TrainRngs::new(1))), None).unwrap();
    let lb = model.logits(&b, Some((&spec, &mut TrainRngs::new(1))), None).unwrap();
    assert_eq!(la, lb);
    assert_ne!(
        model.logits(&a, None, None).unwrap(),
        model.logits(&b, None, None).unwrap()
    );
}

#[test]
fn replaying_a_recorded_activation_is_bitwise() {
    let model = tiny(8);
    let b = batch();
    let mut probe = Probe::tracing();
    let base = model.logits(&b, None, Some(&mut probe)).unwrap();
    let trace = probe.take_trace().unwrap();
    for slot in model.slot_names() {
        let value = trace.activations[&slot].clone();
        let mut inj = Probe::inject(slot.clone(), value);
        let out = model.logits(&b, None, Some(&mut inj)).unwrap();
        assert_eq!(out, base, "slot {slot}");
    }
    assert_eq!(trace.attention.len(), 2 + 2 * 2);
}

#[test]
fn injection_errors() {
    let model = tiny(8);
    let b = batch();
    let mut probe = Probe::inject("dec.7.out", Tensor::zeros(&[1, 8]));
    assert!(matches!(
        model.logits(&b, None, Some(&mut probe)),
        Err(Error::UnknownSlot(_))
    ));
    let mut probe = Probe::inject("dec.0.out", Tensor::zeros(&[1, 8]));
    assert!(matches!(
        model.logits(&b, None, Some(&mut probe)),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn too_long_sequences_are_rejected() {
    let model = tiny(1);
    let long: Vec<usize> = (0..20).map(|i| 4 + i % 8).collect();
    let b = Batch::from_content(&[long], &[vec![4]]);
    assert!(matches!(
        model.logits(&b, None, None),
        Err(Error::SequenceTooLong { .. })
    ));
}

#[test]
fn checkpoint_round_trip_reproduces_loss_bitwise() {
    let model = tiny(12);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&model, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    let b = batch();
    let a = model.loss(&b, 0.1, None, None).unwrap();
    let c = back.loss(&b, 0.1, None, None).unwrap();
    assert_eq!(a.to_bits(), c.to_bits());
}

#[test]
fn uniform_logits_give_log_vocab() {
    // zero output weights make every logit row uniform
    let mut model = tiny(2);
    for name in ["out.w", "out.b"] {
        let t = model.params.get_mut(name).unwrap();
        *t = Tensor::zeros(t.shape());
    }
    let b = batch();
    for smoothing in [0.0, 0.1] {
        let l = model.loss(&b, smoothing, None, None).unwrap();
        assert!((l - 12f64.ln()).abs() < 1e-12, "{l}");
    }
}

#[test]
fn next_token_log_probs_match_full_logits() {
    let model = tiny(9);
    let b = batch();
    let full = model.logits(&b, None, None).unwrap();
    let memory = model.encode(&b.src).unwrap();
    // prefix bos,7 of row 0 predicts the token at position 2
    let lp = model
        .next_token_log_probs(&memory, &b.src, &[vec![1, 7]], &[0])
        .unwrap();
    let row = full.row(1);
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    for (a, z) in lp.row(0).iter().zip(row) {
        assert!((a - (z - lse)).abs() < 1e-12);
    }
}

#[test]
fn classifier_head_trains_only_with_classes() {
    let model = tiny(1);
    assert!(model.classify_logits(&batch().src, None, None).is_err());
    let mut cfg = model.config().clone();
    cfg.num_classes = 3;
    let m = Model::new(cfg, 1).unwrap();
    let logits = m.classify_logits(&batch().src, None, None).unwrap();
    assert_eq!(logits.shape(), &[2, 3]);
    let (loss, grads) = m.classify_loss_and_grads(&batch().src, &[0, 2], 0.0, None).unwrap();
    assert!(loss.is_finite());
    assert!(grads.iter().any(|g| g.max_abs() > 0.0));
}
