use proptest::prelude::*;
use unidrop::dropout::{apply_feature_dropout, sample_feature_mask};
use unidrop::numerics::{fd_gradient, AttentionLayout, NodeId, RngStream, StreamId, Tape, Tensor, GRAD_STEP};
use unidrop::Result;

fn weights(n: usize) -> Tensor {
    Tensor::vector((0..n).map(|i| (1.3 * i as f64 + 0.4).sin()).collect())
}

/// Scalar `sum(w * op(x))` with fixed weights so every output matters.
fn scalar(tape: &mut Tape, out: NodeId) -> Result<NodeId> {
    let v = tape.value(out);
    if v.is_scalar() {
        return Ok(out);
    }
    let w = weights(v.numel()).reshape(v.shape().to_vec())?;
    let m = tape.mul_const(out, w)?;
    Ok(tape.sum(m))
}

/// Largest `|analytic - numeric| / max(1, |numeric|)` over coordinates.
fn grad_error(x: &Tensor, op: impl Fn(&mut Tape, NodeId) -> Result<NodeId>) -> f64 {
    let run = |t: &Tensor| -> (f64, Tensor) {
        let mut tape = Tape::new();
        let leaf = tape.leaf(t.clone());
        let out = op(&mut tape, leaf).unwrap();
        let root = scalar(&mut tape, out).unwrap();
        let g = tape.backward(root).unwrap().wrt(leaf, t);
        (tape.value(root).item(), g)
    };
    let (_, analytic) = run(x);
    let numeric = fd_gradient(|t| run(t).0, x, GRAD_STEP).unwrap();
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0..2.0f64, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn fixed(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = RngStream::new(seed, StreamId::Weights);
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

const TOL: f64 = 1e-6;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul_gradients(x in matrix(3, 4)) {
        let w = fixed(4, 5, 1);
        let left = grad_error(&x, |t, a| { let b = t.constant(w.clone()); t.matmul(a, b) });
        let xt = x.transpose();
        let right = grad_error(&xt, |t, b| { let a = t.constant(w.transpose()); t.matmul(a, b) });
        prop_assert!(left <= TOL && right <= TOL, "{left:e} {right:e}");
    }

    #[test]
    fn elementwise_gradients(x in matrix(3, 4)) {
        let c = fixed(3, 4, 2);
        let bias = Tensor::vector(vec![0.1, -0.2, 0.3, 0.5]);
        let errs = [
            grad_error(&x, |t, a| { let b = t.constant(c.clone()); t.add(a, b) }),
            grad_error(&x, |t, a| t.mul(a, a)),
            grad_error(&x, |t, a| t.mul_const(a, c.clone())),
            grad_error(&x, |t, a| Ok(t.scale(a, -1.7))),
            grad_error(&x, |t, a| { let b = t.constant(bias.clone()); t.add_bias(a, b) }),
            grad_error(&x, |t, a| { let s = t.mul(a, a)?; Ok(t.sum(s)) }),
        ];
        for e in errs {
            prop_assert!(e <= TOL, "{e:e}");
        }
    }

    #[test]
    fn bias_gradients(b in matrix(1, 4)) {
        let x = fixed(3, 4, 3);
        let bias = b.clone().reshape(vec![4]).unwrap();
        let e = grad_error(&bias, |t, bn| { let xn = t.constant(x.clone()); t.add_bias(xn, bn) });
        prop_assert!(e <= TOL, "{e:e}");
    }

    #[test]
    fn relu_gradients(x in matrix(2, 5)) {
        prop_assume!(x.data().iter().all(|v| v.abs() > 1e-3));
        let e = grad_error(&x, |t, a| Ok(t.relu(a)));
        prop_assert!(e <= TOL, "{e:e}");
    }

    #[test]
    fn softmax_gradients(x in matrix(3, 5)) {
        let e = grad_error(&x, |t, a| Ok(t.softmax_rows(a)));
        prop_assert!(e <= TOL, "{e:e}");
    }

    #[test]
    fn layer_norm_gradients(x in matrix(3, 6)) {
        let gain = Tensor::vector(vec![1.0, 0.5, -1.2, 2.0, 0.3, 1.1]);
        let bias = Tensor::vector(vec![0.0, 0.1, 0.2, -0.3, 0.0, 0.4]);
        let wrt_x = grad_error(&x, |t, a| {
            let g = t.constant(gain.clone());
            let b = t.constant(bias.clone());
            t.layer_norm(a, g, b, 1e-5)
        });
        let wrt_gain = grad_error(&gain, |t, g| {
            let a = t.constant(x.clone());
            let b = t.constant(bias.clone());
            t.layer_norm(a, g, b, 1e-5)
        });
        prop_assert!(wrt_x <= TOL && wrt_gain <= TOL, "{wrt_x:e} {wrt_gain:e}");
    }

    #[test]
    fn gather_gradients(table in matrix(5, 3)) {
        let e = grad_error(&table, |t, a| t.gather(a, &[4, 0, 4, 2]));
        prop_assert!(e <= TOL, "{e:e}");
    }

    #[test]
    fn attention_gradients(q in matrix(6, 4)) {
        let k = fixed(6, 4, 5);
        let v = fixed(6, 4, 6);
        let layout = AttentionLayout {
            batch: 2,
            q_len: 3,
            k_len: 3,
            heads: 2,
            key_valid: vec![true, true, true, true, true, false],
            causal: true,
        };
        let mut rng = RngStream::new(8, StreamId::FeatureMask);
        let drop: Vec<f64> = (0..2 * 2 * 3 * 3).map(|_| if rng.bernoulli(0.2) { 0.0 } else { 1.25 }).collect();
        for d in [None, Some(drop)] {
            let wrt_q = grad_error(&q, |t, a| {
                let (kn, vn) = (t.constant(k.clone()), t.constant(v.clone()));
                Ok(t.attention(a, kn, vn, layout.clone(), d.clone())?.0)
            });
            let wrt_k = grad_error(&k, |t, b| {
                let (qn, vn) = (t.constant(q.clone()), t.constant(v.clone()));
                Ok(t.attention(qn, b, vn, layout.clone(), d.clone())?.0)
            });
            let wrt_v = grad_error(&v, |t, c| {
                let (qn, kn) = (t.constant(q.clone()), t.constant(k.clone()));
                Ok(t.attention(qn, kn, c, layout.clone(), d.clone())?.0)
            });
            prop_assert!(wrt_q <= TOL && wrt_k <= TOL && wrt_v <= TOL, "{wrt_q:e} {wrt_k:e} {wrt_v:e}");
        }
    }

    #[test]
    fn cross_entropy_gradients(x in matrix(4, 5), smoothing in 0.0..0.3f64) {
        let targets = [Some(1), None, Some(4), Some(0)];
        let e = grad_error(&x, |t, a| Ok(t.cross_entropy(a, &targets, smoothing)?.0));
        prop_assert!(e <= TOL, "{e:e}");
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(x in matrix(3, 6), shift in -50.0..50.0f64) {
        let mut tape = Tape::new();
        let a = tape.constant(x.clone());
        let sa = tape.softmax_rows(a);
        let b = tape.constant(x.map(|v| v + shift));
        let sb = tape.softmax_rows(b);
        let (s, shifted) = (tape.value(sa), tape.value(sb));
        for r in 0..3 {
            prop_assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        prop_assert!(s.sub(shifted).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn layer_norm_standardises_large_variance_rows(x in matrix(3, 8), scale in 1.0..1e4f64, offset in -1e3..1e3f64) {
        prop_assume!((0..3).all(|r| {
            let row = x.row(r);
            let m = row.iter().sum::<f64>() / 8.0;
            row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 8.0 > 0.05
        }));
        let big = x.map(|v| v * scale + offset);
        let mut tape = Tape::new();
        let a = tape.constant(big);
        let g = tape.constant(Tensor::full(&[8], 1.0));
        let b = tape.constant(Tensor::zeros(&[8]));
        let y = tape.layer_norm(a, g, b, 1e-5).unwrap();
        let y = tape.value(y);
        for r in 0..3 {
            let row = y.row(r);
            let m = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 8.0;
            prop_assert!(m.abs() < 1e-9, "mean {m}");
            prop_assert!((var - 1.0).abs() < 1e-3, "variance {var}");
        }
    }
}

/// Mean and the largest standard-error-normalised deviation from `truth`.
fn mc_deviation(truth: &Tensor, draws: usize, mut sample: impl FnMut() -> Tensor) -> f64 {
    let n = truth.numel();
    let (mut sum, mut sq) = (vec![0.0; n], vec![0.0; n]);
    for _ in 0..draws {
        for (i, v) in sample().data().iter().enumerate() {
            sum[i] += v;
            sq[i] += v * v;
        }
    }
    (0..n)
        .map(|i| {
            let mean = sum[i] / draws as f64;
            let var = (sq[i] / draws as f64 - mean * mean).max(1e-300);
            (mean - truth.data()[i]).abs() / (var / draws as f64).sqrt()
        })
        .fold(0.0, f64::max)
}

#[test]
fn attention_weight_dropout_is_unbiased() {
    let (q, k, v) = (fixed(4, 4, 11), fixed(4, 4, 12), fixed(4, 4, 13));
    let layout = AttentionLayout {
        batch: 1,
        q_len: 4,
        k_len: 4,
        heads: 2,
        key_valid: vec![true; 4],
        causal: false,
    };
    let run = |drop: Option<Vec<f64>>| {
        let mut t = Tape::new();
        let (a, b, c) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
        let out = t.attention(a, b, c, layout.clone(), drop).unwrap().0;
        t.value(out).clone()
    };
    let truth = run(None);
    let mut rng = RngStream::new(3, StreamId::FeatureMask);
    let z = mc_deviation(&truth, 40_000, || {
        let m = sample_feature_mask(&[2 * 4 * 4], 0.1, &mut rng).unwrap();
        run(Some(m.factors().into_data()))
    });
    assert!(z < 5.0, "max deviation {z:.2} standard errors");
}

#[test]
fn ffn_activation_dropout_is_unbiased() {
    let x = fixed(3, 4, 21);
    let (w1, w2) = (fixed(4, 8, 22), fixed(8, 4, 23));
    let act = x.matmul(&w1).unwrap().map(|v| v.max(0.0));
    let truth = act.matmul(&w2).unwrap();
    let mut rng = RngStream::new(4, StreamId::FeatureMask);
    let z = mc_deviation(&truth, 40_000, || {
        let m = sample_feature_mask(act.shape(), 0.1, &mut rng).unwrap();
        apply_feature_dropout(&act, &m).unwrap().matmul(&w2).unwrap()
    });
    assert!(z < 5.0, "max deviation {z:.2} standard errors");
}
