//! Monte-Carlo checks of the second-order expansions of the expected loss
//! under feature, structure and data dropout, plus the cross-entropy
//! Hessian identity, the layer-norm orthogonality probe and a Jacobian-norm
//! probe.
//!
//! Every expectation below follows from the mask moments alone:
//! `E[xi] = 0`, `E[xi^2] = p/(1-p)` for feature masks and
//! `E[eta] = E[beta] = -p`, `E[eta^2] = E[beta^2] = p` for structure and
//! data masks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{Model, Probe};
use crate::numerics::{
    fd_hessian_diag, fd_hessian_full, fd_hessian_quadform, pairwise_sum, RngStream, StreamId, Tape, Tensor, HESS_STEP,
};

/// Relative mismatches divide by at least this much.
pub const MISMATCH_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropoutKind {
    Feature,
    Structure,
    Data,
}

impl DropoutKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DropoutKind::Feature => "feature",
            DropoutKind::Structure => "structure",
            DropoutKind::Data => "data",
        }
    }
}

impl std::str::FromStr for DropoutKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "feature" => Ok(DropoutKind::Feature),
            "structure" => Ok(DropoutKind::Structure),
            "data" => Ok(DropoutKind::Data),
            other => Err(format!("`{other}` is not one of feature, structure, data")),
        }
    }
}

/// A scalar loss as a function of one activation tensor.
pub trait ProbeLoss: Sync {
    fn label(&self) -> String;

    /// The activation the expansion is taken around.
    fn nominal(&self) -> &Tensor;

    fn loss(&self, h: &Tensor) -> Result<f64>;

    fn loss_and_grad(&self, h: &Tensor) -> Result<(f64, Tensor)>;

    /// Rows of the activation treated as tokens by data dropout.
    fn token_rows(&self) -> Vec<usize> {
        (0..self.nominal().rows()).collect()
    }
}

/// Loss of a frozen model on a fixed batch, with one activation free.
#[derive(Clone, Debug)]
pub struct ProbeTarget<'a> {
    model: &'a Model,
    batch: Batch,
    slot: String,
    smoothing: f64,
    nominal: Tensor,
    base_loss: f64,
}

impl<'a> ProbeTarget<'a> {
    /// Records the nominal activation at `slot` with one dropout-free pass.
    pub fn new(model: &'a Model, batch: Batch, slot: &str, smoothing: f64) -> Result<Self> {
        if !model.slot_names().iter().any(|s| s == slot) {
            return Err(Error::UnknownSlot(slot.to_string()));
        }
        let mut probe = Probe::tracing();
        let base_loss = model.loss(&batch, smoothing, None, Some(&mut probe))?;
        let nominal = probe
            .take_trace()
            .and_then(|mut t| t.activations.remove(slot))
            .ok_or_else(|| Error::UnknownSlot(format!("{slot} (not reached in this pass)")))?;
        Ok(Self {
            model,
            batch,
            slot: slot.to_string(),
            smoothing,
            nominal,
            base_loss,
        })
    }

    /// Probe at the scaled source token embeddings.
    pub fn input_embeddings(model: &'a Model, batch: Batch, smoothing: f64) -> Result<Self> {
        Self::new(model, batch, "src.embed", smoothing)
    }

    pub fn slot(&self) -> &str {
        &self.slot
    }

    pub fn base_loss(&self) -> f64 {
        self.base_loss
    }

    /// `f(h') = loss` with the slot replaced by `h'`.
    pub fn as_function(&self) -> impl Fn(&Tensor) -> f64 + Sync + '_ {
        move |h| self.loss(h).unwrap_or(f64::NAN)
    }

    /// Frobenius norm of d(logits)/d(activation) over non-pad positions.
    pub fn jacobian_norm(&self) -> Result<f64> {
        Ok(self
            .model
            .injected_jacobian_sq_norm(&self.batch, &self.slot, &self.nominal)?
            .sqrt())
    }
}

impl ProbeLoss for ProbeTarget<'_> {
    fn label(&self) -> String {
        self.slot.clone()
    }

    fn nominal(&self) -> &Tensor {
        &self.nominal
    }

    fn loss(&self, h: &Tensor) -> Result<f64> {
        self.model.injected_loss(&self.batch, self.smoothing, &self.slot, h)
    }

    fn loss_and_grad(&self, h: &Tensor) -> Result<(f64, Tensor)> {
        self.model
            .injected_loss_and_grad(&self.batch, self.smoothing, &self.slot, h)
    }

    /// Content tokens only: bos, eos and padding never drop.
    fn token_rows(&self) -> Vec<usize> {
        if self.slot != "src.embed" {
            return (0..self.nominal.rows()).collect();
        }
        let src = &self.batch.src;
        (0..src.batch)
            .flat_map(|b| (1..src.lengths[b] - 1).map(move |t| b * src.len + t))
            .collect()
    }
}

/// `f(h) = c + b.h + 1/2 h^T A h` on a flattened activation; the
/// expansions are exact for it.
#[derive(Clone, Debug)]
pub struct QuadraticProbe {
    pub a: Tensor,
    pub b: Tensor,
    pub c: f64,
    pub nominal: Tensor,
}

impl QuadraticProbe {
    /// Random symmetric `A`, linear term and nominal point of shape
    /// `[rows, cols]`.
    pub fn random(rows: usize, cols: usize, seed: u64) -> Self {
        let n = rows * cols;
        let mut rng = RngStream::new(seed, StreamId::Oracle);
        let mut a = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in i..n {
                let v = rng.normal() / (n as f64).sqrt();
                a.data_mut()[i * n + j] = v;
                a.data_mut()[j * n + i] = v;
            }
        }
        let b = Tensor::new(vec![rows, cols], (0..n).map(|_| rng.normal()).collect()).expect("shape");
        let nominal = Tensor::new(vec![rows, cols], (0..n).map(|_| 1.0 + rng.normal()).collect()).expect("shape");
        Self { a, b, c: 0.5, nominal }
    }

    /// Diagonal `A` with entries `a`, no linear term.
    pub fn separable(a: Vec<f64>, nominal: Tensor) -> Self {
        let n = a.len();
        let mut full = Tensor::zeros(&[n, n]);
        for (i, v) in a.into_iter().enumerate() {
            full.data_mut()[i * n + i] = v;
        }
        Self {
            a: full,
            b: Tensor::zeros(nominal.shape()),
            c: 0.0,
            nominal,
        }
    }

    fn grad(&self, h: &Tensor) -> Tensor {
        let n = h.numel();
        let mut g = self.b.clone();
        for i in 0..n {
            let row = &self.a.data()[i * n..(i + 1) * n];
            g.data_mut()[i] += row.iter().zip(h.data()).map(|(a, x)| a * x).sum::<f64>();
        }
        g
    }
}

impl ProbeLoss for QuadraticProbe {
    fn label(&self) -> String {
        "quadratic".into()
    }

    fn nominal(&self) -> &Tensor {
        &self.nominal
    }

    fn loss(&self, h: &Tensor) -> Result<f64> {
        h.check_same_shape(&self.nominal, "quadratic probe")?;
        let g = self.grad(h);
        // g.h = b.h + h^T A h
        let bh = self.b.dot(h)?;
        Ok(self.c + 0.5 * (bh + g.dot(h)?))
    }

    fn loss_and_grad(&self, h: &Tensor) -> Result<(f64, Tensor)> {
        Ok((self.loss(h)?, self.grad(h)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub p: f64,
    pub samples: usize,
    pub seed: u64,
    /// Subtract the zero-mean first-order term from each sample.
    pub control_variate: bool,
    /// Masks per parallel work unit. Changing it changes the draws; the
    /// thread count never does.
    pub chunk: usize,
}

impl VerifyConfig {
    pub fn new(p: f64, samples: usize, seed: u64) -> Self {
        Self {
            p,
            samples,
            seed,
            control_variate: true,
            chunk: 1024,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizerReport {
    pub kind: DropoutKind,
    pub target: String,
    pub p: f64,
    pub base_loss: f64,
    pub samples: usize,
    /// Samples whose loss was not finite; excluded from the mean.
    pub non_finite: usize,
    pub mc_mean_loss: f64,
    pub mc_std_error: f64,
    /// `mc_mean_loss - base_loss`.
    pub gap: f64,
    /// `-p h.grad` for structure and data dropout.
    pub first_order: Option<f64>,
    /// Quadratic-term contribution (diagonal blocks only for data dropout).
    pub second_order: f64,
    /// Off-diagonal token-pair contribution, data dropout only.
    pub cross_term: Option<f64>,
    pub predicted: f64,
    pub predicted_without_cross: Option<f64>,
    pub mismatch: Option<f64>,
    pub mismatch_without_cross: Option<f64>,
    /// `|gap - predicted| / mc_std_error`.
    pub z_score: Option<f64>,
    /// The regularised-loss form with coefficient `p` on the quadratic
    /// terms and no cross term.
    pub stated_predicted: f64,
    pub stated_mismatch: Option<f64>,
    pub mismatch_floor: f64,
    pub control_variate: bool,
    /// False when the standard error exceeds half the predicted gap.
    pub conclusive: bool,
    pub seed: u64,
}

fn relative(gap: f64, predicted: f64) -> Option<f64> {
    (predicted != 0.0).then(|| (gap - predicted).abs() / predicted.abs().max(MISMATCH_FLOOR))
}

fn check_rate(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidRate {
            name: "p",
            value: p,
            reason: "must lie in [0, 1)",
        });
    }
    Ok(())
}

struct Moments {
    mean: f64,
    std_error: f64,
    used: usize,
    non_finite: usize,
}

/// Mean and standard error of `sample(rng)` over `n` draws. Work is split
/// into fixed chunks with their own sub-streams and reduced pairwise, so
/// the result is independent of the worker count.
fn monte_carlo(cfg: &VerifyConfig, sample: impl Fn(&mut RngStream) -> f64 + Sync) -> Result<Moments> {
    if cfg.samples < 2 {
        return Err(Error::Config("need at least 2 Monte-Carlo samples".into()));
    }
    let chunk = cfg.chunk.max(1);
    let chunks = cfg.samples.div_ceil(chunk);
    let partial: Vec<(f64, f64, usize, usize)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = RngStream::substream(cfg.seed, StreamId::Oracle, c as u32);
            let n = chunk.min(cfg.samples - c * chunk);
            let mut ys = Vec::with_capacity(n);
            let mut bad = 0;
            for _ in 0..n {
                let y = sample(&mut rng);
                if y.is_finite() {
                    ys.push(y);
                } else {
                    bad += 1;
                }
            }
            let sq: Vec<f64> = ys.iter().map(|y| y * y).collect();
            (pairwise_sum(&ys), pairwise_sum(&sq), ys.len(), bad)
        })
        .collect();
    let sum = pairwise_sum(&partial.iter().map(|p| p.0).collect::<Vec<_>>());
    let sum_sq = pairwise_sum(&partial.iter().map(|p| p.1).collect::<Vec<_>>());
    let used: usize = partial.iter().map(|p| p.2).sum();
    let non_finite: usize = partial.iter().map(|p| p.3).sum();
    if used < 2 {
        return Err(Error::Empty("finite Monte-Carlo samples"));
    }
    let n = used as f64;
    let mean = sum / n;
    let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok(Moments {
        mean,
        std_error: (var / n).sqrt(),
        used,
        non_finite,
    })
}

#[allow(clippy::too_many_arguments)]
fn report(
    kind: DropoutKind,
    target: &dyn ProbeLoss,
    cfg: &VerifyConfig,
    base: f64,
    mc: Moments,
    first_order: Option<f64>,
    second_order: f64,
    cross_term: Option<f64>,
    stated: f64,
) -> RegularizerReport {
    let predicted = first_order.unwrap_or(0.0) + second_order + cross_term.unwrap_or(0.0);
    let gap = mc.mean;
    let without = cross_term.map(|_| first_order.unwrap_or(0.0) + second_order);
    RegularizerReport {
        kind,
        target: target.label(),
        p: cfg.p,
        base_loss: base,
        samples: mc.used,
        non_finite: mc.non_finite,
        mc_mean_loss: base + gap,
        mc_std_error: mc.std_error,
        gap,
        first_order,
        second_order,
        cross_term,
        predicted,
        predicted_without_cross: without,
        mismatch: relative(gap, predicted),
        mismatch_without_cross: without.and_then(|w| relative(gap, w)),
        z_score: (mc.std_error > 0.0).then(|| (gap - predicted).abs() / mc.std_error),
        stated_predicted: stated,
        stated_mismatch: relative(gap, stated),
        mismatch_floor: MISMATCH_FLOOR,
        control_variate: cfg.control_variate,
        conclusive: predicted == 0.0 || mc.std_error <= 0.5 * predicted.abs(),
        seed: cfg.seed,
    }
}

fn eval(target: &dyn ProbeLoss, h: &Tensor) -> f64 {
    target.loss(h).unwrap_or(f64::NAN)
}

/// Expected loss under `(1 + xi) * h` against
/// `p / (2(1-p)) * sum_j H_jj h_j^2`.
pub fn verify_feature_dropout(target: &dyn ProbeLoss, cfg: &VerifyConfig) -> Result<RegularizerReport> {
    check_rate(cfg.p)?;
    let h = target.nominal();
    let (base, g) = target.loss_and_grad(h)?;
    let diag = fd_hessian_diag(|x: &Tensor| eval(target, x), h, HESS_STEP)?;
    let curvature = pairwise_sum(
        &diag
            .data()
            .iter()
            .zip(h.data())
            .map(|(d, x)| d * x * x)
            .collect::<Vec<_>>(),
    );
    let p = cfg.p;
    let coef = p / (2.0 * (1.0 - p));
    let hg: Vec<f64> = h.data().iter().zip(g.data()).map(|(a, b)| a * b).collect();
    let survivor = p / (1.0 - p);
    let mc = monte_carlo(cfg, |rng| {
        let mut x = h.clone();
        let mut cv = 0.0;
        for (j, v) in x.data_mut().iter_mut().enumerate() {
            let xi = if p > 0.0 && rng.bernoulli(p) { -1.0 } else { survivor };
            *v *= 1.0 + xi;
            cv += xi * hg[j];
        }
        let cv = if cfg.control_variate { cv } else { 0.0 };
        eval(target, &x) - base - cv
    })?;
    let predicted = coef * curvature;
    Ok(report(
        DropoutKind::Feature,
        target,
        cfg,
        base,
        mc,
        None,
        predicted,
        None,
        predicted,
    ))
}

/// Expected loss under `(1 + eta) * h` with one scalar `eta` against
/// `-p h.grad + p/2 h^T H h`.
pub fn verify_structure_dropout(target: &dyn ProbeLoss, cfg: &VerifyConfig) -> Result<RegularizerReport> {
    check_rate(cfg.p)?;
    let h = target.nominal();
    let (base, g) = target.loss_and_grad(h)?;
    let hg = h.dot(&g)?;
    let quad = fd_hessian_quadform(|x: &Tensor| eval(target, x), h, h, HESS_STEP)?;
    let p = cfg.p;
    // eta takes two values, so the loss at each is computed once
    let dropped = eval(target, &Tensor::zeros(h.shape()));
    let mc = monte_carlo(cfg, |rng| {
        let eta = if p > 0.0 && rng.bernoulli(p) { -1.0 } else { 0.0 };
        let f = if eta < 0.0 { dropped } else { base };
        let cv = if cfg.control_variate { (eta + p) * hg } else { 0.0 };
        f - base - cv
    })?;
    let first = -p * hg;
    Ok(report(
        DropoutKind::Structure,
        target,
        cfg,
        base,
        mc,
        Some(first),
        0.5 * p * quad,
        None,
        first + p * quad,
    ))
}

/// Expected loss with each token row scaled by `1 + beta_t` against
/// `-p x.grad + p/2 sum_t x_t^T H_tt x_t + p^2/2 sum_{t != s} x_t^T H_ts x_s`.
pub fn verify_data_dropout(target: &dyn ProbeLoss, cfg: &VerifyConfig) -> Result<RegularizerReport> {
    check_rate(cfg.p)?;
    let x = target.nominal();
    let rows = target.token_rows();
    if rows.is_empty() {
        return Err(Error::Empty("token rows"));
    }
    let d = x.cols();
    let (base, g) = target.loss_and_grad(x)?;
    let f = |t: &Tensor| eval(target, t);
    let restricted = |keep: &[usize]| {
        let mut v = Tensor::zeros(x.shape());
        for &r in keep {
            v.data_mut()[r * d..(r + 1) * d].copy_from_slice(x.row(r));
        }
        v
    };
    let row_dot: Vec<f64> = rows
        .iter()
        .map(|&r| x.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum())
        .collect();
    let xg = pairwise_sum(&row_dot);
    let blocks: Vec<f64> = rows
        .par_iter()
        .map(|&r| fd_hessian_quadform(f, x, &restricted(&[r]), HESS_STEP))
        .collect::<Result<_>>()?;
    let diag = pairwise_sum(&blocks);
    let full = fd_hessian_quadform(f, x, &restricted(&rows), HESS_STEP)?;
    let p = cfg.p;
    let mc = monte_carlo(cfg, |rng| {
        let mut xd = x.clone();
        let mut cv = 0.0;
        for (k, &r) in rows.iter().enumerate() {
            let beta = if p > 0.0 && rng.bernoulli(p) { -1.0 } else { 0.0 };
            if beta < 0.0 {
                xd.data_mut()[r * d..(r + 1) * d].fill(0.0);
            }
            cv += (beta + p) * row_dot[k];
        }
        let cv = if cfg.control_variate { cv } else { 0.0 };
        eval(target, &xd) - base - cv
    })?;
    let first = -p * xg;
    Ok(report(
        DropoutKind::Data,
        target,
        cfg,
        base,
        mc,
        Some(first),
        0.5 * p * diag,
        Some(0.5 * p * p * (full - diag)),
        first + p * diag,
    ))
}

pub fn verify(kind: DropoutKind, target: &dyn ProbeLoss, cfg: &VerifyConfig) -> Result<RegularizerReport> {
    match kind {
        DropoutKind::Feature => verify_feature_dropout(target, cfg),
        DropoutKind::Structure => verify_structure_dropout(target, cfg),
        DropoutKind::Data => verify_data_dropout(target, cfg),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CeHessianReport {
    pub classes: usize,
    pub probabilities: Vec<f64>,
    pub max_abs_deviation: f64,
}

/// Finite-difference Hessian of unsmoothed cross-entropy with respect to
/// one logit row, compared with `diag(z) - z z^T`.
pub fn verify_ce_hessian(logits: &[f64]) -> Result<CeHessianReport> {
    let n = logits.len();
    if n == 0 {
        return Err(Error::Empty("logits"));
    }
    let loss = |l: &Tensor| {
        let mut tape = Tape::new();
        let id = tape.constant(l.clone());
        tape.cross_entropy(id, &[Some(0)], 0.0)
            .map(|(loss, _)| tape.value(loss).item())
            .unwrap_or(f64::NAN)
    };
    let row = Tensor::vector(logits.to_vec());
    let fd = fd_hessian_full(loss, &row, HESS_STEP)?;
    let mut z = logits.to_vec();
    crate::numerics::tape::softmax_in_place(&mut z);
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let analytic = if i == j { z[i] } else { 0.0 } - z[i] * z[j];
            worst = worst.max((fd.data()[i * n + j] - analytic).abs());
        }
    }
    Ok(CeHessianReport {
        classes: n,
        probabilities: z,
        max_abs_deviation: worst,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalityReport {
    pub target: String,
    pub h_dot_grad: f64,
    pub h_norm: f64,
    pub grad_norm: f64,
    /// `|h.grad| / (|h| |grad|)`.
    pub ratio: f64,
}

/// How far the gradient at `h` is from orthogonal to `h`.
pub fn orthogonality_probe(target: &dyn ProbeLoss) -> Result<OrthogonalityReport> {
    let h = target.nominal();
    let (_, g) = target.loss_and_grad(h)?;
    let dot = h.dot(&g)?;
    let (hn, gn) = (h.norm(), g.norm());
    Ok(OrthogonalityReport {
        target: target.label(),
        h_dot_grad: dot,
        h_norm: hn,
        grad_norm: gn,
        ratio: dot.abs() / (hn * gn).max(f64::MIN_POSITIVE),
    })
}

/// Frobenius norm of the Jacobian of `f` at `h` by central differences.
pub fn jacobian_norm_probe(mut f: impl FnMut(&Tensor) -> Result<Tensor>, h: &Tensor) -> Result<f64> {
    let step = crate::numerics::GRAD_STEP;
    let mut total = Vec::with_capacity(h.numel());
    for j in 0..h.numel() {
        let mut plus = h.clone();
        plus.data_mut()[j] += step;
        let mut minus = h.clone();
        minus.data_mut()[j] -= step;
        let col = f(&plus)?.sub(&f(&minus)?)?;
        total.push(col.data().iter().map(|v| (v / (2.0 * step)).powi(2)).sum::<f64>());
    }
    Ok(pairwise_sum(&total).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_coefficient_at_point_one() {
        let p: f64 = 0.1;
        assert!((p / (2.0 * (1.0 - p)) - 1.0 / 18.0).abs() < 1e-15);
    }

    #[test]
    fn zero_rate_gives_zero_gap() {
        let q = QuadraticProbe::random(3, 4, 1);
        for kind in [DropoutKind::Feature, DropoutKind::Structure, DropoutKind::Data] {
            let r = verify(kind, &q, &VerifyConfig::new(0.0, 100, 2)).unwrap();
            assert_eq!(r.gap, 0.0, "{kind:?}");
            assert_eq!(r.predicted, 0.0);
            assert!(r.mismatch.is_none());
        }
    }

    #[test]
    fn rates_are_validated() {
        let q = QuadraticProbe::random(1, 2, 1);
        assert!(verify_feature_dropout(&q, &VerifyConfig::new(1.0, 10, 0)).is_err());
    }

    #[test]
    fn ce_hessian_of_two_equal_logits() {
        let r = verify_ce_hessian(&[0.0, 0.0]).unwrap();
        assert!(r.max_abs_deviation < 1e-6);
        assert_eq!(r.probabilities, vec![0.5, 0.5]);
    }

    #[test]
    fn jacobian_norm_of_identity_and_zero() {
        let h = Tensor::vector(vec![0.3, -1.0, 2.0, 0.5]);
        let id = jacobian_norm_probe(|x| Ok(x.clone()), &h).unwrap();
        assert!((id - 2.0).abs() < 1e-8);
        let zero = jacobian_norm_probe(|x| Ok(Tensor::zeros(x.shape())), &h).unwrap();
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn reduction_ignores_thread_count() {
        let q = QuadraticProbe::random(2, 3, 4);
        let cfg = VerifyConfig {
            chunk: 64,
            ..VerifyConfig::new(0.1, 2000, 5)
        };
        let a = verify_feature_dropout(&q, &cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| verify_feature_dropout(&q, &cfg).unwrap());
        assert_eq!(a.gap.to_bits(), b.gap.to_bits());
        assert_eq!(a.mc_std_error.to_bits(), b.mc_std_error.to_bits());
    }
}
