//! Finite-difference probes for scalar functions of a tensor.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Step for central first differences.
pub const GRAD_STEP: f64 = 1e-5;
/// Step for second differences.
pub const HESS_STEP: f64 = 1e-3;

fn eval(f: &mut impl FnMut(&Tensor) -> f64, x: &Tensor, index: usize) -> Result<f64> {
    let v = f(x);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { index, value: v })
    }
}

fn shifted(x: &Tensor, j: usize, delta: f64) -> Tensor {
    let mut y = x.clone();
    y.data_mut()[j] += delta;
    y
}

/// Central-difference gradient, one pair of evaluations per coordinate.
pub fn fd_gradient(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, step: f64) -> Result<Tensor> {
    let mut g = Tensor::zeros(x.shape());
    for j in 0..x.numel() {
        let plus = eval(&mut f, &shifted(x, j, step), j)?;
        let minus = eval(&mut f, &shifted(x, j, -step), j)?;
        g.data_mut()[j] = (plus - minus) / (2.0 * step);
    }
    Ok(g)
}

/// Central directional derivative along `v`.
pub fn fd_directional(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, v: &Tensor, step: f64) -> Result<f64> {
    let mut plus = x.clone();
    plus.axpy(step, v)?;
    let mut minus = x.clone();
    minus.axpy(-step, v)?;
    let fp = eval(&mut f, &plus, 0)?;
    let fm = eval(&mut f, &minus, 0)?;
    Ok((fp - fm) / (2.0 * step))
}

/// Second difference along each coordinate axis.
pub fn fd_hessian_diag(mut f: impl FnMut(&Tensor) -> f64, h: &Tensor, step: f64) -> Result<Tensor> {
    let f0 = eval(&mut f, h, 0)?;
    let mut d = Tensor::zeros(h.shape());
    for j in 0..h.numel() {
        let plus = eval(&mut f, &shifted(h, j, step), j)?;
        let minus = eval(&mut f, &shifted(h, j, -step), j)?;
        d.data_mut()[j] = (plus - 2.0 * f0 + minus) / (step * step);
    }
    Ok(d)
}

/// `v^T (D^2 f) v` by a second difference along `v`.
pub fn fd_hessian_quadform(mut f: impl FnMut(&Tensor) -> f64, h: &Tensor, v: &Tensor, step: f64) -> Result<f64> {
    h.check_same_shape(v, "fd_hessian_quadform")?;
    let f0 = eval(&mut f, h, 0)?;
    let mut plus = h.clone();
    plus.axpy(step, v)?;
    let mut minus = h.clone();
    minus.axpy(-step, v)?;
    let fp = eval(&mut f, &plus, 0)?;
    let fm = eval(&mut f, &minus, 0)?;
    Ok((fp - 2.0 * f0 + fm) / (step * step))
}

/// Full `n x n` Hessian; diagonal by second differences, off-diagonal by the
/// four-point mixed difference. Only meant for small `n`.
pub fn fd_hessian_full(mut f: impl FnMut(&Tensor) -> f64, h: &Tensor, step: f64) -> Result<Tensor> {
    let n = h.numel();
    let diag = fd_hessian_diag(&mut f, h, step)?;
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        out.data_mut()[i * n + i] = diag.data()[i];
        for j in (i + 1)..n {
            let pp = eval(&mut f, &shifted(&shifted(h, i, step), j, step), i)?;
            let pm = eval(&mut f, &shifted(&shifted(h, i, step), j, -step), i)?;
            let mp = eval(&mut f, &shifted(&shifted(h, i, -step), j, step), i)?;
            let mm = eval(&mut f, &shifted(&shifted(h, i, -step), j, -step), i)?;
            let v = (pp - pm - mp + mm) / (4.0 * step * step);
            out.data_mut()[i * n + j] = v;
            out.data_mut()[j * n + i] = v;
        }
    }
    Ok(out)
}
