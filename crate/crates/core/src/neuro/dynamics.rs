//! Plain-matrix form of the cluster-consensus ODE
//!
//! ```text
//! x' = -(tau + f) o x - S x A + f o B_f
//! ```
//!
//! integrated with explicit Euler followed by a clamp to [-1, 1].

use super::tape::{matmul, softplus, Mat};
use crate::{Error, Result};

/// Constrained ODE parameters: `tau >= 0`, `A = A_raw^T A_raw`, `|B_f| <= 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct OdeParams {
    pub tau: Vec<f64>,
    pub coupling: Mat,
    pub bias_f: Vec<f64>,
}

impl OdeParams {
    pub fn from_raw(tau_raw: &[f64], a_raw: &Mat, bias_f: &[f64]) -> Self {
        Self {
            tau: tau_raw.iter().map(|v| softplus(*v)).collect(),
            coupling: matmul(&a_raw.t().to_owned(), a_raw),
            bias_f: bias_f.iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.tau.len()
    }
}

/// Right-hand side of the ODE for state `x` (N x F), drive `f` (N x F) and
/// support `s` (N x N).
pub fn ode_rhs(x: &Mat, f: &Mat, s: &Mat, p: &OdeParams) -> Mat {
    let coupling = matmul(&matmul(s, x), &p.coupling);
    Mat::from_shape_fn(x.dim(), |(i, q)| {
        -(p.tau[q] + f[[i, q]]) * x[[i, q]] - coupling[[i, q]] + f[[i, q]] * p.bias_f[q]
    })
}

/// One Euler step before clamping.
pub fn euler_unclamped(x: &Mat, f: &Mat, s: &Mat, p: &OdeParams, dt: f64) -> Mat {
    x + &(ode_rhs(x, f, s, p) * dt)
}

pub fn ode_step(x: &Mat, f: &Mat, s: &Mat, p: &OdeParams, dt: f64) -> Result<Mat> {
    let next = euler_unclamped(x, f, s, p, dt).mapv(|v| v.clamp(-1.0, 1.0));
    if next.iter().all(|v| v.is_finite()) {
        Ok(next)
    } else {
        Err(Error::NonFiniteState)
    }
}

/// Rolls the ODE forward with constant drive and support, returning every
/// state including the initial one.
pub fn rollout(x0: &Mat, f: &Mat, s: &Mat, p: &OdeParams, dt: f64, steps: usize) -> Result<Vec<Mat>> {
    let mut out = Vec::with_capacity(steps + 1);
    out.push(x0.clone());
    for _ in 0..steps {
        let next = ode_step(out.last().unwrap(), f, s, p, dt)?;
        out.push(next);
    }
    Ok(out)
}
