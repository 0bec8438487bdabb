//! Simplified generalized divisive normalization (GDN1) and its inverse.
//!
//! At every spatial position, with `D_i = beta_i + sum_j gamma_ij * |x_j|`:
//!
//! ```text
//! GDN1:  y_i = x_i / D_i
//! IGDN1: y_i = x_i * D_i
//! ```
//!
//! No squares or roots. `beta` and `gamma` are stored unconstrained and
//! mapped through lower bounds (`beta >= BETA_MIN`, `gamma >= 0`) when used.

use crate::error::{Error, Result};
use crate::scalar::{matmul, MatRef, Scalar};
use crate::tensor::Tensor3;

pub const BETA_MIN: f64 = 1e-6;

/// Effective (bounded) GDN1 parameters for `C` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Gdn1Params<S> {
    /// `[C]`, every entry `>= BETA_MIN`.
    pub beta: Vec<S>,
    /// `[C, C]` row-major, every entry `>= 0`.
    pub gamma: Vec<S>,
}

impl<S: Scalar> Gdn1Params<S> {
    pub fn new(beta: Vec<S>, gamma: Vec<S>) -> Result<Self> {
        let c = beta.len();
        if gamma.len() != c * c {
            return Err(Error::Config(format!(
                "gamma has {} entries, expected {c}x{c}",
                gamma.len()
            )));
        }
        // NaN fails both comparisons
        let ok = beta.iter().all(|&b| b >= S::lit(BETA_MIN)) && gamma.iter().all(|&g| g >= S::zero());
        if !ok {
            return Err(Error::Config("GDN1 requires beta >= beta_min and gamma >= 0".into()));
        }
        Ok(Self { beta, gamma })
    }

    /// Map raw (unconstrained) storage onto valid parameters.
    pub fn from_raw(beta_raw: &[S], gamma_raw: &[S]) -> Result<Self> {
        Self::new(
            beta_raw.iter().map(|&b| b.max(S::lit(BETA_MIN))).collect(),
            gamma_raw.iter().map(|&g| g.max(S::zero())).collect(),
        )
    }

    pub fn channels(&self) -> usize {
        self.beta.len()
    }
}

/// Gradient of a lower-bound reparameterization `max(raw, bound)`.
///
/// The gradient passes through where `raw >= bound`, and also below the
/// bound when a descent step would move `raw` back up towards it.
#[inline]
pub fn lower_bound_grad<S: Scalar>(raw: S, bound: S, grad: S) -> S {
    if raw >= bound || grad < S::zero() {
        grad
    } else {
        S::zero()
    }
}

#[derive(Debug, Clone)]
pub struct GdnCache<S> {
    input: Tensor3<S>,
    denom: Vec<S>,
}

#[derive(Debug, Clone)]
pub struct GdnGrads<S> {
    pub input: Tensor3<S>,
    pub beta: Vec<S>,
    pub gamma: Vec<S>,
}

fn denominators<S: Scalar>(x: &Tensor3<S>, p: &Gdn1Params<S>) -> Result<(Vec<S>, Vec<S>)> {
    let c = x.channels();
    if c != p.channels() {
        return Err(Error::Config(format!(
            "GDN1 parameters for {} channels applied to {c}-channel activation",
            p.channels()
        )));
    }
    let plane = x.plane_len();
    let abs: Vec<S> = x.as_slice().iter().map(|v| v.abs()).collect();
    let mut denom = vec![S::zero(); c * plane];
    matmul(MatRef::new(&p.gamma, c, c), MatRef::new(&abs, c, plane), &mut denom, false);
    for (chunk, &b) in denom.chunks_mut(plane).zip(&p.beta) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
    Ok((denom, abs))
}

fn forward_impl<S: Scalar>(x: &Tensor3<S>, p: &Gdn1Params<S>, inverse: bool) -> Result<(Tensor3<S>, GdnCache<S>)> {
    let (denom, _) = denominators(x, p)?;
    let out: Vec<S> = x
        .as_slice()
        .iter()
        .zip(&denom)
        .map(|(&v, &d)| if inverse { v * d } else { v / d })
        .collect();
    let [c, h, w] = x.shape();
    Ok((
        Tensor3::from_vec(c, h, w, out)?,
        GdnCache {
            input: x.clone(),
            denom,
        },
    ))
}

fn backward_impl<S: Scalar>(cache: &GdnCache<S>, p: &Gdn1Params<S>, grad_out: &Tensor3<S>, inverse: bool) -> GdnGrads<S> {
    let x = &cache.input;
    let [c, h, w] = x.shape();
    let plane = h * w;
    let g = grad_out.as_slice();

    // t_i: sensitivity of the loss to D_i (up to sign).
    let t: Vec<S> = x
        .as_slice()
        .iter()
        .zip(g)
        .zip(&cache.denom)
        .map(|((&xv, &gv), &d)| if inverse { gv * xv } else { gv * xv / (d * d) })
        .collect();
    let mut through_gamma = vec![S::zero(); c * plane];
    matmul(MatRef::new(&p.gamma, c, c).t(), MatRef::new(&t, c, plane), &mut through_gamma, false);

    let input: Vec<S> = x
        .as_slice()
        .iter()
        .zip(g)
        .zip(&cache.denom)
        .zip(&through_gamma)
        .map(|(((&xv, &gv), &d), &tg)| {
            let sign = if xv > S::zero() {
                S::one()
            } else if xv < S::zero() {
                -S::one()
            } else {
                S::zero()
            };
            if inverse {
                gv * d + sign * tg
            } else {
                gv / d - sign * tg
            }
        })
        .collect();

    let abs: Vec<S> = x.as_slice().iter().map(|v| v.abs()).collect();
    let mut gamma = vec![S::zero(); c * c];
    matmul(MatRef::new(&t, c, plane), MatRef::new(&abs, c, plane).t(), &mut gamma, false);
    let mut beta: Vec<S> = t.chunks(plane).map(|chunk| chunk.iter().copied().sum()).collect();
    if !inverse {
        gamma.iter_mut().for_each(|v| *v = -*v);
        beta.iter_mut().for_each(|v| *v = -*v);
    }
    GdnGrads {
        input: Tensor3::from_vec(c, h, w, input).expect("shape from cache"),
        beta,
        gamma,
    }
}

pub fn gdn1_forward<S: Scalar>(x: &Tensor3<S>, p: &Gdn1Params<S>) -> Result<Tensor3<S>> {
    forward_impl(x, p, false).map(|(y, _)| y)
}

pub fn igdn1_forward<S: Scalar>(x: &Tensor3<S>, p: &Gdn1Params<S>) -> Result<Tensor3<S>> {
    forward_impl(x, p, true).map(|(y, _)| y)
}

pub fn gdn1_forward_cached<S: Scalar>(x: &Tensor3<S>, p: &Gdn1Params<S>) -> Result<(Tensor3<S>, GdnCache<S>)> {
    forward_impl(x, p, false)
}

pub fn igdn1_forward_cached<S: Scalar>(x: &Tensor3<S>, p: &Gdn1Params<S>) -> Result<(Tensor3<S>, GdnCache<S>)> {
    forward_impl(x, p, true)
}

pub fn gdn1_backward<S: Scalar>(cache: &GdnCache<S>, p: &Gdn1Params<S>, grad_out: &Tensor3<S>) -> GdnGrads<S> {
    backward_impl(cache, p, grad_out, false)
}

pub fn igdn1_backward<S: Scalar>(cache: &GdnCache<S>, p: &Gdn1Params<S>, grad_out: &Tensor3<S>) -> GdnGrads<S> {
    backward_impl(cache, p, grad_out, true)
}
