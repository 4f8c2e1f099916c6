//! Selective state space model (S6).
//!
//! Continuous system `h' = A h + B x`, `y = C h + D x` with a diagonal,
//! strictly negative `A` per channel. Discretization uses the zero-order-hold
//! decay `A_bar = exp(delta * A)` together with the first-order input term
//! `B_bar = delta * B`. `B`, `C` and `delta` are projected from the input at
//! every step; one `(B, C)` pair per step is shared by all channels.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::{Ctx, Init, ParamId, ParamKind, ParamStore, Path};
use crate::tensor::Tensor;

pub const DEFAULT_STATE_DIM: usize = 16;
pub const DT_MIN: f64 = 1e-3;
pub const DT_MAX: f64 = 1e-1;

/// Per-step discretized decay and input matrices, both `[L, E, N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizedPair {
    pub a_bar: Tensor,
    pub b_bar: Tensor,
}

fn dims2(t: &Tensor, op: &'static str, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [a, b] => Ok((*a, *b)),
        s => Err(Error::shape(op, format!("{what} must be 2-D, got {s:?}"))),
    }
}

/// `A_bar[l,e,n] = exp(delta[l,e] * A[e,n])`, `B_bar[l,e,n] = delta[l,e] * B[l,n]`.
pub fn discretize(delta: &Tensor, a: &Tensor, b: &Tensor) -> Result<DiscretizedPair> {
    if delta.data().iter().any(|&d| d <= 0.0) {
        return Err(Error::invalid("discretize", "step sizes must be positive"));
    }
    discretize_any(delta, a, b)
}

fn discretize_any(delta: &Tensor, a: &Tensor, b: &Tensor) -> Result<DiscretizedPair> {
    let (l, e) = dims2(delta, "discretize", "delta")?;
    let (ea, n) = dims2(a, "discretize", "A")?;
    let (lb, nb) = dims2(b, "discretize", "B")?;
    if ea != e || lb != l || nb != n {
        return Err(Error::shape(
            "discretize",
            format!("delta {:?}, A {:?}, B {:?}", delta.shape(), a.shape(), b.shape()),
        ));
    }
    let mut a_bar = vec![0.0; l * e * n];
    let mut b_bar = vec![0.0; l * e * n];
    for li in 0..l {
        for ei in 0..e {
            let dt = delta.data()[li * e + ei];
            for ni in 0..n {
                let k = (li * e + ei) * n + ni;
                a_bar[k] = libm::exp(dt * a.data()[ei * n + ni]);
                b_bar[k] = dt * b.data()[li * n + ni];
            }
        }
    }
    Ok(DiscretizedPair {
        a_bar: Tensor::from_parts(vec![l, e, n], a_bar),
        b_bar: Tensor::from_parts(vec![l, e, n], b_bar),
    })
}

/// Sequential recurrence from `h_0 = 0`:
/// `h_k = A_bar_k * h_{k-1} + B_bar_k u_k`, `y_k = <C_k, h_k> + D * u_k`.
pub fn selective_scan(u: &Tensor, pair: &DiscretizedPair, c: &Tensor, d: &Tensor) -> Result<Tensor> {
    let (l, e) = dims2(u, "selective_scan", "u")?;
    let (lc, n) = dims2(c, "selective_scan", "C")?;
    if pair.a_bar.shape() != [l, e, n] || pair.b_bar.shape() != [l, e, n] || lc != l || d.shape() != [e] {
        return Err(Error::shape(
            "selective_scan",
            format!(
                "u {:?}, A_bar {:?}, B_bar {:?}, C {:?}, D {:?}",
                u.shape(),
                pair.a_bar.shape(),
                pair.b_bar.shape(),
                c.shape(),
                d.shape()
            ),
        ));
    }
    let mut h = vec![0.0; e * n];
    let mut y = vec![0.0; l * e];
    for k in 0..l {
        for ei in 0..e {
            let uu = u.data()[k * e + ei];
            let mut acc = 0.0;
            for ni in 0..n {
                let idx = (k * e + ei) * n + ni;
                let s = &mut h[ei * n + ni];
                *s = pair.a_bar.data()[idx] * *s + pair.b_bar.data()[idx] * uu;
                acc += c.data()[k * n + ni] * *s;
            }
            y[k * e + ei] = acc + d.data()[ei] * uu;
        }
    }
    Ok(Tensor::from_parts(vec![l, e], y))
}

/// Handles of one S6 parameter set.
#[derive(Debug, Clone)]
pub struct SsmParams {
    /// `log(-A)`, `[E, N]`.
    pub a_log: ParamId,
    /// Skip weights `D`, `[E]`.
    pub d_skip: ParamId,
    /// Input projection to `(delta_raw, B, C)`, `[R + 2N, E]`.
    pub x_proj: ParamId,
    /// Low-rank step projection, `[E, R]`.
    pub dt_proj: ParamId,
    /// Bias ahead of the softplus on the step size, `[E]`.
    pub dt_bias: ParamId,
    pub d_inner: usize,
    pub d_state: usize,
    pub dt_rank: usize,
}

/// Inverse of softplus.
fn softplus_inv(y: f64) -> f64 {
    y + libm::log(-libm::expm1(-y))
}

impl SsmParams {
    /// Registers a fresh parameter set.
    ///
    /// `A[e,n] = -(n+1)`, `D = 1`, and the initial step `softplus(dt_bias)`
    /// is log-uniform in `[DT_MIN, DT_MAX]`.
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        path: &Path,
        d_inner: usize,
        d_state: usize,
        dt_rank: usize,
    ) -> Result<Self> {
        if d_inner == 0 || d_state == 0 || dt_rank == 0 {
            return Err(Error::Config(format!("ssm dims must be positive: E={d_inner} N={d_state} R={dt_rank}")));
        }
        let a_log: Vec<f64> = (0..d_inner).flat_map(|_| (0..d_state).map(|n| libm::log((n + 1) as f64))).collect();
        let (lo, hi) = (libm::log(DT_MIN), libm::log(DT_MAX));
        let dt_bias: Vec<f64> = (0..d_inner).map(|_| softplus_inv(libm::exp(lo + init.unit() * (hi - lo)))).collect();
        let t = ParamKind::Trainable;
        Ok(Self {
            a_log: store.add(path.child("a_log").as_str(), Tensor::from_parts(vec![d_inner, d_state], a_log), t)?,
            d_skip: store.add(path.child("d_skip").as_str(), Tensor::full([d_inner], 1.0), t)?,
            x_proj: store.add(
                path.child("x_proj").as_str(),
                init.fan_in(&[dt_rank + 2 * d_state, d_inner], d_inner),
                t,
            )?,
            dt_proj: store.add(path.child("dt_proj").as_str(), init.fan_in(&[d_inner, dt_rank], dt_rank), t)?,
            dt_bias: store.add(path.child("dt_bias").as_str(), Tensor::from_parts(vec![d_inner], dt_bias), t)?,
            d_inner,
            d_state,
            dt_rank,
        })
    }
}

/// S6 over `x: [B, L, E]`: input-dependent `(delta, B, C)`, then the scan.
/// Output `y_k` depends only on `x_1..x_k`.
pub fn s6_forward(ctx: &mut Ctx<'_>, x: Var, p: &SsmParams) -> Result<Var> {
    let shape = ctx.g.shape(x).to_vec();
    if shape.len() != 3 || shape[2] != p.d_inner {
        return Err(Error::shape("s6", format!("input {shape:?} vs E={}", p.d_inner)));
    }
    let x_proj = ctx.p(p.x_proj);
    let proj = ctx.g.linear(x, x_proj, None)?;
    let parts = ctx.g.split(proj, 2, &[p.dt_rank, p.d_state, p.d_state])?;
    let (dt_raw, b, c) = (parts[0], parts[1], parts[2]);
    let dt_w = ctx.p(p.dt_proj);
    let dt_b = ctx.p(p.dt_bias);
    let dt = ctx.g.linear(dt_raw, dt_w, Some(dt_b))?;
    let delta = ctx.g.softplus(dt)?;
    let a_log = ctx.p(p.a_log);
    let d = ctx.p(p.d_skip);
    ctx.g.selective_scan(x, delta, a_log, b, c, d)
}
