//! Selective state-space scan (S6) and the four-direction SS2D layer.
//!
//! Discretisation is zero-order hold on `A` (`A_bar = exp(dt * A)`) with the
//! simplified input matrix `B_bar = dt * B`. The recurrence runs strictly
//! sequentially, `O(L * dim * state)`.

pub mod kernel;
mod probe;
mod ss2d;

use rand::Rng;

pub use probe::{doubling_ratios, quadratic_attention_baseline, scan_complexity_probe, ProbeRow};
pub use ss2d::{direction_orders, Ss2d, Ss2dConfig};

use crate::error::{Error, Result};
use crate::tensor::{softplus, Float};

use kernel::ScanDims;

/// Explicit per-step inputs of one scan, sequence-major.
#[derive(Clone, Copy, Debug)]
pub struct ScanInputs<'a, T> {
    /// `L x dim`
    pub u: &'a [T],
    /// `L x dim`, positive step sizes.
    pub delta: &'a [T],
    /// `dim x state`, the effective (negative) state matrix.
    pub a: &'a [T],
    /// `L x state`
    pub b: &'a [T],
    /// `L x state`
    pub c: &'a [T],
    /// `dim`
    pub d: &'a [T],
    pub dim: usize,
    pub state: usize,
}

/// Scans one sequence with explicit `delta/A/B/C/D`; returns `L x dim`.
pub fn scan_sequence<T: Float>(inp: ScanInputs<'_, T>) -> Result<Vec<T>> {
    let (dim, state) = (inp.dim, inp.state);
    if dim == 0 || state == 0 {
        return Err(Error::InvalidArgument("scan needs dim >= 1 and state >= 1".into()));
    }
    if inp.u.is_empty() || !inp.u.len().is_multiple_of(dim) {
        return Err(Error::InvalidArgument(format!(
            "sequence length must be >= 1 (u has {} values for dim {dim})",
            inp.u.len()
        )));
    }
    let len = inp.u.len() / dim;
    if inp.delta.len() != len * dim
        || inp.a.len() != dim * state
        || inp.b.len() != len * state
        || inp.c.len() != len * state
        || inp.d.len() != dim
    {
        return Err(Error::shape("scan_sequence", "inputs disagree on L/dim/state"));
    }
    if !inp.u.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("scan input contains NaN or infinity".into()));
    }
    let u = transpose(inp.u, len, dim);
    let delta = transpose(inp.delta, len, dim);
    let b = transpose(inp.b, len, state);
    let c = transpose(inp.c, len, state);
    let order: Vec<usize> = (0..len).collect();
    let dims = ScanDims {
        batch: 1,
        dim,
        state,
        len,
    };
    let (y, _) = kernel::scan_forward(dims, &u, &delta, inp.a, &b, &c, inp.d, &order);
    Ok(transpose(&y, dim, len))
}

fn transpose<T: Copy>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for j in 0..cols {
        for i in 0..rows {
            out.push(x[i * cols + j]);
        }
    }
    out
}

/// Parameters of one S6 recurrence with input-dependent `delta`, `B`, `C`.
#[derive(Clone, Debug)]
pub struct SelectiveScanParams<T> {
    /// `dim x state`; the effective state matrix is `-exp(a_log)`.
    pub a_log: Vec<T>,
    /// `dim`
    pub d: Vec<T>,
    /// `dim x dim` row-major, `delta_t = softplus(dt_proj u_t + dt_bias)`.
    pub dt_proj: Vec<T>,
    pub dt_bias: Vec<T>,
    /// `state x dim`
    pub b_proj: Vec<T>,
    /// `state x dim`
    pub c_proj: Vec<T>,
    pub dim: usize,
    pub state: usize,
}

impl<T: Float> SelectiveScanParams<T> {
    /// Standard S6 initialisation: `a_log = log(1..=state)` per channel, `D = 1`,
    /// projections ~ N(0, 0.02), `dt_bias` so that softplus lands in `[1e-3, 1e-1]`.
    pub fn init<R: Rng + ?Sized>(dim: usize, state: usize, rng: &mut R) -> Self {
        let mut normal = |n: usize| -> Vec<T> {
            crate::tensor::Tensor::<T>::trunc_normal(&[n], crate::nn::INIT_STD, rng).into_data()
        };
        let dt_proj = normal(dim * dim);
        let b_proj = normal(state * dim);
        let c_proj = normal(state * dim);
        Self {
            a_log: a_log_init(dim, state),
            d: vec![T::one(); dim],
            dt_proj,
            dt_bias: dt_bias_init(dim, rng),
            b_proj,
            c_proj,
            dim,
            state,
        }
    }

    pub fn a(&self) -> Vec<T> {
        self.a_log.iter().map(|&v| -v.exp()).collect()
    }
}

pub(crate) fn a_log_init<T: Float>(dim: usize, state: usize) -> Vec<T> {
    (0..dim)
        .flat_map(|_| (1..=state).map(|s| T::of((s as f64).ln())))
        .collect()
}

pub(crate) const DT_MIN: f64 = 1e-3;
pub(crate) const DT_MAX: f64 = 1e-1;

/// `softplus^-1(dt)` with `dt` log-uniform in `[DT_MIN, DT_MAX]`.
pub(crate) fn dt_bias_init<T: Float, R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<T> {
    (0..dim)
        .map(|_| {
            let dt = rng.gen_range(DT_MIN.ln()..DT_MAX.ln()).exp();
            T::of(dt + (-(-dt).exp_m1()).ln())
        })
        .collect()
}

/// Full selective scan of a sequence `u` (`L x dim`): projects `delta`, `B`,
/// `C` from each step and runs the recurrence. Returns `L x dim`.
pub fn selective_scan_1d<T: Float>(u: &[T], p: &SelectiveScanParams<T>) -> Result<Vec<T>> {
    let (dim, state) = (p.dim, p.state);
    if u.is_empty() || !u.len().is_multiple_of(dim) {
        return Err(Error::InvalidArgument(format!(
            "sequence length must be >= 1 (u has {} values for dim {dim})",
            u.len()
        )));
    }
    let len = u.len() / dim;
    let mut delta = vec![T::zero(); len * dim];
    let mut b = vec![T::zero(); len * state];
    let mut c = vec![T::zero(); len * state];
    for t in 0..len {
        let ut = &u[t * dim..(t + 1) * dim];
        for i in 0..dim {
            let z = dot(&p.dt_proj[i * dim..(i + 1) * dim], ut) + p.dt_bias[i];
            delta[t * dim + i] = softplus(z);
        }
        for s in 0..state {
            b[t * state + s] = dot(&p.b_proj[s * dim..(s + 1) * dim], ut);
            c[t * state + s] = dot(&p.c_proj[s * dim..(s + 1) * dim], ut);
        }
    }
    let a = p.a();
    scan_sequence(ScanInputs {
        u,
        delta: &delta,
        a: &a,
        b: &b,
        c: &c,
        d: &p.d,
        dim,
        state,
    })
}

fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}
