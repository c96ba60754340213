//! Sequential S6 recurrence, forward and adjoint.
//!
//! Layouts: `u`, `delta`, `y` are `batch x dim x len`; `b`, `c` are
//! `batch x state x len`; `a` is `dim x state`; `d` is `dim`. Positions are
//! visited in `order`, so any traversal of a flattened 2D grid can be
//! scanned without materialising the permuted sequence.

use crate::tensor::Float;

#[derive(Clone, Copy, Debug)]
pub struct ScanDims {
    pub batch: usize,
    pub dim: usize,
    pub state: usize,
    pub len: usize,
}

/// Runs `h_k = exp(dt*A) h_{k-1} + dt*B_k*u_k`, `y_k = C_k . h_k + D*u_k`.
///
/// Returns the outputs and every hidden state, stored as
/// `batch x dim x k x state` with `k` the scan step.
#[allow(clippy::too_many_arguments)]
pub fn scan_forward<T: Float>(
    dims: ScanDims,
    u: &[T],
    delta: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    d: &[T],
    order: &[usize],
) -> (Vec<T>, Vec<T>) {
    let ScanDims {
        batch,
        dim,
        state,
        len,
    } = dims;
    let mut y = vec![T::zero(); batch * dim * len];
    let mut states = vec![T::zero(); batch * dim * len * state];
    let mut h = vec![T::zero(); state];
    for n in 0..batch {
        let bn = &b[n * state * len..(n + 1) * state * len];
        let cn = &c[n * state * len..(n + 1) * state * len];
        for ch in 0..dim {
            let row = (n * dim + ch) * len;
            let a_row = &a[ch * state..(ch + 1) * state];
            h.iter_mut().for_each(|v| *v = T::zero());
            let st = &mut states[row * state..(row + len) * state];
            for (k, &p) in order.iter().enumerate() {
                let dt = delta[row + p];
                let x = u[row + p];
                let mut acc = d[ch] * x;
                for s in 0..state {
                    let abar = (dt * a_row[s]).exp();
                    h[s] = abar * h[s] + dt * bn[s * len + p] * x;
                    acc += cn[s * len + p] * h[s];
                }
                st[k * state..(k + 1) * state].copy_from_slice(&h);
                y[row + p] = acc;
            }
        }
    }
    (y, states)
}

pub struct ScanGrads<T> {
    pub du: Vec<T>,
    pub ddelta: Vec<T>,
    pub da: Vec<T>,
    pub db: Vec<T>,
    pub dc: Vec<T>,
    pub dd: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub fn scan_backward<T: Float>(
    dims: ScanDims,
    u: &[T],
    delta: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    d: &[T],
    order: &[usize],
    states: &[T],
    gy: &[T],
) -> ScanGrads<T> {
    let ScanDims {
        batch,
        dim,
        state,
        len,
    } = dims;
    let mut g = ScanGrads {
        du: vec![T::zero(); u.len()],
        ddelta: vec![T::zero(); delta.len()],
        da: vec![T::zero(); a.len()],
        db: vec![T::zero(); b.len()],
        dc: vec![T::zero(); c.len()],
        dd: vec![T::zero(); d.len()],
    };
    let mut gh = vec![T::zero(); state];
    for n in 0..batch {
        let boff = n * state * len;
        for ch in 0..dim {
            let row = (n * dim + ch) * len;
            let a_row = &a[ch * state..(ch + 1) * state];
            let st = &states[row * state..(row + len) * state];
            gh.iter_mut().for_each(|v| *v = T::zero());
            for k in (0..len).rev() {
                let p = order[k];
                let gyk = gy[row + p];
                let dt = delta[row + p];
                let x = u[row + p];
                let mut du = d[ch] * gyk;
                let mut ddt = T::zero();
                g.dd[ch] += gyk * x;
                for s in 0..state {
                    let hk = st[k * state + s];
                    let hprev = if k > 0 { st[(k - 1) * state + s] } else { T::zero() };
                    let bi = boff + s * len + p;
                    gh[s] += c[bi] * gyk;
                    g.dc[bi] += gyk * hk;
                    let abar = (dt * a_row[s]).exp();
                    let ghs = gh[s];
                    ddt += ghs * (a_row[s] * abar * hprev + b[bi] * x);
                    g.da[ch * state + s] += ghs * dt * abar * hprev;
                    g.db[bi] += ghs * dt * x;
                    du += ghs * dt * b[bi];
                    gh[s] = ghs * abar;
                }
                g.du[row + p] += du;
                g.ddelta[row + p] += ddt;
            }
        }
    }
    g
}
