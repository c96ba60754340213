//! Central finite-difference gradient checking (64-bit).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, Tensor};
use crate::error::Result;
use crate::nn::ParamStore;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input index, flat element index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-6)`. The floor keeps vanishing gradients,
/// where central differences are pure rounding noise, from dominating.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Coordinates to probe: every element, or `n` sampled uniformly over all
/// inputs with a fixed seed.
pub fn select_coords(inputs: &[Tensor<f64>], max_coords: Option<usize>, seed: u64) -> Vec<(usize, usize)> {
    let all: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    match max_coords {
        Some(n) if n < all.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked: Vec<usize> = sample(&mut rng, all.len(), n).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|k| all[k]).collect()
        }
        _ => all,
    }
}

/// Compares `analytic` gradients against central differences of `value`.
pub fn compare_gradients(
    value: impl Fn(&[Tensor<f64>]) -> Result<f64>,
    inputs: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    h: f64,
    coords: &[(usize, usize)],
) -> Result<GradCheckReport> {
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for &(i, j) in coords {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + h;
        let fp = value(&work)?;
        work[i].data_mut()[j] = orig - h;
        let fm = value(&work)?;
        work[i].data_mut()[j] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i].data()[j];
        let e = rel_err(a, numeric);
        report.checked += 1;
        if e >= report.max_rel_err {
            report.max_rel_err = e;
            report.worst = (i, j);
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

/// Finite-difference check of a scalar function built on a [`Graph`].
///
/// `f` receives a fresh graph and one gradient-tracking leaf per input and
/// returns the scalar output node.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor<f64>], h: f64, max_coords: Option<usize>) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &ids)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| g.grad(id).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let value = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &ids)?;
        Ok(g.value(out).data()[0])
    };
    let coords = select_coords(inputs, max_coords, 0x6c3c);
    compare_gradients(value, inputs, &analytic, h, &coords)
}

/// Finite-difference check of a scalar function with respect to the
/// parameters in `store`.
///
/// `f` builds the scalar output on a fresh graph, binding whatever it needs
/// from the store it is given. `max_coords` elements are sampled (with
/// `seed`) over all parameters, or every element when `None`.
pub fn param_grad_check<F>(
    f: F,
    store: &ParamStore<f64>,
    h: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    let names: Vec<String> = store.params().keys().cloned().collect();
    let inputs: Vec<Tensor<f64>> = store.params().values().cloned().collect();
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = names
        .iter()
        .zip(&inputs)
        .map(|(n, t)| {
            g.param_node(n)
                .and_then(|id| g.grad(id))
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();
    let value = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut s = store.clone();
        for (n, t) in names.iter().zip(xs) {
            *s.get_mut(n)? = t.clone();
        }
        let mut g = Graph::new();
        let out = f(&mut g, &s)?;
        Ok(g.value(out).data()[0])
    };
    let coords = select_coords(&inputs, max_coords, seed);
    compare_gradients(value, &inputs, &analytic, h, &coords)
}
