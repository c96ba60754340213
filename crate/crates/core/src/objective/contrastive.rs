use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{Conv2dSpec, Float, Graph, NodeId, Tensor};

use super::same_shape;

pub const CONTRASTIVE_EPS: f64 = 1e-7;

/// Output channels of the three extractor stages.
const STAGE_WIDTHS: [usize; 3] = [8, 16, 32];

/// Frozen random feature stack: three stride-2 3x3 conv + SiLU stages with
/// He-normal weights drawn from `seed`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    pub seed: u64,
    stages: Vec<(Tensor<f64>, Tensor<f64>)>,
}

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let stages = STAGE_WIDTHS
            .iter()
            .map(|&cout| {
                let std = (2.0 / (cin * 9) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                let w = Tensor::from_fn(&[cout, cin, 3, 3], |_| normal.sample(&mut rng));
                let b = Tensor::zeros(&[cout]);
                cin = cout;
                (w, b)
            })
            .collect();
        Self { seed, stages }
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Per-stage feature nodes of `x`. The weights enter as constants.
    pub fn features<T: Float>(&self, g: &mut Graph<T>, x: NodeId) -> Result<Vec<NodeId>> {
        let spec = Conv2dSpec {
            stride: 2,
            padding: 1,
            groups: 1,
        };
        let mut out = Vec::with_capacity(self.stages.len());
        let mut h = x;
        for (w, b) in &self.stages {
            let w = g.constant(w.cast());
            let b = g.constant(b.cast());
            let y = g.conv2d(h, w, Some(b), spec)?;
            h = g.silu(y);
            out.push(h);
        }
        Ok(out)
    }
}

/// `sum_s (1/S) L1(fx_s(anchor), fx_s(positive)) / (L1(fx_s(anchor), fx_s(negative)) + eps)`.
/// Positive and negative are detached; gradients reach `anchor` only.
pub fn contrastive_loss<T: Float>(
    g: &mut Graph<T>,
    anchor: NodeId,
    positive: NodeId,
    negative: NodeId,
    fx: &FeatureExtractor,
) -> Result<NodeId> {
    same_shape(g, "contrastive_loss", anchor, positive)?;
    same_shape(g, "contrastive_loss", anchor, negative)?;
    let positive = g.detach(positive);
    let negative = g.detach(negative);
    let fa = fx.features(g, anchor)?;
    let fp = fx.features(g, positive)?;
    let fn_ = fx.features(g, negative)?;
    let ws = T::of(1.0 / fx.num_stages() as f64);
    let mut total: Option<NodeId> = None;
    for ((&a, &p), &n) in fa.iter().zip(&fp).zip(&fn_) {
        let p = g.detach(p);
        let n = g.detach(n);
        let dp = g.sub(a, p)?;
        let dp = g.abs(dp);
        let num = g.mean(dp);
        let dn = g.sub(a, n)?;
        let dn = g.abs(dn);
        let den = g.mean(dn);
        let den = g.add_scalar(den, T::of(CONTRASTIVE_EPS));
        let r = g.div(num, den)?;
        let r = g.scale(r, ws);
        total = Some(match total {
            None => r,
            Some(acc) => g.add(acc, r)?,
        });
    }
    Ok(total.expect("at least one stage"))
}
