//! Training objective (L1 + SSIM + contrastive) and full-reference quality
//! metrics (PSNR, SSIM, FSIM).

mod contrastive;
mod fsim;
mod metrics;
mod ssim;

use serde::{Deserialize, Serialize};

pub use contrastive::{contrastive_loss, FeatureExtractor, CONTRASTIVE_EPS};
pub use fsim::{fsim, phase_congruency};
pub use metrics::{psnr, Aggregate, MetricsReport};
pub use ssim::{gaussian_window, ssim, ssim_graph, ssim_loss, SSIM_SIGMA, SSIM_WINDOW};

use crate::error::{Error, Result};
use crate::tensor::{Float, Graph, NodeId};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta_w: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            beta_w: 0.8,
            gamma: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta_w", self.beta_w), ("gamma", self.gamma)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!("loss weight {name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

pub(crate) fn same_shape<T: Float>(g: &Graph<T>, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(op, format!("{:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1_loss<T: Float>(g: &mut Graph<T>, pred: NodeId, target: NodeId) -> Result<NodeId> {
    same_shape(g, "l1_loss", pred, target)?;
    let d = g.sub(pred, target)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// The weighted terms of one loss evaluation. Terms with zero weight are not
/// computed and are `None`.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: NodeId,
    pub l1: Option<NodeId>,
    pub ssim: Option<NodeId>,
    pub contrastive: Option<NodeId>,
}

/// `alpha L1 + beta_w (1 - SSIM) + gamma contrastive`, differentiable with
/// respect to `pred` only.
pub fn composite_loss<T: Float>(
    g: &mut Graph<T>,
    pred: NodeId,
    target: NodeId,
    degraded: NodeId,
    w: &LossWeights,
    fx: &FeatureExtractor,
) -> Result<LossTerms> {
    w.validate()?;
    same_shape(g, "composite_loss", pred, target)?;
    same_shape(g, "composite_loss", pred, degraded)?;
    let target = g.detach(target);
    let degraded = g.detach(degraded);
    let mut total: Option<NodeId> = None;
    let mut add = |g: &mut Graph<T>, term: NodeId, weight: f64| -> Result<NodeId> {
        let t = g.scale(term, T::of(weight));
        total = Some(match total {
            None => t,
            Some(acc) => g.add(acc, t)?,
        });
        Ok(term)
    };
    let l1 = if w.alpha > 0.0 {
        let l = l1_loss(g, pred, target)?;
        Some(add(g, l, w.alpha)?)
    } else {
        None
    };
    let ssim = if w.beta_w > 0.0 {
        let l = ssim_loss(g, pred, target, 1.0)?;
        Some(add(g, l, w.beta_w)?)
    } else {
        None
    };
    let contrastive = if w.gamma > 0.0 {
        let l = contrastive_loss(g, pred, target, degraded, fx)?;
        Some(add(g, l, w.gamma)?)
    } else {
        None
    };
    let total = match total {
        Some(t) => t,
        None => {
            let z = g.scale(pred, T::zero());
            g.sum(z)
        }
    };
    Ok(LossTerms {
        total,
        l1,
        ssim,
        contrastive,
    })
}
