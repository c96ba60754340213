use crate::error::{Error, Result};
use crate::tensor::{Conv2dSpec, Float, Graph, NodeId, Tensor};

use super::same_shape;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// Normalised `size x size` Gaussian, row-major.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g1: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g1.iter().sum();
    let g1: Vec<f64> = g1.iter().map(|v| v / s).collect();
    let mut out = Vec::with_capacity(size * size);
    for a in &g1 {
        for b in &g1 {
            out.push(a * b);
        }
    }
    out
}

/// Mean SSIM over all valid 11x11 windows and all channels of two
/// `N x C x H x W` nodes, with dynamic range `range`.
pub fn ssim_graph<T: Float>(g: &mut Graph<T>, x: NodeId, y: NodeId, range: f64) -> Result<NodeId> {
    same_shape(g, "ssim", x, y)?;
    let (_, c, h, w) = g.value(x).dims4()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs images of at least {SSIM_WINDOW} x {SSIM_WINDOW}, got {h} x {w}"
        )));
    }
    let win = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let kernel = Tensor::from_fn(&[c, 1, SSIM_WINDOW, SSIM_WINDOW], |i| T::of(win[i % win.len()]));
    let kernel = g.constant(kernel);
    let spec = Conv2dSpec {
        stride: 1,
        padding: 0,
        groups: c,
    };
    let c1 = T::of((0.01 * range).powi(2));
    let c2 = T::of((0.03 * range).powi(2));
    let mx = g.conv2d(x, kernel, None, spec)?;
    let my = g.conv2d(y, kernel, None, spec)?;
    let xx = g.square(x);
    let yy = g.square(y);
    let xy = g.mul(x, y)?;
    let exx = g.conv2d(xx, kernel, None, spec)?;
    let eyy = g.conv2d(yy, kernel, None, spec)?;
    let exy = g.conv2d(xy, kernel, None, spec)?;
    let mx2 = g.square(mx);
    let my2 = g.square(my);
    let mxy = g.mul(mx, my)?;
    let sxx = g.sub(exx, mx2)?;
    let syy = g.sub(eyy, my2)?;
    let sxy = g.sub(exy, mxy)?;
    // ((2 mx my + c1)(2 sxy + c2)) / ((mx^2 + my^2 + c1)(sxx + syy + c2))
    let a = g.scale(mxy, T::of(2.0));
    let a = g.add_scalar(a, c1);
    let b = g.scale(sxy, T::of(2.0));
    let b = g.add_scalar(b, c2);
    let num = g.mul(a, b)?;
    let d1 = g.add(mx2, my2)?;
    let d1 = g.add_scalar(d1, c1);
    let d2 = g.add(sxx, syy)?;
    let d2 = g.add_scalar(d2, c2);
    let den = g.mul(d1, d2)?;
    let map = g.div(num, den)?;
    Ok(g.mean(map))
}

/// `1 - SSIM`
pub fn ssim_loss<T: Float>(g: &mut Graph<T>, x: NodeId, y: NodeId, range: f64) -> Result<NodeId> {
    let s = ssim_graph(g, x, y, range)?;
    Ok(g.rsub_scalar(T::one(), s))
}

/// SSIM of two tensors (`C x H x W` or `N x C x H x W`), evaluated in 64-bit.
pub fn ssim<T: Float>(x: &Tensor<T>, y: &Tensor<T>, range: f64) -> Result<f64> {
    let as4 = |t: &Tensor<T>| -> Result<Tensor<f64>> {
        let t = t.cast::<f64>();
        match t.shape().len() {
            3 => {
                let s = t.shape().to_vec();
                t.reshape(&[1, s[0], s[1], s[2]])
            }
            _ => Ok(t),
        }
    };
    let mut g = Graph::<f64>::new();
    let xn = g.constant(as4(x)?);
    let yn = g.constant(as4(y)?);
    let s = ssim_graph(&mut g, xn, yn, range)?;
    Ok(g.value(s).data()[0])
}
