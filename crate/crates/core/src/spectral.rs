//! Frequency-domain input path: 2D FFT, centred log-amplitude / phase
//! channels of the luminance plane, and the dual-domain stem feature.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scan::{Ss2d, Ss2dConfig};
use crate::tensor::{Float, Graph, NodeId, Tensor};

/// Real and imaginary planes of a 2D DFT, `h x w` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrum<T> {
    pub re: Vec<T>,
    pub im: Vec<T>,
    pub h: usize,
    pub w: usize,
}

impl<T: Float> ComplexSpectrum<T> {
    pub fn magnitude(&self) -> Vec<T> {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(&r, &i)| r.hypot(i))
            .collect()
    }

    pub fn phase(&self) -> Vec<T> {
        self.re.iter().zip(&self.im).map(|(&r, &i)| i.atan2(r)).collect()
    }
}

/// In-place 1D DFT of `len` complex values spaced `stride` apart.
/// Power-of-two lengths use iterative radix-2 Cooley-Tukey; other lengths
/// fall back to the direct `O(n^2)` sum.
fn fft1d<T: Float>(re: &mut [T], im: &mut [T], inverse: bool, scratch: &mut Vec<(T, T)>) {
    let n = re.len();
    if n <= 1 {
        return;
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    if !n.is_power_of_two() {
        scratch.clear();
        for k in 0..n {
            let (mut sr, mut si) = (0.0f64, 0.0f64);
            for t in 0..n {
                let ang = sign * 2.0 * PI * ((k * t) % n) as f64 / n as f64;
                let (s, c) = ang.sin_cos();
                let (xr, xi) = (re[t].as_f64(), im[t].as_f64());
                sr += xr * c - xi * s;
                si += xr * s + xi * c;
            }
            scratch.push((T::of(sr), T::of(si)));
        }
        for (k, &(r, i)) in scratch.iter().enumerate() {
            re[k] = r;
            im[k] = i;
        }
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut size = 2;
    while size <= n {
        let half = size / 2;
        let step = sign * 2.0 * PI / size as f64;
        for k in 0..half {
            let (s, c) = (step * k as f64).sin_cos();
            let (wr, wi) = (T::of(c), T::of(s));
            for start in (0..n).step_by(size) {
                let (a, b) = (start + k, start + k + half);
                let tr = re[b] * wr - im[b] * wi;
                let ti = re[b] * wi + im[b] * wr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
        size *= 2;
    }
}

fn transform2d<T: Float>(re: &mut [T], im: &mut [T], h: usize, w: usize, inverse: bool) {
    let mut scratch = Vec::new();
    for row in 0..h {
        fft1d(
            &mut re[row * w..(row + 1) * w],
            &mut im[row * w..(row + 1) * w],
            inverse,
            &mut scratch,
        );
    }
    let (mut cr, mut ci) = (vec![T::zero(); h], vec![T::zero(); h]);
    for col in 0..w {
        for row in 0..h {
            cr[row] = re[row * w + col];
            ci[row] = im[row * w + col];
        }
        fft1d(&mut cr, &mut ci, inverse, &mut scratch);
        for row in 0..h {
            re[row * w + col] = cr[row];
            im[row * w + col] = ci[row];
        }
    }
}

/// Unnormalised forward DFT of a real `h x w` plane.
pub fn fft2<T: Float>(plane: &[T], h: usize, w: usize) -> Result<ComplexSpectrum<T>> {
    if h == 0 || w == 0 || plane.len() != h * w {
        return Err(Error::shape(
            "fft2",
            format!("plane of {} values is not {h} x {w}", plane.len()),
        ));
    }
    if !plane.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("fft2 input".into()));
    }
    let mut re = plane.to_vec();
    let mut im = vec![T::zero(); h * w];
    transform2d(&mut re, &mut im, h, w, false);
    Ok(ComplexSpectrum { re, im, h, w })
}

/// Complex forward DFT (used by filter banks that work on complex planes).
pub fn fft2_complex<T: Float>(spec: &ComplexSpectrum<T>) -> ComplexSpectrum<T> {
    let mut out = spec.clone();
    transform2d(&mut out.re, &mut out.im, spec.h, spec.w, false);
    out
}

/// Inverse DFT scaled by `1 / (h w)`, returning both planes.
pub fn ifft2_complex<T: Float>(spec: &ComplexSpectrum<T>) -> ComplexSpectrum<T> {
    let mut out = spec.clone();
    transform2d(&mut out.re, &mut out.im, spec.h, spec.w, true);
    let scale = T::of(1.0 / (spec.h * spec.w) as f64);
    out.re.iter_mut().for_each(|v| *v *= scale);
    out.im.iter_mut().for_each(|v| *v *= scale);
    out
}

/// Inverse DFT, real part.
pub fn ifft2<T: Float>(spec: &ComplexSpectrum<T>) -> Vec<T> {
    ifft2_complex(spec).re
}

/// Moves the zero-frequency bin to `(h/2, w/2)`.
pub fn fftshift<T: Copy>(plane: &[T], h: usize, w: usize) -> Vec<T> {
    let mut out = plane.to_vec();
    for y in 0..h {
        for x in 0..w {
            out[((y + h / 2) % h) * w + (x + w / 2) % w] = plane[y * w + x];
        }
    }
    out
}

/// Inverse of [`fftshift`] (differs for odd sizes).
pub fn ifftshift<T: Copy>(plane: &[T], h: usize, w: usize) -> Vec<T> {
    let mut out = plane.to_vec();
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = plane[((y + h / 2) % h) * w + (x + w / 2) % w];
        }
    }
    out
}

/// BT.601 luma of a `3 x h x w` plane stack.
pub fn luminance<T: Float>(rgb: &[T], hw: usize) -> Vec<T> {
    let (r, g, b) = (&rgb[..hw], &rgb[hw..2 * hw], &rgb[2 * hw..3 * hw]);
    (0..hw)
        .map(|i| T::of(0.299) * r[i] + T::of(0.587) * g[i] + T::of(0.114) * b[i])
        .collect()
}

/// Two centred spectral channels of an RGB image (`3 x H x W` or
/// `1 x 3 x H x W`), returned as `2 x H x W`:
///
/// * `log(1 + |F(Y)|) / log(1 + max |F(Y)|)` in `[0, 1]`,
/// * `angle(F(Y)) / pi` in `[-1, 1]`.
///
/// An all-zero image gives all-zero channels.
pub fn spectral_channels<T: Float>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = match image.shape() {
        [3, h, w] | [1, 3, h, w] => (*h, *w),
        s => {
            return Err(Error::shape(
                "spectral_channels",
                format!("expected 3 x H x W image, got {s:?}"),
            ))
        }
    };
    let hw = h * w;
    let clamped: Vec<T> = image
        .data()
        .iter()
        .map(|&v| v.max(T::zero()).min(T::one()))
        .collect();
    if !image.all_finite() {
        return Err(Error::NonFinite("spectral_channels input".into()));
    }
    let y = luminance(&clamped, hw);
    let spec = fft2(&y, h, w)?;
    let mag = fftshift(&spec.magnitude(), h, w);
    let phase = fftshift(&spec.phase(), h, w);
    let max = mag.iter().copied().fold(T::zero(), T::max);
    let mut out = Vec::with_capacity(2 * hw);
    if max > T::zero() {
        let norm = max.ln_1p();
        out.extend(mag.iter().map(|&m| m.ln_1p() / norm));
        out.extend(phase.iter().map(|&p| p / T::of(PI)));
    } else {
        out.resize(2 * hw, T::zero());
    }
    Tensor::new(&[2, h, w], out)
}

/// Spectral channels for every image of an `N x 3 x H x W` batch.
pub fn spectral_batch<T: Float>(images: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, _, _, _) = images.dims4()?;
    let items = (0..n)
        .map(|i| spectral_channels(&images.batch_item(i)?))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&items)
}

/// The dual-domain stem: SS2D over the RGB image concatenated with SS2D over
/// its spectral channels, `3 + 2 = 5` channels. The spectral input is a
/// constant (no gradient flows through the FFT).
#[derive(Clone, Debug)]
pub struct DualDomainStem {
    pub spatial: Option<Ss2d>,
    pub spectral: Option<Ss2d>,
    pub use_fft: bool,
}

impl DualDomainStem {
    pub fn new(d_state: usize, expand: usize, tie: bool, use_ss2d: bool, use_fft: bool) -> Self {
        let cfg = |d_model| Ss2dConfig {
            d_model,
            d_state,
            expand,
            tie_directions: tie,
        };
        Self {
            spatial: use_ss2d.then(|| Ss2d::new("stem.ss2d_rgb", cfg(3))),
            spectral: (use_ss2d && use_fft).then(|| Ss2d::new("stem.ss2d_fft", cfg(2))),
            use_fft,
        }
    }

    pub fn out_channels(&self) -> usize {
        if self.use_fft {
            5
        } else {
            3
        }
    }

    pub fn init<T: Float, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        if let Some(s) = &self.spatial {
            s.init(store, rng);
        }
        if let Some(s) = &self.spectral {
            s.init(store, rng);
        }
    }

    /// `image` is an `N x 3 x H x W` node; its spectral channels are computed
    /// from the node's current value and enter the graph as a constant.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, image: NodeId) -> Result<NodeId> {
        let spatial = match &self.spatial {
            Some(s) => s.forward(g, store, image)?,
            None => image,
        };
        if !self.use_fft {
            return Ok(spatial);
        }
        let spec = spectral_batch(g.value(image))?;
        let spec = g.constant(spec);
        let spec = match &self.spectral {
            Some(s) => s.forward(g, store, spec)?,
            None => spec,
        };
        g.concat_channels(spatial, spec)
    }
}

/// `I_F = SS2D(I) (+) SS2D(I_S)` for a batch of images.
pub fn build_initial_features<T: Float>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    stem: &DualDomainStem,
    image: NodeId,
) -> Result<NodeId> {
    stem.forward(g, store, image)
}
