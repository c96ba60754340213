//! Feature similarity index: phase congruency from a log-Gabor filter bank
//! combined with Scharr gradient magnitude, following the reference
//! constants of the original metric.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::spectral::{fft2, ifft2_complex, ifftshift, luminance, ComplexSpectrum};
use crate::tensor::{Float, Tensor};

const NSCALE: usize = 4;
const NORIENT: usize = 4;
const MIN_WAVELENGTH: f64 = 6.0;
const MULT: f64 = 2.0;
const SIGMA_ONF: f64 = 0.55;
const D_THETA_ON_SIGMA: f64 = 1.2;
const NOISE_K: f64 = 2.0;
const PC_EPS: f64 = 1e-4;
const LOWPASS_CUTOFF: f64 = 0.45;
const LOWPASS_ORDER: i32 = 15;
const T1: f64 = 0.85;
const T2: f64 = 160.0;
const MIN_SIZE: usize = 32;

fn freq_range(n: usize) -> Vec<f64> {
    if n % 2 == 1 {
        let half = (n as f64 - 1.0) / 2.0;
        (0..n).map(|i| (i as f64 - half) / (n as f64 - 1.0).max(1.0)).collect()
    } else {
        (0..n).map(|i| (i as f64 - (n / 2) as f64) / n as f64).collect()
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Phase congruency map of an `h x w` plane.
pub fn phase_congruency(im: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    let hw = h * w;
    let spectrum = fft2(im, h, w)?;
    let (xr, yr) = (freq_range(w), freq_range(h));
    let mut radius = vec![0.0; hw];
    let mut theta = vec![0.0; hw];
    let mut lp = vec![0.0; hw];
    for y in 0..h {
        for x in 0..w {
            let r = (xr[x] * xr[x] + yr[y] * yr[y]).sqrt();
            radius[y * w + x] = r;
            theta[y * w + x] = (-yr[y]).atan2(xr[x]);
            lp[y * w + x] = 1.0 / (1.0 + (r / LOWPASS_CUTOFF).powi(2 * LOWPASS_ORDER));
        }
    }
    let mut radius = ifftshift(&radius, h, w);
    let theta = ifftshift(&theta, h, w);
    let lp = ifftshift(&lp, h, w);
    radius[0] = 1.0;
    let log_sigma2 = 2.0 * SIGMA_ONF.ln().powi(2);
    let log_gabor: Vec<Vec<f64>> = (0..NSCALE)
        .map(|s| {
            let fo = 1.0 / (MIN_WAVELENGTH * MULT.powi(s as i32));
            let mut lg: Vec<f64> = radius
                .iter()
                .zip(&lp)
                .map(|(&r, &l)| (-(r / fo).ln().powi(2) / log_sigma2).exp() * l)
                .collect();
            lg[0] = 0.0;
            lg
        })
        .collect();
    let theta_sigma = PI / NORIENT as f64 / D_THETA_ON_SIGMA;
    let root_hw = (hw as f64).sqrt();
    let mut energy_all = vec![0.0; hw];
    let mut an_all = vec![0.0; hw];
    for o in 0..NORIENT {
        let angl = o as f64 * PI / NORIENT as f64;
        let (sa, ca) = angl.sin_cos();
        let spread: Vec<f64> = theta
            .iter()
            .map(|&t| {
                let (st, ct) = t.sin_cos();
                let ds = st * ca - ct * sa;
                let dc = ct * ca + st * sa;
                let dtheta = ds.atan2(dc).abs();
                (-dtheta * dtheta / (2.0 * theta_sigma * theta_sigma)).exp()
            })
            .collect();
        let mut sum_e = vec![0.0; hw];
        let mut sum_o = vec![0.0; hw];
        let mut sum_an = vec![0.0; hw];
        let mut eo: Vec<ComplexSpectrum<f64>> = Vec::with_capacity(NSCALE);
        let mut ifft_filters: Vec<Vec<f64>> = Vec::with_capacity(NSCALE);
        let mut em_n = 0.0;
        for (s, lg) in log_gabor.iter().enumerate() {
            let filter: Vec<f64> = lg.iter().zip(&spread).map(|(a, b)| a * b).collect();
            let filt_spec = ComplexSpectrum {
                re: filter.clone(),
                im: vec![0.0; hw],
                h,
                w,
            };
            ifft_filters.push(ifft2_complex(&filt_spec).re.iter().map(|v| v * root_hw).collect());
            let prod = ComplexSpectrum {
                re: spectrum.re.iter().zip(&filter).map(|(a, f)| a * f).collect(),
                im: spectrum.im.iter().zip(&filter).map(|(a, f)| a * f).collect(),
                h,
                w,
            };
            let resp = ifft2_complex(&prod);
            for i in 0..hw {
                sum_an[i] += resp.re[i].hypot(resp.im[i]);
                sum_e[i] += resp.re[i];
                sum_o[i] += resp.im[i];
            }
            if s == 0 {
                em_n = filter.iter().map(|f| f * f).sum();
            }
            eo.push(resp);
        }
        let mut energy = vec![0.0; hw];
        for i in 0..hw {
            let xe = sum_e[i].hypot(sum_o[i]) + PC_EPS;
            let (me, mo) = (sum_e[i] / xe, sum_o[i] / xe);
            for r in &eo {
                let (e, od) = (r.re[i], r.im[i]);
                energy[i] += e * me + od * mo - (e * mo - od * me).abs();
            }
        }
        let median_e2n = median((0..hw).map(|i| eo[0].re[i].powi(2) + eo[0].im[i].powi(2)).collect());
        let mean_e2n = -median_e2n / 0.5f64.ln();
        let noise_power = if em_n > 0.0 { mean_e2n / em_n } else { 0.0 };
        let mut sum_an2 = 0.0;
        let mut sum_aiaj = 0.0;
        for i in 0..hw {
            for si in 0..NSCALE {
                sum_an2 += ifft_filters[si][i].powi(2);
                for sj in si + 1..NSCALE {
                    sum_aiaj += ifft_filters[si][i] * ifft_filters[sj][i];
                }
            }
        }
        let est_noise_energy2 = 2.0 * noise_power * sum_an2 + 4.0 * noise_power * sum_aiaj;
        let tau = (est_noise_energy2 / 2.0).max(0.0).sqrt();
        let est_noise = tau * (PI / 2.0).sqrt();
        let est_noise_sigma = ((2.0 - PI / 2.0) * tau * tau).sqrt();
        let threshold = (est_noise + NOISE_K * est_noise_sigma) / 1.7;
        for i in 0..hw {
            energy_all[i] += (energy[i] - threshold).max(0.0);
            an_all[i] += sum_an[i];
        }
    }
    Ok(energy_all
        .iter()
        .zip(&an_all)
        .map(|(&e, &a)| if a > 0.0 { e / a } else { 0.0 })
        .collect())
}

/// Scharr gradient magnitude with zero padding (kernels scaled by 1/16).
fn gradient_magnitude(im: &[f64], h: usize, w: usize) -> Vec<f64> {
    const DX: [[f64; 3]; 3] = [[3.0, 0.0, -3.0], [10.0, 0.0, -10.0], [3.0, 0.0, -3.0]];
    let at = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            im[y as usize * w + x as usize]
        }
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (mut gx, mut gy) = (0.0, 0.0);
            for a in 0..3 {
                for b in 0..3 {
                    let v = at(y + a as isize - 1, x + b as isize - 1);
                    gx += DX[a][b] * v;
                    gy += DX[b][a] * v;
                }
            }
            out[y as usize * w + x as usize] = (gx / 16.0).hypot(gy / 16.0);
        }
    }
    out
}

/// `F x F` box average followed by keeping every `F`-th sample, used when
/// the short side exceeds 256 pixels.
fn downsample(im: &[f64], h: usize, w: usize, f: usize) -> (Vec<f64>, usize, usize) {
    if f <= 1 {
        return (im.to_vec(), h, w);
    }
    let off = f / 2;
    let (oh, ow) = (h.div_ceil(f), w.div_ceil(f));
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        for ox in 0..ow {
            let (cy, cx) = (oy * f + off, ox * f + off);
            let mut s = 0.0;
            for a in 0..f {
                for b in 0..f {
                    let (y, x) = (cy as isize - a as isize, cx as isize - b as isize);
                    if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                        s += im[y as usize * w + x as usize];
                    }
                }
            }
            out.push(s / (f * f) as f64);
        }
    }
    (out, oh, ow)
}

fn gray_255<T: Float>(t: &Tensor<T>) -> Result<(Vec<f64>, usize, usize)> {
    let (c, h, w) = match t.shape() {
        [c, h, w] | [1, c, h, w] => (*c, *h, *w),
        s => return Err(Error::shape("fsim", format!("expected C x H x W image, got {s:?}"))),
    };
    let data: Vec<f64> = t.data().iter().map(|v| v.as_f64() * 255.0).collect();
    match c {
        1 => Ok((data, h, w)),
        3 => Ok((luminance(&data, h * w), h, w)),
        _ => Err(Error::shape("fsim", format!("expected 1 or 3 channels, got {c}"))),
    }
}

/// FSIM of two images in `[0, 1]` (`3 x H x W` colour or `1 x H x W`
/// gray), computed on the luma plane scaled to `[0, 255]`. Both sides must
/// be at least 32 pixels. If neither image has any phase congruency (flat
/// images) the score is the mean gradient similarity.
pub fn fsim<T: Float>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::shape("fsim", format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    let (a, h, w) = gray_255(x)?;
    let (b, _, _) = gray_255(y)?;
    if h < MIN_SIZE || w < MIN_SIZE {
        return Err(Error::InvalidArgument(format!(
            "fsim needs images of at least {MIN_SIZE} x {MIN_SIZE}, got {h} x {w}"
        )));
    }
    let f = ((h.min(w) as f64 / 256.0).round() as usize).max(1);
    let (a, h2, w2) = downsample(&a, h, w, f);
    let (b, _, _) = downsample(&b, h, w, f);
    let pc1 = phase_congruency(&a, h2, w2)?;
    let pc2 = phase_congruency(&b, h2, w2)?;
    let g1 = gradient_magnitude(&a, h2, w2);
    let g2 = gradient_magnitude(&b, h2, w2);
    let (mut num, mut den, mut gsum) = (0.0, 0.0, 0.0);
    for i in 0..h2 * w2 {
        let pc_sim = (2.0 * pc1[i] * pc2[i] + T1) / (pc1[i].powi(2) + pc2[i].powi(2) + T1);
        let g_sim = (2.0 * g1[i] * g2[i] + T2) / (g1[i].powi(2) + g2[i].powi(2) + T2);
        let pcm = pc1[i].max(pc2[i]);
        num += g_sim * pc_sim * pcm;
        den += pcm;
        gsum += g_sim;
    }
    Ok(if den > 0.0 { num / den } else { gsum / (h2 * w2) as f64 })
}
