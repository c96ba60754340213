//! Direct (no im2col) NCHW convolution kernels.

use super::Float;
use crate::error::{Error, Result};

/// Stride/padding/grouping of a 2D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

impl Conv2dSpec {
    pub fn same(kernel: usize) -> Self {
        Self {
            stride: 1,
            padding: kernel / 2,
            groups: 1,
        }
    }

    pub fn depthwise(kernel: usize, channels: usize) -> Self {
        Self {
            stride: 1,
            padding: kernel / 2,
            groups: channels,
        }
    }
}

/// Resolved geometry of one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub spec: Conv2dSpec,
}

impl ConvGeom {
    pub fn resolve(x_shape: &[usize], w_shape: &[usize], spec: Conv2dSpec) -> Result<Self> {
        let [n, c_in, h, w] = x_shape[..] else {
            return Err(Error::shape(
                "conv2d",
                format!("input must be N x C x H x W, got {x_shape:?}"),
            ));
        };
        let [c_out, c_per_group, kh, kw] = w_shape[..] else {
            return Err(Error::shape(
                "conv2d",
                format!("weight must be O x I/g x kH x kW, got {w_shape:?}"),
            ));
        };
        let groups = spec.groups;
        if groups == 0 || spec.stride == 0 {
            return Err(Error::InvalidArgument(
                "conv2d stride and groups must be positive".into(),
            ));
        }
        if c_in % groups != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {c_in} not divisible by groups {groups}"),
            ));
        }
        if c_out % groups != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("output channels {c_out} not divisible by groups {groups}"),
            ));
        }
        if c_in / groups != c_per_group {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input channels: weight expects {} per group, input has {} / {} groups",
                    c_per_group, c_in, groups
                ),
            ));
        }
        let ph = h + 2 * spec.padding;
        let pw = w + 2 * spec.padding;
        if ph < kh || pw < kw {
            return Err(Error::shape(
                "conv2d",
                format!("height/width {h}x{w} with padding {} smaller than kernel {kh}x{kw}", spec.padding),
            ));
        }
        Ok(Self {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            oh: (ph - kh) / spec.stride + 1,
            ow: (pw - kw) / spec.stride + 1,
            spec,
        })
    }

    /// Output columns `ow` whose input column `ow*stride + k - pad` lies in `[0, w)`.
    #[inline]
    fn valid_range(out: usize, inp: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
        // need o*stride + k >= pad  and  o*stride + k - pad < inp
        let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
        let hi_excl = if inp + pad > k {
            ((inp + pad - k - 1) / stride + 1).min(out)
        } else {
            0
        };
        (lo.min(hi_excl), hi_excl)
    }
}

pub(crate) fn conv2d_forward<T: Float>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let ConvGeom {
        n,
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        oh,
        ow,
        spec,
    } = *g;
    let groups = spec.groups;
    let cig = c_in / groups;
    let cog = c_out / groups;
    let (stride, pad) = (spec.stride, spec.padding);
    let mut out = vec![T::zero(); n * c_out * oh * ow];
    for b in 0..n {
        for oc in 0..c_out {
            let grp = oc / cog;
            let plane = &mut out[(b * c_out + oc) * oh * ow..(b * c_out + oc + 1) * oh * ow];
            if let Some(bias) = bias {
                plane.iter_mut().for_each(|v| *v = bias[oc]);
            }
            for icg in 0..cig {
                let ic = grp * cig + icg;
                let xin = &x[(b * c_in + ic) * h * w..(b * c_in + ic + 1) * h * w];
                for ki in 0..kh {
                    let (oy0, oy1) = ConvGeom::valid_range(oh, h, ki, stride, pad);
                    for kj in 0..kw {
                        let wv = weight[((oc * cig + icg) * kh + ki) * kw + kj];
                        if wv == T::zero() {
                            continue;
                        }
                        let (ox0, ox1) = ConvGeom::valid_range(ow, w, kj, stride, pad);
                        if ox0 >= ox1 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ki - pad;
                            let orow = &mut plane[oy * ow..(oy + 1) * ow];
                            let irow = &xin[iy * w..(iy + 1) * w];
                            if stride == 1 {
                                let ix0 = ox0 + kj - pad;
                                for (o, &i) in orow[ox0..ox1].iter_mut().zip(&irow[ix0..]) {
                                    *o += wv * i;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    orow[ox] += wv * irow[ox * stride + kj - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(dx, dweight, dbias)`; each is only computed when requested.
pub(crate) fn conv2d_backward<T: Float>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    dy: &[T],
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let ConvGeom {
        n,
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        oh,
        ow,
        spec,
    } = *g;
    let groups = spec.groups;
    let cig = c_in / groups;
    let cog = c_out / groups;
    let (stride, pad) = (spec.stride, spec.padding);
    let mut dx = want_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = want_dw.then(|| vec![T::zero(); weight.len()]);
    let db = want_db.then(|| {
        let mut db = vec![T::zero(); c_out];
        for b in 0..n {
            for (oc, d) in db.iter_mut().enumerate() {
                let plane = &dy[(b * c_out + oc) * oh * ow..(b * c_out + oc + 1) * oh * ow];
                *d += plane.iter().copied().sum::<T>();
            }
        }
        db
    });
    if dx.is_none() && dw.is_none() {
        return (dx, dw, db);
    }
    for b in 0..n {
        for oc in 0..c_out {
            let grp = oc / cog;
            let gplane = &dy[(b * c_out + oc) * oh * ow..(b * c_out + oc + 1) * oh * ow];
            for icg in 0..cig {
                let ic = grp * cig + icg;
                let xoff = (b * c_in + ic) * h * w;
                for ki in 0..kh {
                    let (oy0, oy1) = ConvGeom::valid_range(oh, h, ki, stride, pad);
                    for kj in 0..kw {
                        let widx = ((oc * cig + icg) * kh + ki) * kw + kj;
                        let wv = weight[widx];
                        let (ox0, ox1) = ConvGeom::valid_range(ow, w, kj, stride, pad);
                        if ox0 >= ox1 {
                            continue;
                        }
                        let mut acc = T::zero();
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ki - pad;
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            let row_off = xoff + iy * w;
                            if stride == 1 {
                                let ix0 = ox0 + kj - pad;
                                let span = ox1 - ox0;
                                if want_dw {
                                    let xrow = &x[row_off + ix0..row_off + ix0 + span];
                                    acc += grow[ox0..ox1]
                                        .iter()
                                        .zip(xrow)
                                        .map(|(&gv, &xv)| gv * xv)
                                        .sum::<T>();
                                }
                                if let Some(dx) = dx.as_mut() {
                                    let drow = &mut dx[row_off + ix0..row_off + ix0 + span];
                                    for (d, &gv) in drow.iter_mut().zip(&grow[ox0..ox1]) {
                                        *d += wv * gv;
                                    }
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    let ix = ox * stride + kj - pad;
                                    acc += grow[ox] * x[row_off + ix];
                                    if let Some(dx) = dx.as_mut() {
                                        dx[row_off + ix] += wv * grow[ox];
                                    }
                                }
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &[f64], xs: [usize; 4], wt: &[f64], ws: [usize; 4], spec: Conv2dSpec) -> Vec<f64> {
        let [n, c, h, w] = xs;
        let [o, cig, kh, kw] = ws;
        let cog = o / spec.groups;
        let oh = (h + 2 * spec.padding - kh) / spec.stride + 1;
        let ow = (w + 2 * spec.padding - kw) / spec.stride + 1;
        let mut out = vec![0.0; n * o * oh * ow];
        for b in 0..n {
            for oc in 0..o {
                let g = oc / cog;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0;
                        for i in 0..cig {
                            let ic = g * cig + i;
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * spec.stride + ki) as isize - spec.padding as isize;
                                    let ix = (ox * spec.stride + kj) as isize - spec.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    s += wt[((oc * cig + i) * kh + ki) * kw + kj]
                                        * x[((b * c + ic) * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                        out[((b * o + oc) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        let _ = c;
        out
    }

    #[test]
    fn matches_naive_over_strides_and_groups() {
        let cases = [
            ([2, 4, 7, 6], [6, 2, 3, 3], Conv2dSpec { stride: 1, padding: 1, groups: 2 }),
            ([1, 3, 8, 8], [4, 3, 3, 3], Conv2dSpec { stride: 2, padding: 1, groups: 1 }),
            ([1, 4, 5, 5], [4, 1, 5, 5], Conv2dSpec { stride: 1, padding: 2, groups: 4 }),
            ([2, 3, 9, 9], [2, 3, 3, 3], Conv2dSpec { stride: 3, padding: 0, groups: 1 }),
            ([1, 2, 1, 1], [2, 1, 5, 5], Conv2dSpec { stride: 1, padding: 2, groups: 2 }),
        ];
        for (xs, ws, spec) in cases {
            let x: Vec<f64> = (0..xs.iter().product()).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let wt: Vec<f64> = (0..ws.iter().product()).map(|i| ((i * 13 % 7) as f64) * 0.5 - 1.0).collect();
            let geom = ConvGeom::resolve(&xs, &ws, spec).unwrap();
            let got = conv2d_forward(&geom, &x, &wt, None);
            assert_eq!(got, naive(&x, xs, &wt, ws, spec), "{xs:?} {ws:?} {spec:?}");
        }
    }

    #[test]
    fn channel_error_names_dimension() {
        let err = ConvGeom::resolve(&[1, 3, 4, 4], &[2, 2, 3, 3], Conv2dSpec::default()).unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
    }
}
