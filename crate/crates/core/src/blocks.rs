//! Composite building blocks: MS-Fusion, ColorFusion skips, and the
//! encoder/decoder stages of the U-shaped network.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ParamStore};
use crate::scan::{Ss2d, Ss2dConfig};
use crate::spectral::luminance;
use crate::tensor::{Conv2dSpec, Float, Graph, NodeId, Tensor};

pub const MS_KERNELS: [usize; 3] = [1, 3, 5];

#[derive(Clone, Debug)]
struct Branch {
    pw1: Conv2d,
    dw1: Conv2d,
    pw2: Conv2d,
    dw2: Conv2d,
}

/// Residual multi-scale block: three depthwise-separable branches with
/// kernels 1, 3 and 5, concatenated and merged by a 1x1 conv.
#[derive(Clone, Debug)]
pub struct MsFusion {
    pub name: String,
    pub channels: usize,
    branches: Vec<Branch>,
    merge: Conv2d,
}

impl MsFusion {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        let name = name.into();
        let branches = MS_KERNELS
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                let bn = format!("{name}.branch{}", i + 1);
                Branch {
                    pw1: Conv2d::pointwise(format!("{bn}.pw1"), channels, channels),
                    dw1: Conv2d::depthwise(format!("{bn}.dw1"), channels, k),
                    pw2: Conv2d::pointwise(format!("{bn}.pw2"), channels, channels),
                    dw2: Conv2d::depthwise(format!("{bn}.dw2"), channels, k),
                }
            })
            .collect();
        Self {
            merge: Conv2d::pointwise(format!("{name}.merge"), 3 * channels, channels),
            branches,
            channels,
            name,
        }
    }

    /// The merge conv starts at zero, so the block begins as the identity.
    pub fn init<T: Float, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        for b in &self.branches {
            b.pw1.init(store, rng);
            b.dw1.init(store, rng);
            b.pw2.init(store, rng);
            b.dw2.init(store, rng);
        }
        self.merge.init_zero(store);
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let c = g.value(x).dims4()?.1;
        if c != self.channels {
            return Err(Error::shape(
                "ms_fusion",
                format!("{} expects {} channels, got {c}", self.name, self.channels),
            ));
        }
        let mut cat: Option<NodeId> = None;
        for b in &self.branches {
            let y = b.pw1.forward(g, store, x)?;
            let y = b.dw1.forward(g, store, y)?;
            let y = g.silu(y);
            let y = b.pw2.forward(g, store, y)?;
            let y = b.dw2.forward(g, store, y)?;
            cat = Some(match cat {
                None => y,
                Some(acc) => g.concat_channels(acc, y)?,
            });
        }
        let merged = self.merge.forward(g, store, cat.expect("three branches"))?;
        g.add(merged, x)
    }
}

/// Background light of one `3 x H x W` image in `[0, 1]`: the per-channel
/// mean over the brightest 0.1% of pixels by luminance, at least 10 pixels.
/// Images with fewer than 10 pixels use the global mean.
pub fn estimate_background_light<T: Float>(image: &Tensor<T>) -> Result<[T; 3]> {
    let (h, w) = match image.shape() {
        [3, h, w] | [1, 3, h, w] => (*h, *w),
        s => {
            return Err(Error::shape(
                "estimate_background_light",
                format!("expected 3 x H x W image, got {s:?}"),
            ))
        }
    };
    let hw = h * w;
    let data = image.data();
    let y = luminance(data, hw);
    let k = ((hw as f64 * 1e-3).ceil() as usize).max(10);
    let mut idx: Vec<usize> = (0..hw).collect();
    if hw > k {
        // brightest first; ties broken by position so the selection is deterministic
        idx.select_nth_unstable_by(k - 1, |&a, &b| {
            y[b].partial_cmp(&y[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        idx.truncate(k);
    }
    let count = T::of(idx.len() as f64);
    let mut out = [T::zero(); 3];
    for (c, o) in out.iter_mut().enumerate() {
        let s: T = idx.iter().map(|&i| data[c * hw + i]).sum();
        *o = (s / count).max(T::zero()).min(T::one());
    }
    Ok(out)
}

/// Background light for each item of an `N x 3 x H x W` batch, as an
/// `N x 3 x 1 x 1` tensor.
pub fn background_light_batch<T: Float>(images: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, _, _, _) = images.dims4()?;
    let mut data = Vec::with_capacity(3 * n);
    for i in 0..n {
        data.extend(estimate_background_light(&images.batch_item(i)?)?);
    }
    Tensor::new(&[n, 3, 1, 1], data)
}

/// Prior-guided skip fusion:
///
/// ```text
/// b_p = conv(b_e + b_l)            broadcast over H x W
/// b_f = sigmoid(conv(f))
/// t'  = sigmoid(conv(f))
/// B'  = w b_f + (1 - w) b_p,       w = sigmoid(omega_raw)
/// c   = f t' + B' (1 - t')
/// ```
#[derive(Clone, Debug)]
pub struct ColorFusion {
    pub name: String,
    pub channels: usize,
    prior: Conv2d,
    bf_head: Conv2d,
    t_head: Conv2d,
}

/// Intermediate maps of one ColorFusion evaluation.
#[derive(Clone, Copy, Debug)]
pub struct ColorFusionOut {
    pub c: NodeId,
    pub b_prime: NodeId,
    pub t: NodeId,
    pub b_f: NodeId,
    pub b_p: NodeId,
    pub omega: NodeId,
}

impl ColorFusion {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        let name = name.into();
        Self {
            prior: Conv2d::pointwise(format!("{name}.prior"), 3, channels),
            bf_head: Conv2d::pointwise(format!("{name}.bf_head"), channels, channels),
            t_head: Conv2d::pointwise(format!("{name}.t_head"), channels, channels),
            channels,
            name,
        }
    }

    pub fn b_l_name(&self) -> String {
        format!("{}.b_l", self.name)
    }

    pub fn omega_name(&self) -> String {
        format!("{}.omega_raw", self.name)
    }

    pub fn t_head(&self) -> &Conv2d {
        &self.t_head
    }

    pub fn init<T: Float, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.prior.init(store, rng);
        self.bf_head.init(store, rng);
        self.t_head.init(store, rng);
        store.insert(self.b_l_name(), Tensor::zeros(&[1, 3, 1, 1]));
        store.insert(self.omega_name(), Tensor::zeros(&[1, 1, 1, 1]));
    }

    /// `b_e` is an `N x 3 x 1 x 1` node (one background light per image).
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        f: NodeId,
        b_e: NodeId,
    ) -> Result<ColorFusionOut> {
        let (n, c, h, w) = g.value(f).dims4()?;
        if c != self.channels {
            return Err(Error::shape(
                "color_fusion",
                format!("{} expects {} channels, got {c}", self.name, self.channels),
            ));
        }
        if g.shape(b_e) != [n, 3, 1, 1] {
            return Err(Error::shape(
                "color_fusion",
                format!("background light {:?} for batch {n}", g.shape(b_e)),
            ));
        }
        let b_e = clamp_unit(g, b_e, &self.name);
        let full = [n, c, h, w];
        let b_l = store.bind(g, &self.b_l_name())?;
        let b_l = g.expand(b_l, &[n, 3, 1, 1])?;
        let prior_in = g.add(b_e, b_l)?;
        let b_p = self.prior.forward(g, store, prior_in)?;
        let b_p = g.expand(b_p, &full)?;
        let b_f = self.bf_head.forward(g, store, f)?;
        let b_f = g.sigmoid(b_f);
        let t = self.t_head.forward(g, store, f)?;
        let t = g.sigmoid(t);
        let omega_raw = store.bind(g, &self.omega_name())?;
        let omega = g.sigmoid(omega_raw);
        let omega_full = g.expand(omega, &full)?;
        // B' = b_p + w (b_f - b_p)
        let diff = g.sub(b_f, b_p)?;
        let scaled = g.mul(omega_full, diff)?;
        let b_prime = g.add(b_p, scaled)?;
        // c = B' + t' (f - B')
        let gap = g.sub(f, b_prime)?;
        let gated = g.mul(t, gap)?;
        let out = g.add(b_prime, gated)?;
        Ok(ColorFusionOut {
            c: out,
            b_prime,
            t,
            b_f,
            b_p,
            omega,
        })
    }
}

fn clamp_unit<T: Float>(g: &mut Graph<T>, b_e: NodeId, name: &str) -> NodeId {
    let v = g.value(b_e);
    if v.data().iter().all(|&x| x >= T::zero() && x <= T::one()) {
        return b_e;
    }
    log::warn!("{name}: background light outside [0, 1], clamping");
    let clamped = v.map(|x| x.max(T::zero()).min(T::one()));
    g.constant(clamped)
}

/// Downsample (stride-2 3x3 conv), then optional SS2D and MS-Fusion.
#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    down: Conv2d,
    ss2d: Option<Ss2d>,
    ms: Option<MsFusion>,
}

impl EncoderStage {
    pub fn new(
        name: impl Into<String>,
        in_ch: usize,
        out_ch: usize,
        ss2d: Option<Ss2dConfig>,
        use_ms_fusion: bool,
    ) -> Self {
        let name = name.into();
        let spec = Conv2dSpec {
            stride: 2,
            padding: 1,
            groups: 1,
        };
        Self {
            down: Conv2d::new(format!("{name}.down"), in_ch, out_ch, 3, spec),
            ss2d: ss2d.map(|cfg| {
                Ss2d::new(
                    format!("{name}.ss2d"),
                    Ss2dConfig {
                        d_model: out_ch,
                        ..cfg
                    },
                )
            }),
            ms: use_ms_fusion.then(|| MsFusion::new(format!("{name}.ms_fusion"), out_ch)),
            in_ch,
            out_ch,
            name,
        }
    }

    pub fn init<T: Float, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.down.init(store, rng);
        if let Some(s) = &self.ss2d {
            s.init(store, rng);
        }
        if let Some(m) = &self.ms {
            m.init(store, rng);
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let (_, _, h, w) = g.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "encoder_stage",
                format!("{} needs even spatial dims, got {h} x {w}", self.name),
            ));
        }
        let mut y = self.down.forward(g, store, x)?;
        if let Some(s) = &self.ss2d {
            y = s.forward(g, store, y)?;
        }
        if let Some(m) = &self.ms {
            y = m.forward(g, store, y)?;
        }
        Ok(y)
    }
}

/// `silu(conv(bn(conv(up(d (+) c)))))`
#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    conv1: Conv2d,
    bn: BatchNorm2d,
    conv2: Conv2d,
}

impl DecoderStage {
    /// `in_ch` counts the concatenated decoder and skip channels.
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize) -> Self {
        let name = name.into();
        Self {
            conv1: Conv2d::new(format!("{name}.conv1"), in_ch, out_ch, 3, Conv2dSpec::same(3)),
            bn: BatchNorm2d::new(format!("{name}.bn"), out_ch),
            conv2: Conv2d::new(format!("{name}.conv2"), out_ch, out_ch, 3, Conv2dSpec::same(3)),
            in_ch,
            out_ch,
            name,
        }
    }

    pub fn init<T: Float, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.conv1.init(store, rng);
        self.bn.init(store);
        self.conv2.init(store, rng);
    }

    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        d: NodeId,
        skip: NodeId,
        training: bool,
    ) -> Result<NodeId> {
        let (_, cd, hd, wd) = g.value(d).dims4()?;
        let (_, cs, hs, ws) = g.value(skip).dims4()?;
        if (hd, wd) != (hs, ws) {
            return Err(Error::shape(
                "decoder_stage",
                format!("{}: decoder feature {hd} x {wd} vs skip {hs} x {ws}", self.name),
            ));
        }
        if cd + cs != self.in_ch {
            return Err(Error::shape(
                "decoder_stage",
                format!("{} expects {} input channels, got {cd} + {cs}", self.name, self.in_ch),
            ));
        }
        let x = g.concat_channels(d, skip)?;
        let x = g.upsample_nearest2x(x)?;
        let x = self.conv1.forward(g, store, x)?;
        let x = self.bn.forward(g, store, x, training)?;
        let x = self.conv2.forward(g, store, x)?;
        Ok(g.silu(x))
    }
}
