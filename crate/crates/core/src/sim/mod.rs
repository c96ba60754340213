//! Synthetic underwater scenes: procedural clean images degraded with the
//! attenuation-plus-backscatter imaging model `I = J t + B (1 - t)`.

mod dataset;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use dataset::{
    images_checksum, load_manifest, load_pair, make_dataset, pair_checksum, pair_seed, parse_manifest, parse_scene,
    regenerate, write_dataset,
    Manifest, ManifestEntry, SceneFile, MANIFEST_FILE,
};

use crate::error::{Error, Result};
use crate::spectral::luminance;
use crate::tensor::Tensor;

/// Smallest transmission accepted by the exact inverse.
pub const DEFAULT_T_MIN: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    /// `(near depth range, far depth range, attenuation scale)`
    fn knobs(self) -> ((f64, f64), (f64, f64), f64) {
        match self {
            Difficulty::Easy => ((0.5, 1.2), (5.0, 8.0), 0.8),
            Difficulty::Medium => ((0.5, 1.5), (14.0, 22.0), 1.0),
            Difficulty::Hard => ((1.0, 2.0), (18.0, 24.0), 1.1),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "medium" => Ok(Difficulty::Medium),
            "hard" => Ok(Difficulty::Hard),
            _ => Err(Error::InvalidArgument(format!("unknown difficulty {s:?} (easy|medium|hard)"))),
        }
    }
}

/// Water-column physics of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneParams {
    /// Background light, RGB.
    pub background: [f64; 3],
    /// Attenuation coefficients, RGB, `beta[0] >= beta[1] >= beta[2] > 0`.
    pub beta: [f64; 3],
    /// `H x W` depth proxy.
    pub depth: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

impl SceneParams {
    /// `t_c = exp(-beta_c depth)`, `3 x H x W`.
    pub fn transmission(&self) -> Tensor<f64> {
        let hw = self.height * self.width;
        Tensor::from_fn(&[3, self.height, self.width], |i| (-self.beta[i / hw] * self.depth[i % hw]).exp())
    }
}

fn check_pair_shapes(op: &'static str, a: &Tensor<f64>, t: &Tensor<f64>) -> Result<usize> {
    match (a.shape(), t.shape()) {
        ([3, h, w], [3, h2, w2]) if (h, w) == (h2, w2) => Ok(h * w),
        (s1, s2) => Err(Error::shape(op, format!("image {s1:?} vs transmission {s2:?}"))),
    }
}

/// `I = J t + B (1 - t)` per channel. `t` must lie in `(0, 1]`.
pub fn degrade_with(clean: &Tensor<f64>, t: &Tensor<f64>, background: [f64; 3]) -> Result<Tensor<f64>> {
    let hw = check_pair_shapes("degrade", clean, t)?;
    if let Some(bad) = t.data().iter().find(|&&v| !(v > 0.0 && v <= 1.0)) {
        return Err(Error::InvalidArgument(format!("transmission {bad} outside (0, 1]")));
    }
    let (j, tv) = (clean.data(), t.data());
    Ok(Tensor::from_fn(clean.shape(), |i| {
        j[i] * tv[i] + background[i / hw] * (1.0 - tv[i])
    }))
}

pub fn degrade(clean: &Tensor<f64>, scene: &SceneParams) -> Result<Tensor<f64>> {
    degrade_with(clean, &scene.transmission(), scene.background)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InvertMode {
    /// `J = (I - B (1 - t)) / t`; requires `t >= t_min`.
    Exact { t_min: f64 },
    /// `J = I t + B (1 - t)`, the simplified form that reuses the forward
    /// model as its own inverse.
    Approx,
}

impl Default for InvertMode {
    fn default() -> Self {
        InvertMode::Exact { t_min: DEFAULT_T_MIN }
    }
}

pub fn invert_with(degraded: &Tensor<f64>, t: &Tensor<f64>, background: [f64; 3], mode: InvertMode) -> Result<Tensor<f64>> {
    let hw = check_pair_shapes("invert_degradation", degraded, t)?;
    let (iv, tv) = (degraded.data(), t.data());
    match mode {
        InvertMode::Exact { t_min } => {
            if let Some(bad) = tv.iter().find(|&&v| !(v >= t_min)) {
                return Err(Error::InvalidArgument(format!(
                    "transmission {bad} below t_min {t_min}; exact inversion is unstable"
                )));
            }
            Ok(Tensor::from_fn(degraded.shape(), |i| {
                (iv[i] - background[i / hw] * (1.0 - tv[i])) / tv[i]
            }))
        }
        InvertMode::Approx => Ok(Tensor::from_fn(degraded.shape(), |i| {
            iv[i] * tv[i] + background[i / hw] * (1.0 - tv[i])
        })),
    }
}

pub fn invert_degradation(degraded: &Tensor<f64>, scene: &SceneParams, mode: InvertMode) -> Result<Tensor<f64>> {
    invert_with(degraded, &scene.transmission(), scene.background, mode)
}

/// Generated clean/degraded pair with its physics.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePair {
    pub id: String,
    pub clean: Tensor<f64>,
    pub degraded: Tensor<f64>,
    pub scene: SceneParams,
    pub difficulty: Difficulty,
    /// Seed of the depth field, recorded in `scene.json`.
    pub depth_seed: u64,
}

/// Bilinearly interpolated value noise in `[0, 1]` on a `cells x cells` grid.
fn value_noise<R: Rng + ?Sized>(rng: &mut R, size: usize, cells: usize) -> Vec<f64> {
    let n = cells + 1;
    let grid: Vec<f64> = (0..n * n).map(|_| rng.gen::<f64>()).collect();
    let mut out = Vec::with_capacity(size * size);
    let scale = cells as f64 / size as f64;
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = ((y as f64 + 0.5) * scale, (x as f64 + 0.5) * scale);
            let (y0, x0) = ((fy.floor() as usize).min(cells - 1), (fx.floor() as usize).min(cells - 1));
            let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
            let (ty, tx) = (ty * ty * (3.0 - 2.0 * ty), tx * tx * (3.0 - 2.0 * tx));
            let g = |j: usize, i: usize| grid[j * n + i];
            let top = g(y0, x0) * (1.0 - tx) + g(y0, x0 + 1) * tx;
            let bot = g(y0 + 1, x0) * (1.0 - tx) + g(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

/// Random colour with luma at most `max_luma`.
fn palette_colour<R: Rng + ?Sized>(rng: &mut R, max_luma: f64) -> [f64; 3] {
    let mut c = [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)];
    let y = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
    if y > max_luma {
        c.iter_mut().for_each(|v| *v *= max_luma / y);
    }
    c
}

/// Procedural clean image: a two-colour gradient field, a handful of
/// discs and rectangles, and low-amplitude texture noise.
fn clean_image<R: Rng + ?Sized>(rng: &mut R, size: usize) -> Tensor<f64> {
    const MAX_LUMA: f64 = 0.4;
    let hw = size * size;
    let (ca, cb) = (palette_colour(rng, MAX_LUMA), palette_colour(rng, MAX_LUMA));
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let field = value_noise(rng, size, 3);
    let mut img = vec![0.0; 3 * hw];
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 / size as f64 - 0.5, y as f64 / size as f64 - 0.5);
            let s = (0.5 + 0.8 * (u * dx + v * dy) + 0.4 * (field[y * size + x] - 0.5)).clamp(0.0, 1.0);
            for c in 0..3 {
                img[c * hw + y * size + x] = ca[c] * (1.0 - s) + cb[c] * s;
            }
        }
    }
    let shapes = rng.gen_range(3..=6);
    for _ in 0..shapes {
        let col = palette_colour(rng, MAX_LUMA);
        let (cx, cy) = (rng.gen_range(0.0..size as f64), rng.gen_range(0.0..size as f64));
        let r = rng.gen_range(0.08..0.25) * size as f64;
        let disc = rng.gen_bool(0.5);
        let aspect = rng.gen_range(0.5..1.5);
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let inside = if disc {
                    px * px + py * py <= r * r
                } else {
                    px.abs() <= r && py.abs() <= r * aspect
                };
                if inside {
                    for c in 0..3 {
                        img[c * hw + y * size + x] = col[c];
                    }
                }
            }
        }
    }
    let noise = value_noise(rng, size, (size / 4).max(1));
    for c in 0..3 {
        for i in 0..hw {
            let v = &mut img[c * hw + i];
            *v = (*v + 0.06 * (noise[i] - 0.5)).clamp(0.0, 1.0);
        }
    }
    Tensor::new(&[3, size, size], img).expect("sized buffer")
}

/// Smooth depth in `[near, far]`: a random-direction ramp mixed with value
/// noise, normalised so both ends of the range are attained.
pub fn depth_field(depth_seed: u64, size: usize, difficulty: Difficulty) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(depth_seed);
    let ((n0, n1), (f0, f1), _) = difficulty.knobs();
    let near = rng.gen_range(n0..n1);
    let far = rng.gen_range(f0..f1);
    // mostly "far at the top" with some tilt
    let angle = std::f64::consts::FRAC_PI_2 + rng.gen_range(-0.8..0.8);
    let (dx, dy) = (angle.cos(), angle.sin());
    let noise = value_noise(&mut rng, size, 2);
    let raw: Vec<f64> = (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f64 / size as f64 - 0.5, (i / size) as f64 / size as f64 - 0.5);
            -(x * dx + y * dy) + 0.35 * noise[i]
        })
        .collect();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    raw.iter()
        .map(|&r| {
            let s = (r - lo) / span;
            near + (far - near) * s * s
        })
        .collect()
}

/// Draws one pair. All randomness comes from `rng`; the same generator
/// state gives a bit-identical pair.
pub fn sample_scene<R: Rng + ?Sized>(rng: &mut R, size: usize, difficulty: Difficulty, id: impl Into<String>) -> Result<ScenePair> {
    if !size.is_power_of_two() || size < 16 {
        return Err(Error::InvalidArgument(format!("scene size must be a power of two >= 16, got {size}")));
    }
    let clean = clean_image(rng, size);
    let (_, _, k) = difficulty.knobs();
    let beta_b = rng.gen_range(0.10..0.16) * k;
    let beta_g = beta_b + rng.gen_range(0.03..0.10) * k;
    let beta_r = beta_g + rng.gen_range(0.20..0.45) * k;
    let beta = [beta_r, beta_g, beta_b];
    assert!(beta[0] >= beta[1] && beta[1] >= beta[2] && beta[2] > 0.0);
    let b_blue = rng.gen_range(0.60..0.90);
    let b_green = rng.gen_range(0.60..0.90);
    let b_red = rng.gen_range(0.05..0.30);
    let background = [b_red, b_green, b_blue];
    let depth_seed = rng.gen::<u64>();
    let scene = SceneParams {
        background,
        beta,
        depth: depth_field(depth_seed, size, difficulty),
        height: size,
        width: size,
    };
    let degraded = degrade(&clean, &scene)?;
    Ok(ScenePair {
        id: id.into(),
        clean,
        degraded,
        scene,
        difficulty,
        depth_seed,
    })
}

/// Mean of each channel of a `3 x H x W` tensor.
pub fn channel_means(t: &Tensor<f64>) -> [f64; 3] {
    let hw = t.numel() / 3;
    let d = t.data();
    [0, 1, 2].map(|c| d[c * hw..(c + 1) * hw].iter().sum::<f64>() / hw as f64)
}

/// Luma plane of a `3 x H x W` tensor.
pub fn luma(t: &Tensor<f64>) -> Vec<f64> {
    luminance(t.data(), t.numel() / 3)
}
