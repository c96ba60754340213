//! The full U-shaped enhancement network, its ablation variants, the AdamW
//! optimizer with cosine schedule, and checkpoint files.

mod checkpoint;
mod optim;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode_checkpoint, decode_optimizer, encode_checkpoint, encode_optimizer, load_checkpoint, load_optimizer,
    save_checkpoint, save_optimizer, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, OPTIMIZER_MAGIC,
};
pub use optim::{cosine_anneal_lr, AdamW, AdamWConfig};

use crate::blocks::{background_light_batch, ColorFusion, DecoderStage, EncoderStage, MsFusion};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamStore};
use crate::scan::Ss2dConfig;
use crate::spectral::DualDomainStem;
use crate::tensor::{Float, Graph, NodeId, Tensor};

/// Inputs are clamped to `[SKIP_EPS, 1 - SKIP_EPS]` before the logit skip.
pub const SKIP_EPS: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub multipliers: [usize; 4],
    pub d_state: usize,
    pub expand: usize,
    pub tie_directions: bool,
    pub use_ms_fusion: bool,
    pub use_ss2d: bool,
    pub use_fft_branch: bool,
    pub use_color_fusion: bool,
    /// Add `logit(I)` to the head's pre-activation, so the freshly
    /// initialised model starts close to the identity map.
    pub input_skip: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            base_channels: 8,
            multipliers: [1, 2, 4, 8],
            d_state: 4,
            expand: 2,
            tie_directions: false,
            use_ms_fusion: true,
            use_ss2d: true,
            use_fft_branch: true,
            use_color_fusion: true,
            input_skip: true,
            seed: 0,
        }
    }
}

/// Rungs of the break-down ablation, each adding one block to the previous.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    Base,
    MsFusion,
    Ss2d,
    Fft,
    ColorFusion,
}

impl Variant {
    pub const LADDER: [Variant; 5] = [
        Variant::Base,
        Variant::MsFusion,
        Variant::Ss2d,
        Variant::Fft,
        Variant::ColorFusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::MsFusion => "ms-fusion",
            Variant::Ss2d => "ss2d",
            Variant::Fft => "fft",
            Variant::ColorFusion => "color-fusion",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::LADDER
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant {s:?}")))
    }
}

impl ModelConfig {
    /// Configuration with the ablation flags of `variant`.
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.use_ms_fusion = variant >= Variant::MsFusion;
        self.use_ss2d = variant >= Variant::Ss2d;
        self.use_fft_branch = variant >= Variant::Fft;
        self.use_color_fusion = variant >= Variant::ColorFusion;
        self
    }

    pub fn widths(&self) -> [usize; 4] {
        self.multipliers.map(|m| m * self.base_channels)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !self.image_size.is_power_of_two() || self.image_size < 16 {
            return bad(format!("image_size must be a power of two >= 16, got {}", self.image_size));
        }
        if self.base_channels == 0 || self.multipliers.contains(&0) {
            return bad("channel widths must be positive".into());
        }
        if self.image_size > 4096 {
            return bad(format!("image_size {} exceeds 4096", self.image_size));
        }
        let too_wide = |&m: &usize| self.base_channels.checked_mul(m).is_none_or(|w| w > 4096);
        if self.multipliers.iter().any(too_wide) {
            return bad("channel widths must not exceed 4096".into());
        }
        if !(1..=64).contains(&self.d_state) || !(1..=8).contains(&self.expand) {
            return bad("d_state must be in 1..=64 and expand in 1..=8".into());
        }
        Ok(())
    }

    fn ss2d(&self) -> Option<Ss2dConfig> {
        self.use_ss2d.then_some(Ss2dConfig {
            d_model: 0,
            d_state: self.d_state,
            expand: self.expand,
            tie_directions: self.tie_directions,
        })
    }
}

/// Network structure. Parameters live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct HeroMamba {
    pub cfg: ModelConfig,
    stem: DualDomainStem,
    stem_ms: Option<MsFusion>,
    encoders: Vec<EncoderStage>,
    fusions: Vec<Option<ColorFusion>>,
    decoders: Vec<DecoderStage>,
    head: Conv2d,
}

/// Output node plus the ColorFusion mixing weights of the pass.
#[derive(Clone, Debug)]
pub struct ForwardOut {
    pub output: NodeId,
    pub omegas: Vec<NodeId>,
}

impl HeroMamba {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let stem = DualDomainStem::new(cfg.d_state, cfg.expand, cfg.tie_directions, cfg.use_ss2d, cfg.use_fft_branch);
        let c0 = stem.out_channels();
        let stem_ms = cfg.use_ms_fusion.then(|| MsFusion::new("stem.ms_fusion", c0));
        let widths = cfg.widths();
        let encoders = (0..4)
            .map(|i| {
                let cin = if i == 0 { c0 } else { widths[i - 1] };
                EncoderStage::new(format!("enc{}", i + 1), cin, widths[i], cfg.ss2d(), cfg.use_ms_fusion)
            })
            .collect();
        let fusions = (0..4)
            .map(|i| cfg.use_color_fusion.then(|| ColorFusion::new(format!("cf{}", i + 1), widths[i])))
            .collect();
        // decoder k consumes (d_{k-1}, c_{5-k}) and produces the width of the next skip up
        let decoders = (0..4)
            .map(|k| {
                let skip = 3 - k;
                let out = if skip == 0 { widths[0] } else { widths[skip - 1] };
                DecoderStage::new(format!("dec{}", k + 1), 2 * widths[skip], out)
            })
            .collect();
        Ok(Self {
            head: Conv2d::pointwise("head", widths[0] + c0, 3),
            stem,
            stem_ms,
            encoders,
            fusions,
            decoders,
            cfg,
        })
    }

    /// Deterministic parameters drawn from `cfg.seed`.
    pub fn init_params<T: Float>(&self) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let mut store = ParamStore::new();
        self.stem.init(&mut store, &mut rng);
        if let Some(m) = &self.stem_ms {
            m.init(&mut store, &mut rng);
        }
        for e in &self.encoders {
            e.init(&mut store, &mut rng);
        }
        for f in self.fusions.iter().flatten() {
            f.init(&mut store, &mut rng);
        }
        for d in &self.decoders {
            d.init(&mut store, &mut rng);
        }
        self.head.init(&mut store, &mut rng);
        store
    }

    /// Checks that `store` holds exactly the parameters and buffers this
    /// network expects, with matching shapes.
    pub fn check_store<T: Float>(&self, store: &ParamStore<T>) -> Result<()> {
        let reference = self.init_params::<T>();
        for (kind, want, got) in [
            ("parameter", reference.params(), store.params()),
            ("buffer", reference.buffers(), store.buffers()),
        ] {
            for (name, t) in want {
                match got.get(name) {
                    None => return Err(Error::Format(format!("missing {kind} {name}"))),
                    Some(g) if g.shape() != t.shape() => {
                        return Err(Error::Format(format!(
                            "{kind} {name} has shape {:?}, expected {:?}",
                            g.shape(),
                            t.shape()
                        )))
                    }
                    Some(_) => {}
                }
            }
            if let Some(extra) = got.keys().find(|k| !want.contains_key(*k)) {
                return Err(Error::Format(format!("unexpected {kind} {extra}")));
            }
        }
        Ok(())
    }

    /// `image` is an `N x 3 x S x S` node with `S = cfg.image_size`.
    /// Training mode uses batch statistics in the decoder's batch norms and
    /// queues running-stat updates on the graph.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: NodeId,
        training: bool,
    ) -> Result<ForwardOut> {
        let (n, c, h, w) = g.value(image).dims4()?;
        let s = self.cfg.image_size;
        if c != 3 || h != s || w != s {
            return Err(Error::shape(
                "forward",
                format!("model expects N x 3 x {s} x {s}, got {:?}", g.shape(image)),
            ));
        }
        let b_e = if self.fusions.iter().any(Option::is_some) {
            Some(g.constant(background_light_batch(g.value(image))?))
        } else {
            None
        };
        let mut x = self.stem.forward(g, store, image)?;
        if let Some(m) = &self.stem_ms {
            x = m.forward(g, store, x)?;
        }
        let stem_out = x;
        let mut feats = Vec::with_capacity(4);
        for e in &self.encoders {
            x = e.forward(g, store, x)?;
            feats.push(x);
        }
        let mut omegas = Vec::new();
        let mut skips = Vec::with_capacity(4);
        for (f, cf) in feats.iter().zip(&self.fusions) {
            skips.push(match (cf, b_e) {
                (Some(cf), Some(b_e)) => {
                    let out = cf.forward(g, store, *f, b_e)?;
                    omegas.push(out.omega);
                    out.c
                }
                _ => *f,
            });
        }
        let mut d = feats[3];
        for (k, dec) in self.decoders.iter().enumerate() {
            d = dec.forward(g, store, d, skips[3 - k], training)?;
        }
        let d = g.concat_channels(d, stem_out)?;
        let mut logits = self.head.forward(g, store, d)?;
        if self.cfg.input_skip {
            let eps = T::of(SKIP_EPS);
            let skip = g.value(image).map(|v| {
                let p = v.max(eps).min(T::one() - eps);
                (p / (T::one() - p)).ln()
            });
            let skip = g.constant(skip);
            logits = g.add(logits, skip)?;
        }
        let output = g.sigmoid(logits);
        debug_assert_eq!(g.shape(output), [n, 3, s, s]);
        Ok(ForwardOut { output, omegas })
    }

    /// Eval-mode inference on an `N x 3 x S x S` batch.
    pub fn infer<T: Float>(&self, store: &ParamStore<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let out = self.forward(&mut g, store, x, false)?;
        Ok(g.value(out.output).clone())
    }
}

/// Total number of trainable scalars (buffers excluded).
pub fn parameter_count<T: Float>(store: &ParamStore<T>) -> usize {
    store.params().values().map(Tensor::numel).sum()
}

/// Names of the trainable parameters of a configuration.
pub fn parameter_names(cfg: &ModelConfig) -> Result<BTreeSet<String>> {
    let model = HeroMamba::new(cfg.clone())?;
    Ok(model.init_params::<f32>().params().keys().cloned().collect())
}
