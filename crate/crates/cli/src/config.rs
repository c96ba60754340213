//! Flat JSON experiment configuration for `seascan train`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use seascan::network::{AdamWConfig, ModelConfig, Variant};
use seascan::objective::LossWeights;

use crate::error::{CliError, CliResult};

/// Every field has a default; relative paths are resolved against the
/// directory holding the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    // model
    pub variant: Option<String>,
    pub image_size: usize,
    pub base_channels: usize,
    pub d_state: usize,
    pub expand: usize,
    pub tie_directions: bool,
    pub use_ms_fusion: bool,
    pub use_ss2d: bool,
    pub use_fft_branch: bool,
    pub use_color_fusion: bool,
    pub input_skip: bool,
    pub model_seed: u64,
    // loss
    pub alpha: f64,
    pub beta_w: f64,
    pub gamma: f64,
    pub contrastive_seed: u64,
    // optimiser and schedule
    pub lr: f64,
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: u64,
    /// Seed of the batch shuffling.
    pub seed: u64,
    // data and outputs
    pub data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub checkpoint_every: u64,
    /// 0 evaluates only after the last step.
    pub eval_every: u64,
    pub log_every: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let w = LossWeights::default();
        let o = AdamWConfig::default();
        Self {
            variant: None,
            image_size: m.image_size,
            base_channels: m.base_channels,
            d_state: m.d_state,
            expand: m.expand,
            tie_directions: m.tie_directions,
            use_ms_fusion: m.use_ms_fusion,
            use_ss2d: m.use_ss2d,
            use_fft_branch: m.use_fft_branch,
            use_color_fusion: m.use_color_fusion,
            input_skip: m.input_skip,
            model_seed: m.seed,
            alpha: w.alpha,
            beta_w: w.beta_w,
            gamma: w.gamma,
            contrastive_seed: 7,
            lr: 3e-4,
            min_lr: 0.0,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
            batch_size: 4,
            steps: 500,
            seed: 0,
            data: None,
            eval_data: None,
            out_dir: PathBuf::from("run"),
            checkpoint_every: 100,
            eval_every: 0,
            log_every: 50,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: Self =
            serde_json::from_slice(&bytes).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.data.as_mut() {
            fix(p);
        }
        if let Some(p) = self.eval_data.as_mut() {
            fix(p);
        }
        fix(&mut self.out_dir);
    }

    pub fn model(&self) -> CliResult<ModelConfig> {
        let mut m = ModelConfig {
            image_size: self.image_size,
            base_channels: self.base_channels,
            d_state: self.d_state,
            expand: self.expand,
            tie_directions: self.tie_directions,
            use_ms_fusion: self.use_ms_fusion,
            use_ss2d: self.use_ss2d,
            use_fft_branch: self.use_fft_branch,
            use_color_fusion: self.use_color_fusion,
            input_skip: self.input_skip,
            seed: self.model_seed,
            ..ModelConfig::default()
        };
        if let Some(v) = &self.variant {
            m = m.with_variant(v.parse::<Variant>()?);
        }
        m.validate()?;
        Ok(m)
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta_w: self.beta_w,
            gamma: self.gamma,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let usage = |m: &str| Err(CliError::Usage(m.to_string()));
        self.model()?;
        self.weights().validate()?;
        if self.data.is_none() {
            return usage("config must name a dataset directory in \"data\"");
        }
        if self.batch_size == 0 {
            return usage("batch_size must be at least 1");
        }
        if self.steps == 0 {
            return usage("steps must be at least 1");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) || !(self.min_lr.is_finite() && self.min_lr >= 0.0) {
            return usage("lr must be positive and min_lr non-negative");
        }
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !unit(self.beta1) || !unit(self.beta2) || !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return usage("beta1/beta2 must lie in [0, 1), eps must be positive and weight_decay non-negative");
        }
        Ok(())
    }
}
