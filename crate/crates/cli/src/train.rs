use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use seascan::network::{
    cosine_anneal_lr, load_checkpoint, load_optimizer, save_checkpoint, save_optimizer, AdamW, HeroMamba,
};
use seascan::nn::{apply_bn_updates, ParamStore};
use seascan::objective::{composite_loss, psnr, ssim, FeatureExtractor};
use seascan::sim::{load_manifest, load_pair};
use seascan::{Graph, Tensor};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const OPTIMIZER_FILE: &str = "optimizer.state";
pub const LOG_FILE: &str = "train.jsonl";

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Step {
        step: u64,
        lr: f64,
        loss: f64,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        l1: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        ssim: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        contrastive: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        omega_min: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        omega_max: Option<f64>,
    },
    /// Metrics after `step` completed updates.
    Eval { step: u64, psnr_db: f64, ssim: f64 },
}

impl LogRecord {
    fn keep_before(&self, start: u64) -> bool {
        match self {
            LogRecord::Step { step, .. } => *step < start,
            LogRecord::Eval { step, .. } => *step <= start,
        }
    }
}

pub struct Pairs {
    pub clean: Vec<Tensor<f32>>,
    pub degraded: Vec<Tensor<f32>>,
}

pub fn load_pairs(dir: &Path, size: usize) -> CliResult<Pairs> {
    let manifest = load_manifest(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    let mut pairs = Pairs {
        clean: Vec::new(),
        degraded: Vec::new(),
    };
    for entry in &manifest.pairs {
        if entry.size != size {
            return Err(CliError::Usage(format!(
                "pair {} is {}px but the model expects {size}px",
                entry.id, entry.size
            )));
        }
        let (c, d) = load_pair(dir, entry).map_err(|e| CliError::Data(e.to_string()))?;
        pairs.clean.push(c);
        pairs.degraded.push(d);
    }
    Ok(pairs)
}

/// Indices of the batch used at `step`: each epoch is a fresh permutation
/// drawn from `seed` and the epoch number, so any step can be recomputed.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: u64) -> Vec<usize> {
    let batch = batch.min(n);
    let per_epoch = (n / batch) as u64;
    let (epoch, k) = (step / per_epoch, (step % per_epoch) as usize);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order[k * batch..(k + 1) * batch].to_vec()
}

/// Mean PSNR and SSIM of eval-mode outputs against the clean images.
pub fn evaluate(model: &HeroMamba, store: &ParamStore<f32>, pairs: &Pairs) -> CliResult<(f64, f64)> {
    let (mut p, mut s) = (0.0, 0.0);
    for (clean, degraded) in pairs.clean.iter().zip(&pairs.degraded) {
        let x = Tensor::stack(std::slice::from_ref(degraded))?;
        let out = model.infer(store, &x)?.batch_item(0)?;
        let out = out.reshape(clean.shape())?;
        p += psnr(&out, clean, 1.0)?;
        s += ssim(&out, clean, 1.0)?;
    }
    let n = pairs.clean.len() as f64;
    Ok((p / n, s / n))
}

pub struct TrainOptions {
    pub resume: bool,
    pub stop_after: Option<u64>,
}

pub struct TrainSummary {
    pub steps_done: u64,
    pub best: Option<(u64, f64, f64)>,
}

/// Records of an existing log with their original lines, which are kept
/// verbatim on resume.
fn read_log(path: &Path) -> CliResult<Vec<(String, LogRecord)>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let r = serde_json::from_str(l).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            Ok((l.to_string(), r))
        })
        .collect()
}

struct Log {
    file: fs::File,
    records: Vec<LogRecord>,
}

impl Log {
    fn create(path: &Path, keep: Vec<(String, LogRecord)>) -> CliResult<Self> {
        let mut file = fs::File::create(path)?;
        let mut records = Vec::with_capacity(keep.len());
        for (line, r) in keep {
            writeln!(file, "{line}")?;
            records.push(r);
        }
        Ok(Self { file, records })
    }

    fn push(&mut self, r: LogRecord) -> CliResult<()> {
        writeln!(self.file, "{}", serde_json::to_string(&r)?)?;
        self.records.push(r);
        Ok(())
    }

    fn best_eval(&self) -> Option<(u64, f64, f64)> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Eval { step, psnr_db, ssim } => Some((*step, *psnr_db, *ssim)),
                _ => None,
            })
            .fold(None, |best: Option<(u64, f64, f64)>, e| match best {
                Some(b) if b.1 >= e.1 => Some(b),
                _ => Some(e),
            })
    }
}

fn save_state(dir: &Path, model: &HeroMamba, store: &ParamStore<f32>, opt: &AdamW<f32>) -> CliResult<()> {
    save_checkpoint(&dir.join(CHECKPOINT_FILE), &model.cfg, store)?;
    save_optimizer(&dir.join(OPTIMIZER_FILE), opt)?;
    Ok(())
}

pub fn run(cfg: &ExperimentConfig, opts: &TrainOptions) -> CliResult<TrainSummary> {
    let model_cfg = cfg.model()?;
    let model = HeroMamba::new(model_cfg.clone())?;
    let data_dir: PathBuf = cfg.data.clone().ok_or_else(|| CliError::Usage("no dataset configured".into()))?;
    let train = load_pairs(&data_dir, model_cfg.image_size)?;
    let held_out = match &cfg.eval_data {
        Some(dir) => Some(load_pairs(dir, model_cfg.image_size)?),
        None => None,
    };
    let eval_set = held_out.as_ref().unwrap_or(&train);
    fs::create_dir_all(&cfg.out_dir)?;
    let ckpt_path = cfg.out_dir.join(CHECKPOINT_FILE);
    let log_path = cfg.out_dir.join(LOG_FILE);

    let (mut store, mut opt, kept) = if opts.resume {
        let ckpt = load_checkpoint(&ckpt_path).map_err(|e| CliError::Data(format!("{}: {e}", ckpt_path.display())))?;
        if ckpt.config != model_cfg {
            return Err(CliError::Usage("checkpoint was written for a different model configuration".into()));
        }
        let opt = load_optimizer(&cfg.out_dir.join(OPTIMIZER_FILE))?;
        let start = opt.step;
        let kept = if log_path.exists() {
            read_log(&log_path)?.into_iter().filter(|(_, r)| r.keep_before(start)).collect()
        } else {
            Vec::new()
        };
        (ckpt.store, opt, kept)
    } else {
        (model.init_params::<f32>(), AdamW::new(cfg.optimizer()), Vec::new())
    };
    if opt.step > cfg.steps {
        return Err(CliError::Usage(format!(
            "checkpoint is at step {} but the run has only {} steps",
            opt.step, cfg.steps
        )));
    }
    let mut log = Log::create(&log_path, kept)?;
    let fx = FeatureExtractor::new(cfg.contrastive_seed);
    let weights = cfg.weights();
    let n = train.clean.len();
    let end = opts.stop_after.map_or(cfg.steps, |s| s.min(cfg.steps));
    let timer = Instant::now();

    for step in opt.step..end {
        let idx = batch_indices(n, cfg.batch_size, cfg.seed, step);
        let pick = |v: &[Tensor<f32>]| Tensor::stack(&idx.iter().map(|&i| v[i].clone()).collect::<Vec<_>>());
        let (x, y) = (pick(&train.degraded)?, pick(&train.clean)?);
        let mut g = Graph::new();
        let (xn, yn) = (g.constant(x), g.constant(y));
        let out = model.forward(&mut g, &store, xn, true)?;
        let terms = composite_loss(&mut g, out.output, yn, xn, &weights, &fx)?;
        let scalar = |id| g.value(id).data()[0] as f64;
        let loss = scalar(terms.total);
        if !loss.is_finite() {
            return Err(CliError::Numerical(format!(
                "loss became non-finite at step {step}; last good checkpoint kept at {}",
                ckpt_path.display()
            )));
        }
        let omegas: Vec<f64> = out.omegas.iter().map(|&o| scalar(o)).collect();
        let lr = cosine_anneal_lr(step, cfg.steps, cfg.lr, cfg.min_lr);
        let record = LogRecord::Step {
            step,
            lr,
            loss,
            l1: terms.l1.map(scalar),
            ssim: terms.ssim.map(scalar),
            contrastive: terms.contrastive.map(scalar),
            omega_min: omegas.iter().copied().reduce(f64::min),
            omega_max: omegas.iter().copied().reduce(f64::max),
        };
        g.backward(terms.total)?;
        let grads = g.param_grads();
        let updates = g.take_bn_updates();
        opt.step(&mut store, &grads, lr).map_err(|e| {
            CliError::Numerical(format!("step {step}: {e}; last good checkpoint kept at {}", ckpt_path.display()))
        })?;
        apply_bn_updates(&mut store, &updates)?;
        if store.params().values().chain(store.buffers().values()).any(|t| !t.all_finite()) {
            return Err(CliError::Numerical(format!(
                "parameters became non-finite at step {step}; last good checkpoint kept at {}",
                ckpt_path.display()
            )));
        }
        log.push(record)?;
        let done = step + 1;
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || done == end) {
            log::info!("step {step} loss {loss:.5} lr {lr:.3e} ({:.1}s)", timer.elapsed().as_secs_f64());
        }
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 && done != cfg.steps {
            let (p, s) = evaluate(&model, &store, eval_set)?;
            log.push(LogRecord::Eval { step: done, psnr_db: p, ssim: s })?;
        }
        if done == end || (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) {
            save_state(&cfg.out_dir, &model, &store, &opt)?;
        }
    }
    if end == cfg.steps && !log.records.iter().any(|r| matches!(r, LogRecord::Eval { step, .. } if *step == end)) {
        let (p, s) = evaluate(&model, &store, eval_set)?;
        log.push(LogRecord::Eval { step: end, psnr_db: p, ssim: s })?;
    }
    Ok(TrainSummary {
        steps_done: opt.step,
        best: log.best_eval(),
    })
}
