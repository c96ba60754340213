use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use seascan::imageio::{read_image, resize, write_image};
use seascan::network::{load_checkpoint, HeroMamba};
use seascan::nn::ParamStore;
use seascan::objective::{Aggregate, MetricsReport};
use seascan::scan::{doubling_ratios, quadratic_attention_baseline, scan_complexity_probe, ProbeRow};
use seascan::sim::{load_manifest, load_pair, make_dataset, write_dataset, Difficulty};
use seascan::Tensor;

use crate::error::{CliError, CliResult};

pub fn gen_data(out: &Path, n: usize, size: usize, seed: u64, difficulty: Difficulty, force: bool) -> CliResult<String> {
    if !size.is_power_of_two() || !(16..=4096).contains(&size) {
        return Err(CliError::Usage(format!("--size must be a power of two in 16..=4096, got {size}")));
    }
    let (pairs, manifest) = make_dataset(n, size, seed, difficulty)?;
    write_dataset(out, &pairs, &manifest, force)?;
    Ok(format!(
        "wrote {n} pairs ({size}x{size}, {difficulty}, seed {seed}) to {}",
        out.display()
    ))
}

struct Loaded {
    model: HeroMamba,
    store: ParamStore<f32>,
}

fn load_model(path: &Path) -> CliResult<Loaded> {
    let ckpt = load_checkpoint(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let model = HeroMamba::new(ckpt.config)?;
    Ok(Loaded {
        model,
        store: ckpt.store,
    })
}

fn enhance_tensor(m: &Loaded, image: &Tensor<f32>) -> CliResult<Tensor<f32>> {
    let x = Tensor::stack(std::slice::from_ref(image))?;
    let out = m.model.infer(&m.store, &x)?.batch_item(0)?;
    Ok(out.reshape(image.shape())?)
}

pub fn enhance(model: &Path, input: &Path, output: &Path, allow_resize: bool) -> CliResult<()> {
    let m = load_model(model)?;
    let image: Tensor<f32> = read_image(input).map_err(|e| CliError::Data(format!("{}: {e}", input.display())))?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let s = m.model.cfg.image_size;
    let out = if (h, w) == (s, s) {
        enhance_tensor(&m, &image)?
    } else if allow_resize {
        let small = enhance_tensor(&m, &resize(&image, s, s)?)?;
        resize(&small, h, w)?
    } else {
        return Err(CliError::Usage(format!(
            "{} is {w}x{h} but the model expects {s}x{s}; pass --resize to rescale",
            input.display()
        )));
    };
    write_image(&out, output)?;
    Ok(())
}

/// Which image of each pair is scored against the clean reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Source {
    Degraded,
    Clean,
}

#[derive(Serialize)]
struct Row<'a> {
    image_id: &'a str,
    psnr_db: f64,
    ssim: f64,
    fsim: f64,
}

pub struct EvalOutcome {
    pub aggregate: Aggregate,
    pub failures: Vec<String>,
}

/// Scores every pair of a dataset, enhanced by `model` when given, and
/// writes the per-image CSV with a final `mean` row.
pub fn eval(model: Option<&Path>, data: &Path, report: &Path, source: Source) -> CliResult<EvalOutcome> {
    let m = model.map(load_model).transpose()?;
    let manifest = load_manifest(data).map_err(|e| CliError::Data(format!("{}: {e}", data.display())))?;
    let results: Vec<Result<MetricsReport, String>> = manifest
        .pairs
        .par_iter()
        .map(|entry| {
            let (clean, degraded) = load_pair::<f32>(data, entry).map_err(|e| e.to_string())?;
            let input = match source {
                Source::Degraded => degraded,
                Source::Clean => clean.clone(),
            };
            let scored = match &m {
                Some(m) => enhance_tensor(m, &input).map_err(|e| e.to_string())?,
                None => input,
            };
            MetricsReport::compute(entry.id.clone(), &scored, &clean).map_err(|e| e.to_string())
        })
        .collect();
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for (entry, r) in manifest.pairs.iter().zip(results) {
        match r {
            Ok(r) => reports.push(r),
            Err(e) => failures.push(format!("{}: {e}", entry.id)),
        }
    }
    let aggregate = Aggregate::of(&reports);
    if let Some(parent) = report.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(report)?;
    for r in &reports {
        w.serialize(Row {
            image_id: &r.image_id,
            psnr_db: r.psnr_db,
            ssim: r.ssim,
            fsim: r.fsim,
        })?;
    }
    w.serialize(Row {
        image_id: "mean",
        psnr_db: aggregate.psnr_mean,
        ssim: aggregate.ssim_mean,
        fsim: aggregate.fsim_mean,
    })?;
    w.flush()?;
    Ok(EvalOutcome { aggregate, failures })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum BenchKind {
    /// The selective scan.
    Scan,
    /// Naive softmax attention, for contrast.
    Attention,
}

pub fn bench_scan(lens: &[usize], dim: usize, state: usize, reps: usize, kind: BenchKind) -> CliResult<Vec<ProbeRow>> {
    if lens.is_empty() || lens.contains(&0) || dim == 0 || state == 0 {
        return Err(CliError::Usage("lengths, --dim and --state must be positive".into()));
    }
    Ok(match kind {
        BenchKind::Scan => scan_complexity_probe(lens, dim, state, reps),
        BenchKind::Attention => quadratic_attention_baseline(lens, dim, reps),
    })
}

pub fn write_probe_csv(rows: &[ProbeRow], out: Option<&PathBuf>) -> CliResult<()> {
    let mut text = String::from("L,seconds\n");
    for r in rows {
        text.push_str(&format!("{},{}\n", r.len, r.seconds));
    }
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    for (len, ratio) in doubling_ratios(rows) {
        log::info!("time({})/time({len}) = {ratio:.3}", 2 * len);
    }
    Ok(())
}
