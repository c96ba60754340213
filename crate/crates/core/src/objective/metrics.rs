use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// `10 log10(peak^2 / MSE)` in dB; `+inf` for identical inputs.
pub fn psnr<T: Float>(x: &Tensor<T>, y: &Tensor<T>, peak: f64) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::shape("psnr", format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    let mse = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum::<f64>()
        / x.numel().max(1) as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    })
}

/// Quality scores of one image pair.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub image_id: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub fsim: f64,
}

impl MetricsReport {
    pub fn compute<T: Float>(image_id: impl Into<String>, x: &Tensor<T>, reference: &Tensor<T>) -> Result<Self> {
        Ok(Self {
            image_id: image_id.into(),
            psnr_db: psnr(x, reference, 1.0)?,
            ssim: super::ssim(x, reference, 1.0)?,
            fsim: super::fsim(x, reference)?,
        })
    }
}

/// Mean and population standard deviation of each metric over a set.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub count: usize,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub fsim_mean: f64,
    pub fsim_std: f64,
}

fn mean_std(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count().max(1) as f64;
    let mean = v.clone().sum::<f64>() / n;
    if mean.is_infinite() {
        return (mean, f64::NAN);
    }
    let var = v.map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl Aggregate {
    /// Infinite PSNR values (identical pairs) make the PSNR mean infinite
    /// and its standard deviation NaN.
    pub fn of(reports: &[MetricsReport]) -> Self {
        let (psnr_mean, psnr_std) = mean_std(reports.iter().map(|r| r.psnr_db));
        let (ssim_mean, ssim_std) = mean_std(reports.iter().map(|r| r.ssim));
        let (fsim_mean, fsim_std) = mean_std(reports.iter().map(|r| r.fsim));
        Self {
            count: reports.len(),
            psnr_mean,
            psnr_std,
            ssim_mean,
            ssim_std,
            fsim_mean,
            fsim_std,
        }
    }
}
