use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{selective_scan_1d, SelectiveScanParams};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeRow {
    pub len: usize,
    /// Fastest of the repeated runs.
    pub seconds: f64,
    /// Recurrence steps (or score entries, for the baseline) processed.
    pub ops: u64,
}

fn best_of(reps: usize, mut f: impl FnMut()) -> f64 {
    f();
    (0..reps.max(1))
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Wall time of [`selective_scan_1d`] at each sequence length.
pub fn scan_complexity_probe(lens: &[usize], dim: usize, state: usize, reps: usize) -> Vec<ProbeRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5ca9);
    let params = SelectiveScanParams::<f32>::init(dim, state, &mut rng);
    lens.iter()
        .map(|&len| {
            let u: Vec<f32> = (0..len * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let seconds = best_of(reps, || {
                black_box(selective_scan_1d(black_box(&u), &params).expect("probe scan"));
            });
            ProbeRow {
                len,
                seconds,
                ops: (len * dim * state) as u64,
            }
        })
        .collect()
}

/// Naive single-head softmax attention over `len` tokens, the quadratic
/// reference the scan is compared against.
pub fn quadratic_attention_baseline(lens: &[usize], dim: usize, reps: usize) -> Vec<ProbeRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xa77e);
    lens.iter()
        .map(|&len| {
            let q: Vec<f32> = (0..len * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let k: Vec<f32> = (0..len * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v: Vec<f32> = (0..len * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let seconds = best_of(reps, || {
                black_box(attention(black_box(&q), &k, &v, len, dim));
            });
            ProbeRow {
                len,
                seconds,
                ops: (len * len) as u64,
            }
        })
        .collect()
}

fn attention(q: &[f32], k: &[f32], v: &[f32], len: usize, dim: usize) -> Vec<f32> {
    let scale = 1.0 / (dim as f32).sqrt();
    let mut out = vec![0.0f32; len * dim];
    let mut scores = vec![0.0f32; len];
    for i in 0..len {
        let qi = &q[i * dim..(i + 1) * dim];
        let mut max = f32::NEG_INFINITY;
        for (j, s) in scores.iter_mut().enumerate() {
            let kj = &k[j * dim..(j + 1) * dim];
            *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * scale;
            max = max.max(*s);
        }
        let mut z = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            z += *s;
        }
        let oi = &mut out[i * dim..(i + 1) * dim];
        for (j, &s) in scores.iter().enumerate() {
            let w = s / z;
            for (o, &vv) in oi.iter_mut().zip(&v[j * dim..(j + 1) * dim]) {
                *o += w * vv;
            }
        }
    }
    out
}

/// `time(2L) / time(L)` for consecutive doubling rows.
pub fn doubling_ratios(rows: &[ProbeRow]) -> Vec<(usize, f64)> {
    rows.windows(2)
        .filter(|w| w[1].len == 2 * w[0].len)
        .map(|w| (w[0].len, w[1].seconds / w[0].seconds))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_counts_double_with_length() {
        let rows = scan_complexity_probe(&[64, 128, 256], 4, 2, 1);
        for w in rows.windows(2) {
            assert_eq!(w[1].ops, 2 * w[0].ops);
        }
        let base = quadratic_attention_baseline(&[16, 32], 4, 1);
        assert_eq!(base[1].ops, 4 * base[0].ops);
    }
}
