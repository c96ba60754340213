mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::brute_ssim;
use seascan::objective::{
    composite_loss, contrastive_loss, fsim, l1_loss, psnr, ssim, ssim_loss, Aggregate, FeatureExtractor, LossWeights,
    MetricsReport, CONTRASTIVE_EPS,
};
use seascan::tensor::gradcheck::finite_diff_check;
use seascan::{Graph, Tensor};

fn scalar(g: &Graph<f64>, id: seascan::NodeId) -> f64 {
    g.value(id).data()[0]
}

fn rand_img(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Smooth gradients, a disc and a few stripes on a 64x64 colour canvas.
fn structured(size: usize) -> Tensor<f64> {
    Tensor::from_fn(&[3, size, size], |k| {
        let c = k / (size * size);
        let (y, x) = ((k / size) % size, k % size);
        let (fy, fx) = (y as f64 / size as f64, x as f64 / size as f64);
        let disc = if (fy - 0.5).powi(2) + (fx - 0.4).powi(2) < 0.06 { 0.35 } else { 0.0 };
        let stripes = if (x / 6) % 2 == 0 && y > size / 2 { 0.2 } else { 0.0 };
        (0.15 + 0.3 * fx + 0.1 * c as f64 * fy + disc + stripes).clamp(0.0, 1.0)
    })
}

fn box_blur(img: &Tensor<f64>) -> Tensor<f64> {
    let s = img.shape().to_vec();
    let (h, w) = (s[1], s[2]);
    Tensor::from_fn(&s, |k| {
        let c = k / (h * w);
        let (y, x) = ((k / w) % h, k % w);
        let mut acc = 0.0;
        let mut n = 0.0;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                    acc += img.data()[c * h * w + yy as usize * w + xx as usize];
                    n += 1.0;
                }
            }
        }
        acc / n
    })
}

// ---------------------------------------------------------------------------
// L1

fn l1(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let mut g = Graph::new();
    let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
    let l = l1_loss(&mut g, x, y).unwrap();
    scalar(&g, l)
}

#[test]
fn l1_examples() {
    let t = rand_img(&[1, 3, 4, 4], 1);
    assert_eq!(l1(&t, &t), 0.0);
    assert!((l1(&t.map(|v| v + 0.5), &t) - 0.5).abs() < 1e-12);
    let a = Tensor::new(&[2], vec![0.0, 1.0]).unwrap();
    let b = Tensor::new(&[2], vec![1.0, 0.0]).unwrap();
    assert_eq!(l1(&a, &b), 1.0);
    let mut g = Graph::new();
    let (x, y) = (g.constant(a), g.constant(Tensor::zeros(&[3])));
    assert!(l1_loss(&mut g, x, y).is_err());
}

// ---------------------------------------------------------------------------
// SSIM

#[test]
fn ssim_matches_sliding_window_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..20 {
        let c = if i % 2 == 0 { 3 } else { 1 };
        let x = Tensor::<f64>::uniform(&[c, 32, 32], 0.0, 1.0, &mut rng);
        // correlated partner so the structure term is not near zero
        let noise = Tensor::<f64>::uniform(&[c, 32, 32], -0.3, 0.3, &mut rng);
        let y = Tensor::from_fn(&[c, 32, 32], |k| (x.data()[k] + noise.data()[k]).clamp(0.0, 1.0));
        let got = ssim(&x, &y, 1.0).unwrap();
        let want = brute_ssim(x.data(), y.data(), c, 32, 32, 1.0);
        assert!((got - want).abs() < 1e-6, "pair {i}: {got} vs {want}");
    }
}

#[test]
fn ssim_identity_and_loss_zero() {
    let x = rand_img(&[1, 3, 16, 16], 3);
    assert!((ssim(&x, &x, 1.0).unwrap() - 1.0).abs() < 1e-12);
    let mut g = Graph::new();
    let (a, b) = (g.constant(x.clone()), g.constant(x));
    let l = ssim_loss(&mut g, a, b, 1.0).unwrap();
    assert!(scalar(&g, l).abs() < 1e-12);
}

#[test]
fn inverted_checkerboard_is_negative() {
    let x = Tensor::<f64>::from_fn(&[1, 16, 16], |k| ((k / 16 + k % 16) % 2) as f64);
    let inv = x.map(|v| 1.0 - v);
    let s = ssim(&x, &inv, 1.0).unwrap();
    assert!(s < 0.0, "{s}");
    assert!((s - brute_ssim(x.data(), inv.data(), 1, 16, 16, 1.0)).abs() < 1e-9);
}

#[test]
fn ssim_is_symmetric_and_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let x = Tensor::<f64>::uniform(&[3, 12, 14], 0.0, 1.0, &mut rng);
        let y = Tensor::<f64>::uniform(&[3, 12, 14], 0.0, 1.0, &mut rng);
        let (a, b) = (ssim(&x, &y, 1.0).unwrap(), ssim(&y, &x, 1.0).unwrap());
        assert!((a - b).abs() < 1e-12);
        assert!(a.abs() <= 1.0);
    }
}

#[test]
fn ssim_rejects_small_images() {
    let x = Tensor::<f64>::zeros(&[3, 10, 32]);
    assert!(ssim(&x, &x, 1.0).is_err());
}

// ---------------------------------------------------------------------------
// contrastive

fn contrastive(fx: &FeatureExtractor, a: &Tensor<f64>, p: &Tensor<f64>, n: &Tensor<f64>) -> f64 {
    let mut g = Graph::new();
    let (a, p, n) = (g.constant(a.clone()), g.constant(p.clone()), g.constant(n.clone()));
    let l = contrastive_loss(&mut g, a, p, n, fx).unwrap();
    scalar(&g, l)
}

#[test]
fn contrastive_vanishes_at_positive() {
    let fx = FeatureExtractor::new(0);
    let (j, i) = (rand_img(&[1, 3, 8, 8], 5), rand_img(&[1, 3, 8, 8], 6));
    assert_eq!(contrastive(&fx, &j, &j, &i), 0.0);
}

#[test]
fn contrastive_blows_up_at_negative() {
    let fx = FeatureExtractor::new(0);
    let (j, i) = (rand_img(&[1, 3, 8, 8], 7), rand_img(&[1, 3, 8, 8], 8));
    assert!(contrastive(&fx, &i, &j, &i) > 1e3);
}

#[test]
fn contrastive_hand_composition() {
    let fx = FeatureExtractor::new(11);
    let (a, p, n) = (rand_img(&[1, 3, 8, 8], 9), rand_img(&[1, 3, 8, 8], 10), rand_img(&[1, 3, 8, 8], 11));
    let feats = |t: &Tensor<f64>| {
        let mut g = Graph::new();
        let x = g.constant(t.clone());
        let ids = fx.features(&mut g, x).unwrap();
        ids.into_iter().map(|id| g.value(id).clone()).collect::<Vec<_>>()
    };
    let (fa, fp, fn_) = (feats(&a), feats(&p), feats(&n));
    assert_eq!(fa.len(), 3);
    let mean_abs = |x: &Tensor<f64>, y: &Tensor<f64>| {
        x.data().iter().zip(y.data()).map(|(u, v)| (u - v).abs()).sum::<f64>() / x.numel() as f64
    };
    let want: f64 = (0..3)
        .map(|s| mean_abs(&fa[s], &fp[s]) / (mean_abs(&fa[s], &fn_[s]) + CONTRASTIVE_EPS) / 3.0)
        .sum();
    let got = contrastive(&fx, &a, &p, &n);
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn contrastive_gradient_reaches_anchor_only() {
    let fx = FeatureExtractor::new(1);
    let (a, p, n) = (rand_img(&[1, 3, 8, 8], 12), rand_img(&[1, 3, 8, 8], 13), rand_img(&[1, 3, 8, 8], 14));
    let mut g = Graph::new();
    let (an, pn, nn) = (g.variable(a), g.variable(p), g.variable(n));
    let l = contrastive_loss(&mut g, an, pn, nn, &fx).unwrap();
    g.backward(l).unwrap();
    assert!(g.grad(an).unwrap().data().iter().any(|v| *v != 0.0));
    for id in [pn, nn] {
        assert!(g.grad(id).is_none_or(|t| t.data().iter().all(|v| *v == 0.0)));
    }
}

// ---------------------------------------------------------------------------
// composite

struct Triple {
    pred: Tensor<f64>,
    target: Tensor<f64>,
    degraded: Tensor<f64>,
}

fn triple(seed: u64) -> Triple {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = Tensor::<f64>::uniform(&[2, 3, 12, 12], 0.1, 0.9, &mut rng);
    let jitter = Tensor::<f64>::uniform(&[2, 3, 12, 12], -0.08, 0.08, &mut rng);
    let pred = Tensor::from_fn(target.shape(), |k| (target.data()[k] + jitter.data()[k]).clamp(0.0, 1.0));
    let degraded = target.map(|v| 0.6 * v + 0.15);
    Triple { pred, target, degraded }
}

fn composite(t: &Triple, w: &LossWeights, fx: &FeatureExtractor) -> (f64, [Option<f64>; 3]) {
    let mut g = Graph::new();
    let p = g.constant(t.pred.clone());
    let y = g.constant(t.target.clone());
    let d = g.constant(t.degraded.clone());
    let terms = composite_loss(&mut g, p, y, d, w, fx).unwrap();
    let v = |id: Option<seascan::NodeId>| id.map(|id| scalar(&g, id));
    (scalar(&g, terms.total), [v(terms.l1), v(terms.ssim), v(terms.contrastive)])
}

#[test]
fn composite_is_zero_at_target() {
    let fx = FeatureExtractor::new(0);
    let mut t = triple(20);
    t.pred = t.target.clone();
    let (total, _) = composite(&t, &LossWeights::default(), &fx);
    assert!(total.abs() < 1e-12, "{total}");
}

#[test]
fn unit_l1_weight_is_plain_l1() {
    let fx = FeatureExtractor::new(0);
    let t = triple(21);
    let w = LossWeights {
        alpha: 1.0,
        beta_w: 0.0,
        gamma: 0.0,
    };
    let (total, terms) = composite(&t, &w, &fx);
    assert_eq!(total, l1(&t.pred, &t.target));
    assert!(terms[1].is_none() && terms[2].is_none());
}

#[test]
fn default_weights_recompose_term_by_term() {
    let fx = FeatureExtractor::new(3);
    let t = triple(22);
    let (total, _) = composite(&t, &LossWeights::default(), &fx);
    let l_ssim = 1.0 - ssim(&t.pred, &t.target, 1.0).unwrap();
    let l_c = contrastive(&fx, &t.pred, &t.target, &t.degraded);
    let want = 0.3 * l1(&t.pred, &t.target) + 0.8 * l_ssim + 0.1 * l_c;
    assert!((total - want).abs() < 1e-12, "{total} vs {want}");
    assert!(total >= 0.0);
}

#[test]
fn negative_weights_are_rejected() {
    let fx = FeatureExtractor::new(0);
    let t = triple(23);
    let mut g = Graph::new();
    let p = g.constant(t.pred.clone());
    let y = g.constant(t.target.clone());
    let w = LossWeights {
        alpha: -1.0,
        ..Default::default()
    };
    assert!(composite_loss(&mut g, p, y, y, &w, &fx).is_err());
}

#[test]
fn composite_gradient_matches_finite_differences() {
    let fx = FeatureExtractor::new(4);
    let t = triple(24);
    let (target, degraded) = (t.target.clone(), t.degraded.clone());
    let check = |w: LossWeights, h: f64| {
        finite_diff_check(
            |g, ids| {
                let y = g.constant(target.clone());
                let d = g.constant(degraded.clone());
                Ok(composite_loss(g, ids[0], y, d, &w, &fx)?.total)
            },
            std::slice::from_ref(&t.pred),
            h,
            Some(200),
        )
        .unwrap()
    };
    let smooth = check(
        LossWeights {
            gamma: 0.0,
            ..Default::default()
        },
        1e-4,
    );
    assert!(smooth.max_rel_err <= 1e-4, "{smooth:?}");
    // the contrastive ratio has |.| kinks in feature space that a 1e-4 step
    // can straddle, so the full loss is probed closer in
    let full = check(LossWeights::default(), 1e-6);
    assert!(full.max_rel_err <= 1e-4, "{full:?}");
}

// ---------------------------------------------------------------------------
// PSNR

#[test]
fn psnr_closed_forms() {
    let x = rand_img(&[3, 8, 8], 30);
    assert_eq!(psnr(&x, &x, 1.0).unwrap(), f64::INFINITY);
    let (zeros, ones) = (Tensor::<f64>::zeros(&[3, 8, 8]), Tensor::<f64>::ones(&[3, 8, 8]));
    assert!(psnr(&zeros, &ones, 1.0).unwrap().abs() < 1e-12);
    // an offset of sqrt(1e-3) everywhere gives MSE = 1e-3
    let y = x.map(|v| v + 1e-3f64.sqrt());
    assert!((psnr(&x, &y, 1.0).unwrap() - 30.0).abs() < 1e-9);
    // half the pixels off by sqrt(2e-4): MSE 1e-4
    let z = Tensor::from_fn(x.shape(), |k| x.data()[k] + if k % 2 == 0 { 2e-4f64.sqrt() } else { 0.0 });
    assert!((psnr(&x, &z, 1.0).unwrap() - 40.0).abs() < 1e-9);
    assert!(psnr(&x, &Tensor::zeros(&[3, 8, 7]), 1.0).is_err());
}

#[test]
fn psnr_falls_as_noise_grows() {
    let x = rand_img(&[3, 16, 16], 31);
    let noise = Tensor::<f64>::uniform(&[3, 16, 16], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(32));
    let mut prev = f64::INFINITY;
    for amp in [0.001, 0.01, 0.05, 0.1, 0.3] {
        let y = Tensor::from_fn(x.shape(), |k| x.data()[k] + amp * noise.data()[k]);
        let p = psnr(&x, &y, 1.0).unwrap();
        assert!(p < prev);
        prev = p;
    }
}

// ---------------------------------------------------------------------------
// FSIM

#[test]
fn fsim_identity_and_symmetry() {
    let x = structured(64);
    assert!((fsim(&x, &x).unwrap() - 1.0).abs() < 1e-6);
    let y = rand_img(&[3, 64, 64], 40);
    let (a, b) = (fsim(&x, &y).unwrap(), fsim(&y, &x).unwrap());
    assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    assert!((0.0..=1.0).contains(&a));
}

#[test]
fn fsim_prefers_mild_blur_to_heavy_noise() {
    let x = structured(64);
    let blurred = box_blur(&x);
    let noise = Tensor::<f64>::uniform(x.shape(), -0.4, 0.4, &mut ChaCha8Rng::seed_from_u64(41));
    let noisy = Tensor::from_fn(x.shape(), |k| (x.data()[k] + noise.data()[k]).clamp(0.0, 1.0));
    let (fb, fn_) = (fsim(&x, &blurred).unwrap(), fsim(&x, &noisy).unwrap());
    assert!(fb > fn_, "blur {fb} vs noise {fn_}");
    assert!(fb < 1.0);
}

#[test]
fn fsim_rejects_small_and_mismatched_inputs() {
    let small = Tensor::<f64>::zeros(&[3, 31, 64]);
    assert!(fsim(&small, &small).is_err());
    assert!(fsim(&structured(32), &structured(64)).is_err());
}

#[test]
fn metrics_report_of_identical_pair() {
    let x = structured(32);
    let r = MetricsReport::compute("a", &x, &x).unwrap();
    assert_eq!(r.psnr_db, f64::INFINITY);
    assert!((r.ssim - 1.0).abs() < 1e-12);
    assert!((r.fsim - 1.0).abs() < 1e-6);
    let agg = Aggregate::of(&[r.clone(), r]);
    assert_eq!(agg.count, 2);
    assert_eq!(agg.psnr_mean, f64::INFINITY);
    assert!(agg.ssim_std.abs() < 1e-12);
}
