//! Independent reference implementations used as test oracles. Everything
//! here is written with plain loops over `f64` and shares no code with the
//! library beyond reading parameters out of a `ParamStore`.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use seascan::nn::ParamStore;
use seascan::scan::SelectiveScanParams;
use seascan::Tensor;

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Step-by-step S6 recurrence, sequence-major (`u`, `delta`: L x dim;
/// `b`, `c`: L x state; `a`: dim x state).
#[allow(clippy::too_many_arguments)]
pub fn naive_scan(
    u: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    d: &[f64],
    dim: usize,
    state: usize,
) -> Vec<f64> {
    let len = u.len() / dim;
    let mut h = vec![vec![0.0; state]; dim];
    let mut y = vec![0.0; len * dim];
    for t in 0..len {
        for i in 0..dim {
            let dt = delta[t * dim + i];
            let x = u[t * dim + i];
            let mut acc = 0.0;
            for s in 0..state {
                h[i][s] = (dt * a[i * state + s]).exp() * h[i][s] + dt * b[t * state + s] * x;
                acc += c[t * state + s] * h[i][s];
            }
            y[t * dim + i] = acc + d[i] * x;
        }
    }
    y
}

fn get<'a>(store: &'a ParamStore<f64>, name: &str) -> &'a [f64] {
    store.get(name).unwrap_or_else(|_| panic!("missing {name}")).data()
}

/// `out[o][p] = sum_i w[o][i] in[i][p] + bias[o]` over channel-major planes.
fn pointwise(w: &[f64], bias: Option<&[f64]>, x: &[Vec<f64>], out_ch: usize) -> Vec<Vec<f64>> {
    let in_ch = x.len();
    let n = x[0].len();
    (0..out_ch)
        .map(|o| {
            (0..n)
                .map(|p| (0..in_ch).map(|i| w[o * in_ch + i] * x[i][p]).sum::<f64>() + bias.map_or(0.0, |b| b[o]))
                .collect()
        })
        .collect()
}

/// SS2D evaluated with every directional sequence materialised explicitly.
/// `x` is `1 x C x H x W`; parameters are read from `store` under `name`.
pub fn ss2d_oracle(store: &ParamStore<f64>, name: &str, tied: bool, x: &Tensor<f64>) -> Tensor<f64> {
    let s = x.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let n = h * w;
    let xv: Vec<Vec<f64>> = (0..c).map(|ch| x.data()[ch * n..(ch + 1) * n].to_vec()).collect();

    // per-pixel channel normalisation
    let (gamma, beta) = (get(store, &format!("{name}.norm.gamma")), get(store, &format!("{name}.norm.beta")));
    let mut xn = vec![vec![0.0; n]; c];
    for p in 0..n {
        let mu = (0..c).map(|ch| xv[ch][p]).sum::<f64>() / c as f64;
        let var = (0..c).map(|ch| (xv[ch][p] - mu).powi(2)).sum::<f64>() / c as f64;
        for ch in 0..c {
            xn[ch][p] = gamma[ch] * (xv[ch][p] - mu) / (var + 1e-5).sqrt() + beta[ch];
        }
    }
    let di = get(store, &format!("{name}.in_x.bias")).len();
    let xs = pointwise(
        get(store, &format!("{name}.in_x.weight")),
        Some(get(store, &format!("{name}.in_x.bias"))),
        &xn,
        di,
    );
    let z = pointwise(
        get(store, &format!("{name}.in_z.weight")),
        Some(get(store, &format!("{name}.in_z.bias"))),
        &xn,
        di,
    );
    // depthwise 3x3, zero padding, then SiLU
    let (dw, db) = (get(store, &format!("{name}.dwconv.weight")), get(store, &format!("{name}.dwconv.bias")));
    let mut xc = vec![vec![0.0; n]; di];
    for ch in 0..di {
        for i in 0..h {
            for j in 0..w {
                let mut acc = db[ch];
                for ki in 0..3 {
                    for kj in 0..3 {
                        let (ii, jj) = (i as isize + ki as isize - 1, j as isize + kj as isize - 1);
                        if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                            acc += dw[ch * 9 + ki * 3 + kj] * xs[ch][ii as usize * w + jj as usize];
                        }
                    }
                }
                xc[ch][i * w + j] = silu(acc);
            }
        }
    }

    let row: Vec<usize> = (0..n).collect();
    let col: Vec<usize> = (0..w).flat_map(|j| (0..h).map(move |i| i * w + j)).collect();
    let orders = [
        row.clone(),
        row.iter().rev().copied().collect::<Vec<_>>(),
        col.clone(),
        col.iter().rev().copied().collect::<Vec<_>>(),
    ];
    let mut merged = vec![vec![0.0; n]; di];
    for (k, order) in orders.iter().enumerate() {
        let dn = format!("{name}.dir{}", if tied { 0 } else { k });
        let dt = pointwise(
            get(store, &format!("{dn}.dt_proj.weight")),
            Some(get(store, &format!("{dn}.dt_proj.bias"))),
            &xc,
            di,
        );
        let state = get(store, &format!("{dn}.a_log")).len() / di;
        let bm = pointwise(get(store, &format!("{dn}.b_proj.weight")), None, &xc, state);
        let cm = pointwise(get(store, &format!("{dn}.c_proj.weight")), None, &xc, state);
        let a: Vec<f64> = get(store, &format!("{dn}.a_log")).iter().map(|v| -v.exp()).collect();
        let d = get(store, &format!("{dn}.d"));
        // materialise the sequence in this traversal order
        let mut u = Vec::with_capacity(n * di);
        let mut delta = Vec::with_capacity(n * di);
        let mut b = Vec::with_capacity(n * state);
        let mut cc = Vec::with_capacity(n * state);
        for &p in order {
            for ch in 0..di {
                u.push(xc[ch][p]);
                delta.push(softplus(dt[ch][p]));
            }
            for st in 0..state {
                b.push(bm[st][p]);
                cc.push(cm[st][p]);
            }
        }
        let y = naive_scan(&u, &delta, &a, &b, &cc, d, di, state);
        for (t, &p) in order.iter().enumerate() {
            for ch in 0..di {
                merged[ch][p] += y[t * di + ch];
            }
        }
    }
    for ch in 0..di {
        for p in 0..n {
            merged[ch][p] *= silu(z[ch][p]);
        }
    }
    let out = pointwise(
        get(store, &format!("{name}.out_proj.weight")),
        Some(get(store, &format!("{name}.out_proj.bias"))),
        &merged,
        c,
    );
    let data: Vec<f64> = (0..c).flat_map(|ch| (0..n).map(move |p| (ch, p))).map(|(ch, p)| xv[ch][p] + out[ch][p]).collect();
    Tensor::new(s, data).unwrap()
}

/// Sliding-window SSIM: 11x11 Gaussian (sigma 1.5), valid windows only,
/// averaged over windows and channels. Inputs are `C x H x W`.
pub fn brute_ssim(x: &[f64], y: &[f64], c: usize, h: usize, w: usize, range: f64) -> f64 {
    let k = 11;
    let mut win = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            win[i * k + j] = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
        }
    }
    let total: f64 = win.iter().sum();
    win.iter_mut().for_each(|v| *v /= total);
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let mut acc = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let off = ch * h * w;
        for i in 0..=h - k {
            for j in 0..=w - k {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for a in 0..k {
                    for b in 0..k {
                        let wt = win[a * k + b];
                        let p = off + (i + a) * w + (j + b);
                        mx += wt * x[p];
                        my += wt * y[p];
                        sxx += wt * x[p] * x[p];
                        syy += wt * y[p] * y[p];
                        sxy += wt * x[p] * y[p];
                    }
                }
                let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    acc / count as f64
}

/// Direct O(N^2) 2D DFT of a real `h x w` plane, unnormalised.
pub fn direct_dft(x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut re = vec![0.0; h * w];
    let mut im = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            let (mut sr, mut si) = (0.0, 0.0);
            for i in 0..h {
                for j in 0..w {
                    let ang = -2.0 * std::f64::consts::PI * ((u * i) as f64 / h as f64 + (v * j) as f64 / w as f64);
                    sr += x[i * w + j] * ang.cos();
                    si += x[i * w + j] * ang.sin();
                }
            }
            re[u * w + v] = sr;
            im[u * w + v] = si;
        }
    }
    (re, im)
}

pub struct ModelGradCheck {
    /// Worst relative error over coordinates with a usable gradient.
    pub rel: seascan::tensor::gradcheck::GradCheckReport,
    /// Worst absolute error over an unfiltered sample.
    pub max_abs_err: f64,
}

/// Finite-difference check of `sum(model output)` (training mode) against
/// the parameters in `store`.
///
/// `n` coordinates are sampled among those whose analytic gradient is at
/// least `min_grad` and compared relatively; another `n`, drawn from all
/// parameters, are compared absolutely. Central differences on a deep
/// network carry rounding noise of order 1e-8 at `h = 1e-4`, which makes a
/// relative comparison of near-zero gradients meaningless.
pub fn model_grad_check(
    model: &seascan::network::HeroMamba,
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
    h: f64,
    n: usize,
    min_grad: f64,
    seed: u64,
) -> ModelGradCheck {
    use rand::seq::index::sample;
    use rand::SeedableRng;
    use seascan::tensor::gradcheck::compare_gradients;
    use seascan::Graph;

    let names: Vec<String> = store.params().keys().cloned().collect();
    let inputs: Vec<Tensor<f64>> = store.params().values().cloned().collect();
    let loss = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let xn = g.constant(x.clone());
        let out = model.forward(g, s, xn, true).unwrap();
        g.sum(out.output)
    };
    let mut g = Graph::new();
    let l = loss(&mut g, store);
    g.backward(l).unwrap();
    let analytic: Vec<Tensor<f64>> = names
        .iter()
        .zip(&inputs)
        .map(|(nm, t)| g.param_node(nm).and_then(|id| g.grad(id)).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let value = |xs: &[Tensor<f64>]| {
        let mut s = store.clone();
        for (nm, t) in names.iter().zip(xs) {
            *s.get_mut(nm).unwrap() = t.clone();
        }
        let mut g = Graph::new();
        let l = loss(&mut g, &s);
        Ok(g.value(l).data()[0])
    };
    let all: Vec<(usize, usize)> = analytic
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    let usable: Vec<(usize, usize)> = all.iter().copied().filter(|&(i, j)| analytic[i].data()[j].abs() >= min_grad).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = |pool: &[(usize, usize)], rng: &mut ChaCha8Rng| -> Vec<(usize, usize)> {
        let mut idx = sample(rng, pool.len(), n.min(pool.len())).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|k| pool[k]).collect()
    };
    let rel_coords = pick(&usable, &mut rng);
    let rel = compare_gradients(value, &inputs, &analytic, h, &rel_coords).unwrap();
    let mut max_abs_err: f64 = 0.0;
    for c in pick(&all, &mut rng) {
        let r = compare_gradients(value, &inputs, &analytic, h, &[c]).unwrap();
        max_abs_err = max_abs_err.max((r.analytic - r.numeric).abs());
    }
    ModelGradCheck { rel, max_abs_err }
}

// ---------------------------------------------------------------------------
// finite-difference checks of every graph primitive

type Make = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>>;
type Op = Box<dyn Fn(&mut seascan::Graph<f64>, &[seascan::NodeId]) -> seascan::Result<seascan::NodeId>>;

fn uni(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::uniform(shape, lo, hi, rng)
}

/// Uniform magnitudes in `[lo, hi]` with random signs, keeping clear of 0.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let mut x = uni(rng, shape, lo, hi);
    for v in x.data_mut() {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    x
}

/// `(name, input generator, op)` for every differentiable primitive.
pub fn primitive_cases() -> Vec<(&'static str, Make, Op)> {
    use seascan::tensor::Conv2dSpec;
    let mut cases: Vec<(&'static str, Make, Op)> = Vec::new();
    let mut add = |name: &'static str,
                   make: Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>>,
                   op: Op| cases.push((name, make, op));
    macro_rules! one {
        ($shape:expr, $lo:expr, $hi:expr) => {
            Box::new(move |r: &mut ChaCha8Rng| vec![uni(r, &$shape, $lo, $hi)])
        };
    }
    macro_rules! two {
        ($shape:expr, $lo:expr, $hi:expr) => {
            Box::new(move |r: &mut ChaCha8Rng| vec![uni(r, &$shape, $lo, $hi), uni(r, &$shape, $lo, $hi)])
        };
    }
    let s = [2, 3, 2];
    add("neg", one!(s, -2.0, 2.0), Box::new(|g, x| Ok(g.neg(x[0]))));
    add("scale", one!(s, -2.0, 2.0), Box::new(|g, x| Ok(g.scale(x[0], -1.7))));
    add("add_scalar", one!(s, -2.0, 2.0), Box::new(|g, x| Ok(g.add_scalar(x[0], 0.3))));
    add("rsub_scalar", one!(s, -2.0, 2.0), Box::new(|g, x| Ok(g.rsub_scalar(1.0, x[0]))));
    add("exp", one!(s, -2.0, 2.0), Box::new(|g, x| Ok(g.exp(x[0]))));
    add("log", one!(s, 0.2, 3.0), Box::new(|g, x| Ok(g.log(x[0]))));
    add("sqrt", one!(s, 0.2, 3.0), Box::new(|g, x| Ok(g.sqrt(x[0]))));
    add("square", one!(s, -2.0, 2.0), Box::new(|g, x| Ok(g.square(x[0]))));
    add(
        "abs",
        Box::new(move |r| vec![away_from_zero(r, &s, 0.05, 2.0)]),
        Box::new(|g, x| Ok(g.abs(x[0]))),
    );
    add("sigmoid", one!(s, -4.0, 4.0), Box::new(|g, x| Ok(g.sigmoid(x[0]))));
    add("silu", one!(s, -4.0, 4.0), Box::new(|g, x| Ok(g.silu(x[0]))));
    add("softplus", one!(s, -4.0, 4.0), Box::new(|g, x| Ok(g.softplus(x[0]))));

    let b = [3, 4];
    add("add", two!(b, -2.0, 2.0), Box::new(|g, x| g.add(x[0], x[1])));
    add("sub", two!(b, -2.0, 2.0), Box::new(|g, x| g.sub(x[0], x[1])));
    add("mul", two!(b, -2.0, 2.0), Box::new(|g, x| g.mul(x[0], x[1])));
    add(
        "div",
        Box::new(move |r| vec![uni(r, &b, -2.0, 2.0), away_from_zero(r, &b, 0.3, 2.0)]),
        Box::new(|g, x| g.div(x[0], x[1])),
    );

    add("sum", one!([3, 5], -1.0, 1.0), Box::new(|g, x| Ok(g.sum(x[0]))));
    add("mean", one!([3, 5], -1.0, 1.0), Box::new(|g, x| Ok(g.mean(x[0]))));
    add("expand", one!([2, 1, 3, 1], -1.0, 1.0), Box::new(|g, x| g.expand(x[0], &[2, 4, 3, 5])));
    add("reshape", one!([2, 6], -1.0, 1.0), Box::new(|g, x| g.reshape(x[0], &[3, 2, 2])));
    add("upsample", one!([2, 2, 3, 2], -1.0, 1.0), Box::new(|g, x| g.upsample_nearest2x(x[0])));
    add(
        "concat",
        Box::new(|r| vec![uni(r, &[2, 1, 3, 3], -1.0, 1.0), uni(r, &[2, 3, 3, 3], -1.0, 1.0)]),
        Box::new(|g, x| g.concat_channels(x[0], x[1])),
    );

    let convs: [(&'static str, [usize; 4], [usize; 4], Conv2dSpec); 4] = [
        ("conv2d same", [2, 3, 5, 5], [4, 3, 3, 3], Conv2dSpec::same(3)),
        (
            "conv2d stride 2",
            [1, 2, 6, 5],
            [3, 2, 3, 3],
            Conv2dSpec {
                stride: 2,
                padding: 1,
                groups: 1,
            },
        ),
        ("conv2d depthwise", [2, 4, 4, 4], [4, 1, 5, 5], Conv2dSpec::depthwise(5, 4)),
        (
            "conv2d grouped",
            [1, 4, 4, 4],
            [6, 2, 1, 1],
            Conv2dSpec {
                stride: 1,
                padding: 0,
                groups: 2,
            },
        ),
    ];
    for (name, xs, ws, spec) in convs {
        add(
            name,
            Box::new(move |r| vec![uni(r, &xs, -1.0, 1.0), uni(r, &ws, -1.0, 1.0), uni(r, &[ws[0]], -1.0, 1.0)]),
            Box::new(move |g, x| g.conv2d(x[0], x[1], Some(x[2]), spec)),
        );
    }

    add(
        "batch_norm2d",
        Box::new(|r| vec![uni(r, &[3, 2, 2, 3], -2.0, 2.0), uni(r, &[2], 0.5, 1.5), uni(r, &[2], -1.0, 1.0)]),
        Box::new(|g, x| Ok(g.batch_norm2d(x[0], x[1], x[2], (&[0.0, 0.0], &[1.0, 1.0]), true, 1e-5)?.0)),
    );
    add(
        "batch_norm2d eval",
        Box::new(|r| vec![uni(r, &[2, 2, 2, 2], -2.0, 2.0), uni(r, &[2], 0.5, 1.5), uni(r, &[2], -1.0, 1.0)]),
        Box::new(|g, x| Ok(g.batch_norm2d(x[0], x[1], x[2], (&[0.2, -0.1], &[0.8, 1.3]), false, 1e-5)?.0)),
    );
    add(
        "channel_norm",
        Box::new(|r| vec![uni(r, &[2, 4, 2, 3], -2.0, 2.0), uni(r, &[4], 0.5, 1.5), uni(r, &[4], -1.0, 1.0)]),
        Box::new(|g, x| g.channel_norm(x[0], x[1], x[2], 1e-5)),
    );

    let (n, d, st, h, w) = (2, 3, 2, 2, 3);
    for (name, reversed) in [("selective_scan", false), ("selective_scan reversed", true)] {
        add(
            name,
            Box::new(move |r| {
                vec![
                    uni(r, &[n, d, h, w], -1.0, 1.0),
                    uni(r, &[n, d, h, w], 0.05, 0.8),
                    uni(r, &[d, st], -2.0, -0.2),
                    uni(r, &[n, st, h, w], -1.0, 1.0),
                    uni(r, &[n, st, h, w], -1.0, 1.0),
                    uni(r, &[d], -1.0, 1.0),
                ]
            }),
            Box::new(move |g, x| {
                let order: Vec<usize> = if reversed {
                    (0..h * w).rev().collect()
                } else {
                    (0..h * w).collect()
                };
                g.selective_scan(x[0], x[1], x[2], x[3], x[4], x[5], order.into())
            }),
        );
    }
    cases
}

/// Worst relative error of one primitive over `draws` random input sets,
/// each reduced through `sum(op(x) * r)` with a fixed random `r`.
pub fn primitive_max_rel_err(make: &Make, op: &Op, draws: u64, h: f64) -> f64 {
    use rand::SeedableRng;
    let mut worst: f64 = 0.0;
    for seed in 0..draws {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = make(&mut rng);
        let report = seascan::tensor::gradcheck::finite_diff_check(
            |g, ids| {
                let y = op(g, ids)?;
                let mut wr = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
                let wt = g.constant(Tensor::uniform(g.shape(y), -1.0, 1.0, &mut wr));
                let p = g.mul(y, wt)?;
                Ok(g.sum(p))
            },
            &inputs,
            h,
            None,
        )
        .unwrap();
        worst = worst.max(report.max_rel_err);
    }
    worst
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn random_params(rng: &mut ChaCha8Rng, dim: usize, state: usize) -> SelectiveScanParams<f64> {
    let mut p = SelectiveScanParams::<f64>::init(dim, state, rng);
    // larger projections than the init so delta, B and C vary visibly
    p.dt_proj = rand_vec(rng, dim * dim, -0.5, 0.5);
    p.b_proj = rand_vec(rng, state * dim, -1.0, 1.0);
    p.c_proj = rand_vec(rng, state * dim, -1.0, 1.0);
    p.d = rand_vec(rng, dim, -1.0, 1.0);
    p.a_log = rand_vec(rng, dim * state, -1.0, 1.5);
    p
}

/// Projects delta/B/C the slow way and runs the naive recurrence.
pub fn naive_selective(u: &[f64], p: &SelectiveScanParams<f64>) -> Vec<f64> {
    let (dim, state) = (p.dim, p.state);
    let len = u.len() / dim;
    let mut delta = vec![0.0; len * dim];
    let mut b = vec![0.0; len * state];
    let mut c = vec![0.0; len * state];
    for t in 0..len {
        for i in 0..dim {
            let mut z = p.dt_bias[i];
            for j in 0..dim {
                z += p.dt_proj[i * dim + j] * u[t * dim + j];
            }
            delta[t * dim + i] = softplus(z);
        }
        for s in 0..state {
            for j in 0..dim {
                b[t * state + s] += p.b_proj[s * dim + j] * u[t * dim + j];
                c[t * state + s] += p.c_proj[s * dim + j] * u[t * dim + j];
            }
        }
    }
    let a: Vec<f64> = p.a_log.iter().map(|v| -v.exp()).collect();
    naive_scan(u, &delta, &a, &b, &c, &p.d, dim, state)
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
