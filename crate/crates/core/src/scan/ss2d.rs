use std::sync::Arc;

use rand::Rng;

use super::{a_log_init, dt_bias_init};
use crate::error::{Error, Result};
use crate::nn::{ChannelNorm, Conv2d, ParamStore};
use crate::tensor::{Float, Graph, NodeId, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ss2dConfig {
    pub d_model: usize,
    pub d_state: usize,
    pub expand: usize,
    /// Share one set of scan parameters across the four traversal orders.
    pub tie_directions: bool,
}

impl Ss2dConfig {
    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }
}

/// Traversal orders over an `h x w` grid flattened row-major:
/// row-major forward, row-major reverse, column-major forward, column-major reverse.
pub fn direction_orders(h: usize, w: usize) -> [Arc<[usize]>; 4] {
    let row: Vec<usize> = (0..h * w).collect();
    let col: Vec<usize> = (0..w).flat_map(|j| (0..h).map(move |i| i * w + j)).collect();
    let row_rev: Vec<usize> = row.iter().rev().copied().collect();
    let col_rev: Vec<usize> = col.iter().rev().copied().collect();
    [row.into(), row_rev.into(), col.into(), col_rev.into()]
}

#[derive(Clone, Debug)]
struct Direction {
    name: String,
    dt_proj: Conv2d,
    b_proj: Conv2d,
    c_proj: Conv2d,
}

/// Two-dimensional selective-scan block:
/// `x + out_proj(sum_dir scan_dir(silu(dwconv(in_x(norm x)))) * silu(in_z(norm x)))`.
#[derive(Clone, Debug)]
pub struct Ss2d {
    pub name: String,
    pub cfg: Ss2dConfig,
    norm: ChannelNorm,
    in_x: Conv2d,
    in_z: Conv2d,
    dwconv: Conv2d,
    dirs: Vec<Direction>,
    out_proj: Conv2d,
}

impl Ss2d {
    pub fn new(name: impl Into<String>, cfg: Ss2dConfig) -> Self {
        let name = name.into();
        let di = cfg.d_inner();
        let n_dirs = if cfg.tie_directions { 1 } else { 4 };
        let dirs = (0..n_dirs)
            .map(|k| {
                let dn = format!("{name}.dir{k}");
                Direction {
                    dt_proj: Conv2d::pointwise(format!("{dn}.dt_proj"), di, di),
                    b_proj: Conv2d::pointwise(format!("{dn}.b_proj"), di, cfg.d_state).without_bias(),
                    c_proj: Conv2d::pointwise(format!("{dn}.c_proj"), di, cfg.d_state).without_bias(),
                    name: dn,
                }
            })
            .collect();
        Self {
            norm: ChannelNorm::new(format!("{name}.norm"), cfg.d_model),
            in_x: Conv2d::pointwise(format!("{name}.in_x"), cfg.d_model, di),
            in_z: Conv2d::pointwise(format!("{name}.in_z"), cfg.d_model, di),
            dwconv: Conv2d::depthwise(format!("{name}.dwconv"), di, 3),
            out_proj: Conv2d::pointwise(format!("{name}.out_proj"), di, cfg.d_model),
            dirs,
            name,
            cfg,
        }
    }

    /// Registers parameters. The output projection starts at zero so the
    /// block is the identity at initialisation.
    pub fn init<T: Float, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let di = self.cfg.d_inner();
        let ds = self.cfg.d_state;
        self.norm.init(store);
        self.in_x.init(store, rng);
        self.in_z.init(store, rng);
        self.dwconv.init(store, rng);
        for dir in &self.dirs {
            dir.dt_proj.init(store, rng);
            // the dt projection bias carries the step-size initialisation
            *store.get_mut(&dir.dt_proj.bias_name()).expect("just inserted") =
                Tensor::new(&[di], dt_bias_init(di, rng)).expect("dt bias");
            dir.b_proj.init(store, rng);
            dir.c_proj.init(store, rng);
            store.insert(
                format!("{}.a_log", dir.name),
                Tensor::new(&[di, ds], a_log_init(di, ds)).expect("a_log"),
            );
            store.insert(format!("{}.d", dir.name), Tensor::ones(&[di]));
        }
        self.out_proj.init_zero(store);
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let (_, c, h, w) = g.value(x).dims4()?;
        if c != self.cfg.d_model {
            return Err(Error::shape(
                "ss2d_layer",
                format!("{} expects {} channels, got {c}", self.name, self.cfg.d_model),
            ));
        }
        let xn = self.norm.forward(g, store, x)?;
        let xs = self.in_x.forward(g, store, xn)?;
        let z = self.in_z.forward(g, store, xn)?;
        let xs = self.dwconv.forward(g, store, xs)?;
        let xs = g.silu(xs);
        let orders = direction_orders(h, w);
        let mut merged: Option<NodeId> = None;
        for (k, order) in orders.into_iter().enumerate() {
            let dir = &self.dirs[if self.cfg.tie_directions { 0 } else { k }];
            let dt = dir.dt_proj.forward(g, store, xs)?;
            let delta = g.softplus(dt);
            let bm = dir.b_proj.forward(g, store, xs)?;
            let cm = dir.c_proj.forward(g, store, xs)?;
            let a_log = store.bind(g, &format!("{}.a_log", dir.name))?;
            let a = g.exp(a_log);
            let a = g.neg(a);
            let d = store.bind(g, &format!("{}.d", dir.name))?;
            let y = g.selective_scan(xs, delta, a, bm, cm, d, order)?;
            merged = Some(match merged {
                None => y,
                Some(m) => g.add(m, y)?,
            });
        }
        let merged = merged.expect("four directions");
        let gate = g.silu(z);
        let y = g.mul(merged, gate)?;
        let y = self.out_proj.forward(g, store, y)?;
        g.add(x, y)
    }
}
