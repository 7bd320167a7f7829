//! Road topology prior and the multi-scale road encoder.
//!
//! A static road map in `[0, 1]` is expanded into seven structural channels
//! (occupancy, centreline proxy, edge magnitude, two orientation
//! components, connectivity density and intersection tendency) which a
//! three-scale convolutional encoder turns into road features.

use crate::error::{dim_err, param_err, Error, Result};
use crate::graph::{Graph, Resample, Var};
use crate::kernels;
use crate::layers::{Bound, Conv2d, Init, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Number of prior channels.
pub const PRIOR_CHANNELS: usize = 7;

pub const CHANNEL_NAMES: [&str; PRIOR_CHANNELS] = ["occ", "cen", "edge", "ori_x", "ori_y", "con", "int"];

pub const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
pub const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
pub const LAPLACIAN: [[f64; 3]; 3] = [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]];

/// Stabiliser under the gradient-magnitude square root.
pub const EPS: f64 = 1e-6;
pub const DEFAULT_POOL_K: usize = 5;
pub const MIN_SIDE: usize = 8;

/// Static single-channel road map `(1, H, W)` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RoadMap<S> {
    grid: Tensor<S>,
}

impl<S: Scalar> RoadMap<S> {
    /// Accepts `(H, W)` or `(1, H, W)`.
    pub fn new(grid: Tensor<S>) -> Result<Self> {
        let (h, w) = match grid.shape() {
            [h, w] | [1, h, w] => (*h, *w),
            s => return Err(dim_err!("road map must be (1, H, W), got {s:?}")),
        };
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(dim_err!("road map {h}x{w} is smaller than {MIN_SIDE}x{MIN_SIDE}"));
        }
        if grid.data().iter().any(|&v| !(v >= S::zero() && v <= S::one())) {
            return Err(Error::Validation("road map values must lie in [0, 1]".into()));
        }
        let grid = grid.reshape(&[1, h, w])?;
        Ok(Self { grid })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self { grid: Tensor::zeros(&[1, h, w]) }
    }

    pub fn grid(&self) -> &Tensor<S> {
        &self.grid
    }

    pub fn height(&self) -> usize {
        self.grid.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.grid.shape()[2]
    }

    pub fn values(&self) -> &[S] {
        self.grid.data()
    }

    pub fn cast<T: Scalar>(&self) -> RoadMap<T> {
        RoadMap { grid: self.grid.cast() }
    }
}

/// Seven-channel structural prior `(7, H, W)`, channels ordered as
/// [`CHANNEL_NAMES`].
#[derive(Clone, Debug, PartialEq)]
pub struct TopologyPrior<S> {
    channels: Tensor<S>,
}

impl<S: Scalar> TopologyPrior<S> {
    pub fn from_tensor(channels: Tensor<S>) -> Result<Self> {
        match channels.shape() {
            [PRIOR_CHANNELS, _, _] => Ok(Self { channels }),
            s => Err(dim_err!("topology prior must be ({PRIOR_CHANNELS}, H, W), got {s:?}")),
        }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self { channels: Tensor::zeros(&[PRIOR_CHANNELS, h, w]) }
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.channels
    }

    pub fn into_tensor(self) -> Tensor<S> {
        self.channels
    }

    pub fn channel(&self, c: usize) -> &[S] {
        let n = self.channels.shape()[1] * self.channels.shape()[2];
        &self.channels.data()[c * n..(c + 1) * n]
    }

    pub fn height(&self) -> usize {
        self.channels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.channels.shape()[2]
    }
}

/// Zero-padded 3x3 Sobel responses `(Gx, Gy)`, each `(H, W)`.
pub fn sobel_gradients<S: Scalar>(road: &RoadMap<S>) -> (Tensor<S>, Tensor<S>) {
    let (h, w) = (road.height(), road.width());
    let gx = kernels::stencil3x3(road.values(), h, w, &SOBEL_X);
    let gy = kernels::stencil3x3(road.values(), h, w, &SOBEL_Y);
    (
        Tensor::new(&[h, w], gx).expect("sobel shape"),
        Tensor::new(&[h, w], gy).expect("sobel shape"),
    )
}

pub fn extract_prior<S: Scalar>(road: &RoadMap<S>, pool_k: usize) -> Result<TopologyPrior<S>> {
    if pool_k % 2 == 0 {
        return Err(param_err!("pool_k must be odd, got {pool_k}"));
    }
    let (h, w) = (road.height(), road.width());
    let n = h * w;
    let occ = road.values();
    let con = kernels::avg_pool2d(occ, 1, h, w, pool_k)?;
    let cen = kernels::avg_pool2d(&con, 1, h, w, pool_k)?;
    let (gx, gy) = sobel_gradients(road);
    let lap = kernels::stencil3x3(occ, h, w, &LAPLACIAN);
    let eps = S::lit(EPS);

    let mut data = Vec::with_capacity(PRIOR_CHANNELS * n);
    data.extend_from_slice(occ);
    data.extend_from_slice(&cen);
    let mag: Vec<S> = gx.data().iter().zip(gy.data()).map(|(&x, &y)| (x * x + y * y + eps).sqrt()).collect();
    data.extend_from_slice(&mag);
    data.extend(gx.data().iter().zip(&mag).map(|(&x, &m)| x / m));
    data.extend(gy.data().iter().zip(&mag).map(|(&y, &m)| y / m));
    data.extend_from_slice(&con);
    data.extend(con.iter().zip(&lap).map(|(&c, &l)| c * l.abs()));
    TopologyPrior::from_tensor(Tensor::new(&[PRIOR_CHANNELS, h, w], data)?)
}

/// One encoder branch: 3x3 conv, relu, 3x3 conv.
#[derive(Clone, Debug)]
pub struct RoadBranch {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl RoadBranch {
    fn new<S: Scalar>(store: &mut ParamStore<S>, init: &mut Init, name: &str, width: usize) -> Self {
        Self {
            conv1: Conv2d::new(store, init, &format!("{name}.conv1"), PRIOR_CHANNELS, width, 3),
            conv2: Conv2d::new(store, init, &format!("{name}.conv2"), width, width, 3),
        }
    }

    fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        let y = self.conv1.forward(g, p, x)?;
        let y = g.relu(y)?;
        self.conv2.forward(g, p, y)
    }
}

/// Full-resolution, x2 and x4 branches fused by a 1x1 convolution.
#[derive(Clone, Debug)]
pub struct RoadEncoderParams {
    pub full: RoadBranch,
    pub half: RoadBranch,
    pub quarter: RoadBranch,
    pub fuse: Conv2d,
    pub branch_width: usize,
    pub out_channels: usize,
}

impl RoadEncoderParams {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, init: &mut Init, branch_width: usize, out_channels: usize) -> Self {
        Self {
            full: RoadBranch::new(store, init, "road.full", branch_width),
            half: RoadBranch::new(store, init, "road.half", branch_width),
            quarter: RoadBranch::new(store, init, "road.quarter", branch_width),
            fuse: Conv2d::new(store, init, "road.fuse", 3 * branch_width, out_channels, 1),
            branch_width,
            out_channels,
        }
    }

    /// `prior (1, 7, H, W)` -> road feature `(1, C_r, H, W)`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, prior: Var) -> Result<Var> {
        let s = g.shape(prior).to_vec();
        if s.len() != 4 || s[1] != PRIOR_CHANNELS {
            return Err(dim_err!("road encoder expects (B, {PRIOR_CHANNELS}, H, W), got {s:?}"));
        }
        if s[2] % 4 != 0 || s[3] % 4 != 0 {
            return Err(dim_err!("road encoder needs H and W divisible by 4, got {}x{}", s[2], s[3]));
        }
        let f1 = self.full.forward(g, p, prior)?;
        let d2 = g.resample2d(prior, Resample::DownAverage(2))?;
        let f2 = self.half.forward(g, p, d2)?;
        let f2 = g.resample2d(f2, Resample::UpLinear(2))?;
        let d4 = g.resample2d(prior, Resample::DownAverage(4))?;
        let f3 = self.quarter.forward(g, p, d4)?;
        let f3 = g.resample2d(f3, Resample::UpLinear(4))?;
        let cat = g.concat(&[f1, f2, f3], 1)?;
        self.fuse.forward(g, p, cat)
    }
}

/// Road feature `(C_r, H, W)` for a prior, evaluated without gradient
/// tracking.
pub fn encode_road<S: Scalar>(prior: &TopologyPrior<S>, params: &RoadEncoderParams, store: &ParamStore<S>) -> Result<Tensor<S>> {
    let mut g = Graph::inference();
    let p = store.bind(&mut g);
    let (h, w) = (prior.height(), prior.width());
    let x = g.input(&prior.tensor().clone().reshape(&[1, PRIOR_CHANNELS, h, w])?)?;
    let y = params.forward(&mut g, &p, x)?;
    g.value(y).reshape(&[params.out_channels, h, w])
}
