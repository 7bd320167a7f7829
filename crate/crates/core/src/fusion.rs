//! Direction-aware road/traffic fusion.
//!
//! The road feature gates the temporal feature per channel (`A^c`) and per
//! location (`A^s`), contributes four learned direction maps (`G^dir`), and
//! a residual convolutional refinement is added back onto the temporal
//! feature. The last refinement layer starts at zero, so a fresh module is
//! the identity on the temporal feature.

use crate::error::{dim_err, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Bound, Conv2d, Init, Linear, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DIRECTION_CHANNELS: usize = 4;
const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct FusionParams {
    pub road_proj: Conv2d,
    pub norm_scale: ParamId,
    pub norm_shift: ParamId,
    pub channel_fc1: Linear,
    pub channel_fc2: Linear,
    pub spatial: Conv2d,
    pub dir_conv: Conv2d,
    pub dir_out: Conv2d,
    pub refine1: Conv2d,
    pub refine2: Conv2d,
    pub road_channels: usize,
    pub channels: usize,
}

/// Fused feature plus the intermediate gates, for inspection.
#[derive(Clone, Copy, Debug)]
pub struct FusionOutput {
    pub fused: Var,
    /// `(1, C_t, 1, 1)`
    pub channel_gate: Var,
    /// `(1, 1, H, W)`
    pub spatial_gate: Var,
    /// `(1, 4, H, W)`
    pub direction_gate: Var,
}

impl FusionParams {
    /// `road_channels` is C_r, `channels` is C_t (= C_f).
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, init: &mut Init, road_channels: usize, channels: usize) -> Self {
        let bottleneck = (channels / 4).max(1);
        Self {
            road_proj: Conv2d::new(store, init, "fusion.road_proj", road_channels, channels, 1),
            norm_scale: store.add("fusion.norm.scale", Tensor::full(&[1, channels, 1, 1], S::one())),
            norm_shift: store.add("fusion.norm.shift", Tensor::zeros(&[1, channels, 1, 1])),
            channel_fc1: Linear::new(store, init, "fusion.channel_fc1", channels, bottleneck, true),
            channel_fc2: Linear::new(store, init, "fusion.channel_fc2", bottleneck, channels, true),
            spatial: Conv2d::new(store, init, "fusion.spatial", road_channels, 1, 1),
            dir_conv: Conv2d::new(store, init, "fusion.dir_conv", road_channels, channels, 3),
            dir_out: Conv2d::new(store, init, "fusion.dir_out", channels, DIRECTION_CHANNELS, 1),
            refine1: Conv2d::new(store, init, "fusion.refine1", 2 * channels + DIRECTION_CHANNELS, channels, 3),
            refine2: Conv2d::zeroed(store, "fusion.refine2", channels, channels, 3),
            road_channels,
            channels,
        }
    }

    /// Per-sample, per-channel standardisation over space, learned affine,
    /// relu.
    fn project_road<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, road: Var) -> Result<Var> {
        let x = self.road_proj.forward(g, p, road)?;
        let mu = g.mean_axes(x, &[2, 3])?;
        let xc = g.sub(x, mu)?;
        let sq = g.square(xc)?;
        let var = g.mean_axes(sq, &[2, 3])?;
        let sd = g.sqrt_eps(var, S::lit(NORM_EPS))?;
        let z = g.div(xc, sd)?;
        let z = g.mul(z, p[self.norm_scale])?;
        let z = g.add(z, p[self.norm_shift])?;
        g.relu(z)
    }

    /// `temporal (B, C_t, H, W)`, `road (1, C_r, H, W)` -> `(B, C_t, H, W)`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, temporal: Var, road: Var) -> Result<FusionOutput> {
        let ts = g.shape(temporal).to_vec();
        let rs = g.shape(road).to_vec();
        if ts.len() != 4 || ts[1] != self.channels {
            return Err(dim_err!("fusion expects temporal feature (B, {}, H, W), got {ts:?}", self.channels));
        }
        if rs.len() != 4 || rs[0] != 1 || rs[1] != self.road_channels {
            return Err(dim_err!("fusion expects road feature (1, {}, H, W), got {rs:?}", self.road_channels));
        }
        if ts[2..] != rs[2..] {
            return Err(dim_err!("traffic grid {:?} and road grid {:?} differ", &ts[2..], &rs[2..]));
        }
        let (b, c, h, w) = (ts[0], ts[1], ts[2], ts[3]);

        let road_t = self.project_road(g, p, road)?;

        let pooled = g.gap(road_t)?;
        let a = self.channel_fc1.forward(g, p, pooled)?;
        let a = g.relu(a)?;
        let a = self.channel_fc2.forward(g, p, a)?;
        let a = g.sigmoid(a)?;
        let channel_gate = g.reshape(a, &[1, c, 1, 1])?;

        let s = self.spatial.forward(g, p, road)?;
        let spatial_gate = g.sigmoid(s)?;

        let gated = g.mul(temporal, channel_gate)?;
        let gated = g.mul(gated, spatial_gate)?;

        let d = self.dir_conv.forward(g, p, road)?;
        let d = g.relu(d)?;
        let d = self.dir_out.forward(g, p, d)?;
        let direction_gate = g.sigmoid(d)?;

        let road_b = g.expand(road_t, &[b, c, h, w])?;
        let dir_b = g.expand(direction_gate, &[b, DIRECTION_CHANNELS, h, w])?;
        let cat = g.concat(&[gated, road_b, dir_b], 1)?;
        let r = self.refine1.forward(g, p, cat)?;
        let r = g.relu(r)?;
        let refined = self.refine2.forward(g, p, r)?;
        let fused = g.add(temporal, refined)?;
        Ok(FusionOutput { fused, channel_gate, spatial_gate, direction_gate })
    }
}
