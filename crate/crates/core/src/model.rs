//! The assembled forecasting network.

use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderParams, FRAME_CHANNELS};
use crate::error::{dim_err, Error, Result};
use crate::fusion::{FusionOutput, FusionParams};
use crate::graph::{Graph, Var};
use crate::layers::{Bound, Init, ParamStore};
use crate::scalar::Scalar;
use crate::temporal::{validate_branches, BranchSpec, TemporalEncoderParams, DEFAULT_BRANCHES};
use crate::tensor::Tensor;
use crate::topology::{RoadEncoderParams, TopologyPrior, DEFAULT_POOL_K, PRIOR_CHANNELS};

/// What the road encoder sees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorMode {
    /// The extracted topology prior.
    #[default]
    Topology,
    /// An all-zero prior (road-conditioning ablation).
    Zeros,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub channels: usize,
    pub base_channels: usize,
    pub hidden: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub pool_k: usize,
    pub road_branch_width: usize,
    pub branches: [BranchSpec; 3],
    pub prior: PriorMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: FRAME_CHANNELS,
            base_channels: 32,
            hidden: 128,
            t_in: 12,
            t_out: 12,
            pool_k: DEFAULT_POOL_K,
            road_branch_width: 16,
            branches: DEFAULT_BRANCHES,
            prior: PriorMode::Topology,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("base_channels", self.base_channels),
            ("hidden", self.hidden),
            ("t_in", self.t_in),
            ("t_out", self.t_out),
            ("road_branch_width", self.road_branch_width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.channels != FRAME_CHANNELS {
            return Err(Error::Config(format!("traffic frames carry {FRAME_CHANNELS} channels, got {}", self.channels)));
        }
        if self.pool_k % 2 == 0 {
            return Err(Error::Config(format!("pool_k must be odd, got {}", self.pool_k)));
        }
        validate_branches(&self.branches, self.t_in)
    }

    /// C_t = C_f = C_r.
    pub fn feature_channels(&self) -> usize {
        2 * self.base_channels
    }

    pub fn road_channels(&self) -> usize {
        self.base_channels
    }
}

#[derive(Clone, Debug)]
pub struct RcsNet<S> {
    pub config: ModelConfig,
    pub store: ParamStore<S>,
    pub road: RoadEncoderParams,
    pub temporal: TemporalEncoderParams,
    pub fusion: FusionParams,
    pub decoder: DecoderParams,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `(B, T_out, 8, H, W)`
    pub forecast: Var,
    pub road_feature: Var,
    pub fusion: FusionOutput,
}

impl<S: Scalar> RcsNet<S> {
    /// Builds and initialises all parameters from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let c_t = config.feature_channels();
        let c_r = config.road_channels();
        let road = RoadEncoderParams::new(&mut store, &mut init, config.road_branch_width, c_r);
        let temporal = TemporalEncoderParams::new(
            &mut store,
            &mut init,
            config.channels,
            config.base_channels,
            config.t_in,
            config.branches,
        )?;
        let fusion = FusionParams::new(&mut store, &mut init, c_r, c_t);
        let decoder = DecoderParams::new(&mut store, &mut init, c_t, config.hidden);
        Ok(Self { config, store, road, temporal, fusion, decoder })
    }

    /// Same architecture carrying the parameters in another precision.
    pub fn cast<T: Scalar>(&self) -> RcsNet<T> {
        RcsNet {
            config: self.config.clone(),
            store: self.store.cast(),
            road: self.road.clone(),
            temporal: self.temporal.clone(),
            fusion: self.fusion.clone(),
            decoder: self.decoder.clone(),
        }
    }

    /// `x (B, C, T_in, H, W)`, `prior (1, 7, H, W)`.
    pub fn forward(&self, g: &mut Graph<S>, p: &Bound, x: Var, prior: Var) -> Result<ForwardOutput> {
        let ps = g.shape(prior).to_vec();
        let xs = g.shape(x).to_vec();
        if ps.len() != 4 || ps[0] != 1 || ps[1] != PRIOR_CHANNELS {
            return Err(dim_err!("prior must be (1, {PRIOR_CHANNELS}, H, W), got {ps:?}"));
        }
        if xs.len() != 5 || xs[3..] != ps[2..] {
            return Err(dim_err!("input {xs:?} and prior {ps:?} disagree on the grid"));
        }
        let prior = match self.config.prior {
            PriorMode::Topology => prior,
            PriorMode::Zeros => g.constant(&Tensor::zeros(&ps))?,
        };
        let road_feature = self.road.forward(g, p, prior)?;
        let temporal = self.temporal.forward(g, p, x)?;
        let fusion = self.fusion.forward(g, p, temporal, road_feature)?;
        let forecast = self.decoder.forward(g, p, fusion.fused, self.config.t_out)?;
        Ok(ForwardOutput { forecast, road_feature, fusion })
    }

    /// Inference-only forecast for a batch `x (B, C, T_in, H, W)`.
    pub fn predict(&self, x: &Tensor<S>, prior: &TopologyPrior<S>) -> Result<Tensor<S>> {
        let mut g = Graph::inference();
        let p = self.store.bind(&mut g);
        let xv = g.input(x)?;
        let pv = g.input(&prior_batch(prior)?)?;
        let out = self.forward(&mut g, &p, xv, pv)?;
        Ok(g.value(out.forecast))
    }
}

/// `(7, H, W)` prior as a `(1, 7, H, W)` tensor.
pub fn prior_batch<S: Scalar>(prior: &TopologyPrior<S>) -> Result<Tensor<S>> {
    prior
        .tensor()
        .clone()
        .reshape(&[1, PRIOR_CHANNELS, prior.height(), prior.width()])
}
