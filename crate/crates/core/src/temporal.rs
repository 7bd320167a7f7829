//! Multi-horizon temporal encoder.
//!
//! `X (B, C, T_in, H, W)` goes through a 3x3x3 projection, three parallel
//! dilated temporal convolutions (short / mid / long horizon), a 1x1x1
//! fusion with relu, and a mean over the temporal axis.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Bound, Conv3d, Init, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Horizon {
    Short,
    Mid,
    Long,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchSpec {
    pub name: Horizon,
    /// Temporal kernel size (odd).
    pub k: usize,
    /// Temporal dilation.
    pub d: usize,
}

impl BranchSpec {
    pub const fn new(name: Horizon, k: usize, d: usize) -> Self {
        Self { name, k, d }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k % 2 == 0 {
            return Err(Error::Config(format!("{:?} branch: kernel {} must be odd", self.name, self.k)));
        }
        if self.d == 0 {
            return Err(Error::Config(format!("{:?} branch: dilation must be >= 1", self.name)));
        }
        Ok(())
    }
}

/// Frames covered by one branch: `1 + (k - 1) d`.
pub fn receptive_field(spec: &BranchSpec) -> usize {
    1 + (spec.k - 1) * spec.d
}

pub const DEFAULT_BRANCHES: [BranchSpec; 3] = [
    BranchSpec::new(Horizon::Short, 3, 1),
    BranchSpec::new(Horizon::Mid, 3, 2),
    BranchSpec::new(Horizon::Long, 3, 4),
];

/// Checks kernel parity, the `R <= T_in` bound and short <= mid <= long
/// ordering. Ties are accepted with a warning: with odd kernels a short
/// window such as `T_in = 4` only admits `R` in {1, 3}.
pub fn validate_branches(branches: &[BranchSpec; 3], t_in: usize) -> Result<()> {
    let expected = [Horizon::Short, Horizon::Mid, Horizon::Long];
    for (b, want) in branches.iter().zip(expected) {
        b.validate()?;
        if b.name != want {
            return Err(Error::Config(format!("branches must be ordered short, mid, long; found {:?}", b.name)));
        }
        let r = receptive_field(b);
        if r > t_in {
            return Err(Error::Config(format!(
                "{:?} branch receptive field {r} exceeds T_in = {t_in}",
                b.name
            )));
        }
    }
    let r: Vec<usize> = branches.iter().map(receptive_field).collect();
    if !(r[0] <= r[1] && r[1] <= r[2]) {
        return Err(Error::Config(format!("receptive fields must not decrease from short to long, got {r:?}")));
    }
    if r[0] == r[1] || r[1] == r[2] {
        log::warn!("branch receptive fields {r:?} are not strictly increasing");
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TemporalEncoderParams {
    pub project: Conv3d,
    pub branches: [Conv3d; 3],
    pub fuse: Conv3d,
    pub specs: [BranchSpec; 3],
    pub in_channels: usize,
    pub base: usize,
    pub out_channels: usize,
    pub t_in: usize,
}

impl TemporalEncoderParams {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        init: &mut Init,
        in_channels: usize,
        base: usize,
        t_in: usize,
        specs: [BranchSpec; 3],
    ) -> Result<Self> {
        validate_branches(&specs, t_in)?;
        let project = Conv3d::new(store, init, "temporal.project", in_channels, base, 3, 3, 1);
        let names = ["temporal.short", "temporal.mid", "temporal.long"];
        let branches = [0, 1, 2].map(|i| Conv3d::new(store, init, names[i], base, base, specs[i].k, 3, specs[i].d));
        let out_channels = 2 * base;
        let fuse = Conv3d::new(store, init, "temporal.fuse", 3 * base, out_channels, 1, 1, 1);
        Ok(Self { project, branches, fuse, specs, in_channels, base, out_channels, t_in })
    }

    /// `X (B, C, T_in, H, W)` -> `(B, C_t, H, W)`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 5 || s[1] != self.in_channels {
            return Err(dim_err!("temporal encoder expects (B, {}, T, H, W), got {s:?}", self.in_channels));
        }
        if s[2] != self.t_in {
            return Err(dim_err!("temporal encoder built for T_in = {}, got {}", self.t_in, s[2]));
        }
        let f0 = self.project.forward(g, p, x)?;
        let mut outs = Vec::with_capacity(3);
        for b in &self.branches {
            outs.push(b.forward(g, p, f0)?);
        }
        let cat = g.concat(&outs, 1)?;
        let fused = self.fuse.forward(g, p, cat)?;
        let act = g.relu(fused)?;
        let m = g.mean_axes(act, &[2])?;
        g.reshape(m, &[s[0], self.out_channels, s[3], s[4]])
    }
}
