//! Structure-consistent training objective.
//!
//! `total = pred + λ_s·struct + λ_t·temp + λ_e·edge`, where `struct` is a
//! road-weighted MSE, `temp` penalises mismatched frame-to-frame deltas and
//! `edge` mismatched horizontal/vertical forward differences.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_t: f64,
    pub lambda_e: f64,
    pub gamma: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_s: 0.5, lambda_t: 0.2, lambda_e: 0.1, gamma: 5.0, tau: 0.05 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_s, self.lambda_t, self.lambda_e, self.gamma, self.tau];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        if self.gamma < 1.0 {
            return Err(Error::Config(format!("gamma must be >= 1, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Scalar values of every term, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pred: f64,
    pub r#struct: f64,
    pub temp: f64,
    pub edge: f64,
    pub total: f64,
}

/// Graph handles of every term.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub pred: Var,
    pub r#struct: Var,
    pub temp: Var,
    pub edge: Var,
    pub total: Var,
}

impl LossTerms {
    pub fn breakdown<S: Scalar>(&self, g: &Graph<S>) -> LossBreakdown {
        LossBreakdown {
            pred: g.scalar_value(self.pred).as_f64(),
            r#struct: g.scalar_value(self.r#struct).as_f64(),
            temp: g.scalar_value(self.temp).as_f64(),
            edge: g.scalar_value(self.edge).as_f64(),
            total: g.scalar_value(self.total).as_f64(),
        }
    }
}

fn check_pair<S: Scalar>(g: &Graph<S>, yhat: Var, y: Var) -> Result<[usize; 5]> {
    let (a, b) = (g.shape(yhat), g.shape(y));
    if a != b || a.len() != 5 {
        return Err(dim_err!("forecast {a:?} and target {b:?} must be equal (B, T, C, H, W) shapes"));
    }
    Ok([a[0], a[1], a[2], a[3], a[4]])
}

pub fn pred_loss<S: Scalar>(g: &mut Graph<S>, yhat: Var, y: Var) -> Result<Var> {
    check_pair(g, yhat, y)?;
    let d = g.sub(yhat, y)?;
    let sq = g.square(d)?;
    g.mean(sq)
}

/// Per-cell weight field `(1, 1, 1, H, W)`: γ where `road > τ`, else 1.
pub fn road_weights<S: Scalar>(road: &Tensor<S>, gamma: f64, tau: f64) -> Result<Tensor<S>> {
    let s = road.shape();
    let (h, w) = match s {
        [h, w] | [1, h, w] => (*h, *w),
        _ => return Err(dim_err!("road map must be (H, W), got {s:?}")),
    };
    let data = road
        .data()
        .iter()
        .map(|r| if r.as_f64() > tau { S::lit(gamma) } else { S::one() })
        .collect();
    Tensor::new(&[1, 1, 1, h, w], data)
}

pub fn struct_loss<S: Scalar>(g: &mut Graph<S>, yhat: Var, y: Var, road: &Tensor<S>, w: &LossWeights) -> Result<Var> {
    let s = check_pair(g, yhat, y)?;
    let weights = road_weights(road, w.gamma, w.tau)?;
    if weights.shape()[3..] != s[3..] {
        return Err(dim_err!("road grid {:?} does not match forecast grid {:?}", &weights.shape()[3..], &s[3..]));
    }
    let wv = g.constant(&weights)?;
    let d = g.sub(yhat, y)?;
    let sq = g.square(d)?;
    let weighted = g.mul(sq, wv)?;
    g.mean(weighted)
}

/// Mean squared mismatch of frame-to-frame deltas; 0 when `T < 2`.
pub fn temp_loss<S: Scalar>(g: &mut Graph<S>, yhat: Var, y: Var) -> Result<Var> {
    let s = check_pair(g, yhat, y)?;
    if s[1] < 2 {
        log::info!("temporal loss needs at least two forecast frames; contributing 0");
        return g.constant(&Tensor::scalar(S::zero()));
    }
    let d = g.sub(yhat, y)?;
    let next = g.narrow(d, 1, 1, s[1] - 1)?;
    let prev = g.narrow(d, 1, 0, s[1] - 1)?;
    let delta = g.sub(next, prev)?;
    let sq = g.square(delta)?;
    g.mean(sq)
}

/// Mean absolute mismatch of forward differences along W plus along H.
pub fn edge_loss<S: Scalar>(g: &mut Graph<S>, yhat: Var, y: Var) -> Result<Var> {
    let s = check_pair(g, yhat, y)?;
    if s[3] < 2 || s[4] < 2 {
        return Err(dim_err!("edge loss needs H, W >= 2, got {}x{}", s[3], s[4]));
    }
    let d = g.sub(yhat, y)?;
    let mut terms = Vec::with_capacity(2);
    for (axis, n) in [(4, s[4]), (3, s[3])] {
        let hi = g.narrow(d, axis, 1, n - 1)?;
        let lo = g.narrow(d, axis, 0, n - 1)?;
        let grad = g.sub(hi, lo)?;
        let a = g.abs(grad)?;
        terms.push(g.mean(a)?);
    }
    g.add(terms[0], terms[1])
}

pub fn total_loss<S: Scalar>(g: &mut Graph<S>, yhat: Var, y: Var, road: &Tensor<S>, w: &LossWeights) -> Result<LossTerms> {
    w.validate()?;
    let pred = pred_loss(g, yhat, y)?;
    let strct = struct_loss(g, yhat, y, road, w)?;
    let temp = temp_loss(g, yhat, y)?;
    let edge = edge_loss(g, yhat, y)?;
    let a = g.scale(strct, S::lit(w.lambda_s))?;
    let b = g.scale(temp, S::lit(w.lambda_t))?;
    let c = g.scale(edge, S::lit(w.lambda_e))?;
    let total = g.add(pred, a)?;
    let total = g.add(total, b)?;
    let total = g.add(total, c)?;
    Ok(LossTerms { pred, r#struct: strct, temp, edge, total })
}

/// Evaluates the loss on plain tensors without tracking gradients.
pub fn evaluate<S: Scalar>(yhat: &Tensor<S>, y: &Tensor<S>, road: &Tensor<S>, w: &LossWeights) -> Result<LossBreakdown> {
    let mut g = Graph::inference();
    let a = g.input(yhat)?;
    let b = g.input(y)?;
    Ok(total_loss(&mut g, a, b, road, w)?.breakdown(&g))
}
