//! Forecast quality and road-structure consistency.
//!
//! Everything here works on denormalised values. Frames are laid out
//! `(T, C, H, W)`; a "cell" is one spatial location of one frame, and it is
//! *active* when its channel mean exceeds `theta_act`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub tau: f64,
    pub theta_act: f64,
    pub minutes_per_frame: usize,
    pub horizons: Vec<usize>,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { tau: 0.05, theta_act: 1e-3, minutes_per_frame: 5, horizons: vec![5, 15, 30, 45, 60] }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
}

#[derive(Clone, Copy, Debug, Default)]
struct ErrAcc {
    abs: f64,
    sq: f64,
    n: usize,
}

impl ErrAcc {
    fn push(&mut self, d: f64) {
        self.abs += d.abs();
        self.sq += d * d;
        self.n += 1;
    }

    fn merge(&mut self, o: &ErrAcc) {
        self.abs += o.abs;
        self.sq += o.sq;
        self.n += o.n;
    }

    fn stats(&self) -> ErrorStats {
        let n = self.n.max(1) as f64;
        let mse = self.sq / n;
        ErrorStats { mae: self.abs / n, mse, rmse: mse.sqrt() }
    }
}

fn same_shape<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err!("prediction {:?} and target {:?} differ in shape", a.shape(), b.shape()));
    }
    Ok(())
}

/// MAE, MSE and RMSE over every element, in one pass.
pub fn error_stats<S: Scalar>(yhat: &Tensor<S>, y: &Tensor<S>) -> Result<ErrorStats> {
    same_shape(yhat, y)?;
    let mut acc = ErrAcc::default();
    for (a, b) in yhat.data().iter().zip(y.data()) {
        acc.push(a.as_f64() - b.as_f64());
    }
    Ok(acc.stats())
}

pub fn mae<S: Scalar>(yhat: &Tensor<S>, y: &Tensor<S>) -> Result<f64> {
    Ok(error_stats(yhat, y)?.mae)
}

pub fn mse<S: Scalar>(yhat: &Tensor<S>, y: &Tensor<S>) -> Result<f64> {
    Ok(error_stats(yhat, y)?.mse)
}

pub fn rmse<S: Scalar>(yhat: &Tensor<S>, y: &Tensor<S>) -> Result<f64> {
    Ok(error_stats(yhat, y)?.rmse)
}

/// `ceil(minutes / minutes_per_frame) - 1`
pub fn horizon_frame(minutes: usize, minutes_per_frame: usize) -> Option<usize> {
    if minutes == 0 || minutes_per_frame == 0 {
        return None;
    }
    Some(minutes.div_ceil(minutes_per_frame) - 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonRow {
    pub minutes: usize,
    /// Frames aggregated (1-based cumulative count).
    pub frames: usize,
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
}

/// Views a `(T, C, H, W)` or `(B, T, C, H, W)` tensor as `(B, T, C·H·W)`.
fn frame_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [t, c, h, w] => Ok((1, *t, c * h * w)),
        [b, t, c, h, w] => Ok((*b, *t, c * h * w)),
        s => Err(dim_err!("expected (T, C, H, W) or (B, T, C, H, W), got {s:?}")),
    }
}

fn per_frame_acc<S: Scalar>(yhat: &Tensor<S>, y: &Tensor<S>) -> Result<Vec<ErrAcc>> {
    same_shape(yhat, y)?;
    let (b, t, f) = frame_layout(y.shape())?;
    let mut accs = vec![ErrAcc::default(); t];
    for bi in 0..b {
        for (ti, acc) in accs.iter_mut().enumerate() {
            let o = (bi * t + ti) * f;
            for i in o..o + f {
                acc.push(yhat.data()[i].as_f64() - y.data()[i].as_f64());
            }
        }
    }
    Ok(accs)
}

fn horizon_rows(accs: &[ErrAcc], minutes_per_frame: usize, horizons: &[usize]) -> Result<Vec<HorizonRow>> {
    horizons
        .iter()
        .map(|&m| {
            let idx = horizon_frame(m, minutes_per_frame)
                .filter(|&i| i < accs.len())
                .ok_or_else(|| Error::Validation(format!("horizon {m} min is outside a {}-frame forecast", accs.len())))?;
            let mut acc = ErrAcc::default();
            for a in &accs[..=idx] {
                acc.merge(a);
            }
            let s = acc.stats();
            Ok(HorizonRow { minutes: m, frames: idx + 1, mae: s.mae, mse: s.mse, rmse: s.rmse })
        })
        .collect()
}

/// Cumulative error up to each horizon.
pub fn horizon_slice<S: Scalar>(yhat: &Tensor<S>, y: &Tensor<S>, minutes_per_frame: usize, horizons: &[usize]) -> Result<Vec<HorizonRow>> {
    horizon_rows(&per_frame_acc(yhat, y)?, minutes_per_frame, horizons)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoadStructure {
    pub road_mae: f64,
    pub offroad_activation_rate: f64,
    pub road_coverage_recall: f64,
}

#[derive(Clone, Copy, Debug, Default)]
struct RoadAcc {
    road_abs: f64,
    road_n: usize,
    active_pred: usize,
    active_pred_offroad: usize,
    active_gt_road: usize,
    active_both_road: usize,
}

impl RoadAcc {
    fn merge(&mut self, o: &RoadAcc) {
        self.road_abs += o.road_abs;
        self.road_n += o.road_n;
        self.active_pred += o.active_pred;
        self.active_pred_offroad += o.active_pred_offroad;
        self.active_gt_road += o.active_gt_road;
        self.active_both_road += o.active_both_road;
    }

    fn finish(&self) -> RoadStructure {
        RoadStructure {
            road_mae: self.road_abs / self.road_n.max(1) as f64,
            offroad_activation_rate: self.active_pred_offroad as f64 / self.active_pred.max(1) as f64,
            road_coverage_recall: self.active_both_road as f64 / self.active_gt_road.max(1) as f64,
        }
    }
}

fn road_plane<S: Scalar>(road: &Tensor<S>) -> Result<(usize, usize)> {
    match road.shape() {
        [h, w] | [1, h, w] => Ok((*h, *w)),
        s => Err(dim_err!("road map must be (H, W), got {s:?}")),
    }
}

fn road_acc<S: Scalar>(yhat: &Tensor<S>, y: &Tensor<S>, road: &Tensor<S>, tau: f64, theta: f64) -> Result<RoadAcc> {
    same_shape(yhat, y)?;
    let (h, w) = road_plane(road)?;
    let s = y.shape();
    let (frames, c) = match s {
        [t, c, hh, ww] if (*hh, *ww) == (h, w) => (*t, *c),
        [b, t, c, hh, ww] if (*hh, *ww) == (h, w) => (b * t, *c),
        _ => return Err(dim_err!("forecast {s:?} does not match road grid {h}x{w}")),
    };
    let plane = h * w;
    let on_road: Vec<bool> = road.data().iter().map(|r| r.as_f64() > tau).collect();
    let mut acc = RoadAcc::default();
    for f in 0..frames {
        let base = f * c * plane;
        for p in 0..plane {
            let (mut mp, mut mg) = (0.0, 0.0);
            for k in 0..c {
                let i = base + k * plane + p;
                let (a, b) = (yhat.data()[i].as_f64(), y.data()[i].as_f64());
                mp += a;
                mg += b;
                if on_road[p] {
                    acc.road_abs += (a - b).abs();
                    acc.road_n += 1;
                }
            }
            let (ap, ag) = (mp / c as f64 > theta, mg / c as f64 > theta);
            if ap {
                acc.active_pred += 1;
                if !on_road[p] {
                    acc.active_pred_offroad += 1;
                }
            }
            if ag && on_road[p] {
                acc.active_gt_road += 1;
                if ap {
                    acc.active_both_road += 1;
                }
            }
        }
    }
    Ok(acc)
}

pub fn road_structure_metrics<S: Scalar>(yhat: &Tensor<S>, y: &Tensor<S>, road: &Tensor<S>, tau: f64, theta_act: f64) -> Result<RoadStructure> {
    Ok(road_acc(yhat, y, road, tau, theta_act)?.finish())
}

/// Channel mean of a `(C, H, W)` frame.
pub fn channel_mean<S: Scalar>(frame: &Tensor<S>) -> Result<Vec<f64>> {
    let [c, h, w] = match frame.shape() {
        [c, h, w] => [*c, *h, *w],
        s => return Err(dim_err!("expected a (C, H, W) frame, got {s:?}")),
    };
    let plane = h * w;
    let mut out = vec![0.0; plane];
    for k in 0..c {
        for (o, v) in out.iter_mut().zip(&frame.data()[k * plane..(k + 1) * plane]) {
            *o += v.as_f64();
        }
    }
    out.iter_mut().for_each(|v| *v /= c as f64);
    Ok(out)
}

pub fn nonzero_cells<S: Scalar>(frame: &Tensor<S>, theta_act: f64) -> Result<usize> {
    Ok(channel_mean(frame)?.iter().filter(|&&v| v > theta_act).count())
}

/// SSIM of two `h x w` maps with a 7x7 uniform window over valid positions.
/// The dynamic range comes from the reference map `b`.
pub fn ssim(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    let n = SSIM_WINDOW;
    if a.len() != h * w || b.len() != h * w {
        return Err(dim_err!("ssim maps must both be {h}x{w}"));
    }
    if h < n || w < n {
        return Err(dim_err!("ssim needs maps of at least {n}x{n}, got {h}x{w}"));
    }
    let l = b.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(1e-6);
    let (c1, c2) = ((0.01 * l).powi(2), (0.03 * l).powi(2));
    let np = (n * n) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - n {
        for x0 in 0..=w - n {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + n {
                for x in x0..x0 + n {
                    let (u, v) = (a[y * w + x], b[y * w + x]);
                    sa += u;
                    sb += v;
                    saa += u * u;
                    sbb += v * v;
                    sab += u * v;
                }
            }
            let (ma, mb) = (sa / np, sb / np);
            let va = saa / np - ma * ma;
            let vb = sbb / np - mb * mb;
            let cov = sab / np - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// SSIM between the channel means of two `(C, H, W)` frames.
pub fn frame_ssim<S: Scalar>(pred: &Tensor<S>, gt: &Tensor<S>) -> Result<f64> {
    same_shape(pred, gt)?;
    let (h, w) = (gt.shape()[1], gt.shape()[2]);
    ssim(&channel_mean(pred)?, &channel_mean(gt)?, h, w)
}

/// Temporal mean of `x (C, T_in, H, W)` repeated into `(T_out, C, H, W)`.
pub fn historical_average<S: Scalar>(x: &Tensor<S>, t_out: usize) -> Result<Tensor<S>> {
    let [c, t, h, w] = match x.shape() {
        [c, t, h, w] => [*c, *t, *h, *w],
        s => return Err(dim_err!("historical average expects (C, T_in, H, W), got {s:?}")),
    };
    if t == 0 {
        return Err(Error::Validation("historical average needs T_in >= 1".into()));
    }
    let plane = h * w;
    let mut mean = vec![0.0f64; c * plane];
    for k in 0..c {
        for ti in 0..t {
            let src = &x.data()[(k * t + ti) * plane..(k * t + ti + 1) * plane];
            for (m, v) in mean[k * plane..(k + 1) * plane].iter_mut().zip(src) {
                *m += v.as_f64();
            }
        }
    }
    let frame: Vec<S> = mean.iter().map(|m| S::lit(m / t as f64)).collect();
    let mut data = Vec::with_capacity(t_out * frame.len());
    for _ in 0..t_out {
        data.extend_from_slice(&frame);
    }
    Tensor::new(&[t_out, c, h, w], data)
}

/// Full evaluation record for one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: usize,
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
    pub horizons: Vec<HorizonRow>,
    pub road_mae: f64,
    pub offroad_activation_rate: f64,
    pub road_coverage_recall: f64,
    pub ssim_per_frame: Vec<f64>,
    pub nonzero_cells_pred: Vec<usize>,
    pub nonzero_cells_gt: Vec<usize>,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_json()?.as_bytes())?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn write_horizon_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
        for row in &self.horizons {
            w.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Streams `(T, C, H, W)` forecast/target pairs into a [`MetricReport`].
#[derive(Clone, Debug)]
pub struct MetricAccumulator {
    config: MetricConfig,
    frames: Vec<ErrAcc>,
    road: RoadAcc,
    ssim_sum: Vec<f64>,
    nz_pred: Vec<usize>,
    nz_gt: Vec<usize>,
    samples: usize,
}

impl MetricAccumulator {
    pub fn new(config: MetricConfig) -> Self {
        Self {
            config,
            frames: Vec::new(),
            road: RoadAcc::default(),
            ssim_sum: Vec::new(),
            nz_pred: Vec::new(),
            nz_gt: Vec::new(),
            samples: 0,
        }
    }

    pub fn push<S: Scalar>(&mut self, yhat: &Tensor<S>, y: &Tensor<S>, road: &Tensor<S>) -> Result<()> {
        same_shape(yhat, y)?;
        if y.rank() != 4 {
            return Err(dim_err!("accumulator takes single (T, C, H, W) samples, got {:?}", y.shape()));
        }
        let t = y.shape()[0];
        if self.frames.is_empty() {
            self.frames = vec![ErrAcc::default(); t];
            self.ssim_sum = vec![0.0; t];
            self.nz_pred = vec![0; t];
            self.nz_gt = vec![0; t];
        } else if self.frames.len() != t {
            return Err(dim_err!("forecast length changed from {} to {t}", self.frames.len()));
        }
        for (acc, a) in self.frames.iter_mut().zip(per_frame_acc(yhat, y)?) {
            acc.merge(&a);
        }
        self.road.merge(&road_acc(yhat, y, road, self.config.tau, self.config.theta_act)?);
        for ti in 0..t {
            let (fp, fg) = (yhat.index_axis0(ti)?, y.index_axis0(ti)?);
            self.ssim_sum[ti] += frame_ssim(&fp, &fg)?;
            self.nz_pred[ti] += nonzero_cells(&fp, self.config.theta_act)?;
            self.nz_gt[ti] += nonzero_cells(&fg, self.config.theta_act)?;
        }
        self.samples += 1;
        Ok(())
    }

    pub fn finish(&self) -> Result<MetricReport> {
        if self.samples == 0 {
            return Err(Error::Validation("no samples to evaluate".into()));
        }
        let mut all = ErrAcc::default();
        for a in &self.frames {
            all.merge(a);
        }
        let s = all.stats();
        let fitting: Vec<usize> = self
            .config
            .horizons
            .iter()
            .copied()
            .filter(|&m| horizon_frame(m, self.config.minutes_per_frame).is_some_and(|i| i < self.frames.len()))
            .collect();
        if fitting.len() < self.config.horizons.len() {
            log::warn!("horizons beyond the {}-frame forecast are omitted", self.frames.len());
        }
        let rs = self.road.finish();
        Ok(MetricReport {
            samples: self.samples,
            mae: s.mae,
            mse: s.mse,
            rmse: s.rmse,
            horizons: horizon_rows(&self.frames, self.config.minutes_per_frame, &fitting)?,
            road_mae: rs.road_mae,
            offroad_activation_rate: rs.offroad_activation_rate,
            road_coverage_recall: rs.road_coverage_recall,
            ssim_per_frame: self.ssim_sum.iter().map(|v| v / self.samples as f64).collect(),
            nonzero_cells_pred: self.nz_pred.clone(),
            nonzero_cells_gt: self.nz_gt.clone(),
        })
    }
}
