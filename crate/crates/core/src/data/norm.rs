//! Channel-wise z-scoring and road-map scaling.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::topology::RoadMap;

pub const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Identity statistics (mean 0, std 1).
    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Population mean/std per channel over channel-last movies `(T, H, W, C)`.
    pub fn fit<'a, S: Scalar>(movies: impl IntoIterator<Item = &'a Tensor<S>>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for m in movies {
            let c = *m.shape().last().ok_or_else(|| dim_err!("empty movie shape"))?;
            if sum.is_empty() {
                sum = vec![0.0; c];
                sq = vec![0.0; c];
            } else if sum.len() != c {
                return Err(dim_err!("movies disagree on channel count ({} vs {c})", sum.len()));
            }
            for px in m.data().chunks_exact(c) {
                for (k, v) in px.iter().enumerate() {
                    let v = v.as_f64();
                    sum[k] += v;
                    sq[k] += v * v;
                }
            }
            count += m.numel() / c;
        }
        if count == 0 {
            return Err(Error::Validation("normalisation needs at least one training frame".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }

    fn channel_of(&self, shape: &[usize], axis: usize) -> Result<usize> {
        if axis >= shape.len() || shape[axis] != self.channels() {
            return Err(dim_err!("axis {axis} of {shape:?} is not a {}-channel axis", self.channels()));
        }
        Ok(shape[axis + 1..].iter().product())
    }

    fn map<S: Scalar>(&self, t: &Tensor<S>, axis: usize, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor<S>> {
        let inner = self.channel_of(t.shape(), axis)?;
        let c = self.channels();
        let mut out = t.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let k = (i / inner) % c;
            *v = S::lit(f(v.as_f64(), self.mean[k], self.std[k]));
        }
        Ok(out)
    }

    /// `(x - mean) / std` along `axis`.
    pub fn apply<S: Scalar>(&self, t: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
        self.map(t, axis, |x, m, s| (x - m) / s)
    }

    pub fn invert<S: Scalar>(&self, t: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
        self.map(t, axis, |x, m, s| x * s + m)
    }
}

/// Scales a raw map to `[0, 1]`; `(C, H, W)` inputs are channel-averaged first.
pub fn normalize_road<S: Scalar>(raw: &Tensor<S>) -> Result<RoadMap<S>> {
    let (c, h, w) = match raw.shape() {
        [h, w] => (1, *h, *w),
        [c, h, w] => (*c, *h, *w),
        s => return Err(dim_err!("road map must be (H, W) or (C, H, W), got {s:?}")),
    };
    if c * h * w == 0 {
        return Err(Error::Validation("empty road map".into()));
    }
    let plane = h * w;
    let reduced: Vec<f64> = (0..plane)
        .map(|i| (0..c).map(|k| raw.data()[k * plane + i].as_f64()).sum::<f64>() / c as f64)
        .collect();
    let lo = reduced.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = reduced.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scaled = if hi > lo {
        reduced.iter().map(|v| S::lit((v - lo) / (hi - lo))).collect()
    } else {
        vec![S::zero(); plane]
    };
    RoadMap::new(Tensor::new(&[h, w], scaled)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Init;

    #[test]
    fn constant_channel_is_floored() {
        let m = Tensor::<f64>::from_fn(&[3, 2, 2, 2], |i| if i % 2 == 0 { 4.0 } else { i as f64 });
        let s = NormStats::fit([&m]).unwrap();
        assert_eq!(s.std[0], STD_FLOOR);
        let z = s.apply(&m, 3).unwrap();
        assert!(z.data().iter().step_by(2).all(|&v| v == 0.0));
    }

    #[test]
    fn two_frame_loop_oracle() {
        let m = Init::new(3).uniform::<f64>(&[2, 2, 3, 8], -5.0, 5.0);
        let s = NormStats::fit([&m]).unwrap();
        for k in 0..8 {
            let vals: Vec<f64> = (0..12).map(|p| m.data()[p * 8 + k]).collect();
            let mean = vals.iter().sum::<f64>() / 12.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
            assert!((s.mean[k] - mean).abs() < 1e-6);
            assert!((s.std[k] - var.sqrt()).abs() < 1e-6);
        }
    }

    #[test]
    fn round_trip_on_channel_first_layout() {
        let stats = NormStats { mean: (0..8).map(|k| k as f64).collect(), std: (0..8).map(|k| 0.5 + k as f64).collect() };
        let x = Init::new(4).uniform::<f32>(&[2, 8, 3, 4, 4], -3.0, 3.0);
        let back = stats.invert(&stats.apply(&x, 1).unwrap(), 1).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-5);
        assert!(stats.apply(&x, 2).is_err());
    }

    #[test]
    fn road_scaling() {
        let raw = Tensor::<f32>::from_fn(&[8, 8], |i| if i % 3 == 0 { 255.0 } else { 0.0 });
        let r = normalize_road(&raw).unwrap();
        assert!(r.values().iter().all(|&v| v == 0.0 || v == 1.0));
        let flat = normalize_road(&Tensor::<f32>::full(&[8, 8], 7.0)).unwrap();
        assert!(flat.values().iter().all(|&v| v == 0.0));
        let rnd = normalize_road(&Init::new(1).uniform::<f32>(&[3, 8, 8], 10.0, 20.0)).unwrap();
        let (lo, hi) = rnd.grid().min_max();
        assert_eq!((lo, hi), (0.0, 1.0));
    }
}
