//! Split-level evaluation of a model or of the Historical Average baseline.

use crate::data::{crop_spatial, Dataset};
use crate::error::Result;
use crate::graph::Graph;
use crate::metrics::{historical_average, MetricAccumulator, MetricConfig, MetricReport};
use crate::model::{prior_batch, RcsNet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Denormalised, cropped forecasts `(N, T_out, C, H, W)` for every window,
/// in dataset order.
pub fn forecast_split<S: Scalar>(model: &RcsNet<S>, data: &Dataset<S>, batch: usize) -> Result<Vec<Tensor<S>>> {
    let priors = data.cities.iter().map(|c| prior_batch(&c.prior)).collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(data.len());
    for (i, ids) in data.plan(batch, None).iter().enumerate() {
        let b = data.batch(ids, i)?;
        let mut g = Graph::inference();
        let p = model.store.bind(&mut g);
        let xv = g.input(&b.x)?;
        let pv = g.input(&priors[b.city])?;
        let fwd = model.forward(&mut g, &p, xv, pv)?;
        let y = g.value(fwd.forecast);
        let y = data.stats.invert(&y, 2)?;
        let city = &data.cities[b.city];
        let y = crop_spatial(&y, 3, city.height, city.width)?;
        for k in 0..ids.len() {
            out.push(y.index_axis0(k)?);
        }
    }
    Ok(out)
}

/// Per-window `(prediction, target, road)` after denormalising and cropping.
fn push_sample<S: Scalar>(acc: &mut MetricAccumulator, data: &Dataset<S>, i: usize, pred: &Tensor<S>) -> Result<()> {
    let s = data.sample(i)?;
    let city = &data.cities[s.city];
    let y = crop_spatial(&data.stats.invert(&s.y, 1)?, 2, city.height, city.width)?;
    let road = crop_spatial(city.road.grid(), 1, city.height, city.width)?;
    acc.push(pred, &y, &road)
}

pub fn evaluate_model<S: Scalar>(model: &RcsNet<S>, data: &Dataset<S>, batch: usize, cfg: &MetricConfig) -> Result<MetricReport> {
    let preds = forecast_split(model, data, batch)?;
    let order: Vec<usize> = data.plan(batch, None).concat();
    let mut acc = MetricAccumulator::new(cfg.clone());
    for (pred, &i) in preds.iter().zip(&order) {
        push_sample(&mut acc, data, i, pred)?;
    }
    acc.finish()
}

/// Historical Average forecasts, denormalised and cropped.
pub fn baseline_forecast<S: Scalar>(data: &Dataset<S>, i: usize) -> Result<Tensor<S>> {
    let s = data.sample(i)?;
    let city = &data.cities[s.city];
    let x = crop_spatial(&data.stats.invert(&s.x, 0)?, 2, city.height, city.width)?;
    historical_average(&x, data.t_out)
}

pub fn evaluate_baseline<S: Scalar>(data: &Dataset<S>, cfg: &MetricConfig) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::new(cfg.clone());
    for i in data.plan(usize::MAX, None).concat() {
        push_sample(&mut acc, data, i, &baseline_forecast(data, i)?)?;
    }
    acc.finish()
}
