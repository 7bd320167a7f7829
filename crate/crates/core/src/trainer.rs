//! Optimisation loop, learning-rate schedule, checkpointing and model
//! selection.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::container::{self, Header};
use crate::data::{worker_count, Batch, Dataset, NormStats, Prefetcher};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::layers::ParamStore;
use crate::loss::{total_loss, LossBreakdown, LossWeights};
use crate::model::{prior_batch, ModelConfig, RcsNet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub stride: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub loss: LossWeights,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            weight_decay: 1e-4,
            batch: 8,
            epochs: 50,
            clip_norm: 1.0,
            seed: 42,
            stride: 6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            loss: LossWeights::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr0, self.clip_norm, self.eps];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config("lr0, clip_norm and eps must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.batch == 0 || self.epochs == 0 || self.stride == 0 {
            return Err(Error::Config("batch, epochs and stride must be positive".into()));
        }
        self.loss.validate()?;
        self.model.validate()
    }
}

/// `lr0 · ½ (1 + cos(π · step / total))`, clamped at 0.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    (lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())).max(0.0)
}

/// Global L2 norm of every gradient buffer.
pub fn grad_norm<S: Scalar>(store: &ParamStore<S>) -> f64 {
    store
        .iter()
        .filter_map(|(_, t)| t.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|v| {
            let v = v.as_f64();
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients together so their global norm is at most
/// `max_norm`. Returns the factor applied (1 when untouched).
pub fn clip_gradients<S: Scalar>(store: &mut ParamStore<S>, max_norm: f64) -> Result<f64> {
    let norm = grad_norm(store);
    if !norm.is_finite() {
        return Err(Error::Numeric(format!("gradient norm is {norm}")));
    }
    if norm <= max_norm {
        return Ok(1.0);
    }
    let scale = max_norm / norm;
    let s = S::lit(scale);
    for t in store.tensors_mut() {
        if let Some(g) = t.grad.as_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
    Ok(scale)
}

/// AdamW with bias correction and decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(store: &ParamStore<S>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = |t: &Tensor<S>| vec![S::zero(); t.numel()];
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: store.iter().map(|(_, t)| zeros(t)).collect(),
            v: store.iter().map(|(_, t)| zeros(t)).collect(),
        }
    }

    /// One update with learning rate `lr`: moments, bias-corrected step,
    /// then `p ← p − lr·wd·p`.
    pub fn step(&mut self, store: &mut ParamStore<S>, lr: f64) -> Result<()> {
        self.t += 1;
        let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
        let (one_b1, one_b2) = (S::lit(1.0 - self.beta1), S::lit(1.0 - self.beta2));
        let c1 = S::lit(1.0 - self.beta1.powi(self.t as i32));
        let c2 = S::lit(1.0 - self.beta2.powi(self.t as i32));
        let (lr_s, eps) = (S::lit(lr), S::lit(self.eps));
        let decay = S::lit(lr * self.weight_decay);
        for ((t, m), v) in store.tensors_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = t
                .grad
                .clone()
                .ok_or_else(|| Error::Contract("optimizer step before gradients were populated".into()))?;
            for (i, p) in t.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                *p -= lr_s * mhat / (vhat.sqrt() + eps);
                *p -= decay * *p;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub batch: usize,
    pub pred: f64,
    pub r#struct: f64,
    pub temp: f64,
    pub edge: f64,
    pub total: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub best: bool,
}

/// Per-city `(1, 7, H, W)` prior and `(1, H, W)` road tensors.
fn city_inputs<S: Scalar>(data: &Dataset<S>) -> Result<Vec<(Tensor<S>, Tensor<S>)>> {
    data.cities
        .iter()
        .map(|c| Ok((prior_batch(&c.prior)?, c.road.grid().clone())))
        .collect()
}

/// Model plus optimiser state.
#[derive(Clone, Debug)]
pub struct Trainer<S> {
    pub config: TrainConfig,
    pub model: RcsNet<S>,
    pub opt: AdamW<S>,
    pub step: usize,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = RcsNet::new(config.model.clone(), config.seed)?;
        let opt = AdamW::new(&model.store, config.beta1, config.beta2, config.eps, config.weight_decay);
        Ok(Self { config, model, opt, step: 0 })
    }

    /// Forward, backward, clip and update on one batch.
    pub fn train_step(&mut self, x: &Tensor<S>, y: &Tensor<S>, prior: &Tensor<S>, road: &Tensor<S>, lr: f64) -> Result<(LossBreakdown, f64)> {
        let mut g = Graph::new();
        let p = self.model.store.bind(&mut g);
        let xv = g.input(x)?;
        let yv = g.input(y)?;
        let pv = g.input(prior)?;
        let out = self.model.forward(&mut g, &p, xv, pv)?;
        let terms = total_loss(&mut g, out.forecast, yv, road, &self.config.loss)?;
        let br = terms.breakdown(&g);
        if !br.total.is_finite() {
            return Err(Error::Numeric(format!("loss is {}", br.total)));
        }
        g.backward(terms.total)?;
        self.model.store.zero_grads();
        self.model.store.accumulate_grads(&g, &p);
        let norm = grad_norm(&self.model.store);
        clip_gradients(&mut self.model.store, self.config.clip_norm)?;
        self.opt.step(&mut self.model.store, lr)?;
        self.step += 1;
        Ok((br, norm))
    }

    /// Sample-weighted mean total loss over `data`, on inference graphs.
    pub fn validation_loss(&self, data: &Dataset<S>) -> Result<Option<f64>> {
        if data.is_empty() {
            return Ok(None);
        }
        let inputs = city_inputs(data)?;
        let (mut sum, mut n) = (0.0, 0usize);
        for (i, ids) in data.plan(self.config.batch, None).iter().enumerate() {
            let b = data.batch(ids, i)?;
            let (prior, road) = &inputs[b.city];
            let mut g = Graph::inference();
            let p = self.model.store.bind(&mut g);
            let xv = g.input(&b.x)?;
            let yv = g.input(&b.y)?;
            let pv = g.input(prior)?;
            let out = self.model.forward(&mut g, &p, xv, pv)?;
            let terms = total_loss(&mut g, out.forecast, yv, road, &self.config.loss)?;
            sum += terms.breakdown(&g).total * ids.len() as f64;
            n += ids.len();
        }
        Ok(Some(sum / n as f64))
    }

    pub fn checkpoint(&self, stats: &NormStats, epoch: usize, val_loss: Option<f64>) -> Checkpoint<S> {
        Checkpoint {
            manifest: Manifest {
                params: self.model.store.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect(),
                config: self.config.clone(),
                epoch,
                step: self.step,
                val_loss,
                optimizer_t: self.opt.t,
                norm: stats.clone(),
            },
            store: self.model.store.clone(),
            opt: self.opt.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub params: Vec<(String, Vec<usize>)>,
    pub config: TrainConfig,
    pub epoch: usize,
    pub step: usize,
    pub val_loss: Option<f64>,
    pub optimizer_t: u64,
    pub norm: NormStats,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<S> {
    pub manifest: Manifest,
    pub store: ParamStore<S>,
    pub opt: AdamW<S>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn tensor_file(dir: &Path, kind: &str, name: &str) -> PathBuf {
    dir.join(kind).join(format!("{name}.gtc"))
}

impl<S: Scalar> Checkpoint<S> {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for (i, (name, t)) in self.store.iter().enumerate() {
            let h = Header::new(t.shape(), &[]);
            container::write(tensor_file(dir, "params", name), &h, t)?;
            let m = Tensor::new(t.shape(), self.opt.m[i].clone())?;
            let v = Tensor::new(t.shape(), self.opt.v[i].clone())?;
            container::write(tensor_file(dir, "adam_m", name), &h, &m)?;
            container::write(tensor_file(dir, "adam_v", name), &h, &v)?;
        }
        let json = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))
            .map_err(|e| Error::Validation(format!("checkpoint {}: {e}", dir.display())))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        let mut model = RcsNet::<S>::new(manifest.config.model.clone(), manifest.config.seed)?;
        let c = &manifest.config;
        let mut opt = AdamW::new(&model.store, c.beta1, c.beta2, c.eps, c.weight_decay);
        opt.t = manifest.optimizer_t;
        let ids: Vec<_> = model.store.ids().collect();
        if ids.len() != manifest.params.len() {
            return Err(Error::Format("manifest parameter list does not match the model".into()));
        }
        for (k, id) in ids.into_iter().enumerate() {
            let name = model.store.name(id).to_string();
            if manifest.params[k].0 != name {
                return Err(Error::Format(format!("manifest lists {} where the model has {name}", manifest.params[k].0)));
            }
            let (_, t) = container::read::<S>(tensor_file(dir, "params", &name))?;
            model.store.set(id, t)?;
            let (_, m) = container::read::<S>(tensor_file(dir, "adam_m", &name))?;
            let (_, v) = container::read::<S>(tensor_file(dir, "adam_v", &name))?;
            opt.m[k] = m.into_data();
            opt.v[k] = v.into_data();
        }
        Ok(Self { manifest, store: model.store, opt })
    }

    pub fn model(&self) -> Result<RcsNet<S>> {
        let mut model = RcsNet::new(self.manifest.config.model.clone(), self.manifest.config.seed)?;
        model.store = self.store.clone();
        Ok(model)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<S> {
    pub best: Checkpoint<S>,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

fn dump_batch<S: Scalar>(dir: &Path, b: &Batch<S>) {
    let base = dir.join(format!("nonfinite_batch_{:05}", b.id));
    let hx = Header::new(b.x.shape(), &["B", "C", "T", "H", "W"]);
    let hy = Header::new(b.y.shape(), &["B", "T", "C", "H", "W"]);
    let res = container::write(base.with_extension("x.gtc"), &hx, &b.x)
        .and_then(|_| container::write(base.with_extension("y.gtc"), &hy, &b.y));
    if let Err(e) = res {
        log::error!("could not dump batch {}: {e}", b.id);
    }
}

/// Runs every epoch, tracks the lowest validation loss (earliest epoch on
/// ties) and, with `out` set, writes `best/` and `train_log.jsonl` there.
pub fn train<S: Scalar>(config: &TrainConfig, train_set: Arc<Dataset<S>>, val_set: &Dataset<S>, out: Option<&Path>) -> Result<TrainOutcome<S>> {
    if train_set.is_empty() {
        return Err(Error::Validation("the training split holds no windows".into()));
    }
    let mut trainer = Trainer::<S>::new(config.clone())?;
    let inputs = city_inputs(&train_set)?;
    let plans: Vec<Vec<Vec<usize>>> = (0..config.epochs)
        .map(|e| train_set.plan(config.batch, Some(config.seed.wrapping_add(e as u64))))
        .collect();
    let total_steps: usize = plans.iter().map(Vec::len).sum();
    let mut log_file = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(fs::File::create(dir.join("train_log.jsonl"))?)
        }
        None => None,
    };
    let mut steps = Vec::with_capacity(total_steps);
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, Checkpoint<S>)> = None;
    for (epoch, plan) in plans.into_iter().enumerate() {
        let (mut sum, mut n) = (0.0, 0usize);
        for batch in Prefetcher::spawn(train_set.clone(), plan, worker_count(), 2) {
            let b = batch?;
            let (prior, road) = &inputs[b.city];
            let lr = cosine_lr(trainer.step, total_steps, config.lr0);
            let (br, norm) = match trainer.train_step(&b.x, &b.y, prior, road, lr) {
                Ok(r) => r,
                Err(Error::Numeric(m)) => {
                    if let Some(dir) = out {
                        dump_batch(dir, &b);
                    }
                    return Err(Error::Numeric(format!("epoch {epoch}, batch {}: {m}", b.id)));
                }
                Err(e) => return Err(e),
            };
            let rec = StepRecord {
                step: trainer.step,
                epoch,
                batch: b.id,
                pred: br.pred,
                r#struct: br.r#struct,
                temp: br.temp,
                edge: br.edge,
                total: br.total,
                lr,
                grad_norm: norm,
            };
            let line = serde_json::to_string(&rec).map_err(|e| Error::Format(e.to_string()))?;
            log::debug!("{line}");
            if let Some(f) = log_file.as_mut() {
                writeln!(f, "{line}")?;
            }
            steps.push(rec);
            sum += br.total * b.windows.len() as f64;
            n += b.windows.len();
        }
        let val = trainer.validation_loss(val_set)?;
        // without a validation split, selection falls back to the training loss
        let score = val.unwrap_or(sum / n as f64);
        let improved = best.as_ref().is_none_or(|(b, _)| score < *b);
        if improved {
            let ck = trainer.checkpoint(&train_set.stats, epoch, val);
            if let Some(dir) = out {
                ck.save(dir.join("best"))?;
            }
            best = Some((score, ck));
        }
        let rec = EpochRecord { epoch, train_loss: sum / n as f64, val_loss: val, best: improved };
        log::info!("epoch {epoch}: train {:.6} val {:?}{}", rec.train_loss, rec.val_loss, if improved { " *" } else { "" });
        epochs.push(rec);
    }
    if let Some(dir) = out {
        trainer.checkpoint(&train_set.stats, config.epochs - 1, None).save(dir.join("last"))?;
    }
    Ok(TrainOutcome { best: best.expect("at least one epoch").1, steps, epochs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Init;

    fn store_with_grad(vals: &[f64], grads: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::from_f64(&[vals.len()], vals).unwrap());
        s.get_mut(id).grad = Some(grads.to_vec());
        s
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 100, 1e-3), 1e-3);
        assert!(cosine_lr(100, 100, 1e-3).abs() < 1e-20);
        assert!((cosine_lr(50, 100, 1e-3) - 5e-4).abs() < 1e-15);
        assert!(cosine_lr(200, 100, 1e-3) >= 0.0);
    }

    #[test]
    fn clipping() {
        let mut s = store_with_grad(&[0.0, 0.0], &[0.3, 0.4]);
        assert_eq!(clip_gradients(&mut s, 1.0).unwrap(), 1.0);
        assert_eq!(s.iter().next().unwrap().1.grad.as_deref(), Some(&[0.3, 0.4][..]));
        let mut s = store_with_grad(&[0.0, 0.0], &[3.0, 4.0]);
        assert_eq!(clip_gradients(&mut s, 1.0).unwrap(), 0.2);
        let g = s.iter().next().unwrap().1.grad.clone().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn clipping_is_global_across_tensors() {
        let mut init = Init::new(3);
        let mut s = ParamStore::<f64>::new();
        for k in 0..4 {
            let id = s.add(format!("p{k}"), Tensor::zeros(&[5]));
            s.get_mut(id).grad = Some(init.uniform::<f64>(&[5], -2.0, 2.0).into_data());
        }
        let before = grad_norm(&s);
        clip_gradients(&mut s, 1.0).unwrap();
        assert!((grad_norm(&s) - before.min(1.0)).abs() < 1e-6);
    }

    #[test]
    fn adamw_decay_only_and_still() {
        let mut s = store_with_grad(&[2.0, -1.0], &[0.0, 0.0]);
        let mut opt = AdamW::new(&s, 0.9, 0.999, 1e-8, 0.0);
        opt.step(&mut s, 1e-2).unwrap();
        assert_eq!(s.iter().next().unwrap().1.data(), &[2.0, -1.0]);
        let mut opt = AdamW::new(&s, 0.9, 0.999, 1e-8, 0.1);
        opt.step(&mut s, 1e-2).unwrap();
        assert_eq!(s.iter().next().unwrap().1.data(), &[2.0 * (1.0 - 1e-3), -1.0 * (1.0 - 1e-3)]);
    }

    #[test]
    fn adamw_scalar_recurrence() {
        let (p0, g, lr, wd) = (0.5f64, 0.2f64, 1e-2, 0.01);
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let mut s = store_with_grad(&[p0], &[g]);
        let mut opt = AdamW::new(&s, b1, b2, eps, wd);
        opt.step(&mut s, lr).unwrap();
        opt.step(&mut s, lr).unwrap();
        // hand recurrence
        let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            p -= lr * mh / (vh.sqrt() + eps);
            p -= lr * wd * p;
        }
        assert!((s.iter().next().unwrap().1.data()[0] - p).abs() < 1e-10);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { batch: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr0: -1.0, ..Default::default() }.validate().is_err());
    }
}
