//! Central finite-difference verification of analytic gradients.
//!
//! Runs in `f64`: the loss closure is re-evaluated on an inference graph
//! with one parameter element nudged by `±step`, which never touches the
//! backward code it is checking. Samples whose `±step` stencil crosses a
//! relu or abs kink are set aside: a central difference across a corner
//! measures the average of two slopes, not the gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::layers::{Bound, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct GradSample {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub samples: Vec<GradSample>,
    /// Samples whose analytic gradient was below the magnitude floor.
    pub skipped: usize,
    /// Samples whose stencil crossed a non-differentiable point.
    pub kinked: usize,
}

impl GradCheckReport {
    pub fn checked(&self) -> usize {
        self.samples.len()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.samples.iter().map(|s| s.rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self, tol: f64) -> Vec<&GradSample> {
        self.samples.iter().filter(|s| s.rel_err > tol).collect()
    }

    /// Distinct parameter tensors that contributed at least one sample.
    pub fn params_covered(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self.samples.iter().map(|s| s.param.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        names
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Number of samples with a non-negligible analytic gradient to collect.
    pub samples: usize,
    /// Analytic magnitudes below this are skipped.
    pub min_grad: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-3, samples: 200, min_grad: 1e-8, seed: 0 }
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom == 0.0 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

/// Compare backward-pass gradients of `loss` against central differences.
///
/// Samples cycle through the parameter tensors in order, picking a random
/// element of each, so every tensor is visited before any is revisited.
pub fn check<F>(store: &ParamStore<f64>, loss: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let l = loss(&mut g, &bound)?;
    let pattern = g.kink_pattern();
    g.backward(l)?;
    let mut analytic_store = store.clone();
    analytic_store.zero_grads();
    analytic_store.accumulate_grads(&g, &bound);
    drop(g);

    let eval = |s: &ParamStore<f64>| -> Result<(f64, bool)> {
        let mut g = Graph::inference();
        let b = s.bind(&mut g);
        let l = loss(&mut g, &b)?;
        Ok((g.scalar_value(l), g.kink_pattern() == pattern))
    };

    let ids: Vec<ParamId> = store.ids().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let mut probe = store.clone();
    let max_attempts = opts.samples * 50 + ids.len();
    let mut attempt = 0;
    while report.samples.len() < opts.samples && attempt < max_attempts {
        let id = ids[attempt % ids.len()];
        attempt += 1;
        let n = store.get(id).numel();
        let index = rng.gen_range(0..n);
        let analytic = analytic_store.get(id).grad.as_ref().map_or(0.0, |g| g[index]);
        if analytic.abs() < opts.min_grad {
            report.skipped += 1;
            continue;
        }
        let orig = store.get(id).data()[index];
        probe.get_mut(id).data_mut()[index] = orig + opts.step;
        let (up, smooth_up) = eval(&probe)?;
        probe.get_mut(id).data_mut()[index] = orig - opts.step;
        let (down, smooth_down) = eval(&probe)?;
        probe.get_mut(id).data_mut()[index] = orig;
        if !(smooth_up && smooth_down) {
            report.kinked += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * opts.step);
        report.samples.push(GradSample {
            param: store.name(id).to_string(),
            index,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric),
        });
    }
    Ok(report)
}
