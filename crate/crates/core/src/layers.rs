//! Learnable parameters and the small layers the network is built from.

use std::ops::Index;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Result};
use crate::graph::{Graph, Var};
use crate::kernels::ConvGeometry;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of every learnable tensor of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

/// Graph handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<S>> {
        self.tensors.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replace the value of a parameter, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<S>) -> Result<()> {
        let slot = &mut self.tensors[id.0];
        if slot.shape() != value.shape() {
            return Err(dim_err!(
                "parameter {} has shape {:?}, got {:?}",
                self.names[id.0],
                slot.shape(),
                value.shape()
            ));
        }
        slot.data_mut().copy_from_slice(value.data());
        Ok(())
    }

    /// Register every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph<S>) -> Bound {
        Bound(self.tensors.iter().map(|t| g.leaf(t)).collect())
    }

    /// Add the leaf gradients computed by `g.backward` into each tensor's
    /// `grad` buffer.
    pub fn accumulate_grads(&mut self, g: &Graph<S>, bound: &Bound) {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.0) {
            match g.grad(v) {
                Some(grad) => t.accumulate_grad(grad),
                None if t.grad.is_none() => t.grad = Some(vec![S::zero(); t.numel()]),
                None => {}
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }
}

/// Seeded initializer. Values are drawn in `f64` and then cast, so `f32` and
/// `f64` models built from the same seed agree up to rounding.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn fan_in<S: Scalar>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<S> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        Tensor::from_fn(shape, |_| S::lit(self.rng.gen_range(-bound..=bound)))
    }

    pub fn uniform<S: Scalar>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<S> {
        Tensor::from_fn(shape, |_| S::lit(self.rng.gen_range(lo..=hi)))
    }
}

/// `(B, Cin, H, W) -> (B, Cout, H, W)` convolution with "same" zero padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub dilation: usize,
}

impl Conv2d {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, init: &mut Init, name: &str, cin: usize, cout: usize, kernel: usize) -> Self {
        let fan_in = cin * kernel * kernel;
        let weight = store.add(format!("{name}.weight"), init.fan_in(&[cout, cin, kernel, kernel], fan_in));
        let bias = store.add(format!("{name}.bias"), init.fan_in(&[cout], fan_in));
        Self { weight, bias, kernel, dilation: 1 }
    }

    /// Same layer with weight and bias initialised to zero.
    pub fn zeroed<S: Scalar>(store: &mut ParamStore<S>, name: &str, cin: usize, cout: usize, kernel: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[cout, cin, kernel, kernel]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { weight, bias, kernel, dilation: 1 }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        let pad = self.dilation * (self.kernel - 1) / 2;
        g.conv2d(x, p[self.weight], Some(p[self.bias]), 1, pad, self.dilation)
    }
}

/// `(B, Cin, T, H, W)` convolution with a `kt x ks x ks` kernel, temporal
/// dilation and "same" zero padding on every axis.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeometry,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        kt: usize,
        ks: usize,
        dilation_t: usize,
    ) -> Self {
        let fan_in = cin * kt * ks * ks;
        let weight = store.add(format!("{name}.weight"), init.fan_in(&[cout, cin, kt, ks, ks], fan_in));
        let bias = store.add(format!("{name}.bias"), init.fan_in(&[cout], fan_in));
        Self { weight, bias, geom: ConvGeometry::same([kt, ks, ks], [dilation_t, 1, 1]) }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        g.conv3d(x, p[self.weight], Some(p[self.bias]), self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, init: &mut Init, name: &str, n_in: usize, n_out: usize, bias: bool) -> Self {
        let weight = store.add(format!("{name}.weight"), init.fan_in(&[n_out, n_in], n_in));
        let bias = bias.then(|| store.add(format!("{name}.bias"), init.fan_in(&[n_out], n_in)));
        Self { weight, bias }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p[self.weight], self.bias.map(|b| p[b]))
    }
}

/// Gated recurrent unit cell:
///
/// ```text
/// z  = sigmoid(Wz x + Uz h + bz)
/// r  = sigmoid(Wr x + Ur h + br)
/// n  = tanh(Wn x + r * (Un h) + bn)
/// h' = (1 - z) * n + z * h
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub wz: Linear,
    pub uz: Linear,
    pub wr: Linear,
    pub ur: Linear,
    pub wn: Linear,
    pub un: Linear,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, init: &mut Init, name: &str, input: usize, hidden: usize) -> Self {
        let mut lin = |gate: &str, n_in: usize, bias: bool| Linear::new(store, init, &format!("{name}.{gate}"), n_in, hidden, bias);
        let wz = lin("wz", input, true);
        let uz = lin("uz", hidden, false);
        let wr = lin("wr", input, true);
        let ur = lin("ur", hidden, false);
        let wn = lin("wn", input, true);
        let un = lin("un", hidden, false);
        Self { wz, uz, wr, ur, wn, un, input, hidden }
    }

    /// One recurrence step: `x (B, input)`, `h (B, hidden)` -> `(B, hidden)`.
    pub fn step<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var, h: Var) -> Result<Var> {
        let (xs, hs) = (g.shape(x).to_vec(), g.shape(h).to_vec());
        if xs.len() != 2 || hs.len() != 2 || xs[0] != hs[0] || xs[1] != self.input || hs[1] != self.hidden {
            return Err(dim_err!(
                "gru: input {xs:?} / state {hs:?} do not match cell ({}, {})",
                self.input,
                self.hidden
            ));
        }
        let gate = |g: &mut Graph<S>, w: &Linear, u: &Linear| -> Result<Var> {
            let a = w.forward(g, p, x)?;
            let b = u.forward(g, p, h)?;
            let s = g.add(a, b)?;
            g.sigmoid(s)
        };
        let z = gate(g, &self.wz, &self.uz)?;
        let r = gate(g, &self.wr, &self.ur)?;
        let nx = self.wn.forward(g, p, x)?;
        let nh = self.un.forward(g, p, h)?;
        let rnh = g.mul(r, nh)?;
        let pre = g.add(nx, rnh)?;
        let n = g.tanh(pre)?;
        // h' = n + z * (h - n)
        let diff = g.sub(h, n)?;
        let zd = g.mul(z, diff)?;
        g.add(n, zd)
    }
}
