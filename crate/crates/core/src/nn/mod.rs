//! Parameter storage, per-step binding and the building blocks of the network.
//!
//! Layers hold only [`ParamId`]s and hyperparameters, so one layer definition
//! serves every precision: a [`Ctx`] binds the ids of a [`ParamStore<T>`] to
//! graph leaves for a single forward/backward pass.

mod attention;
mod dshgam;
mod vss;

pub use attention::{ChannelAttention, Ccs, Mcaem, SpatialAttention, MCAEM_KERNELS};
pub use dshgam::{msff_resample, DsHgam, Msff, Rgca};
pub use vss::{dt_rank, state_matrix, SsmBranch, VssBlock, VssConfig};

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Standard deviation of the default weight initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Named parameters in registration order. Names are unique.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, value });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Replaces every value with one of the same name and shape from `other`.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: model has {}, source has {}",
                self.len(),
                other.len()
            )));
        }
        for e in &mut self.entries {
            let src = other
                .id(&e.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", e.name)))?;
            let v = other.get(src);
            if v.shape() != e.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    e.name,
                    v.shape(),
                    e.value.shape()
                )));
            }
            e.value = v.clone();
        }
        Ok(())
    }
}

/// Registers parameters under a hierarchical name prefix.
pub struct Init<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Real> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Init {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> Init<'_, T> {
        Init {
            prefix: self.full(name),
            store: self.store,
            rng: self.rng,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        let full = self.full(name);
        self.store.add(full, value)
    }

    /// Normal samples with standard deviation `std`, redrawn outside `±2 std`.
    pub fn trunc_normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let v: f64 = normal.sample(self.rng);
                if v.abs() <= 2.0 * std {
                    break T::from_f64_lossy(v);
                }
            })
            .collect();
        self.add(name, Tensor::new(shape, data)?)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64_lossy(self.rng.gen_range(-bound..=bound)))
            .collect();
        self.add(name, Tensor::new(shape, data)?)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::ones(shape))
    }
}

/// One forward/backward pass: the tape plus the parameters bound into it.
pub struct Ctx<'a, T> {
    pub g: Graph<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a, T: Real> Ctx<'a, T> {
    /// With `trainable == false` parameters enter as constants and no backward rules are kept.
    pub fn new(store: &'a ParamStore<T>, trainable: bool) -> Self {
        Ctx {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
            trainable,
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// The leaf for `id`, created on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.g.leaf(self.store.get(id).clone(), self.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.g.constant(t)
    }

    /// Gradient of every parameter after `backward`; `None` for parameters the pass never touched.
    pub fn grads(&self) -> Vec<Option<Tensor<T>>> {
        self.bound
            .iter()
            .map(|v| v.and_then(|v| self.g.grad_tensor(v)))
            .collect()
    }
}

/// 2-D convolution with optional bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let mut s = init.scope(name);
        let w = s.trunc_normal("weight", &[cout, cin, k, k], INIT_STD)?;
        let b = if bias { Some(s.zeros("bias", &[cout])?) } else { None };
        Ok(Conv2d { w, b, stride, padding })
    }

    /// `k × k`, stride 1, "same" padding (k odd).
    pub fn same<T: Real>(init: &mut Init<'_, T>, name: &str, cin: usize, cout: usize, k: usize) -> Result<Self> {
        Self::new(init, name, cin, cout, k, 1, k / 2, true)
    }

    pub fn pointwise<T: Real>(init: &mut Init<'_, T>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Self::new(init, name, cin, cout, 1, 1, 0, true)
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = cx.p(self.w);
        let b = self.b.map(|b| cx.p(b));
        cx.g.conv2d(x, w, b, self.stride, self.padding)
    }
}

/// Transposed convolution, kernel = stride, used as the exact inverse geometry of a patch conv.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
}

impl ConvTranspose2d {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, cin: usize, cout: usize, s: usize) -> Result<Self> {
        let mut sc = init.scope(name);
        let w = sc.trunc_normal("weight", &[cin, cout, s, s], INIT_STD)?;
        let b = sc.zeros("bias", &[cout])?;
        Ok(ConvTranspose2d { w, b, stride: s })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (cx.p(self.w), cx.p(self.b));
        cx.g.conv2d_transpose(x, w, Some(b), self.stride, 0)
    }
}

/// Depthwise `k × k` followed by a pointwise projection.
#[derive(Debug, Clone)]
pub struct SeparableConv {
    pub dw: ParamId,
    pub dw_b: ParamId,
    pub pw: Conv2d,
}

impl SeparableConv {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, c: usize, k: usize) -> Result<Self> {
        let mut s = init.scope(name);
        let dw = s.trunc_normal("depthwise.weight", &[c, 1, k, k], INIT_STD)?;
        let dw_b = s.zeros("depthwise.bias", &[c])?;
        let pw = Conv2d::pointwise(&mut s, "pointwise", c, c)?;
        Ok(SeparableConv { dw, dw_b, pw })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (cx.p(self.dw), cx.p(self.dw_b));
        let d = cx.g.depthwise_conv2d(x, w, Some(b))?;
        self.pw.forward(cx, d)
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Layer normalization over the channel axis of `[N, C, ...]` with a per-channel affine.
#[derive(Debug, Clone)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
}

impl ChannelNorm {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, c: usize) -> Result<Self> {
        let mut s = init.scope(name);
        Ok(ChannelNorm {
            gamma: s.ones("weight", &[c])?,
            beta: s.zeros("bias", &[c])?,
            channels: c,
        })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let rank = cx.g.shape(x).len();
        let mut bshape = vec![1; rank];
        bshape[1] = self.channels;
        let n = cx.g.layer_norm(x, 1, T::from_f64_lossy(LN_EPS))?;
        let (gm, bt) = (cx.p(self.gamma), cx.p(self.beta));
        let gm = cx.g.reshape(gm, &bshape)?;
        let bt = cx.g.reshape(bt, &bshape)?;
        let y = cx.g.mul(n, gm)?;
        cx.g.add(y, bt)
    }
}

/// Convolution, channel normalization and an optional SiLU.
#[derive(Debug, Clone)]
pub struct ConvNormAct {
    pub conv: Conv2d,
    pub norm: ChannelNorm,
    pub act: bool,
}

impl ConvNormAct {
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        act: bool,
    ) -> Result<Self> {
        let mut s = init.scope(name);
        Ok(ConvNormAct {
            conv: Conv2d::new(&mut s, "conv", cin, cout, k, stride, k / 2, true)?,
            norm: ChannelNorm::new(&mut s, "norm", cout)?,
            act,
        })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(cx, x)?;
        let y = self.norm.forward(cx, y)?;
        Ok(if self.act { cx.g.silu(y) } else { y })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn names_are_hierarchical_and_unique() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init::new(&mut store, &mut rng);
        let mut enc = init.scope("encoder");
        let c = Conv2d::same(&mut enc, "stem", 3, 4, 3).unwrap();
        assert!(Conv2d::same(&mut enc, "stem", 3, 4, 3).is_err());
        assert_eq!(store.name(c.w), "encoder.stem.weight");
        assert_eq!(store.id("encoder.stem.bias"), c.b);
    }

    #[test]
    fn trunc_normal_is_bounded() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let id = Init::new(&mut store, &mut rng).trunc_normal("w", &[4000], 0.02).unwrap();
        let v = store.get(id).data();
        assert!(v.iter().all(|x| x.abs() <= 0.04));
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        assert!(mean.abs() < 2e-3 && (sd - 0.0176).abs() < 2e-3, "mean {mean} sd {sd}");
    }

    #[test]
    fn channel_norm_normalizes_each_pixel() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let norm = ChannelNorm::new(&mut Init::new(&mut store, &mut rng), "ln", 5).unwrap();
        let x = Tensor::randn(&[2, 5, 3, 3], 2.0, &mut rng).map(|v| v + 1.0);
        let mut cx = Ctx::new(&store, false);
        let xv = cx.input(x);
        let y = norm.forward(&mut cx, xv).unwrap();
        let y = cx.g.value(y);
        for n in 0..2 {
            for p in 0..9 {
                let col: Vec<f64> = (0..5).map(|c| y.data()[(n * 5 + c) * 9 + p]).collect();
                let mean = col.iter().sum::<f64>() / 5.0;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
                assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn ctx_binds_each_parameter_once() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("a", Tensor::ones(&[2])).unwrap();
        let mut cx = Ctx::new(&store, true);
        let (a1, a2) = (cx.p(id), cx.p(id));
        assert_eq!(a1, a2);
        let s = cx.g.add(a1, a2).unwrap();
        let s = cx.g.sum(s);
        cx.g.backward(s).unwrap();
        assert_eq!(cx.grads()[0].as_ref().unwrap().data(), &[2.0, 2.0]);
    }
}
