//! Visual state-space blocks: a gated four-directional selective scan over a
//! feature map, optionally preceded by multi-granularity attention and run
//! over block-partitioned scan orders.

use super::{ChannelNorm, Conv2d, Ctx, Init, Mcaem, ParamId, INIT_STD};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::scan::cached_orders;
use crate::ssm::{init_a, init_dt_bias, ScanKernel};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VssConfig {
    /// Inner width multiplier `E = expand * C`.
    pub expand: usize,
    /// State size `N` per channel.
    pub d_state: usize,
    /// One SSM shared by the four directions instead of one per direction.
    pub shared_directions: bool,
    pub kernel: ScanKernel,
}

impl Default for VssConfig {
    fn default() -> Self {
        VssConfig {
            expand: 2,
            d_state: 8,
            shared_directions: false,
            kernel: ScanKernel::Sequential,
        }
    }
}

/// Rank of the step-size projection for inner width `e`.
pub fn dt_rank(e: usize) -> usize {
    e.div_ceil(16)
}

/// Selective SSM applied to one directional sequence `[N, E, L]`.
#[derive(Debug, Clone)]
pub struct SsmBranch {
    pub x_proj: Conv2d,
    pub dt_proj: Conv2d,
    pub a_log: ParamId,
    pub d_skip: ParamId,
    pub inner: usize,
    pub rank: usize,
    pub states: usize,
}

impl SsmBranch {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, e: usize, states: usize) -> Result<Self> {
        let mut s = init.scope(name);
        let rank = dt_rank(e);
        let x_proj = Conv2d::new(&mut s, "x_proj", e, rank + 2 * states, 1, 1, 0, false)?;
        let bound = (rank as f64).powf(-0.5);
        let dt_w = s.uniform("dt_proj.weight", &[e, rank, 1, 1], bound)?;
        let bias = init_dt_bias::<T, _>(e, s.rng());
        let dt_b = s.add("dt_proj.bias", bias)?;
        let a = init_a::<f64>(e, states).map(|v| (-v).ln()).cast::<T>();
        let a_log = s.add("a_log", a)?;
        let d_skip = s.ones("d", &[e])?;
        Ok(SsmBranch {
            x_proj,
            dt_proj: Conv2d {
                w: dt_w,
                b: Some(dt_b),
                stride: 1,
                padding: 0,
            },
            a_log,
            d_skip,
            inner: e,
            rank,
            states,
        })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, seq: Var, kernel: ScanKernel) -> Result<Var> {
        let s = cx.g.shape(seq).to_vec();
        let (n, e, l) = (s[0], s[1], s[2]);
        let s4 = cx.g.reshape(seq, &[n, e, l, 1])?;
        let proj = self.x_proj.forward(cx, s4)?;
        let parts = cx.g.split(proj, 1, &[self.rank, self.states, self.states])?;
        let dt = self.dt_proj.forward(cx, parts[0])?;
        let dt = cx.g.reshape(dt, &[n, e, l])?;
        let delta = cx.g.softplus(dt);
        let b = cx.g.reshape(parts[1], &[n, self.states, l])?;
        let c = cx.g.reshape(parts[2], &[n, self.states, l])?;
        let a_log = cx.p(self.a_log);
        let a = cx.g.exp(a_log);
        let a = cx.g.neg(a);
        let y = cx.g.selective_scan(seq, delta, a, b, c, kernel)?;
        let d = cx.p(self.d_skip);
        let d = cx.g.reshape(d, &[1, e, 1])?;
        let skip = cx.g.mul(seq, d)?;
        cx.g.add(y, skip)
    }
}

/// Residual block `u + out_proj(LN(merge(scan(SiLU(dw(x))))) ⊙ SiLU(z))` with
/// `[x; z] = in_proj(LN(u))` and `u` the input, or `MCAEM(input)` when enabled.
#[derive(Debug, Clone)]
pub struct VssBlock {
    pub mcaem: Option<Mcaem>,
    pub norm: ChannelNorm,
    pub in_proj: Conv2d,
    pub dw: ParamId,
    pub dw_b: ParamId,
    pub branches: Vec<SsmBranch>,
    pub out_norm: ChannelNorm,
    pub out_proj: Conv2d,
    pub grid: usize,
    pub inner: usize,
    pub kernel: ScanKernel,
}

impl VssBlock {
    /// `grid == 1` gives the global cross-scan; `with_mcaem` adds the attention front end.
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        name: &str,
        c: usize,
        cfg: &VssConfig,
        grid: usize,
        with_mcaem: bool,
    ) -> Result<Self> {
        if cfg.expand == 0 || cfg.d_state == 0 {
            return Err(Error::Config("ssm expand and state size must be >= 1".into()));
        }
        let mut s = init.scope(name);
        let e = cfg.expand * c;
        let mcaem = if with_mcaem { Some(Mcaem::new(&mut s, "mcaem", c)?) } else { None };
        let norm = ChannelNorm::new(&mut s, "norm", c)?;
        let in_proj = Conv2d::pointwise(&mut s, "in_proj", c, 2 * e)?;
        let dw = s.trunc_normal("dwconv.weight", &[e, 1, 3, 3], INIT_STD)?;
        let dw_b = s.zeros("dwconv.bias", &[e])?;
        let branches = if cfg.shared_directions {
            vec![SsmBranch::new(&mut s, "ssm.shared", e, cfg.d_state)?]
        } else {
            ["right", "down", "left", "up"]
                .iter()
                .map(|d| SsmBranch::new(&mut s, &format!("ssm.{d}"), e, cfg.d_state))
                .collect::<Result<Vec<_>>>()?
        };
        let out_norm = ChannelNorm::new(&mut s, "out_norm", e)?;
        let out_proj = Conv2d::pointwise(&mut s, "out_proj", e, c)?;
        Ok(VssBlock {
            mcaem,
            norm,
            in_proj,
            dw,
            dw_b,
            branches,
            out_norm,
            out_proj,
            grid,
            inner: e,
            kernel: cfg.kernel,
        })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let u = match &self.mcaem {
            Some(m) => m.forward(cx, x)?,
            None => x,
        };
        let s = cx.g.shape(u).to_vec();
        let (h, w) = (s[2], s[3]);
        let orders = cached_orders(h, w, self.grid)?;
        let hn = self.norm.forward(cx, u)?;
        let p = self.in_proj.forward(cx, hn)?;
        let xz = cx.g.split(p, 1, &[self.inner, self.inner])?;
        let (dw, dw_b) = (cx.p(self.dw), cx.p(self.dw_b));
        let xs = cx.g.depthwise_conv2d(xz[0], dw, Some(dw_b))?;
        let xs = cx.g.silu(xs);
        let mut ys = [xs; 4];
        for (k, order) in orders.iter().enumerate() {
            let seq = cx.g.gather_seq(xs, &order.forward)?;
            let branch = &self.branches[k % self.branches.len()];
            ys[k] = branch.forward(cx, seq, self.kernel)?;
        }
        let merged = cx.g.scan_merge(ys, &orders)?;
        let y = self.out_norm.forward(cx, merged)?;
        let gate = cx.g.silu(xz[1]);
        let y = cx.g.mul(y, gate)?;
        let out = self.out_proj.forward(cx, y)?;
        cx.g.add(u, out)
    }
}

/// Converts `a_log` back to the (negative) state matrix, for inspection.
pub fn state_matrix<T: Real>(a_log: &Tensor<T>) -> Tensor<T> {
    a_log.map(|v| -v.exp())
}
