//! Hierarchical graph-attention refinement of the encoder skip features.
//!
//! For each level `i`: all four stage features are resampled to level `i` and
//! fused (MSFF), refined by channel/spatial attention and a conv (CCS), then
//! passed through a graph attention layer over a strided node grid whose
//! output, gated by channel attention, is added back onto `F_i` (RGCA).

use super::{ChannelAttention, Conv2d, ConvTranspose2d, Ccs, Ctx, Init, ParamId, INIT_STD};
use crate::autodiff::{ResizeMode, Var};
use crate::error::{Error, Result};
use crate::gat::{Connectivity, GridGraph, DEFAULT_SLOPE};
use crate::tensor::Real;

/// Resamples level-`from` features to the resolution of level `to`
/// (levels are 0-based; each level halves the resolution of the previous one).
pub fn msff_resample<T: Real>(cx: &mut Ctx<'_, T>, x: Var, from: usize, to: usize, h: usize, w: usize) -> Result<Var> {
    match from.cmp(&to) {
        std::cmp::Ordering::Equal => Ok(x),
        std::cmp::Ordering::Less => cx.g.avg_pool2d(x, 1 << (to - from)),
        std::cmp::Ordering::Greater => cx.g.resize(x, h, w, ResizeMode::Bilinear),
    }
}

/// Multi-scale fusion onto one level: concat of all resampled stages, 1x1 conv.
#[derive(Debug, Clone)]
pub struct Msff {
    pub level: usize,
    pub fuse: Conv2d,
}

impl Msff {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, level: usize, widths: &[usize]) -> Result<Self> {
        let total: usize = widths.iter().sum();
        Ok(Msff {
            level,
            fuse: Conv2d::pointwise(&mut init.scope(name), "fuse", total, widths[level])?,
        })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, feats: &[Var]) -> Result<Var> {
        let s = cx.g.shape(feats[self.level]).to_vec();
        let (h, w) = (s[2], s[3]);
        let parts = feats
            .iter()
            .enumerate()
            .map(|(j, &f)| msff_resample(cx, f, j, self.level, h, w))
            .collect::<Result<Vec<_>>>()?;
        let cat = cx.g.concat(&parts, 1)?;
        self.fuse.forward(cx, cat)
    }
}

/// Strided downsample, graph attention over the node grid, transposed-conv
/// upsample, channel-attention gating and a residual connection.
#[derive(Debug, Clone)]
pub struct Rgca {
    pub stride: usize,
    pub down: Conv2d,
    pub gat_w: ParamId,
    pub gat_l: ParamId,
    pub up: ConvTranspose2d,
    pub ca: ChannelAttention,
    pub connectivity: Connectivity,
}

impl Rgca {
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        name: &str,
        c: usize,
        stride: usize,
        connectivity: Connectivity,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidArgument("graph downsample stride must be >= 1".into()));
        }
        let mut s = init.scope(name);
        Ok(Rgca {
            stride,
            down: Conv2d::new(&mut s, "down", c, c, stride, stride, 0, true)?,
            gat_w: s.trunc_normal("gat.weight", &[c, c], INIT_STD)?,
            gat_l: s.trunc_normal("gat.attn", &[2 * c], INIT_STD)?,
            up: ConvTranspose2d::new(&mut s, "up", c, c, stride)?,
            ca: ChannelAttention::new(&mut s, "ca", c)?,
            connectivity,
        })
    }

    /// Node grid size for an `h × w` input.
    pub fn node_grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h % self.stride != 0 || w % self.stride != 0 {
            return Err(Error::Divisibility { h, w, grid: self.stride });
        }
        Ok((h / self.stride, w / self.stride))
    }

    /// The graph branch before the residual: `GAT(F^c) ⊙ CA(F^c)`.
    pub fn branch<T: Real>(&self, cx: &mut Ctx<'_, T>, fc: Var) -> Result<Var> {
        let s = cx.g.shape(fc).to_vec();
        let (n, c) = (s[0], s[1]);
        let (gh, gw) = self.node_grid(s[2], s[3])?;
        let graph = GridGraph::grid(gh, gw, self.connectivity)?;
        let d = self.down.forward(cx, fc)?;
        let d = cx.g.reshape(d, &[n, c, gh * gw])?;
        let nodes = cx.g.permute(d, &[0, 2, 1])?;
        let (w, l) = (cx.p(self.gat_w), cx.p(self.gat_l));
        let y = cx.g.gat(nodes, w, l, &graph, T::from_f64_lossy(DEFAULT_SLOPE))?;
        let y = cx.g.permute(y, &[0, 2, 1])?;
        let y = cx.g.reshape(y, &[n, c, gh, gw])?;
        let up = self.up.forward(cx, y)?;
        let cw = self.ca.weights(cx, fc)?;
        cx.g.mul(up, cw)
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, fc: Var, skip: Var) -> Result<Var> {
        let b = self.branch(cx, fc)?;
        cx.g.add(b, skip)
    }
}

#[derive(Debug, Clone)]
pub struct DsHgamLevel {
    pub msff: Msff,
    pub ccs: Ccs,
    pub rgca: Rgca,
}

#[derive(Debug, Clone)]
pub struct DsHgam {
    pub levels: Vec<DsHgamLevel>,
}

impl DsHgam {
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        name: &str,
        widths: &[usize],
        strides: &[usize],
        connectivity: Connectivity,
    ) -> Result<Self> {
        if widths.len() != strides.len() {
            return Err(Error::InvalidArgument("one graph stride per level is required".into()));
        }
        let mut s = init.scope(name);
        let levels = (0..widths.len())
            .map(|i| {
                let mut l = s.scope(&format!("level{}", i + 1));
                Ok(DsHgamLevel {
                    msff: Msff::new(&mut l, "msff", i, widths)?,
                    ccs: Ccs::new(&mut l, "ccs", widths[i])?,
                    rgca: Rgca::new(&mut l, "rgca", widths[i], strides[i], connectivity)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DsHgam { levels })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, feats: &[Var]) -> Result<Vec<Var>> {
        self.levels
            .iter()
            .enumerate()
            .map(|(i, lv)| {
                let fused = lv.msff.forward(cx, feats)?;
                let fc = lv.ccs.forward(cx, fused)?;
                lv.rgca.forward(cx, fc, feats[i])
            })
            .collect()
    }
}
