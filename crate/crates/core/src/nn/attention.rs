//! Channel/spatial attention and the blocks built from them.

use super::{Conv2d, ConvNormAct, Ctx, Init, SeparableConv};
use crate::autodiff::Var;
use crate::error::Result;
use crate::tensor::Real;

/// Bottleneck reduction of the channel-attention MLP.
pub const CA_REDUCTION: usize = 4;
/// Kernel of the spatial-attention convolution.
pub const SA_KERNEL: usize = 7;
pub const MCAEM_KERNELS: [usize; 3] = [3, 5, 7];

/// `sigmoid(MLP(avgpool(F)) + MLP(maxpool(F)))` with a shared two-layer MLP.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub fc1: Conv2d,
    pub fc2: Conv2d,
}

impl ChannelAttention {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, c: usize) -> Result<Self> {
        let mut s = init.scope(name);
        let hidden = (c / CA_REDUCTION).max(1);
        Ok(ChannelAttention {
            fc1: Conv2d::pointwise(&mut s, "fc1", c, hidden)?,
            fc2: Conv2d::pointwise(&mut s, "fc2", hidden, c)?,
        })
    }

    fn mlp<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(cx, x)?;
        let h = cx.g.relu(h);
        self.fc2.forward(cx, h)
    }

    /// Pre-sigmoid scores, `[N, C, 1, 1]`.
    pub fn logits<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let avg = cx.g.global_avg_pool(x)?;
        let max = cx.g.global_max_pool(x)?;
        let a = self.mlp(cx, avg)?;
        let m = self.mlp(cx, max)?;
        cx.g.add(a, m)
    }

    /// Weights in `(0, 1)`, `[N, C, 1, 1]`.
    pub fn weights<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let l = self.logits(cx, x)?;
        Ok(cx.g.sigmoid(l))
    }
}

/// `sigmoid(conv7x7([mean_c(F); max_c(F)]))`.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    pub conv: Conv2d,
}

impl SpatialAttention {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str) -> Result<Self> {
        let mut s = init.scope(name);
        Ok(SpatialAttention {
            conv: Conv2d::same(&mut s, "conv", 2, 1, SA_KERNEL)?,
        })
    }

    /// Pre-sigmoid map, `[N, 1, H, W]`.
    pub fn logits<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mean = cx.g.mean_axis(x, 1)?;
        let max = cx.g.max_axis(x, 1)?;
        let both = cx.g.concat(&[mean, max], 1)?;
        self.conv.forward(cx, both)
    }

    /// Map in `(0, 1)`, `[N, 1, H, W]`.
    pub fn map<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let l = self.logits(cx, x)?;
        Ok(cx.g.sigmoid(l))
    }
}

/// Channel attention, then spatial attention, then conv 3x3 + norm + SiLU.
#[derive(Debug, Clone)]
pub struct Ccs {
    pub ca: ChannelAttention,
    pub sa: SpatialAttention,
    pub body: ConvNormAct,
}

impl Ccs {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, c: usize) -> Result<Self> {
        let mut s = init.scope(name);
        Ok(Ccs {
            ca: ChannelAttention::new(&mut s, "ca", c)?,
            sa: SpatialAttention::new(&mut s, "sa")?,
            body: ConvNormAct::new(&mut s, "body", c, c, 3, 1, true)?,
        })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = self.ca.weights(cx, x)?;
        let x = cx.g.mul(x, w)?;
        let m = self.sa.map(cx, x)?;
        let x = cx.g.mul(x, m)?;
        self.body.forward(cx, x)
    }

    /// The convolution path alone, i.e. every attention weight fixed at 1.
    pub fn forward_without_attention<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        self.body.forward(cx, x)
    }
}

#[derive(Debug, Clone)]
pub struct McaemBranch {
    pub kernel: usize,
    pub conv: SeparableConv,
    pub ca: ChannelAttention,
    pub sa: SpatialAttention,
}

/// Three depthwise-separable branches (k = 3, 5, 7), each re-weighted by
/// channel and spatial attention in parallel, fused by a 1x1 conv onto a residual.
#[derive(Debug, Clone)]
pub struct Mcaem {
    pub branches: Vec<McaemBranch>,
    pub fuse: Conv2d,
}

impl Mcaem {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, c: usize) -> Result<Self> {
        let mut s = init.scope(name);
        let branches = MCAEM_KERNELS
            .iter()
            .map(|&k| {
                let mut b = s.scope(&format!("branch{k}"));
                Ok(McaemBranch {
                    kernel: k,
                    conv: SeparableConv::new(&mut b, "conv", c, k)?,
                    ca: ChannelAttention::new(&mut b, "ca", c)?,
                    sa: SpatialAttention::new(&mut b, "sa")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let fuse = Conv2d::pointwise(&mut s, "fuse", c * MCAEM_KERNELS.len(), c)?;
        Ok(Mcaem { branches, fuse })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut outs = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let f = b.conv.forward(cx, x)?;
            let cw = b.ca.weights(cx, f)?;
            let sm = b.sa.map(cx, f)?;
            let fc = cx.g.mul(f, cw)?;
            let fs = cx.g.mul(f, sm)?;
            outs.push(cx.g.add(fc, fs)?);
        }
        let cat = cx.g.concat(&outs, 1)?;
        let y = self.fuse.forward(cx, cat)?;
        cx.g.add(x, y)
    }
}
