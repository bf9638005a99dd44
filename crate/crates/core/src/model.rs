//! The full network: patch embedding, a four-stage state-space encoder,
//! graph-attention skip refinement and a four-stage decoder with one
//! saliency head per stage.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ResizeMode, Var};
use crate::error::{Error, Result};
use crate::gat::Connectivity;
use crate::nn::{Conv2d, ConvNormAct, Ctx, DsHgam, Init, ParamStore, VssBlock, VssConfig};
use crate::scan::resolution_to_grid;
use crate::ssm::ScanKernel;
use crate::tensor::{Real, Tensor};

pub const STAGES: usize = 4;
/// Largest node grid side handed to graph attention by the default stride rule.
pub const MAX_NODE_SIDE: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub encoder_depths: [usize; STAGES],
    pub decoder_depths: [usize; STAGES],
    pub d_state: usize,
    pub ssm_expand: usize,
    pub connectivity: Connectivity,
    /// Graph downsample stride per level; derived from the input size when `None`.
    pub rgca_strides: Option<[usize; STAGES]>,
    pub input_size: usize,
    pub seed: u64,
    pub use_dshgam: bool,
    pub use_mcaem: bool,
    pub use_less2d: bool,
    pub shared_directions: bool,
    pub scan_kernel: ScanKernel,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// Desk-scale default: C = 32, N = 8, 384 input.
    pub fn toy() -> Self {
        ModelConfig {
            base_channels: 32,
            encoder_depths: [2, 2, 4, 2],
            decoder_depths: [2, 2, 2, 2],
            d_state: 8,
            ssm_expand: 2,
            connectivity: Connectivity::Eight,
            rgca_strides: None,
            input_size: 384,
            seed: 0,
            use_dshgam: true,
            use_mcaem: true,
            use_less2d: true,
            shared_directions: false,
            scan_kernel: ScanKernel::Sequential,
        }
    }

    /// Small configuration for the synthetic overfitting task: C = 16, N = 4, 64 input.
    pub fn micro() -> Self {
        ModelConfig {
            base_channels: 16,
            encoder_depths: [1, 1, 1, 1],
            decoder_depths: [1, 1, 1, 1],
            d_state: 4,
            ssm_expand: 1,
            input_size: 64,
            ..Self::toy()
        }
    }

    /// Smallest configuration, for end-to-end gradient checks: C = 4, N = 2, 32 input.
    pub fn tiny() -> Self {
        ModelConfig {
            base_channels: 4,
            d_state: 2,
            input_size: 32,
            ..Self::micro()
        }
    }

    /// Stage widths `C, 2C, 4C, 8C`.
    pub fn widths(&self) -> [usize; STAGES] {
        std::array::from_fn(|i| self.base_channels << i)
    }

    /// Feature side length at each stage (1/2 ... 1/16 of the input).
    pub fn sides(&self) -> [usize; STAGES] {
        std::array::from_fn(|i| self.input_size >> (i + 1))
    }

    /// Scan block grid of each decoder stage.
    pub fn decoder_grids(&self) -> Result<[usize; STAGES]> {
        let mut g = [1; STAGES];
        if self.use_less2d {
            for (i, gi) in g.iter_mut().enumerate() {
                *gi = resolution_to_grid(2 << i)?;
            }
        }
        Ok(g)
    }

    /// Graph strides: explicit, or the smallest power of two bringing the node grid to at most 24 x 24.
    pub fn graph_strides(&self) -> Result<[usize; STAGES]> {
        if let Some(s) = self.rgca_strides {
            return Ok(s);
        }
        let mut out = [1; STAGES];
        for (i, side) in self.sides().into_iter().enumerate() {
            let mut s = 1;
            while side / s > MAX_NODE_SIDE && side % (2 * s) == 0 {
                s *= 2;
            }
            out[i] = s;
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.base_channels;
        if c < 2 || c % 2 != 0 {
            return Err(Error::Config(format!("base_channels must be even and >= 2, got {c}")));
        }
        if self.d_state == 0 || self.ssm_expand == 0 {
            return Err(Error::Config("d_state and ssm_expand must be >= 1".into()));
        }
        let s = self.input_size;
        if s == 0 || s % 16 != 0 {
            return Err(Error::Config(format!("input_size must be a positive multiple of 16, got {s}")));
        }
        let grids = self.decoder_grids()?;
        let strides = self.graph_strides()?;
        for (i, side) in self.sides().into_iter().enumerate() {
            if side % grids[i] != 0 {
                return Err(Error::Divisibility { h: side, w: side, grid: grids[i] });
            }
            if strides[i] == 0 || side % strides[i] != 0 {
                return Err(Error::Divisibility { h: side, w: side, grid: strides[i] });
            }
        }
        Ok(())
    }

    /// Canonical description of everything that shapes the parameter set.
    /// The seed and the runtime scan kernel are excluded.
    pub fn arch_string(&self) -> String {
        let strides = self.graph_strides().map(|s| format!("{s:?}")).unwrap_or_default();
        format!(
            "c={};enc={:?};dec={:?};n={};expand={};conn={};strides={};size={};dshgam={};mcaem={};less2d={};shared={}",
            self.base_channels,
            self.encoder_depths,
            self.decoder_depths,
            self.d_state,
            self.ssm_expand,
            self.connectivity.count(),
            strides,
            self.input_size,
            self.use_dshgam,
            self.use_mcaem,
            self.use_less2d,
            self.shared_directions,
        )
    }
}

/// Saliency maps `P_1..P_4`, each `[N, 1, H, W]` in `[0, 1]`; `P_1` is the final prediction.
#[derive(Debug, Clone, Copy)]
pub struct SaliencyOutputs {
    pub maps: [Var; STAGES],
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub patch: [ConvNormAct; 2],
    pub down: Vec<ConvNormAct>,
    pub encoder: Vec<Vec<VssBlock>>,
    pub dshgam: Option<DsHgam>,
    /// 1x1 fusion after the skip concat, for stages 1..3 (index 3 unused).
    pub fuse: Vec<Option<Conv2d>>,
    pub decoder: Vec<Vec<VssBlock>>,
    pub heads: Vec<Conv2d>,
}

impl Model {
    /// Builds the layer graph and a freshly initialized parameter store.
    pub fn build<T: Real>(config: &ModelConfig) -> Result<(Model, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut init = Init::new(&mut store, &mut rng);
        let model = Self::define(&mut init, config)?;
        Ok((model, store))
    }

    fn define<T: Real>(init: &mut Init<'_, T>, cfg: &ModelConfig) -> Result<Model> {
        let widths = cfg.widths();
        let half = cfg.base_channels / 2;
        let vss = VssConfig {
            expand: cfg.ssm_expand,
            d_state: cfg.d_state,
            shared_directions: cfg.shared_directions,
            kernel: cfg.scan_kernel,
        };
        let mut pe = init.scope("patch_embed");
        let patch = [
            ConvNormAct::new(&mut pe, "conv1", 3, half, 3, 1, true)?,
            ConvNormAct::new(&mut pe, "conv2", half, half, 3, 1, true)?,
        ];
        let mut down = Vec::new();
        let mut encoder = Vec::new();
        for s in 0..STAGES {
            let mut st = init.scope(&format!("encoder.stage{}", s + 1));
            let cin = if s == 0 { half } else { widths[s - 1] };
            down.push(ConvNormAct::new(&mut st, "down", cin, widths[s], 3, 2, false)?);
            let blocks = (0..cfg.encoder_depths[s])
                .map(|b| VssBlock::new(&mut st, &format!("block{}", b + 1), widths[s], &vss, 1, false))
                .collect::<Result<Vec<_>>>()?;
            encoder.push(blocks);
        }
        let dshgam = if cfg.use_dshgam {
            Some(DsHgam::new(init, "dshgam", &widths, &cfg.graph_strides()?, cfg.connectivity)?)
        } else {
            None
        };
        let grids = cfg.decoder_grids()?;
        let mut fuse = Vec::new();
        let mut decoder = Vec::new();
        let mut heads = Vec::new();
        for s in 0..STAGES {
            let mut st = init.scope(&format!("decoder.stage{}", s + 1));
            fuse.push(if s + 1 < STAGES {
                Some(Conv2d::pointwise(&mut st, "fuse", widths[s] + widths[s + 1], widths[s])?)
            } else {
                None
            });
            let blocks = (0..cfg.decoder_depths[s])
                .map(|b| VssBlock::new(&mut st, &format!("block{}", b + 1), widths[s], &vss, grids[s], cfg.use_mcaem))
                .collect::<Result<Vec<_>>>()?;
            decoder.push(blocks);
            heads.push(Conv2d::pointwise(&mut st, "head", widths[s], 1)?);
        }
        Ok(Model {
            config: cfg.clone(),
            patch,
            down,
            encoder,
            dshgam,
            fuse,
            decoder,
            heads,
        })
    }

    /// Encoder features `F_1..F_4`.
    pub fn encode<T: Real>(&self, cx: &mut Ctx<'_, T>, image: Var) -> Result<Vec<Var>> {
        let s = cx.g.shape(image).to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::shape("model", format!("expected [N, 3, H, W] input, got {s:?}")));
        }
        if s[2] != self.config.input_size || s[3] != self.config.input_size {
            return Err(Error::shape(
                "model",
                format!("input is {}x{}, model expects {}x{}", s[2], s[3], self.config.input_size, self.config.input_size),
            ));
        }
        let mut x = self.patch[0].forward(cx, image)?;
        x = self.patch[1].forward(cx, x)?;
        let mut feats = Vec::with_capacity(STAGES);
        for (down, blocks) in self.down.iter().zip(&self.encoder) {
            x = down.forward(cx, x)?;
            for b in blocks {
                x = b.forward(cx, x)?;
            }
            feats.push(x);
        }
        Ok(feats)
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, image: Var) -> Result<SaliencyOutputs> {
        let size = self.config.input_size;
        let feats = self.encode(cx, image)?;
        let skips = match &self.dshgam {
            Some(m) => m.forward(cx, &feats)?,
            None => feats,
        };
        let mut maps = [image; STAGES];
        let mut x: Option<Var> = None;
        for s in (0..STAGES).rev() {
            let mut y = match x {
                None => skips[s],
                Some(prev) => {
                    let side = cx.g.shape(skips[s])[2];
                    let up = cx.g.resize(prev, side, side, ResizeMode::Bilinear)?;
                    let cat = cx.g.concat(&[up, skips[s]], 1)?;
                    self.fuse[s]
                        .as_ref()
                        .expect("every stage below the deepest has a fusion conv")
                        .forward(cx, cat)?
                }
            };
            for b in &self.decoder[s] {
                y = b.forward(cx, y)?;
            }
            let logit = self.heads[s].forward(cx, y)?;
            let p = cx.g.sigmoid(logit);
            maps[s] = cx.g.resize(p, size, size, ResizeMode::Bilinear)?;
            x = Some(y);
        }
        Ok(SaliencyOutputs { maps })
    }

    /// Final saliency maps `[N, 1, H, W]` for a normalized image batch.
    pub fn predict<T: Real>(&self, params: &ParamStore<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cx = Ctx::new(params, false);
        let x = cx.input(images.clone());
        let out = self.forward(&mut cx, x)?;
        Ok(cx.g.value(out.maps[0]).clone())
    }
}
