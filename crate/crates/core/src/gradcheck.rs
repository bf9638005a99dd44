//! Finite-difference verification of analytic gradients.
//!
//! The function under test is reduced to the scalar `sum(f(x) ⊙ R)` with a
//! fixed random projection `R`, differentiated once by the tape and once by
//! central differences on individual input elements.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Elements probed per input; all of them when the input is smaller.
    pub max_probes: usize,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-4,
            max_probes: 64,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    /// `input<k>` for function inputs, the parameter name for network parameters.
    pub label: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub probes: usize,
    pub worst: Option<Probe>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.worst.as_ref().map_or(0.0, |p| p.rel_error)
    }
}

pub fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn projected<F>(f: &F, inputs: &[Tensor<f64>], r: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let y = f(&mut g, &vars)?;
    Ok(g.value(y).data().iter().zip(r.data()).map(|(a, b)| a * b).sum())
}

/// Compares tape gradients of every input against central differences.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], opts: GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = f(&mut g, &vars)?;
    let r = Tensor::randn(g.shape(y), 1.0, &mut rng);
    let rv = g.constant(r.clone());
    let prod = g.mul(y, rv)?;
    let loss = g.sum(prod);
    g.backward(loss)?;

    let mut report = GradCheckReport { probes: 0, worst: None };
    let mut work = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let zeros = vec![0.0; input.numel()];
        let analytic = g.grad(vars[k]).unwrap_or(&zeros).to_vec();
        let idx: Vec<usize> = if input.numel() <= opts.max_probes {
            (0..input.numel()).collect()
        } else {
            sample(&mut rng, input.numel(), opts.max_probes).into_vec()
        };
        for i in idx {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + opts.step;
            let up = projected(&f, &work, &r)?;
            work[k].data_mut()[i] = orig - opts.step;
            let down = projected(&f, &work, &r)?;
            work[k].data_mut()[i] = orig;
            record(&mut report, format!("input{k}"), i, analytic[i], (up - down) / (2.0 * opts.step), opts.floor)?;
        }
    }
    Ok(report)
}

/// A named gradient check.
pub struct GradCase {
    pub name: &'static str,
    run: Box<dyn Fn(GradCheckOptions) -> Result<GradCheckReport> + Send + Sync>,
}

impl GradCase {
    pub fn new<F>(name: &'static str, inputs: Vec<Tensor<f64>>, f: F) -> Self
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Send + Sync + 'static,
    {
        GradCase {
            name,
            run: Box::new(move |opts| check_gradients(&inputs, opts, &f)),
        }
    }

    pub fn from_fn<F>(name: &'static str, run: F) -> Self
    where
        F: Fn(GradCheckOptions) -> Result<GradCheckReport> + Send + Sync + 'static,
    {
        GradCase { name, run: Box::new(run) }
    }

    pub fn run(&self, opts: GradCheckOptions) -> Result<GradCheckReport> {
        (self.run)(opts)
    }
}

fn record(report: &mut GradCheckReport, label: String, index: usize, analytic: f64, numeric: f64, floor: f64) -> Result<()> {
    if !numeric.is_finite() || !analytic.is_finite() {
        return Err(Error::InvalidArgument(format!("non-finite gradient at {label}[{index}]")));
    }
    let probe = Probe {
        label,
        index,
        analytic,
        numeric,
        rel_error: rel_error(analytic, numeric, floor),
    };
    report.probes += 1;
    if report.worst.as_ref().is_none_or(|w| probe.rel_error > w.rel_error) {
        report.worst = Some(probe);
    }
    Ok(())
}

/// Checks a network function against central differences on `param_probes`
/// parameter elements drawn uniformly from the whole store, plus up to
/// `opts.max_probes` elements of each input.
pub fn check_network<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    param_probes: usize,
    opts: GradCheckOptions,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut cx = Ctx::new(store, true);
    let vars: Vec<Var> = inputs.iter().map(|t| cx.g.param(t.clone())).collect();
    let y = f(&mut cx, &vars)?;
    let r = Tensor::randn(cx.g.shape(y), 1.0, &mut rng);
    let rv = cx.g.constant(r.clone());
    let prod = cx.g.mul(y, rv)?;
    let loss = cx.g.sum(prod);
    cx.g.backward(loss)?;
    let param_grads = cx.grads();
    let input_grads: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| cx.g.grad(v).map_or_else(|| vec![0.0; t.numel()], |g| g.to_vec()))
        .collect();
    drop(cx);

    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut cx = Ctx::new(store, false);
        let vars: Vec<Var> = inputs.iter().map(|t| cx.input(t.clone())).collect();
        let y = f(&mut cx, &vars)?;
        Ok(cx.g.value(y).data().iter().zip(r.data()).map(|(a, b)| a * b).sum())
    };
    let mut report = GradCheckReport { probes: 0, worst: None };

    let mut work = store.clone();
    let total = store.numel();
    let mut offsets = Vec::with_capacity(store.len());
    let mut acc = 0;
    for e in store.entries() {
        offsets.push(acc);
        acc += e.value.numel();
    }
    let mut picks = sample(&mut rng, total, param_probes.min(total)).into_vec();
    picks.sort_unstable();
    for flat in picks {
        let k = offsets.partition_point(|&o| o <= flat) - 1;
        let i = flat - offsets[k];
        let id = store.ids().nth(k).expect("offset table matches the store");
        let orig = work.get(id).data()[i];
        work.get_mut(id).data_mut()[i] = orig + opts.step;
        let up = eval(&work, inputs)?;
        work.get_mut(id).data_mut()[i] = orig - opts.step;
        let down = eval(&work, inputs)?;
        work.get_mut(id).data_mut()[i] = orig;
        let analytic = param_grads[k].as_ref().map_or(0.0, |g| g.data()[i]);
        record(&mut report, store.name(id).to_string(), i, analytic, (up - down) / (2.0 * opts.step), opts.floor)?;
    }

    let mut xs = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let idx: Vec<usize> = if input.numel() <= opts.max_probes {
            (0..input.numel()).collect()
        } else {
            sample(&mut rng, input.numel(), opts.max_probes).into_vec()
        };
        for i in idx {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + opts.step;
            let up = eval(store, &xs)?;
            xs[k].data_mut()[i] = orig - opts.step;
            let down = eval(store, &xs)?;
            xs[k].data_mut()[i] = orig;
            record(&mut report, format!("input{k}"), i, input_grads[k][i], (up - down) / (2.0 * opts.step), opts.floor)?;
        }
    }
    Ok(report)
}

/// One case per differentiable primitive.
pub fn op_suite(seed: u64) -> Vec<GradCase> {
    use crate::autodiff::ResizeMode;
    use crate::gat::{Connectivity, GridGraph};
    use crate::scan::less2d_orders;
    use crate::ssm::ScanKernel;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| Tensor::<f64>::randn(shape, 1.0, &mut rng);
    let pos = |t: Tensor<f64>| t.map(|v| v.abs() + 0.5);
    let mut cases = vec![
        GradCase::new("add_broadcast", vec![r(&[2, 3, 4]), r(&[3, 1])], |g, v| g.add(v[0], v[1])),
        GradCase::new("sub_broadcast", vec![r(&[2, 3]), r(&[1, 3])], |g, v| g.sub(v[0], v[1])),
        GradCase::new("mul_broadcast", vec![r(&[2, 3, 2, 2]), r(&[2, 3, 1, 1])], |g, v| g.mul(v[0], v[1])),
        GradCase::new("div", vec![r(&[2, 5]), pos(r(&[2, 5]))], |g, v| g.div(v[0], v[1])),
        GradCase::new("exp_log", vec![pos(r(&[6]))], |g, v| {
            let l = g.log(v[0]);
            let e = g.exp(v[0]);
            g.mul(l, e)
        }),
        GradCase::new("scale_shift", vec![r(&[5])], |g, v| {
            let s = g.scale(v[0], -1.7);
            let n = g.neg(s);
            Ok(g.add_scalar(n, 0.3))
        }),
        GradCase::new("sigmoid", vec![r(&[7])], |g, v| Ok(g.sigmoid(v[0]))),
        GradCase::new("silu", vec![r(&[7])], |g, v| Ok(g.silu(v[0]))),
        GradCase::new("relu", vec![r(&[7])], |g, v| Ok(g.relu(v[0]))),
        GradCase::new("leaky_relu", vec![r(&[7])], |g, v| Ok(g.leaky_relu(v[0], 0.2))),
        GradCase::new("elu", vec![r(&[7])], |g, v| Ok(g.elu(v[0], 1.0))),
        GradCase::new("softplus", vec![r(&[7])], |g, v| Ok(g.softplus(v[0]))),
        GradCase::new("clamp", vec![r(&[7])], |g, v| Ok(g.clamp(v[0], -0.5, 0.5))),
        GradCase::new("sum_mean", vec![r(&[3, 4])], |g, v| {
            let s = g.sum(v[0]);
            let m = g.mean(v[0]);
            g.mul(s, m)
        }),
        GradCase::new("sum_axis", vec![r(&[2, 3, 4])], |g, v| g.sum_axis(v[0], 1)),
        GradCase::new("mean_axis", vec![r(&[2, 3, 4])], |g, v| g.mean_axis(v[0], 2)),
        GradCase::new("max_axis", vec![r(&[2, 3, 4])], |g, v| g.max_axis(v[0], 1)),
        GradCase::new("global_pools", vec![r(&[2, 3, 3, 2])], |g, v| {
            let a = g.global_avg_pool(v[0])?;
            let m = g.global_max_pool(v[0])?;
            g.add(a, m)
        }),
        GradCase::new("softmax", vec![r(&[2, 5, 3])], |g, v| g.softmax(v[0], 1)),
        GradCase::new("layer_norm", vec![r(&[2, 6, 3])], |g, v| g.layer_norm(v[0], 1, 1e-5)),
        GradCase::new("reshape_permute", vec![r(&[2, 3, 4])], |g, v| {
            let p = g.permute(v[0], &[2, 0, 1])?;
            g.reshape(p, &[4, 6])
        }),
        GradCase::new("concat_narrow_split", vec![r(&[2, 3, 2]), r(&[2, 1, 2])], |g, v| {
            let c = g.concat(&[v[0], v[1]], 1)?;
            let n = g.narrow(c, 1, 1, 3)?;
            let parts = g.split(n, 1, &[2, 1])?;
            let s = g.sum_axis(parts[0], 1)?;
            g.mul(s, parts[1])
        }),
        GradCase::new("matmul", vec![r(&[3, 4]), r(&[4, 2])], |g, v| g.matmul(v[0], v[1])),
        GradCase::new("linear", vec![r(&[2, 3, 4]), r(&[5, 4])], |g, v| g.linear(v[0], v[1])),
        GradCase::new("conv2d_s1_p1", vec![r(&[2, 3, 5, 4]), r(&[4, 3, 3, 3]), r(&[4])], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 1, 1)
        }),
        GradCase::new("conv2d_s2_p1", vec![r(&[1, 2, 6, 6]), r(&[3, 2, 3, 3])], |g, v| g.conv2d(v[0], v[1], None, 2, 1)),
        GradCase::new("conv2d_pointwise", vec![r(&[2, 3, 3, 3]), r(&[2, 3, 1, 1]), r(&[2])], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 1, 0)
        }),
        GradCase::new("conv2d_patch", vec![r(&[1, 2, 4, 4]), r(&[3, 2, 2, 2]), r(&[3])], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 2, 0)
        }),
        GradCase::new("conv2d_transpose", vec![r(&[1, 3, 2, 3]), r(&[3, 2, 2, 2]), r(&[2])], |g, v| {
            g.conv2d_transpose(v[0], v[1], Some(v[2]), 2, 0)
        }),
        GradCase::new("depthwise_k3", vec![r(&[2, 3, 4, 5]), r(&[3, 1, 3, 3]), r(&[3])], |g, v| {
            g.depthwise_conv2d(v[0], v[1], Some(v[2]))
        }),
        GradCase::new("depthwise_k7", vec![r(&[1, 2, 5, 5]), r(&[2, 1, 7, 7])], |g, v| g.depthwise_conv2d(v[0], v[1], None)),
        GradCase::new("avg_pool", vec![r(&[1, 2, 4, 6])], |g, v| g.avg_pool2d(v[0], 2)),
        GradCase::new("resize_bilinear_up", vec![r(&[1, 2, 3, 2])], |g, v| g.resize(v[0], 6, 5, ResizeMode::Bilinear)),
        GradCase::new("resize_bilinear_down", vec![r(&[1, 1, 8, 8])], |g, v| g.resize(v[0], 3, 4, ResizeMode::Bilinear)),
        GradCase::new("resize_nearest", vec![r(&[1, 2, 2, 3])], |g, v| g.resize(v[0], 4, 7, ResizeMode::Nearest)),
    ];
    let orders = std::sync::Arc::new(less2d_orders(4, 4, 2).expect("4x4 splits into 2x2 blocks"));
    let o2 = orders.clone();
    cases.push(GradCase::new("gather_seq", vec![r(&[1, 2, 4, 4])], move |g, v| g.gather_seq(v[0], &o2[1].forward)));
    let o3 = orders.clone();
    cases.push(GradCase::new("scan_merge", vec![r(&[1, 2, 16]), r(&[1, 2, 16]), r(&[1, 2, 16]), r(&[1, 2, 16])], move |g, v| {
        g.scan_merge([v[0], v[1], v[2], v[3]], &o3)
    }));
    for (name, kernel) in [("selective_scan", ScanKernel::Sequential), ("selective_scan_parallel", ScanKernel::Parallel)] {
        let (b, d, n, l) = (2, 3, 4, 7);
        let inputs = vec![r(&[b, d, l]), r(&[b, d, l]), r(&[d, n]).map(|v| 0.3 * v), r(&[b, n, l]), r(&[b, n, l])];
        cases.push(GradCase::new(name, inputs, move |g, v| {
            let delta = g.softplus(v[1]);
            let e = g.exp(v[2]);
            let a = g.neg(e);
            g.selective_scan(v[0], delta, a, v[3], v[4], kernel)
        }));
    }
    // small steps exercise the first-order branch of the input weight
    cases.push(GradCase::new("selective_scan_small_step", vec![r(&[1, 2, 5]), r(&[2, 3]), r(&[1, 3, 5])], |g, v| {
        let delta = g.constant(Tensor::full(&[1, 2, 5], 1e-3));
        let e = g.exp(v[1]);
        let a = g.neg(e);
        let c = g.constant(Tensor::ones(&[1, 3, 5]));
        g.selective_scan(v[0], delta, a, v[2], c, ScanKernel::Sequential)
    }));
    let graph = GridGraph::grid(3, 3, Connectivity::Eight).expect("non-empty grid");
    cases.push(GradCase::new("gat", vec![r(&[2, 9, 4]), r(&[4, 4]), r(&[8])], move |g, v| g.gat(v[0], v[1], v[2], &graph, 0.2)));
    let graph4 = GridGraph::grid(2, 3, Connectivity::Four).expect("non-empty grid");
    cases.push(GradCase::new("gat_aggregate_4conn", vec![r(&[1, 6, 3]), r(&[6])], move |g, v| {
        g.gat_aggregate(v[0], v[1], &graph4, 0.2)
    }));
    cases
}

/// Parameter elements sampled per block case.
pub const BLOCK_PARAM_PROBES: usize = 48;

type BlockFn = Box<dyn Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Var> + Send + Sync>;

fn bx(f: impl Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Var> + Send + Sync + 'static) -> BlockFn {
    Box::new(f)
}

/// Builds a block in a fresh store whose parameters are redrawn from `N(0, 0.5²)`
/// so that every path carries a gradient well above the noise floor.
fn block_case<B>(name: &'static str, seed: u64, inputs: Vec<Tensor<f64>>, build: B) -> GradCase
where
    B: Fn(&mut Init<'_, f64>) -> Result<BlockFn> + Send + Sync + 'static,
{
    GradCase::from_fn(name, move |opts| {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fwd = build(&mut Init::new(&mut store, &mut rng))?;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::randn(&shape, 0.5, &mut rng);
        }
        check_network(&store, &inputs, BLOCK_PARAM_PROBES, opts, &fwd)
    })
}

/// One case per network block, each checked over inputs and sampled parameters.
pub fn block_suite(seed: u64) -> Vec<GradCase> {
    use crate::gat::Connectivity;
    use crate::nn::{
        ChannelAttention, ChannelNorm, ConvNormAct, ConvTranspose2d, Ccs, DsHgam, Mcaem, Msff, Rgca, SeparableConv,
        SpatialAttention, SsmBranch, VssBlock, VssConfig,
    };
    use crate::ssm::ScanKernel;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| Tensor::<f64>::randn(shape, 1.0, &mut rng);
    let widths = [2usize, 4, 4, 6];
    let pyramid = |r: &mut dyn FnMut(&[usize]) -> Tensor<f64>| -> Vec<Tensor<f64>> {
        (0..4).map(|i| r(&[1, widths[i], 8 >> i, 8 >> i])).collect()
    };
    let feats = pyramid(&mut r);
    vec![
        block_case("conv_norm_act", seed, vec![r(&[1, 3, 5, 5])], |init: &mut Init<'_, f64>| {
            let m = ConvNormAct::new(init, "cna", 3, 4, 3, 2, true)?;
            Ok(bx(move |cx, v| m.forward(cx, v[0])))
        }),
        block_case("channel_norm", seed, vec![r(&[2, 4, 3, 3])], |init: &mut Init<'_, f64>| {
            let m = ChannelNorm::new(init, "ln", 4)?;
            Ok(bx(move |cx, v| m.forward(cx, v[0])))
        }),
        block_case("conv_transpose", seed, vec![r(&[1, 3, 3, 2])], |init: &mut Init<'_, f64>| {
            let m = ConvTranspose2d::new(init, "up", 3, 2, 2)?;
            Ok(bx(move |cx, v| m.forward(cx, v[0])))
        }),
        block_case("separable_conv", seed, vec![r(&[1, 3, 5, 5])], |init: &mut Init<'_, f64>| {
            let m = SeparableConv::new(init, "sep", 3, 5)?;
            Ok(bx(move |cx, v| m.forward(cx, v[0])))
        }),
        block_case("channel_attention", seed, vec![r(&[2, 8, 3, 3])], |init: &mut Init<'_, f64>| {
            let m = ChannelAttention::new(init, "ca", 8)?;
            Ok(bx(move |cx, v| m.weights(cx, v[0])))
        }),
        block_case("spatial_attention", seed, vec![r(&[1, 3, 6, 6])], |init: &mut Init<'_, f64>| {
            let m = SpatialAttention::new(init, "sa")?;
            Ok(bx(move |cx, v| m.map(cx, v[0])))
        }),
        block_case("ccs", seed, vec![r(&[1, 4, 5, 5])], |init: &mut Init<'_, f64>| {
            let m = Ccs::new(init, "ccs", 4)?;
            Ok(bx(move |cx, v| m.forward(cx, v[0])))
        }),
        block_case("mcaem", seed, vec![r(&[1, 4, 6, 6])], |init: &mut Init<'_, f64>| {
            let m = Mcaem::new(init, "mcaem", 4)?;
            Ok(bx(move |cx, v| m.forward(cx, v[0])))
        }),
        block_case("msff", seed, feats.clone(), move |init: &mut Init<'_, f64>| {
            let m = Msff::new(init, "msff", 1, &widths)?;
            Ok(bx(move |cx, v| m.forward(cx, v)))
        }),
        block_case("rgca_8conn", seed, vec![r(&[1, 4, 6, 6]), r(&[1, 4, 6, 6])], |init: &mut Init<'_, f64>| {
            let m = Rgca::new(init, "rgca", 4, 2, Connectivity::Eight)?;
            Ok(bx(move |cx, v| m.forward(cx, v[0], v[1])))
        }),
        block_case("rgca_4conn", seed, vec![r(&[1, 3, 4, 4]), r(&[1, 3, 4, 4])], |init: &mut Init<'_, f64>| {
            let m = Rgca::new(init, "rgca", 3, 1, Connectivity::Four)?;
            Ok(bx(move |cx, v| m.forward(cx, v[0], v[1])))
        }),
        block_case("dshgam", seed, feats, move |init: &mut Init<'_, f64>| {
            let m = DsHgam::new(init, "dshgam", &widths, &[2, 1, 1, 1], Connectivity::Eight)?;
            Ok(bx(move |cx, v| {
                let out = m.forward(cx, v)?;
                let flat: Vec<Var> = out
                    .iter()
                    .map(|&o| {
                        let n = cx.g.value(o).numel();
                        cx.g.reshape(o, &[n])
                    })
                    .collect::<Result<_>>()?;
                cx.g.concat(&flat, 0)
            }))
        }),
        block_case("ssm_branch", seed, vec![r(&[2, 4, 9])], |init: &mut Init<'_, f64>| {
            let m = SsmBranch::new(init, "ssm", 4, 3)?;
            Ok(bx(move |cx, v| m.forward(cx, v[0], ScanKernel::Sequential)))
        }),
        block_case("vss_cross_scan", seed, vec![r(&[1, 4, 4, 4])], |init: &mut Init<'_, f64>| {
            let cfg = VssConfig { expand: 1, d_state: 2, ..Default::default() };
            let m = VssBlock::new(init, "vss", 4, &cfg, 1, false)?;
            Ok(bx(move |cx, v| m.forward(cx, v[0])))
        }),
        block_case("levss_grid2_mcaem", seed, vec![r(&[1, 4, 4, 4])], |init: &mut Init<'_, f64>| {
            let cfg = VssConfig { expand: 2, d_state: 2, ..Default::default() };
            let m = VssBlock::new(init, "levss", 4, &cfg, 2, true)?;
            Ok(bx(move |cx, v| m.forward(cx, v[0])))
        }),
        block_case("levss_shared_parallel", seed, vec![r(&[1, 4, 4, 4])], |init: &mut Init<'_, f64>| {
            let cfg = VssConfig {
                expand: 1,
                d_state: 2,
                shared_directions: true,
                kernel: ScanKernel::Parallel,
            };
            let m = VssBlock::new(init, "levss", 4, &cfg, 2, false)?;
            Ok(bx(move |cx, v| m.forward(cx, v[0])))
        }),
    ]
}

/// End-to-end check of the smallest model: the total training loss against a
/// random binary mask, differentiated with respect to `param_probes` sampled
/// parameters and the input image.
pub fn model_check(cfg: &crate::model::ModelConfig, param_probes: usize, opts: GradCheckOptions) -> Result<GradCheckReport> {
    use crate::loss::LossWeights;
    use crate::model::Model;

    let (model, store) = Model::build::<f64>(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let s = cfg.input_size;
    let image = Tensor::randn(&[1, 3, s, s], 1.0, &mut rng);
    let mask = Tensor::<f64>::rand_uniform(&[1, 1, s, s], 0.0, 1.0, &mut rng).map(|v| v.round());
    check_network(&store, &[image], param_probes, opts, move |cx, v| {
        let out = model.forward(cx, v[0])?;
        let g = cx.input(mask.clone());
        cx.g.total_loss(&out.maps, g, &LossWeights::default())
    })
}
