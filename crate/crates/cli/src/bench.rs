use std::time::{Duration, Instant};

use clap::ValueEnum;
use gcrpnet::gat::{gat_forward, Connectivity, GatLayer, GridGraph};
use gcrpnet::model::{Model, ModelConfig};
use gcrpnet::ssm::{parallel_scan, selective_scan, SsmParams};
use gcrpnet::{Error, Graph, Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Op {
    /// `m,k,n`
    Matmul,
    /// `batch,channels,h,w`; 3×3 same-width convolution
    Conv,
    /// `len,channels[,states]`; sequential selective scan
    Scan,
    /// `len,channels[,states]`; chunked associative scan
    ScanParallel,
    /// `rows,cols,dim`; 8-connected grid
    Gat,
    /// `batch,size`; micro model forward pass
    Forward,
}

fn dims(shape: &str, min: usize, max: usize) -> Result<Vec<usize>> {
    let d: Vec<usize> = shape
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| Error::InvalidArgument(format!("bad dimension `{s}` in --shape"))))
        .collect::<Result<_>>()?;
    if d.len() < min || d.len() > max || d.contains(&0) {
        return Err(Error::InvalidArgument(format!("--shape needs {min} to {max} positive dims, got `{shape}`")));
    }
    Ok(d)
}

fn time(iters: usize, mut f: impl FnMut() -> Result<()>) -> Result<Vec<Duration>> {
    f()?;
    (0..iters.max(1))
        .map(|_| {
            let t = Instant::now();
            f()?;
            Ok(t.elapsed())
        })
        .collect()
}

pub fn run(op: Op, shape: &str, iters: usize) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let times = match op {
        Op::Matmul => {
            let d = dims(shape, 3, 3)?;
            let a = Tensor::<f32>::randn(&[d[0], d[1]], 1.0, &mut rng);
            let b = Tensor::<f32>::randn(&[d[1], d[2]], 1.0, &mut rng);
            time(iters, || {
                let mut g = Graph::new();
                let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
                g.matmul(x, y).map(drop)
            })?
        }
        Op::Conv => {
            let d = dims(shape, 4, 4)?;
            let x = Tensor::<f32>::randn(&d, 1.0, &mut rng);
            let w = Tensor::<f32>::randn(&[d[1], d[1], 3, 3], 0.1, &mut rng);
            time(iters, || {
                let mut g = Graph::new();
                let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
                g.conv2d(xv, wv, None, 1, 1).map(drop)
            })?
        }
        Op::Scan | Op::ScanParallel => {
            let d = dims(shape, 2, 3)?;
            let states = d.get(2).copied().unwrap_or(8);
            let params = SsmParams::<f32>::init(d[1], states, d[1].div_ceil(16), &mut rng);
            let x = Tensor::<f32>::randn(&[d[0], d[1]], 1.0, &mut rng);
            let parallel = matches!(op, Op::ScanParallel);
            time(iters, || {
                if parallel {
                    parallel_scan(&x, &params).map(drop)
                } else {
                    selective_scan(&x, &params).map(drop)
                }
            })?
        }
        Op::Gat => {
            let d = dims(shape, 3, 3)?;
            let graph = GridGraph::grid(d[0], d[1], Connectivity::Eight)?;
            let layer = GatLayer::<f32>::init(d[2], &mut rng);
            let h = Tensor::<f32>::randn(&[d[0] * d[1], d[2]], 1.0, &mut rng);
            time(iters, || gat_forward(&h, &layer, &graph).map(drop))?
        }
        Op::Forward => {
            let d = dims(shape, 2, 2)?;
            let cfg = ModelConfig { input_size: d[1], ..ModelConfig::micro() };
            let (model, params) = Model::build::<f32>(&cfg)?;
            let x = Tensor::<f32>::randn(&[d[0], 3, d[1], d[1]], 1.0, &mut rng);
            time(iters, || model.predict(&params, &x).map(drop))?
        }
    };
    let mut ms: Vec<f64> = times.iter().map(|t| t.as_secs_f64() * 1e3).collect();
    ms.sort_by(f64::total_cmp);
    let mean = ms.iter().sum::<f64>() / ms.len() as f64;
    println!(
        "op={op:?} shape={shape} iters={} min_ms={:.3} median_ms={:.3} mean_ms={mean:.3}",
        ms.len(),
        ms[0],
        ms[ms.len() / 2]
    );
    Ok(())
}
