//! Grid graphs and single-head graph attention.
//!
//! For node features `f_i`, with `Wf` the shared projection and `l = [l1; l2]`:
//!
//! ```text
//! e_ij = LeakyReLU(l1 · W f_i + l2 · W f_j)      for j in N(i)
//! a_ij = softmax_j e_ij
//! f'_i = ELU(sum_j a_ij W f_j)
//! ```

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Backprop, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

impl Connectivity {
    pub fn from_count(n: usize) -> Result<Self> {
        match n {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            other => Err(Error::InvalidArgument(format!("connectivity must be 4 or 8, got {other}"))),
        }
    }

    pub fn count(self) -> usize {
        match self {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
        }
    }
}

/// Neighborhoods in compressed form: the neighbors of node `i` are
/// `indices[offsets[i]..offsets[i + 1]]` and include `i`. Lists keep the
/// order they were given in, so relabeling a graph preserves every node's
/// summation order and the layer output permutes exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridGraph {
    pub rows: usize,
    pub cols: usize,
    offsets: Arc<[usize]>,
    indices: Arc<[usize]>,
}

impl GridGraph {
    /// Lattice over an `rows × cols` grid with self-loops.
    pub fn grid(rows: usize, cols: usize, conn: Connectivity) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument(format!("grid graph needs at least one node, got {rows}x{cols}")));
        }
        let mut lists = Vec::with_capacity(rows * cols);
        for y in 0..rows as isize {
            for x in 0..cols as isize {
                let mut nb = Vec::with_capacity(9);
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        if conn == Connectivity::Four && dy != 0 && dx != 0 {
                            continue;
                        }
                        let (ny, nx) = (y + dy, x + dx);
                        if (0..rows as isize).contains(&ny) && (0..cols as isize).contains(&nx) {
                            nb.push(ny as usize * cols + nx as usize);
                        }
                    }
                }
                lists.push(nb);
            }
        }
        Self::from_neighbors(rows, cols, lists)
    }

    /// Arbitrary symmetric adjacency with self-loops and no repeated neighbors.
    pub fn from_neighbors(rows: usize, cols: usize, lists: Vec<Vec<usize>>) -> Result<Self> {
        let n = lists.len();
        if n != rows * cols {
            return Err(Error::InvalidArgument(format!("{n} neighbor lists for a {rows}x{cols} graph")));
        }
        let mut sorted = lists.clone();
        for (i, nb) in sorted.iter_mut().enumerate() {
            nb.sort_unstable();
            if nb.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::InvalidArgument(format!("node {i} lists a neighbor twice")));
            }
            if nb.binary_search(&i).is_err() || nb.last().is_some_and(|&j| j >= n) {
                return Err(Error::InvalidArgument(format!("node {i} lacks a self-loop or has an out-of-range neighbor")));
            }
        }
        for (i, nb) in sorted.iter().enumerate() {
            if nb.iter().any(|&j| sorted[j].binary_search(&i).is_err()) {
                return Err(Error::InvalidArgument(format!("adjacency of node {i} is not symmetric")));
            }
        }
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        for nb in &lists {
            offsets.push(offsets.last().unwrap() + nb.len());
        }
        Ok(GridGraph {
            rows,
            cols,
            offsets: offsets.into(),
            indices: lists.concat().into(),
        })
    }

    pub fn nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn edges(&self) -> usize {
        self.indices.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.indices[self.offsets[i]..self.offsets[i + 1]]
    }

    /// The same graph with node `i` renamed to `perm[i]`.
    pub fn relabeled(&self, perm: &[usize]) -> Result<Self> {
        let n = self.nodes();
        if perm.len() != n {
            return Err(Error::InvalidArgument("permutation length differs from node count".into()));
        }
        let mut lists = vec![Vec::new(); n];
        for i in 0..n {
            lists[perm[i]] = self.neighbors(i).iter().map(|&j| perm[j]).collect();
        }
        Self::from_neighbors(self.rows, self.cols, lists)
    }
}

/// Per-edge scores for one batch item: `z` before and `a` after the softmax.
fn edge_scores<T: Real>(wh: &[T], l: &[T], graph: &GridGraph, d: usize, slope: T) -> (Vec<T>, Vec<T>) {
    let n = graph.nodes();
    let (l1, l2) = l.split_at(d);
    let dot = |v: &[T], u: &[T]| v.iter().zip(u).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
    let s1: Vec<T> = (0..n).map(|i| dot(&wh[i * d..(i + 1) * d], l1)).collect();
    let s2: Vec<T> = (0..n).map(|i| dot(&wh[i * d..(i + 1) * d], l2)).collect();
    let mut z = vec![T::zero(); graph.edges()];
    let mut a = vec![T::zero(); graph.edges()];
    for i in 0..n {
        let (lo, hi) = (graph.offsets[i], graph.offsets[i + 1]);
        let mut max = T::neg_infinity();
        for e in lo..hi {
            let v = s1[i] + s2[graph.indices[e]];
            z[e] = v;
            let lv = if v > T::zero() { v } else { v * slope };
            a[e] = lv;
            max = max.max(lv);
        }
        let mut total = T::zero();
        for e in lo..hi {
            a[e] = (a[e] - max).exp();
            total += a[e];
        }
        for e in lo..hi {
            a[e] /= total;
        }
    }
    (z, a)
}

fn check_features(op: &'static str, shape: &[usize], graph: &GridGraph) -> Result<(usize, usize)> {
    let [b, n, d] = <[usize; 3]>::try_from(shape)
        .map_err(|_| Error::shape(op, format!("features must be [B, n, d], got {shape:?}")))?;
    if n != graph.nodes() {
        return Err(Error::shape(op, format!("{n} feature rows for a graph with {} nodes", graph.nodes())));
    }
    Ok((b, d))
}

impl<T: Real> Graph<T> {
    /// Attention-weighted neighbor aggregation of projected features
    /// `wh: [B, n, d]` with scoring vector `l: [2d]`, before the output activation.
    pub fn gat_aggregate(&mut self, wh: Var, l: Var, graph: &GridGraph, slope: T) -> Result<Var> {
        let (bs, d) = check_features("gat_aggregate", self.shape(wh), graph)?;
        if self.shape(l) != [2 * d] {
            return Err(Error::shape("gat_aggregate", format!("l must be [{}], got {:?}", 2 * d, self.shape(l))));
        }
        let n = graph.nodes();
        let mut out = vec![T::zero(); bs * n * d];
        {
            let (whd, ld) = (self.value(wh).data(), self.value(l).data());
            for b in 0..bs {
                let x = &whd[b * n * d..(b + 1) * n * d];
                let (_, a) = edge_scores(x, ld, graph, d, slope);
                let o = &mut out[b * n * d..(b + 1) * n * d];
                for i in 0..n {
                    for e in graph.offsets[i]..graph.offsets[i + 1] {
                        let j = graph.indices[e];
                        for k in 0..d {
                            o[i * d + k] += a[e] * x[j * d + k];
                        }
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![bs, n, d], out);
        let graph = graph.clone();
        let backward = move |bp: &Backprop<'_, T>| {
            let (whd, ld, gout) = (bp.inputs[0].data(), bp.inputs[1].data(), bp.grad);
            let (l1, l2) = ld.split_at(d);
            let mut gwh = vec![T::zero(); whd.len()];
            let mut gl = vec![T::zero(); 2 * d];
            let mut ga = vec![T::zero(); graph.edges()];
            let mut gs1 = vec![T::zero(); n];
            let mut gs2 = vec![T::zero(); n];
            for b in 0..bs {
                let x = &whd[b * n * d..(b + 1) * n * d];
                let g = &gout[b * n * d..(b + 1) * n * d];
                let gx = &mut gwh[b * n * d..(b + 1) * n * d];
                let (z, a) = edge_scores(x, ld, &graph, d, slope);
                gs1.iter_mut().for_each(|v| *v = T::zero());
                gs2.iter_mut().for_each(|v| *v = T::zero());
                for i in 0..n {
                    let (lo, hi) = (graph.offsets[i], graph.offsets[i + 1]);
                    let gi = &g[i * d..(i + 1) * d];
                    let mut weighted = T::zero();
                    for e in lo..hi {
                        let j = graph.indices[e];
                        let xj = &x[j * d..(j + 1) * d];
                        let mut dot = T::zero();
                        for k in 0..d {
                            gx[j * d + k] += a[e] * gi[k];
                            dot += gi[k] * xj[k];
                        }
                        ga[e] = dot;
                        weighted += a[e] * dot;
                    }
                    for e in lo..hi {
                        let ge = a[e] * (ga[e] - weighted);
                        let gz = if z[e] > T::zero() { ge } else { ge * slope };
                        gs1[i] += gz;
                        gs2[graph.indices[e]] += gz;
                    }
                }
                for i in 0..n {
                    for k in 0..d {
                        gx[i * d + k] += gs1[i] * l1[k] + gs2[i] * l2[k];
                        gl[k] += gs1[i] * x[i * d + k];
                        gl[d + k] += gs2[i] * x[i * d + k];
                    }
                }
            }
            vec![bp.needs(0).then_some(gwh), bp.needs(1).then_some(gl)]
        };
        Ok(self.push(value, &[wh, l], Box::new(backward)))
    }

    /// Full layer: `ELU(aggregate(h W^T))` on `h: [B, n, d]`, `w: [d, d]`, `l: [2d]`.
    pub fn gat(&mut self, h: Var, w: Var, l: Var, graph: &GridGraph, slope: T) -> Result<Var> {
        let wh = self.linear(h, w)?;
        let agg = self.gat_aggregate(wh, l, graph, slope)?;
        Ok(self.elu(agg, T::one()))
    }
}

pub const DEFAULT_SLOPE: f64 = 0.2;

/// Standalone single-head layer with `d' = d`.
#[derive(Debug, Clone)]
pub struct GatLayer<T> {
    /// `[d, d]`.
    pub w: Tensor<T>,
    /// `[2d]`.
    pub l: Tensor<T>,
    pub slope: T,
}

impl<T: Real> GatLayer<T> {
    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let std = (d as f64).powf(-0.5);
        GatLayer {
            w: Tensor::randn(&[d, d], std, rng),
            l: Tensor::randn(&[2 * d], std, rng),
            slope: T::from_f64_lossy(DEFAULT_SLOPE),
        }
    }

    fn dim(&self) -> usize {
        self.w.shape()[0]
    }
}

/// Attention coefficients `a_ij`, listed for `j` in `graph.neighbors(i)` order.
pub fn gat_coeffs<T: Real>(features: &Tensor<T>, layer: &GatLayer<T>, graph: &GridGraph) -> Result<Vec<Vec<T>>> {
    let d = layer.dim();
    if features.shape() != [graph.nodes(), d] {
        return Err(Error::shape("gat_coeffs", format!("features {:?} for {} nodes of width {d}", features.shape(), graph.nodes())));
    }
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let w = g.constant(layer.w.clone());
    let wh = g.linear(f, w)?;
    let (_, a) = edge_scores(g.value(wh).data(), layer.l.data(), graph, d, layer.slope);
    Ok((0..graph.nodes())
        .map(|i| a[graph.offsets[i]..graph.offsets[i + 1]].to_vec())
        .collect())
}

/// Layer output `[n, d]` for features `[n, d]`.
pub fn gat_forward<T: Real>(features: &Tensor<T>, layer: &GatLayer<T>, graph: &GridGraph) -> Result<Tensor<T>> {
    let d = layer.dim();
    let n = graph.nodes();
    if features.shape() != [n, d] {
        return Err(Error::shape("gat_forward", format!("features {:?} for {n} nodes of width {d}", features.shape())));
    }
    let mut g = Graph::new();
    let f = g.constant(features.clone().reshape(&[1, n, d])?);
    let w = g.constant(layer.w.clone());
    let l = g.constant(layer.l.clone());
    let y = g.gat(f, w, l, graph, layer.slope)?;
    g.value(y).clone().reshape(&[n, d])
}
