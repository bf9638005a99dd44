//! Spatial-to-sequence orderings for the four-directional 2-D scan.
//!
//! An order maps sequence position `t` to the flat (row-major) spatial index
//! it reads. The global cross-scan visits the whole map row-major, column-major
//! and both reversals. The block-partitioned variant splits the map into a
//! `g × g` grid of equal blocks, enumerates the blocks row-major and applies
//! the directional scan inside each block, so every block forms a contiguous
//! run of the sequence.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex, OnceLock};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Rightward,
    Downward,
    Leftward,
    Upward,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::Rightward,
        Direction::Downward,
        Direction::Leftward,
        Direction::Upward,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Direction::Rightward => "right",
            Direction::Downward => "down",
            Direction::Leftward => "left",
            Direction::Upward => "up",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "right" | "rightward" => Ok(Direction::Rightward),
            "down" | "downward" => Ok(Direction::Downward),
            "left" | "leftward" => Ok(Direction::Leftward),
            "up" | "upward" => Ok(Direction::Upward),
            other => Err(Error::InvalidArgument(format!(
                "unknown scan direction {other:?} (expected right, down, left or up)"
            ))),
        }
    }
}

/// A `grid × grid` layout of equal, non-overlapping blocks over an `h × w` map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockPartition {
    pub h: usize,
    pub w: usize,
    pub grid: usize,
}

impl BlockPartition {
    pub fn new(h: usize, w: usize, grid: usize) -> Result<Self> {
        if h == 0 || w == 0 || grid == 0 || h % grid != 0 || w % grid != 0 {
            return Err(Error::Divisibility { h, w, grid });
        }
        Ok(BlockPartition { h, w, grid })
    }

    pub fn block_h(&self) -> usize {
        self.h / self.grid
    }

    pub fn block_w(&self) -> usize {
        self.w / self.grid
    }

    /// Row-major block number of a flat spatial index.
    pub fn block_of(&self, flat: usize) -> usize {
        let (y, x) = (flat / self.w, flat % self.w);
        (y / self.block_h()) * self.grid + x / self.block_w()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanOrder {
    /// Sequence position -> flat spatial index.
    pub forward: Arc<[usize]>,
    /// Flat spatial index -> sequence position.
    pub inverse: Arc<[usize]>,
    pub direction: Direction,
    pub partition: BlockPartition,
}

impl ScanOrder {
    fn from_forward(forward: Vec<usize>, direction: Direction, partition: BlockPartition) -> Self {
        let mut inverse = vec![0; forward.len()];
        for (t, &i) in forward.iter().enumerate() {
            inverse[i] = t;
        }
        ScanOrder {
            forward: forward.into(),
            inverse: inverse.into(),
            direction,
            partition,
        }
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }
}

/// Directional scan of one `bh × bw` block with top-left corner `(y0, x0)`.
fn block_scan(dir: Direction, y0: usize, x0: usize, bh: usize, bw: usize, w: usize, out: &mut Vec<usize>) {
    let start = out.len();
    match dir {
        Direction::Rightward | Direction::Leftward => {
            for y in y0..y0 + bh {
                out.extend((x0..x0 + bw).map(|x| y * w + x));
            }
        }
        Direction::Downward | Direction::Upward => {
            for x in x0..x0 + bw {
                out.extend((y0..y0 + bh).map(|y| y * w + x));
            }
        }
    }
    if matches!(dir, Direction::Leftward | Direction::Upward) {
        out[start..].reverse();
    }
}

/// The four block-partitioned orders (right, down, left, up) for a `g × g` grid.
pub fn less2d_orders(h: usize, w: usize, g: usize) -> Result<[ScanOrder; 4]> {
    let part = BlockPartition::new(h, w, g)?;
    let (bh, bw) = (part.block_h(), part.block_w());
    Ok(Direction::ALL.map(|dir| {
        let mut fwd = Vec::with_capacity(h * w);
        for by in 0..g {
            for bx in 0..g {
                block_scan(dir, by * bh, bx * bw, bh, bw, w, &mut fwd);
            }
        }
        ScanOrder::from_forward(fwd, dir, part)
    }))
}

/// Global four-directional scan; the single-block case of [`less2d_orders`].
pub fn cross_scan_orders(h: usize, w: usize) -> Result<[ScanOrder; 4]> {
    less2d_orders(h, w, 1)
}

type OrderKey = (usize, usize, usize);

/// Orders are pure functions of `(h, w, g)`; this memoizes them process-wide.
pub fn cached_orders(h: usize, w: usize, g: usize) -> Result<Arc<[ScanOrder; 4]>> {
    static CACHE: OnceLock<Mutex<HashMap<OrderKey, Arc<[ScanOrder; 4]>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(hit) = cache.lock().unwrap_or_else(|e| e.into_inner()).get(&(h, w, g)) {
        return Ok(Arc::clone(hit));
    }
    let orders = Arc::new(less2d_orders(h, w, g)?);
    cache
        .lock()
        .unwrap_or_else(|e| e.into_inner())
        .insert((h, w, g), Arc::clone(&orders));
    Ok(orders)
}

/// Block grid used at a decoder stage whose resolution is `1 / denominator` of the input.
pub fn resolution_to_grid(denominator: usize) -> Result<usize> {
    match denominator {
        16 => Ok(1),
        8 => Ok(2),
        4 => Ok(4),
        2 => Ok(8),
        other => Err(Error::InvalidArgument(format!(
            "no block grid defined for stage scale 1/{other} (expected 1/2, 1/4, 1/8 or 1/16)"
        ))),
    }
}

/// Scatters four directional `[N, C, L]` outputs back to `[N, C, H, W]` and sums them.
pub fn scan_merge<T: Real>(ys: [&Tensor<T>; 4], orders: &[ScanOrder; 4]) -> Result<Tensor<T>> {
    let shape = ys[0].shape().to_vec();
    let part = orders[0].partition;
    let l = part.h * part.w;
    if shape.len() != 3 || shape[2] != l || ys.iter().any(|y| y.shape() != shape.as_slice()) {
        return Err(Error::shape(
            "scan_merge",
            format!(
                "expected four [N, C, {l}] sequences, got {:?}",
                ys.iter().map(|y| y.shape().to_vec()).collect::<Vec<_>>()
            ),
        ));
    }
    if orders.iter().any(|o| o.len() != l) {
        return Err(Error::shape("scan_merge", "orders disagree on the spatial size"));
    }
    let mut out = vec![T::zero(); ys[0].numel()];
    for (y, order) in ys.iter().zip(orders) {
        for (dst, src) in out.chunks_exact_mut(l).zip(y.data().chunks_exact(l)) {
            for (&v, &i) in src.iter().zip(order.forward.iter()) {
                dst[i] += v;
            }
        }
    }
    Tensor::new(&[shape[0], shape[1], part.h, part.w], out)
}

impl<T: Real> Graph<T> {
    /// Differentiable [`scan_merge`].
    pub fn scan_merge(&mut self, ys: [Var; 4], orders: &[ScanOrder; 4]) -> Result<Var> {
        let (h, w) = (orders[0].partition.h, orders[0].partition.w);
        let shape = self.shape(ys[0]).to_vec();
        if ys.iter().any(|&y| self.shape(y) != shape.as_slice()) {
            return Err(Error::shape("scan_merge", "directional outputs differ in shape"));
        }
        let mut acc = self.scatter_seq(ys[0], &orders[0].forward, h, w)?;
        for (&y, order) in ys.iter().zip(orders).skip(1) {
            let s = self.scatter_seq(y, &order.forward, h, w)?;
            acc = self.add(acc, s)?;
        }
        Ok(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_by_two_global_orders() {
        let o = cross_scan_orders(2, 2).unwrap();
        assert_eq!(&*o[0].forward, &[0, 1, 2, 3]);
        assert_eq!(&*o[1].forward, &[0, 2, 1, 3]);
        assert_eq!(&*o[2].forward, &[3, 2, 1, 0]);
        assert_eq!(&*o[3].forward, &[3, 1, 2, 0]);
    }

    #[test]
    fn four_by_four_two_blocks_rightward() {
        let o = less2d_orders(4, 4, 2).unwrap();
        assert_eq!(&*o[0].forward, &[0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15]);
        // reversal happens inside each block, blocks keep their order
        assert_eq!(&*o[2].forward, &[5, 4, 1, 0, 7, 6, 3, 2, 13, 12, 9, 8, 15, 14, 11, 10]);
        assert_eq!(&*o[1].forward, &[0, 4, 1, 5, 2, 6, 3, 7, 8, 12, 9, 13, 10, 14, 11, 15]);
    }

    #[test]
    fn non_divisible_grid_is_rejected() {
        let err = less2d_orders(6, 8, 4).unwrap_err();
        assert!(matches!(err, Error::Divisibility { h: 6, w: 8, grid: 4 }));
        assert!(err.to_string().contains("divisible"));
    }

    #[test]
    fn grid_table() {
        assert_eq!(resolution_to_grid(16).unwrap(), 1);
        assert_eq!(resolution_to_grid(8).unwrap(), 2);
        assert_eq!(resolution_to_grid(4).unwrap(), 4);
        assert_eq!(resolution_to_grid(2).unwrap(), 8);
        assert!(resolution_to_grid(32).is_err());
    }

    #[test]
    fn direction_round_trip() {
        for d in Direction::ALL {
            assert_eq!(d.name().parse::<Direction>().unwrap(), d);
        }
        assert!("diag".parse::<Direction>().is_err());
    }

    #[test]
    fn merge_of_equal_and_single_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let orders = less2d_orders(4, 6, 2).unwrap();
        let v = Tensor::<f64>::randn(&[2, 3, 24], 1.0, &mut rng);
        let zero = Tensor::zeros(&[2, 3, 24]);
        let merged = scan_merge([&zero, &zero, &v, &zero], &orders).unwrap();
        // the unscrambled third direction
        for t in 0..24 {
            let i = orders[2].forward[t];
            assert_eq!(merged.data()[i], v.data()[t]);
        }
        let bad = Tensor::<f64>::zeros(&[2, 3, 23]);
        assert!(scan_merge([&v, &v, &v, &bad], &orders).is_err());
    }

    #[test]
    fn gather_then_merge_is_four_times_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::randn(&[1, 2, 8, 8], 1.0, &mut rng);
        let orders = less2d_orders(8, 8, 4).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let ys = [0, 1, 2, 3].map(|k| g.gather_seq(xv, &orders[k].forward).unwrap());
        let m = g.scan_merge(ys, &orders).unwrap();
        let expect = x.map(|v| 4.0 * v);
        assert_eq!(g.value(m), &expect);
    }

    #[test]
    fn cache_returns_same_orders() {
        let a = cached_orders(8, 8, 2).unwrap();
        let b = cached_orders(8, 8, 2).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        assert_eq!(*a, less2d_orders(8, 8, 2).unwrap());
    }

    proptest! {
        #[test]
        fn leftward_reverses_rightward_globally(h in 1usize..12, w in 1usize..12) {
            let o = cross_scan_orders(h, w).unwrap();
            let mut rev = o[0].forward.to_vec();
            rev.reverse();
            prop_assert_eq!(&*o[2].forward, rev.as_slice());
        }

        #[test]
        fn orders_are_permutations(bh in 1usize..6, bw in 1usize..6, g in 1usize..5) {
            let (h, w) = (bh * g, bw * g);
            for o in less2d_orders(h, w, g).unwrap().iter() {
                let mut sorted = o.forward.to_vec();
                sorted.sort_unstable();
                prop_assert!(sorted.iter().copied().eq(0..h * w));
                for (t, &i) in o.forward.iter().enumerate() {
                    prop_assert_eq!(o.inverse[i], t);
                }
            }
        }
    }
}
