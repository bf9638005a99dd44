//! Reductions.

use super::{Backprop, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Reduce {
    Sum,
    Mean,
    Max,
}

/// `(outer, len, inner)` decomposition of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Graph<T> {
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let backward = |bp: &Backprop<'_, T>| vec![Some(vec![bp.grad[0]; bp.inputs[0].numel()])];
        self.push(value, &[x], Box::new(backward))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).numel()).unwrap();
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, kind: Reduce) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "reduce",
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        if len == 0 {
            return Err(Error::shape("reduce", "cannot reduce an empty axis"));
        }
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        let mut arg = if kind == Reduce::Max { vec![0usize; outer * inner] } else { Vec::new() };
        for o in 0..outer {
            let base = o * len * inner;
            let dst = &mut out[o * inner..(o + 1) * inner];
            match kind {
                Reduce::Sum | Reduce::Mean => {
                    for k in 0..len {
                        let row = &xs[base + k * inner..base + (k + 1) * inner];
                        dst.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                    if kind == Reduce::Mean {
                        let inv = T::one() / T::from_usize(len).unwrap();
                        dst.iter_mut().for_each(|d| *d *= inv);
                    }
                }
                Reduce::Max => {
                    dst.copy_from_slice(&xs[base..base + inner]);
                    let a = &mut arg[o * inner..(o + 1) * inner];
                    for k in 1..len {
                        let row = &xs[base + k * inner..base + (k + 1) * inner];
                        for i in 0..inner {
                            if row[i] > dst[i] {
                                dst[i] = row[i];
                                a[i] = k;
                            }
                        }
                    }
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        let value = Tensor::from_parts(out_shape, out);
        let backward = move |bp: &Backprop<'_, T>| {
            let g = bp.grad;
            let mut gx = vec![T::zero(); outer * len * inner];
            let scale = match kind {
                Reduce::Mean => T::one() / T::from_usize(len).unwrap(),
                _ => T::one(),
            };
            for o in 0..outer {
                let base = o * len * inner;
                let go = &g[o * inner..(o + 1) * inner];
                match kind {
                    Reduce::Sum | Reduce::Mean => {
                        for k in 0..len {
                            let row = &mut gx[base + k * inner..base + (k + 1) * inner];
                            row.iter_mut().zip(go).for_each(|(d, &v)| *d = v * scale);
                        }
                    }
                    Reduce::Max => {
                        let a = &arg[o * inner..(o + 1) * inner];
                        for i in 0..inner {
                            gx[base + a[i] * inner + i] = go[i];
                        }
                    }
                }
            }
            vec![Some(gx)]
        };
        Ok(self.push(value, &[x], Box::new(backward)))
    }

    /// Sum along `axis`, keeping it with size 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, Reduce::Sum)
    }

    /// Mean along `axis`, keeping it with size 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, Reduce::Mean)
    }

    /// Max along `axis`, keeping it with size 1. Ties route the gradient to the first maximum.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, Reduce::Max)
    }

    /// `[N, C, H, W] -> [N, C, 1, 1]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.global_pool(x, Reduce::Mean)
    }

    /// `[N, C, H, W] -> [N, C, 1, 1]` spatial max.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        self.global_pool(x, Reduce::Max)
    }

    fn global_pool(&mut self, x: Var, kind: Reduce) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("global_pool", format!("expected NCHW, got {s:?}")));
        }
        let flat = self.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
        let r = self.reduce_axis(flat, 2, kind)?;
        self.reshape(r, &[s[0], s[1], 1, 1])
    }
}
