//! Shape manipulation: reshape, permute, concat/split and spatial gather/scatter.

use std::sync::Arc;

use super::reduce::split_axis;
use super::{Backprop, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{strides, Real, Tensor};

fn check_permutation(order: &[usize]) -> bool {
    let mut seen = vec![false; order.len()];
    for &i in order {
        if i >= order.len() || seen[i] {
            return false;
        }
        seen[i] = true;
    }
    true
}

impl<T: Real> Graph<T> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let backward = |bp: &Backprop<'_, T>| vec![Some(bp.grad.to_vec())];
        Ok(self.push(value, &[x], Box::new(backward)))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axes.len() != shape.len() || !check_permutation(axes) {
            return Err(Error::shape(
                "permute",
                format!("axes {axes:?} are not a permutation for shape {shape:?}"),
            ));
        }
        let in_strides = strides(&shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        // input stride for each output axis
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let map = permutation_index(&out_shape, &src_strides);
        let xs = self.value(x).data();
        let out: Vec<T> = map.iter().map(|&i| xs[i]).collect();
        let value = Tensor::from_parts(out_shape, out);
        let backward = move |bp: &Backprop<'_, T>| {
            let mut gx = vec![T::zero(); bp.grad.len()];
            for (o, &i) in map.iter().enumerate() {
                gx[i] = bp.grad[o];
            }
            vec![Some(gx)]
        };
        Ok(self.push(value, &[x], Box::new(backward)))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::shape("concat", "no inputs"));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut lens = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("shape {s:?} incompatible with {base:?} along axis {axis}"),
                ));
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &len) in xs.iter().zip(&lens) {
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let value = Tensor::from_parts(out_shape, out);
        let backward = move |bp: &Backprop<'_, T>| {
            let mut grads: Vec<Vec<T>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (g, &len) in grads.iter_mut().zip(&lens) {
                    g.extend_from_slice(&bp.grad[off..off + len * inner]);
                    off += len * inner;
                }
            }
            grads
                .into_iter()
                .enumerate()
                .map(|(i, g)| bp.needs(i).then_some(g))
                .collect()
        };
        Ok(self.push(value, xs, Box::new(backward)))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("range {start}..{} invalid on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let b = (o * full + start) * inner;
            out.extend_from_slice(&xs[b..b + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::from_parts(out_shape, out);
        let backward = move |bp: &Backprop<'_, T>| {
            let mut gx = vec![T::zero(); outer * full * inner];
            for o in 0..outer {
                let b = (o * full + start) * inner;
                gx[b..b + len * inner].copy_from_slice(&bp.grad[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        };
        Ok(self.push(value, &[x], Box::new(backward)))
    }

    /// Splits along `axis` into pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let total = self.shape(x).get(axis).copied().unwrap_or(0);
        if sizes.iter().sum::<usize>() != total {
            return Err(Error::shape(
                "split",
                format!("sizes {sizes:?} do not sum to axis length {total}"),
            ));
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &s in sizes {
            parts.push(self.narrow(x, axis, start, s)?);
            start += s;
        }
        Ok(parts)
    }

    /// Reorders the flattened spatial axis: `out[.., t] = x[.., order[t]]`.
    ///
    /// Accepts `[N, C, H, W]` or `[N, C, L]`; returns `[N, C, L]`.
    pub fn gather_seq(&mut self, x: Var, order: &Arc<[usize]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, c, l) = seq_dims("gather_seq", &shape, order.len())?;
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); n * c * l];
        for (dst, src) in out.chunks_exact_mut(l).zip(xs.chunks_exact(l)) {
            for (d, &i) in dst.iter_mut().zip(order.iter()) {
                *d = src[i];
            }
        }
        let value = Tensor::from_parts(vec![n, c, l], out);
        let order = Arc::clone(order);
        let backward = move |bp: &Backprop<'_, T>| {
            let mut gx = vec![T::zero(); bp.grad.len()];
            for (dst, src) in gx.chunks_exact_mut(l).zip(bp.grad.chunks_exact(l)) {
                for (&g, &i) in src.iter().zip(order.iter()) {
                    dst[i] = g;
                }
            }
            vec![Some(gx)]
        };
        Ok(self.push(value, &[x], Box::new(backward)))
    }

    /// Inverse of [`Graph::gather_seq`]: `out[.., order[t]] = x[.., t]`, reshaped to `[N, C, h, w]`.
    pub fn scatter_seq(&mut self, x: Var, order: &Arc<[usize]>, h: usize, w: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if h * w != order.len() {
            return Err(Error::shape(
                "scatter_seq",
                format!("order of length {} does not match {h}x{w}", order.len()),
            ));
        }
        let (n, c, l) = seq_dims("scatter_seq", &shape, order.len())?;
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); n * c * l];
        for (dst, src) in out.chunks_exact_mut(l).zip(xs.chunks_exact(l)) {
            for (&v, &i) in src.iter().zip(order.iter()) {
                dst[i] = v;
            }
        }
        let value = Tensor::from_parts(vec![n, c, h, w], out);
        let order = Arc::clone(order);
        let backward = move |bp: &Backprop<'_, T>| {
            let mut gx = vec![T::zero(); bp.grad.len()];
            for (dst, src) in gx.chunks_exact_mut(l).zip(bp.grad.chunks_exact(l)) {
                for (d, &i) in dst.iter_mut().zip(order.iter()) {
                    *d = src[i];
                }
            }
            vec![Some(gx)]
        };
        Ok(self.push(value, &[x], Box::new(backward)))
    }
}

fn seq_dims(op: &'static str, shape: &[usize], len: usize) -> Result<(usize, usize, usize)> {
    let (n, c, l) = match shape {
        [n, c, h, w] => (*n, *c, h * w),
        [n, c, l] => (*n, *c, *l),
        _ => return Err(Error::shape(op, format!("expected [N,C,H,W] or [N,C,L], got {shape:?}"))),
    };
    if l != len {
        return Err(Error::shape(
            op,
            format!("order of length {len} does not match spatial size {l}"),
        ));
    }
    Ok((n, c, l))
}

/// For each output position, the flat input index under the given source strides.
fn permutation_index(out_shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let numel: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let rank = out_shape.len();
    let mut counter = vec![0usize; rank];
    let mut idx = 0usize;
    for _ in 0..numel {
        map.push(idx);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            idx += src_strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            idx -= src_strides[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    map
}
