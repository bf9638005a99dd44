//! Softmax and layer normalization along an arbitrary axis.

use super::reduce::split_axis;
use super::{Backprop, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() || shape[axis] == 0 {
        return Err(Error::shape(
            op,
            format!("axis {axis} invalid for shape {shape:?}"),
        ));
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("softmax", &shape, axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); xs.len()];
        for o in 0..outer {
            let base = o * len * inner;
            for i in 0..inner {
                let mut m = T::neg_infinity();
                for k in 0..len {
                    m = m.max(xs[base + k * inner + i]);
                }
                let mut total = T::zero();
                for k in 0..len {
                    let e = (xs[base + k * inner + i] - m).exp();
                    out[base + k * inner + i] = e;
                    total += e;
                }
                for k in 0..len {
                    out[base + k * inner + i] /= total;
                }
            }
        }
        let value = Tensor::from_parts(shape, out);
        let backward = move |bp: &Backprop<'_, T>| {
            let y = bp.output.data();
            let g = bp.grad;
            let mut gx = vec![T::zero(); y.len()];
            for o in 0..outer {
                let base = o * len * inner;
                for i in 0..inner {
                    let mut dot = T::zero();
                    for k in 0..len {
                        let j = base + k * inner + i;
                        dot += g[j] * y[j];
                    }
                    for k in 0..len {
                        let j = base + k * inner + i;
                        gx[j] = y[j] * (g[j] - dot);
                    }
                }
            }
            vec![Some(gx)]
        };
        Ok(self.push(value, &[x], Box::new(backward)))
    }

    /// Normalizes to zero mean and unit (biased) variance along `axis`. No affine terms.
    pub fn layer_norm(&mut self, x: Var, axis: usize, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("layer_norm", &shape, axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let n = T::from_usize(len).unwrap();
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); xs.len()];
        let mut inv_std = vec![T::zero(); outer * inner];
        let mut mean = vec![T::zero(); inner];
        let mut var = vec![T::zero(); inner];
        for o in 0..outer {
            let base = o * len * inner;
            mean.iter_mut().for_each(|m| *m = T::zero());
            var.iter_mut().for_each(|v| *v = T::zero());
            for k in 0..len {
                let row = &xs[base + k * inner..base + (k + 1) * inner];
                mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m /= n);
            for k in 0..len {
                let row = &xs[base + k * inner..base + (k + 1) * inner];
                for i in 0..inner {
                    let d = row[i] - mean[i];
                    var[i] += d * d;
                }
            }
            let istd = &mut inv_std[o * inner..(o + 1) * inner];
            for i in 0..inner {
                istd[i] = T::one() / (var[i] / n + eps).sqrt();
            }
            for k in 0..len {
                let off = base + k * inner;
                for i in 0..inner {
                    out[off + i] = (xs[off + i] - mean[i]) * istd[i];
                }
            }
        }
        let value = Tensor::from_parts(shape, out);
        let backward = move |bp: &Backprop<'_, T>| {
            let y = bp.output.data();
            let g = bp.grad;
            let mut gx = vec![T::zero(); y.len()];
            let mut mg = vec![T::zero(); inner];
            let mut mgy = vec![T::zero(); inner];
            for o in 0..outer {
                let base = o * len * inner;
                mg.iter_mut().for_each(|v| *v = T::zero());
                mgy.iter_mut().for_each(|v| *v = T::zero());
                for k in 0..len {
                    let off = base + k * inner;
                    for i in 0..inner {
                        mg[i] += g[off + i];
                        mgy[i] += g[off + i] * y[off + i];
                    }
                }
                let istd = &inv_std[o * inner..(o + 1) * inner];
                for k in 0..len {
                    let off = base + k * inner;
                    for i in 0..inner {
                        gx[off + i] =
                            istd[i] * (g[off + i] - mg[i] / n - y[off + i] * mgy[i] / n);
                    }
                }
            }
            vec![Some(gx)]
        };
        Ok(self.push(value, &[x], Box::new(backward)))
    }
}
