//! Spatial resampling of `[N, C, H, W]` maps.

use super::{Backprop, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeMode {
    Nearest,
    /// Half-pixel centers (`align_corners = false`).
    Bilinear,
}

/// Two-tap interpolation weights along one axis.
#[derive(Debug, Clone, Copy)]
struct Tap<T> {
    i0: usize,
    i1: usize,
    w0: T,
    w1: T,
}

fn axis_taps<T: Real>(in_len: usize, out_len: usize, mode: ResizeMode) -> Vec<Tap<T>> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| match mode {
            ResizeMode::Nearest => {
                let i = ((o as f64 * scale).floor() as usize).min(in_len - 1);
                Tap { i0: i, i1: i, w0: T::one(), w1: T::zero() }
            }
            ResizeMode::Bilinear => {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(in_len - 1);
                let i1 = (i0 + 1).min(in_len - 1);
                let l = src - i0 as f64;
                Tap {
                    i0,
                    i1,
                    w0: T::from_f64_lossy(1.0 - l),
                    w1: T::from_f64_lossy(l),
                }
            }
        })
        .collect()
}

impl<T: Real> Graph<T> {
    pub fn resize(&mut self, x: Var, target_h: usize, target_w: usize, mode: ResizeMode) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [n, c, h, w] = <[usize; 4]>::try_from(s.as_slice())
            .map_err(|_| Error::shape("resize", format!("expected NCHW, got {s:?}")))?;
        if target_h == 0 || target_w == 0 {
            return Err(Error::InvalidArgument("resize target dims must be >= 1".into()));
        }
        if h == 0 || w == 0 {
            return Err(Error::shape("resize", "input has an empty spatial axis"));
        }
        let ty: Vec<Tap<T>> = axis_taps(h, target_h, mode);
        let tx: Vec<Tap<T>> = axis_taps(w, target_w, mode);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); n * c * target_h * target_w];
        for (p, dst) in out.chunks_exact_mut(target_h * target_w).enumerate() {
            let src = &xd[p * h * w..(p + 1) * h * w];
            for (oy, ay) in ty.iter().enumerate() {
                let r0 = &src[ay.i0 * w..(ay.i0 + 1) * w];
                let r1 = &src[ay.i1 * w..(ay.i1 + 1) * w];
                let d = &mut dst[oy * target_w..(oy + 1) * target_w];
                for (v, ax) in d.iter_mut().zip(&tx) {
                    let top = r0[ax.i0] * ax.w0 + r0[ax.i1] * ax.w1;
                    let bot = r1[ax.i0] * ax.w0 + r1[ax.i1] * ax.w1;
                    *v = top * ay.w0 + bot * ay.w1;
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, target_h, target_w], out);
        let backward = move |bp: &Backprop<'_, T>| {
            let mut gx = vec![T::zero(); n * c * h * w];
            for (p, dst) in gx.chunks_exact_mut(h * w).enumerate() {
                let g = &bp.grad[p * target_h * target_w..(p + 1) * target_h * target_w];
                for (oy, ay) in ty.iter().enumerate() {
                    let gr = &g[oy * target_w..(oy + 1) * target_w];
                    for (&gv, ax) in gr.iter().zip(&tx) {
                        let (a, b) = (gv * ay.w0, gv * ay.w1);
                        dst[ay.i0 * w + ax.i0] += a * ax.w0;
                        dst[ay.i0 * w + ax.i1] += a * ax.w1;
                        dst[ay.i1 * w + ax.i0] += b * ax.w0;
                        dst[ay.i1 * w + ax.i1] += b * ax.w1;
                    }
                }
            }
            vec![Some(gx)]
        };
        Ok(self.push(value, &[x], Box::new(backward)))
    }
}
