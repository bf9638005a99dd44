//! Convolutions (cross-correlation, no kernel flip) and average pooling.

use super::{Backprop, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Real, Tensor, Trans};

/// Spatial geometry of one convolution.
#[derive(Debug, Clone, Copy)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Self> {
        if kh == 0 || kw == 0 || stride == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv needs kernel >= 1 and stride >= 1 (got {kh}x{kw}, stride {stride})"
            )));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("input {h}x{w} with padding {pad} admits no {kh}x{kw} window"),
            ));
        }
        Ok(Geom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Valid output index range along one axis for kernel offset `k`.
    fn range(&self, k: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        // input index = o * stride + k - pad must lie in [0, in_len)
        let s = self.stride;
        let lo = if k >= self.pad { 0 } else { (self.pad - k).div_ceil(s).min(out_len) };
        let hi_num = in_len + self.pad;
        let hi = if hi_num > k { ((hi_num - k - 1) / s + 1).min(out_len) } else { 0 };
        (lo, hi.max(lo))
    }
}

fn im2col<T: Real>(x: &[T], g: &Geom, cols: &mut [T]) {
    let (ho, wo) = (g.ho, g.wo);
    cols.iter_mut().for_each(|v| *v = T::zero());
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (y0, y1) = g.range(ky, g.h, ho);
            for kx in 0..g.kw {
                let (x0, x1) = g.range(kx, g.w, wo);
                if x0 == x1 {
                    continue;
                }
                let row = ((c * g.kh + ky) * g.kw + kx) * ho * wo;
                for oy in y0..y1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let dst = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                    if g.stride == 1 {
                        let ix0 = x0 + kx - g.pad;
                        dst[x0..x1].copy_from_slice(&src[ix0..ix0 + (x1 - x0)]);
                    } else {
                        for ox in x0..x1 {
                            dst[ox] = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &Geom, x: &mut [T]) {
    let (ho, wo) = (g.ho, g.wo);
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (y0, y1) = g.range(ky, g.h, ho);
            for kx in 0..g.kw {
                let (x0, x1) = g.range(kx, g.w, wo);
                if x0 == x1 {
                    continue;
                }
                let row = ((c * g.kh + ky) * g.kw + kx) * ho * wo;
                for oy in y0..y1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &cols[row + oy * wo..row + (oy + 1) * wo];
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for ox in x0..x1 {
                        dst[ox * g.stride + kx - g.pad] += src[ox];
                    }
                }
            }
        }
    }
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_exact_mut(plane).zip(bias.iter().cycle()) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad<T: Real>(g: &[T], channels: usize, plane: usize) -> Vec<T> {
    let mut gb = vec![T::zero(); channels];
    for (i, chunk) in g.chunks_exact(plane).enumerate() {
        gb[i % channels] += chunk.iter().copied().sum::<T>();
    }
    gb
}

impl<T: Real> Graph<T> {
    fn check_bias(&self, op: &'static str, b: Option<Var>, channels: usize) -> Result<()> {
        if let Some(b) = b {
            if self.shape(b) != [channels] {
                return Err(Error::shape(
                    op,
                    format!("bias shape {:?} must be [{channels}]", self.shape(b)),
                ));
            }
        }
        Ok(())
    }

    /// 2-D cross-correlation. `x: [N, C, H, W]`, `w: [O, C, kh, kw]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let ([n, c, h, wd], [o, wc, kh, kw]) = (dims4("conv2d", &xs)?, dims4("conv2d", &ws)?);
        if c != wc {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels but kernel {ws:?} expects {wc}"),
            ));
        }
        self.check_bias("conv2d", b, o)?;
        let g = Geom::new(c, h, wd, kh, kw, stride, padding)?;
        let (rows, cols_n) = (g.col_rows(), g.col_cols());
        let mut out = vec![T::zero(); n * o * cols_n];
        {
            let xd = self.value(x).data();
            let wdat = self.value(w).data();
            let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * cols_n] };
            for i in 0..n {
                let xi = &xd[i * c * h * wd..(i + 1) * c * h * wd];
                let src: &[T] = if g.is_pointwise() {
                    xi
                } else {
                    im2col(xi, &g, &mut cols);
                    &cols
                };
                gemm(
                    Trans::No,
                    Trans::No,
                    o,
                    rows,
                    cols_n,
                    T::one(),
                    wdat,
                    src,
                    T::zero(),
                    &mut out[i * o * cols_n..(i + 1) * o * cols_n],
                );
            }
            if let Some(b) = b {
                add_bias(&mut out, self.value(b).data(), cols_n);
            }
        }
        let value = Tensor::from_parts(vec![n, o, g.ho, g.wo], out);
        let backward = move |bp: &Backprop<'_, T>| {
            let xd = bp.inputs[0].data();
            let wdat = bp.inputs[1].data();
            let gout = bp.grad;
            let mut gx = bp.needs(0).then(|| vec![T::zero(); xd.len()]);
            let mut gw = bp.needs(1).then(|| vec![T::zero(); wdat.len()]);
            let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * cols_n }];
            let mut gcols = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * cols_n }];
            for i in 0..n {
                let xi = &xd[i * c * h * wd..(i + 1) * c * h * wd];
                let gi = &gout[i * o * cols_n..(i + 1) * o * cols_n];
                if let Some(gw) = gw.as_mut() {
                    let src: &[T] = if g.is_pointwise() {
                        xi
                    } else {
                        im2col(xi, &g, &mut cols);
                        &cols
                    };
                    gemm(Trans::No, Trans::Yes, o, cols_n, rows, T::one(), gi, src, T::one(), gw);
                }
                if let Some(gx) = gx.as_mut() {
                    let gxi = &mut gx[i * c * h * wd..(i + 1) * c * h * wd];
                    if g.is_pointwise() {
                        gemm(Trans::Yes, Trans::No, rows, o, cols_n, T::one(), wdat, gi, T::zero(), gxi);
                    } else {
                        gemm(Trans::Yes, Trans::No, rows, o, cols_n, T::one(), wdat, gi, T::zero(), &mut gcols);
                        col2im(&gcols, &g, gxi);
                    }
                }
            }
            let mut grads = vec![gx, gw];
            if bp.inputs.len() == 3 {
                grads.push(bp.needs(2).then(|| bias_grad(gout, o, cols_n)));
            }
            grads
        };
        let inputs: Vec<Var> = [x, w].into_iter().chain(b).collect();
        Ok(self.push(value, &inputs, Box::new(backward)))
    }

    /// Transposed convolution, the adjoint of [`Graph::conv2d`] with the same stride and padding.
    /// `x: [N, Ci, H, W]`, `w: [Ci, Co, kh, kw]`, `b: [Co]`.
    pub fn conv2d_transpose(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d_transpose stride must be >= 1".into()));
        }
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let ([n, ci, h, wd], [wci, co, kh, kw]) = (dims4("conv2d_transpose", &xs)?, dims4("conv2d_transpose", &ws)?);
        if ci != wci {
            return Err(Error::shape(
                "conv2d_transpose",
                format!("input has {ci} channels but kernel {ws:?} expects {wci}"),
            ));
        }
        self.check_bias("conv2d_transpose", b, co)?;
        let full_h = (h - 1) * stride + kh;
        let full_w = (wd - 1) * stride + kw;
        if full_h <= 2 * padding || full_w <= 2 * padding {
            return Err(Error::shape("conv2d_transpose", "padding leaves an empty output"));
        }
        let (oh, ow) = (full_h - 2 * padding, full_w - 2 * padding);
        // geometry of the forward conv that maps [Co, oh, ow] -> [Ci, h, wd]
        let g = Geom::new(co, oh, ow, kh, kw, stride, padding)?;
        if g.ho != h || g.wo != wd {
            return Err(Error::shape("conv2d_transpose", "inconsistent output geometry"));
        }
        let (rows, cols_n) = (g.col_rows(), g.col_cols());
        let out_plane = co * oh * ow;
        let mut out = vec![T::zero(); n * out_plane];
        {
            let xd = self.value(x).data();
            let wdat = self.value(w).data();
            let mut cols = vec![T::zero(); rows * cols_n];
            for i in 0..n {
                let xi = &xd[i * ci * cols_n..(i + 1) * ci * cols_n];
                gemm(Trans::Yes, Trans::No, rows, ci, cols_n, T::one(), wdat, xi, T::zero(), &mut cols);
                col2im(&cols, &g, &mut out[i * out_plane..(i + 1) * out_plane]);
            }
            if let Some(b) = b {
                add_bias(&mut out, self.value(b).data(), oh * ow);
            }
        }
        let value = Tensor::from_parts(vec![n, co, oh, ow], out);
        let backward = move |bp: &Backprop<'_, T>| {
            let xd = bp.inputs[0].data();
            let wdat = bp.inputs[1].data();
            let gout = bp.grad;
            let mut gx = bp.needs(0).then(|| vec![T::zero(); xd.len()]);
            let mut gw = bp.needs(1).then(|| vec![T::zero(); wdat.len()]);
            let mut cols = vec![T::zero(); rows * cols_n];
            for i in 0..n {
                im2col(&gout[i * out_plane..(i + 1) * out_plane], &g, &mut cols);
                if let Some(gx) = gx.as_mut() {
                    gemm(
                        Trans::No,
                        Trans::No,
                        ci,
                        rows,
                        cols_n,
                        T::one(),
                        wdat,
                        &cols,
                        T::zero(),
                        &mut gx[i * ci * cols_n..(i + 1) * ci * cols_n],
                    );
                }
                if let Some(gw) = gw.as_mut() {
                    let xi = &xd[i * ci * cols_n..(i + 1) * ci * cols_n];
                    gemm(Trans::No, Trans::Yes, ci, cols_n, rows, T::one(), xi, &cols, T::one(), gw);
                }
            }
            let mut grads = vec![gx, gw];
            if bp.inputs.len() == 3 {
                grads.push(bp.needs(2).then(|| bias_grad(gout, co, oh * ow)));
            }
            grads
        };
        let inputs: Vec<Var> = [x, w].into_iter().chain(b).collect();
        Ok(self.push(value, &inputs, Box::new(backward)))
    }

    /// Per-channel convolution with "same" padding. `x: [N, C, H, W]`, `w: [C, 1, k, k]`, k odd.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let ([n, c, h, wd], [wc, one, k, k2]) = (dims4("depthwise_conv2d", &xs)?, dims4("depthwise_conv2d", &ws)?);
        if wc != c || one != 1 || k != k2 {
            return Err(Error::shape(
                "depthwise_conv2d",
                format!("kernel {ws:?} must be [{c}, 1, k, k] for input {xs:?}"),
            ));
        }
        if k % 2 == 0 {
            return Err(Error::InvalidArgument(format!("depthwise kernel size must be odd, got {k}")));
        }
        self.check_bias("depthwise_conv2d", b, c)?;
        let pad = (k - 1) / 2;
        let g = Geom::new(1, h, wd, k, k, 1, pad)?;
        let plane = h * wd;
        let mut out = vec![T::zero(); n * c * plane];
        {
            let xd = self.value(x).data();
            let wdat = self.value(w).data();
            for (idx, (dst, src)) in out.chunks_exact_mut(plane).zip(xd.chunks_exact(plane)).enumerate() {
                let ch = idx % c;
                dw_forward(src, &wdat[ch * k * k..(ch + 1) * k * k], &g, dst);
            }
            if let Some(b) = b {
                add_bias(&mut out, self.value(b).data(), plane);
            }
        }
        let value = Tensor::from_parts(xs.clone(), out);
        let backward = move |bp: &Backprop<'_, T>| {
            let xd = bp.inputs[0].data();
            let wdat = bp.inputs[1].data();
            let gout = bp.grad;
            let mut gx = bp.needs(0).then(|| vec![T::zero(); xd.len()]);
            let mut gw = bp.needs(1).then(|| vec![T::zero(); wdat.len()]);
            for idx in 0..n * c {
                let ch = idx % c;
                let gi = &gout[idx * plane..(idx + 1) * plane];
                if let Some(gx) = gx.as_mut() {
                    dw_backward_input(gi, &wdat[ch * k * k..(ch + 1) * k * k], &g, &mut gx[idx * plane..(idx + 1) * plane]);
                }
                if let Some(gw) = gw.as_mut() {
                    dw_backward_weight(gi, &xd[idx * plane..(idx + 1) * plane], &g, &mut gw[ch * k * k..(ch + 1) * k * k]);
                }
            }
            let mut grads = vec![gx, gw];
            if bp.inputs.len() == 3 {
                grads.push(bp.needs(2).then(|| bias_grad(gout, c, plane)));
            }
            grads
        };
        let inputs: Vec<Var> = [x, w].into_iter().chain(b).collect();
        Ok(self.push(value, &inputs, Box::new(backward)))
    }

    /// Non-overlapping `f x f` average pooling; `f` must divide both spatial dims.
    pub fn avg_pool2d(&mut self, x: Var, f: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let [n, c, h, w] = dims4("avg_pool2d", &xs)?;
        if f == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::Divisibility { h, w, grid: f });
        }
        let (oh, ow) = (h / f, w / f);
        let inv = T::one() / T::from_usize(f * f).unwrap();
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for (p, dst) in out.chunks_exact_mut(oh * ow).enumerate() {
            let src = &xd[p * h * w..(p + 1) * h * w];
            for y in 0..h {
                for xx in 0..w {
                    dst[(y / f) * ow + xx / f] += src[y * w + xx];
                }
            }
            dst.iter_mut().for_each(|v| *v *= inv);
        }
        let value = Tensor::from_parts(vec![n, c, oh, ow], out);
        let backward = move |bp: &Backprop<'_, T>| {
            let mut gx = vec![T::zero(); n * c * h * w];
            for (p, dst) in gx.chunks_exact_mut(h * w).enumerate() {
                let src = &bp.grad[p * oh * ow..(p + 1) * oh * ow];
                for y in 0..h {
                    for xx in 0..w {
                        dst[y * w + xx] = src[(y / f) * ow + xx / f] * inv;
                    }
                }
            }
            vec![Some(gx)]
        };
        Ok(self.push(value, &[x], Box::new(backward)))
    }
}

fn dims4(op: &'static str, s: &[usize]) -> Result<[usize; 4]> {
    <[usize; 4]>::try_from(s).map_err(|_| Error::shape(op, format!("expected a rank-4 tensor, got {s:?}")))
}

fn dw_forward<T: Real>(src: &[T], kernel: &[T], g: &Geom, dst: &mut [T]) {
    let (h, w, k, pad) = (g.h, g.w, g.kh, g.pad);
    for ky in 0..k {
        let (y0, y1) = g.range(ky, h, h);
        for kx in 0..k {
            let (x0, x1) = g.range(kx, w, w);
            if x0 == x1 {
                continue;
            }
            let wv = kernel[ky * k + kx];
            if wv == T::zero() {
                continue;
            }
            for y in y0..y1 {
                let iy = y + ky - pad;
                let s = &src[iy * w + x0 + kx - pad..iy * w + x1 + kx - pad];
                let d = &mut dst[y * w + x0..y * w + x1];
                d.iter_mut().zip(s).for_each(|(o, &v)| *o += wv * v);
            }
        }
    }
}

fn dw_backward_input<T: Real>(gout: &[T], kernel: &[T], g: &Geom, gx: &mut [T]) {
    let (h, w, k, pad) = (g.h, g.w, g.kh, g.pad);
    for ky in 0..k {
        let (y0, y1) = g.range(ky, h, h);
        for kx in 0..k {
            let (x0, x1) = g.range(kx, w, w);
            if x0 == x1 {
                continue;
            }
            let wv = kernel[ky * k + kx];
            for y in y0..y1 {
                let iy = y + ky - pad;
                let s = &gout[y * w + x0..y * w + x1];
                let d = &mut gx[iy * w + x0 + kx - pad..iy * w + x1 + kx - pad];
                d.iter_mut().zip(s).for_each(|(o, &v)| *o += wv * v);
            }
        }
    }
}

fn dw_backward_weight<T: Real>(gout: &[T], src: &[T], g: &Geom, gw: &mut [T]) {
    let (h, w, k, pad) = (g.h, g.w, g.kh, g.pad);
    for ky in 0..k {
        let (y0, y1) = g.range(ky, h, h);
        for kx in 0..k {
            let (x0, x1) = g.range(kx, w, w);
            if x0 == x1 {
                continue;
            }
            let mut acc = T::zero();
            for y in y0..y1 {
                let iy = y + ky - pad;
                let s = &src[iy * w + x0 + kx - pad..iy * w + x1 + kx - pad];
                let gg = &gout[y * w + x0..y * w + x1];
                acc += s.iter().zip(gg).map(|(&a, &b)| a * b).sum::<T>();
            }
            gw[ky * k + kx] += acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct six-loop cross-correlation.
    fn conv_reference(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
        let [n, c, h, wd] = <[usize; 4]>::try_from(x.shape()).unwrap();
        let [o, _, kh, kw] = <[usize; 4]>::try_from(w.shape()).unwrap();
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * o * ho * wo];
        for i in 0..n {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[oc];
                        for ic in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.at(&[i, ic, iy as usize, ix as usize]) * w.at(&[oc, ic, ky, kx]);
                                }
                            }
                        }
                        out[((i * o + oc) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        Tensor::new(&[n, o, ho, wo], out).unwrap()
    }

    #[test]
    fn pointwise_scale() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let w = g.constant(Tensor::full(&[1, 1, 1, 1], 2.0));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[2.0; 9]);
    }

    #[test]
    fn identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::<f64>::new();
        let xt = Tensor::randn(&[1, 1, 4, 5], 1.0, &mut rng);
        let x = g.constant(xt.clone());
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = g.constant(Tensor::new(&[1, 1, 3, 3], k).unwrap());
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(g.value(y), &xt);
    }

    #[test]
    fn matches_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)] {
            let xt = Tensor::randn(&[1, 2, 5, 5], 1.0, &mut rng);
            let wt = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut rng);
            let bias = [0.1, -0.2, 0.3];
            let mut g = Graph::<f64>::new();
            let x = g.constant(xt.clone());
            let w = g.constant(wt.clone());
            let b = g.constant(Tensor::new(&[3], bias.to_vec()).unwrap());
            let y = g.conv2d(x, w, Some(b), stride, pad).unwrap();
            let expect = conv_reference(&xt, &wt, &bias, stride, pad);
            assert_eq!(g.shape(y), expect.shape());
            assert!(g.value(y).max_abs_diff(&expect) < 1e-12, "stride {stride} pad {pad}");
        }
    }

    #[test]
    fn kernel_larger_than_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for (h, w) in [(2, 2), (1, 3), (3, 1)] {
            let xt = Tensor::randn(&[2, 2, h, w], 1.0, &mut rng);
            let wt = Tensor::randn(&[1, 2, 7, 7], 1.0, &mut rng);
            let mut g = Graph::<f64>::new();
            let x = g.constant(xt.clone());
            let wv = g.constant(wt.clone());
            let y = g.conv2d(x, wv, None, 1, 3).unwrap();
            let expect = conv_reference(&xt, &wt, &[0.0], 1, 3);
            assert!(g.value(y).max_abs_diff(&expect) < 1e-12, "{h}x{w}");
        }
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros(&[1, 3, 1, 1]));
        assert!(matches!(g.conv2d(x, w, None, 1, 0), Err(Error::Shape { .. })));
    }

    #[test]
    fn transpose_expands_single_pixel() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[1, 1, 1, 1], 3.5));
        let w = g.constant(Tensor::ones(&[1, 1, 2, 2]));
        let y = g.conv2d_transpose(x, w, None, 2, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[3.5; 4]);
        assert!(g.conv2d_transpose(x, w, None, 0, 0).is_err());
    }

    #[test]
    fn transpose_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (stride, k, pad) in [(2, 2, 0), (1, 3, 1), (2, 3, 1), (3, 3, 0)] {
            let y = Tensor::<f64>::randn(&[2, 3, 7, 7], 1.0, &mut rng);
            let kern = Tensor::<f64>::randn(&[4, 3, k, k], 1.0, &mut rng);
            let mut g = Graph::<f64>::new();
            let yv = g.constant(y.clone());
            let kv = g.constant(kern);
            let cy = g.conv2d(yv, kv, None, stride, pad).unwrap();
            let x = Tensor::<f64>::randn(g.shape(cy), 1.0, &mut rng);
            let xv = g.constant(x.clone());
            let tx = g.conv2d_transpose(xv, kv, None, stride, pad).unwrap();
            if g.shape(tx) != y.shape() {
                // output size rounding: only compare when geometry is exactly invertible
                continue;
            }
            let lhs: f64 = g.value(cy).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = y.data().iter().zip(g.value(tx).data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0), "stride {stride} k {k}");
        }
    }

    #[test]
    fn transpose_of_zero_is_zero() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let w = g.constant(Tensor::ones(&[2, 4, 2, 2]));
        let y = g.conv2d_transpose(x, w, None, 2, 0).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn depthwise_identity_and_independence() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xt = Tensor::<f64>::randn(&[1, 2, 5, 6], 1.0, &mut rng);
        let mut g = Graph::<f64>::new();
        let x = g.constant(xt.clone());
        let mut k = vec![0.0; 18];
        k[4] = 1.0;
        k[9 + 4] = 1.0;
        let w = g.constant(Tensor::new(&[2, 1, 3, 3], k.clone()).unwrap());
        let y = g.depthwise_conv2d(x, w, None).unwrap();
        assert_eq!(g.value(y), &xt);
        // zero kernel on channel 1
        k[9 + 4] = 0.0;
        let w2 = g.constant(Tensor::new(&[2, 1, 3, 3], k).unwrap());
        let y2 = g.depthwise_conv2d(x, w2, None).unwrap();
        let v = g.value(y2).data();
        assert_eq!(&v[..30], &xt.data()[..30]);
        assert!(v[30..].iter().all(|&a| a == 0.0));
    }

    #[test]
    fn depthwise_matches_grouped_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (k, h, w) in [(3, 6, 5), (5, 6, 5), (7, 6, 5), (7, 2, 2), (5, 1, 3)] {
            let xt = Tensor::<f64>::randn(&[2, 3, h, w], 1.0, &mut rng);
            let wt = Tensor::<f64>::randn(&[3, 1, k, k], 1.0, &mut rng);
            let mut g = Graph::<f64>::new();
            let x = g.constant(xt.clone());
            let wv = g.constant(wt.clone());
            let y = g.depthwise_conv2d(x, wv, None).unwrap();
            // grouped reference: each channel as an independent single-channel conv
            for n in 0..2 {
                for c in 0..3 {
                    let xc = Tensor::new(&[1, 1, h, w], (0..h * w).map(|i| xt.at(&[n, c, i / w, i % w])).collect()).unwrap();
                    let wc = Tensor::new(&[1, 1, k, k], (0..k * k).map(|i| wt.at(&[c, 0, i / k, i % k])).collect()).unwrap();
                    let r = conv_reference(&xc, &wc, &[0.0], 1, (k - 1) / 2);
                    for i in 0..h * w {
                        assert!((r.data()[i] - g.value(y).at(&[n, c, i / w, i % w])).abs() < 1e-12, "k={k} {h}x{w}");
                    }
                }
            }
        }
    }

    #[test]
    fn depthwise_rejects_wrong_channels() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros(&[3, 1, 3, 3]));
        assert!(g.depthwise_conv2d(x, w, None).is_err());
    }

    #[test]
    fn avg_pool_means_blocks() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[1, 1, 2, 4], &[1., 2., 3., 4., 5., 6., 7., 8.]).unwrap());
        let y = g.avg_pool2d(x, 2).unwrap();
        assert_eq!(g.value(y).data(), &[3.5, 5.5]);
        assert!(g.avg_pool2d(x, 3).is_err());
    }
}
