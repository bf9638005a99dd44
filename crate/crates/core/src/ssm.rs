//! Diagonal state-space machinery: zero-order-hold discretization and the
//! input-dependent ("selective") linear recurrence
//!
//! ```text
//! h_t = exp(Δ_t A) h_{t-1} + Δ_t φ(Δ_t A) B_t x_t,    y_t = C_t · h_t
//! ```
//!
//! where `φ(z) = (e^z - 1) / z` is the ZOH input factor, so that
//! `Δ φ(ΔA) B = (ΔA)^{-1} (exp(ΔA) - I) ΔB` for diagonal `A`.

use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::{sigmoid_scalar, softplus_scalar, Graph, Var};
use crate::autodiff::Backprop;
use crate::error::{Error, Result};
use crate::tensor::{gemm, Real, Tensor, Trans};

/// Below this `|ΔA|` the input weight uses the first-order limit `B̄ = ΔB`.
pub const ZOH_SMALL_STEP: f64 = 1e-6;

/// `(e^z - 1) / z` with its `z -> 0` limit.
pub fn zoh_phi<T: Real>(z: T) -> T {
    if z.abs() < T::from_f64_lossy(ZOH_SMALL_STEP) {
        T::one()
    } else {
        z.exp_m1() / z
    }
}

/// Derivative of [`zoh_phi`].
pub fn zoh_phi_prime<T: Real>(z: T) -> T {
    if z.abs() < T::from_f64_lossy(0.1) {
        // sum_k k z^(k-1) / (k+1)!
        let c = |v: f64| T::from_f64_lossy(v);
        c(0.5) + z * (c(1.0 / 3.0) + z * (c(1.0 / 8.0) + z * (c(1.0 / 30.0) + z * (c(1.0 / 144.0) + z * (c(1.0 / 840.0) + z * c(1.0 / 5760.0))))))
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    }
}

/// Per-state discrete parameters for one token.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizedSsm<T> {
    pub a_bar: Vec<T>,
    pub b_bar: Vec<T>,
}

/// Zero-order-hold discretization of a diagonal system with step `delta`.
pub fn zoh_discretize<T: Real>(a: &[T], b: &[T], delta: T) -> Result<DiscretizedSsm<T>> {
    if !(delta > T::zero()) || !delta.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "discretization step must be positive and finite, got {delta:?}"
        )));
    }
    if a.len() != b.len() {
        return Err(Error::shape(
            "zoh_discretize",
            format!("A has {} states but B has {}", a.len(), b.len()),
        ));
    }
    let (a_bar, b_bar) = a
        .iter()
        .zip(b)
        .map(|(&an, &bn)| {
            let z = delta * an;
            (z.exp(), delta * zoh_phi(z) * bn)
        })
        .unzip();
    Ok(DiscretizedSsm { a_bar, b_bar })
}

/// Selective parameters for a batch of sequences, channel-major:
/// `x, delta: [batch, channels, len]`, `a: [channels, states]`, `b, c: [batch, states, len]`.
#[derive(Debug, Clone, Copy)]
pub struct ScanInputs<'a, T> {
    pub batch: usize,
    pub channels: usize,
    pub states: usize,
    pub len: usize,
    pub x: &'a [T],
    pub delta: &'a [T],
    pub a: &'a [T],
    pub b: &'a [T],
    pub c: &'a [T],
}

impl<T: Real> ScanInputs<'_, T> {
    fn validate(&self) -> Result<()> {
        let (bs, d, n, l) = (self.batch, self.channels, self.states, self.len);
        let ok = self.x.len() == bs * d * l
            && self.delta.len() == bs * d * l
            && self.a.len() == d * n
            && self.b.len() == bs * n * l
            && self.c.len() == bs * n * l;
        if !ok {
            return Err(Error::shape(
                "selective_scan",
                format!("buffers inconsistent with batch={bs} channels={d} states={n} len={l}"),
            ));
        }
        Ok(())
    }

    /// `[len, states]` views of B and C for one batch item.
    fn token_major(&self, bi: usize) -> (Vec<T>, Vec<T>) {
        let (n, l) = (self.states, self.len);
        let mut bt = vec![T::zero(); l * n];
        let mut ct = vec![T::zero(); l * n];
        for s in 0..n {
            let off = (bi * n + s) * l;
            for t in 0..l {
                bt[t * n + s] = self.b[off + t];
                ct[t * n + s] = self.c[off + t];
            }
        }
        (bt, ct)
    }
}

/// Reference recurrence, one token at a time. Returns `y: [batch, channels, len]`.
pub fn scan_sequential<T: Real>(inp: &ScanInputs<'_, T>) -> Result<Vec<T>> {
    inp.validate()?;
    let (d, n, l) = (inp.channels, inp.states, inp.len);
    let mut y = vec![T::zero(); inp.batch * d * l];
    let mut h = vec![T::zero(); n];
    for bi in 0..inp.batch {
        let (bt, ct) = inp.token_major(bi);
        for ch in 0..d {
            let row = (bi * d + ch) * l;
            let a = &inp.a[ch * n..(ch + 1) * n];
            h.iter_mut().for_each(|v| *v = T::zero());
            for t in 0..l {
                let (dt, xt) = (inp.delta[row + t], inp.x[row + t]);
                let mut acc = T::zero();
                for s in 0..n {
                    let z = dt * a[s];
                    h[s] = z.exp() * h[s] + dt * zoh_phi(z) * bt[t * n + s] * xt;
                    acc += ct[t * n + s] * h[s];
                }
                y[row + t] = acc;
            }
        }
    }
    Ok(y)
}

/// Default chunk length of [`scan_parallel`].
pub const SCAN_CHUNK: usize = 64;

/// Chunked associative scan of the same recurrence.
///
/// Each `(Ā_t, B̄_t x_t)` pair is an affine map `h -> Ā_t h + B̄_t x_t`;
/// composition of affine maps is associative. Every chunk is reduced to its
/// local prefix maps independently, chunk carries are propagated, then each
/// chunk applies its incoming carry. Chunks and channels run on the rayon pool;
/// the result does not depend on the thread count.
pub fn scan_parallel<T: Real>(inp: &ScanInputs<'_, T>, chunk: usize) -> Result<Vec<T>> {
    inp.validate()?;
    let chunk = chunk.max(1);
    let (d, n, l) = (inp.channels, inp.states, inp.len);
    let token_major: Vec<(Vec<T>, Vec<T>)> = (0..inp.batch).map(|bi| inp.token_major(bi)).collect();
    let mut y = vec![T::zero(); inp.batch * d * l];
    y.par_chunks_mut(l).enumerate().for_each(|(row_id, y_row)| {
        let (bi, ch) = (row_id / d, row_id % d);
        let (bt, ct) = &token_major[bi];
        let row = row_id * l;
        let a = &inp.a[ch * n..(ch + 1) * n];
        let n_chunks = l.div_ceil(chunk);
        // local prefix maps: prod[t] = Π Ā within the chunk up to t, loc[t] = state from zero carry
        let locals: Vec<(Vec<T>, Vec<T>)> = (0..n_chunks)
            .into_par_iter()
            .map(|k| {
                let (t0, t1) = (k * chunk, ((k + 1) * chunk).min(l));
                let mut prod = vec![T::zero(); (t1 - t0) * n];
                let mut loc = vec![T::zero(); (t1 - t0) * n];
                for t in t0..t1 {
                    let (dt, xt) = (inp.delta[row + t], inp.x[row + t]);
                    let i = t - t0;
                    for s in 0..n {
                        let z = dt * a[s];
                        let (ab, bx) = (z.exp(), dt * zoh_phi(z) * bt[t * n + s] * xt);
                        let (p_prev, l_prev) = if i == 0 {
                            (T::one(), T::zero())
                        } else {
                            (prod[(i - 1) * n + s], loc[(i - 1) * n + s])
                        };
                        prod[i * n + s] = ab * p_prev;
                        loc[i * n + s] = ab * l_prev + bx;
                    }
                }
                (prod, loc)
            })
            .collect();
        // carries between chunks
        let mut carries = vec![vec![T::zero(); n]; n_chunks];
        for k in 1..n_chunks {
            let (prod, loc) = &locals[k - 1];
            let last = prod.len() / n - 1;
            for s in 0..n {
                carries[k][s] = prod[last * n + s] * carries[k - 1][s] + loc[last * n + s];
            }
        }
        for (k, ((prod, loc), carry)) in locals.iter().zip(&carries).enumerate() {
            let t0 = k * chunk;
            for i in 0..prod.len() / n {
                let t = t0 + i;
                let mut acc = T::zero();
                for s in 0..n {
                    let h = loc[i * n + s] + prod[i * n + s] * carry[s];
                    acc += ct[t * n + s] * h;
                }
                y_row[t] = acc;
            }
        }
    });
    Ok(y)
}

/// Gradients of the recurrence, by reverse-mode through the unrolled loop.
struct ScanGrads<T> {
    x: Vec<T>,
    delta: Vec<T>,
    a: Vec<T>,
    b: Vec<T>,
    c: Vec<T>,
}

fn scan_backward<T: Real>(inp: &ScanInputs<'_, T>, gy: &[T]) -> ScanGrads<T> {
    let (bs, d, n, l) = (inp.batch, inp.channels, inp.states, inp.len);
    let mut g = ScanGrads {
        x: vec![T::zero(); bs * d * l],
        delta: vec![T::zero(); bs * d * l],
        a: vec![T::zero(); d * n],
        b: vec![T::zero(); bs * n * l],
        c: vec![T::zero(); bs * n * l],
    };
    let mut hist = vec![T::zero(); l * n];
    let mut gh = vec![T::zero(); n];
    let mut gbt = vec![T::zero(); l * n];
    let mut gct = vec![T::zero(); l * n];
    for bi in 0..bs {
        let (bt, ct) = inp.token_major(bi);
        gbt.iter_mut().for_each(|v| *v = T::zero());
        gct.iter_mut().for_each(|v| *v = T::zero());
        for ch in 0..d {
            let row = (bi * d + ch) * l;
            let a = &inp.a[ch * n..(ch + 1) * n];
            // forward replay
            for t in 0..l {
                let (dt, xt) = (inp.delta[row + t], inp.x[row + t]);
                for s in 0..n {
                    let z = dt * a[s];
                    let prev = if t == 0 { T::zero() } else { hist[(t - 1) * n + s] };
                    hist[t * n + s] = z.exp() * prev + dt * zoh_phi(z) * bt[t * n + s] * xt;
                }
            }
            gh.iter_mut().for_each(|v| *v = T::zero());
            let ga = &mut g.a[ch * n..(ch + 1) * n];
            for t in (0..l).rev() {
                let (dt, xt, gyt) = (inp.delta[row + t], inp.x[row + t], gy[row + t]);
                let mut gdt = T::zero();
                let mut gx = T::zero();
                for s in 0..n {
                    let i = t * n + s;
                    let ght = gh[s] + ct[i] * gyt;
                    gct[i] += gyt * hist[i];
                    let prev = if t == 0 { T::zero() } else { hist[i - n] };
                    let z = dt * a[s];
                    let ab = z.exp();
                    let phi = zoh_phi(z);
                    let bb = dt * phi * bt[i];
                    let g_ab = ght * prev;
                    let g_bb = ght * xt;
                    gx += ght * bb;
                    // d(Ā)/dΔ = Ā A,  d(B̄)/dΔ = e^z B
                    gdt += g_ab * ab * a[s] + g_bb * ab * bt[i];
                    ga[s] += g_ab * ab * dt + g_bb * dt * dt * zoh_phi_prime(z) * bt[i];
                    gbt[i] += g_bb * dt * phi;
                    gh[s] = ght * ab;
                }
                g.x[row + t] = gx;
                g.delta[row + t] = gdt;
            }
        }
        for s in 0..n {
            let off = (bi * n + s) * l;
            for t in 0..l {
                g.b[off + t] = gbt[t * n + s];
                g.c[off + t] = gct[t * n + s];
            }
        }
    }
    g
}

/// Which forward kernel a graph scan uses. Both share the same backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScanKernel {
    #[default]
    Sequential,
    Parallel,
}

impl<T: Real> Graph<T> {
    /// Differentiable selective scan.
    ///
    /// `x, delta: [B, D, L]`, `a: [D, N]`, `b, c: [B, N, L]` -> `y: [B, D, L]`.
    /// `delta` must already be positive (e.g. the output of a softplus).
    pub fn selective_scan(&mut self, x: Var, delta: Var, a: Var, b: Var, c: Var, kernel: ScanKernel) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let [bs, d, l] = <[usize; 3]>::try_from(xs.as_slice())
            .map_err(|_| Error::shape("selective_scan", format!("x must be [B, D, L], got {xs:?}")))?;
        let n = self.shape(a).get(1).copied().unwrap_or(0);
        let expect: [(&str, Var, Vec<usize>); 4] = [
            ("delta", delta, vec![bs, d, l]),
            ("a", a, vec![d, n]),
            ("b", b, vec![bs, n, l]),
            ("c", c, vec![bs, n, l]),
        ];
        for (name, v, shape) in &expect {
            if self.shape(*v) != shape.as_slice() {
                return Err(Error::shape(
                    "selective_scan",
                    format!("{name} has shape {:?}, expected {shape:?}", self.shape(*v)),
                ));
            }
        }
        let inp = ScanInputs {
            batch: bs,
            channels: d,
            states: n,
            len: l,
            x: self.value(x).data(),
            delta: self.value(delta).data(),
            a: self.value(a).data(),
            b: self.value(b).data(),
            c: self.value(c).data(),
        };
        let y = match kernel {
            ScanKernel::Sequential => scan_sequential(&inp)?,
            ScanKernel::Parallel => scan_parallel(&inp, SCAN_CHUNK)?,
        };
        let value = Tensor::from_parts(vec![bs, d, l], y);
        let backward = move |bp: &Backprop<'_, T>| {
            let inp = ScanInputs {
                batch: bs,
                channels: d,
                states: n,
                len: l,
                x: bp.inputs[0].data(),
                delta: bp.inputs[1].data(),
                a: bp.inputs[2].data(),
                b: bp.inputs[3].data(),
                c: bp.inputs[4].data(),
            };
            let g = scan_backward(&inp, bp.grad);
            [g.x, g.delta, g.a, g.b, g.c]
                .into_iter()
                .enumerate()
                .map(|(i, v)| bp.needs(i).then_some(v))
                .collect()
        };
        Ok(self.push(value, &[x, delta, a, b, c], Box::new(backward)))
    }
}

/// Parameters of a standalone selective SSM over `D` channels with `N` states.
///
/// Each token `x_t ∈ R^D` is projected to `(Δ_low, B_t, C_t)` by `x_proj`;
/// `Δ_t = softplus(dt_proj Δ_low + dt_bias)`.
#[derive(Debug, Clone)]
pub struct SsmParams<T> {
    /// Diagonal state matrix entries, `[D, N]`, all negative.
    pub a: Tensor<T>,
    /// `[R + 2N, D]`.
    pub x_proj: Tensor<T>,
    /// `[D, R]`.
    pub dt_proj: Tensor<T>,
    /// `[D]`.
    pub dt_bias: Tensor<T>,
}

/// Token-wise selective parameters in channel-major layout (batch of one).
#[derive(Debug, Clone)]
pub struct Selection<T> {
    pub delta: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
}

/// `A_n = -(n + 1)` for every channel.
pub fn init_a<T: Real>(channels: usize, states: usize) -> Tensor<T> {
    let data = (0..channels * states)
        .map(|i| -T::from_usize(i % states + 1).unwrap())
        .collect();
    Tensor::from_parts(vec![channels, states], data)
}

/// Biases whose softplus is log-uniform in `[1e-3, 1e-1]`.
pub fn init_dt_bias<T: Real, R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Tensor<T> {
    let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
    let data = (0..channels)
        .map(|_| {
            let dt = rng.gen_range(lo..hi).exp();
            // inverse softplus
            T::from_f64_lossy(dt + (-(-dt).exp_m1()).ln())
        })
        .collect();
    Tensor::from_parts(vec![channels], data)
}

impl<T: Real> SsmParams<T> {
    pub fn init<R: Rng + ?Sized>(channels: usize, states: usize, rank: usize, rng: &mut R) -> Self {
        let bound = (rank as f64).powf(-0.5);
        SsmParams {
            a: init_a(channels, states),
            x_proj: Tensor::randn(&[rank + 2 * states, channels], (channels as f64).powf(-0.5), rng),
            dt_proj: Tensor::rand_uniform(&[channels, rank], -bound, bound, rng),
            dt_bias: init_dt_bias(channels, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn states(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn rank(&self) -> usize {
        self.dt_proj.shape()[1]
    }

    fn validate(&self) -> Result<()> {
        let (d, n, r) = (self.channels(), self.states(), self.rank());
        if self.x_proj.shape() != [r + 2 * n, d] || self.dt_bias.shape() != [d] {
            return Err(Error::shape("SsmParams", "projection shapes are inconsistent"));
        }
        Ok(())
    }

    /// Projects `x: [L, D]` to the per-token selective parameters.
    pub fn select(&self, x: &Tensor<T>) -> Result<Selection<T>> {
        self.validate()?;
        let (d, n, r) = (self.channels(), self.states(), self.rank());
        let [l, xd] = <[usize; 2]>::try_from(x.shape())
            .map_err(|_| Error::shape("selective_scan", format!("x must be [L, D], got {:?}", x.shape())))?;
        if xd != d {
            return Err(Error::shape("selective_scan", format!("x has {xd} channels, params {d}")));
        }
        if l == 0 {
            return Err(Error::shape("selective_scan", "sequence must be non-empty"));
        }
        // proj: [L, R + 2N]
        let mut proj = vec![T::zero(); l * (r + 2 * n)];
        gemm(Trans::No, Trans::Yes, l, d, r + 2 * n, T::one(), x.data(), self.x_proj.data(), T::zero(), &mut proj);
        let mut delta = vec![T::zero(); d * l];
        let (mut b, mut c) = (vec![T::zero(); n * l], vec![T::zero(); n * l]);
        for t in 0..l {
            let p = &proj[t * (r + 2 * n)..(t + 1) * (r + 2 * n)];
            for ch in 0..d {
                let mut v = self.dt_bias.data()[ch];
                for k in 0..r {
                    v += self.dt_proj.data()[ch * r + k] * p[k];
                }
                delta[ch * l + t] = softplus_scalar(v);
            }
            for s in 0..n {
                b[s * l + t] = p[r + s];
                c[s * l + t] = p[r + n + s];
            }
        }
        Ok(Selection { delta, b, c })
    }

    fn run(&self, x: &Tensor<T>, kernel: ScanKernel) -> Result<Tensor<T>> {
        let sel = self.select(x)?;
        let (l, d) = (x.shape()[0], self.channels());
        let mut xt = vec![T::zero(); d * l];
        for t in 0..l {
            for ch in 0..d {
                xt[ch * l + t] = x.data()[t * d + ch];
            }
        }
        let inp = ScanInputs {
            batch: 1,
            channels: d,
            states: self.states(),
            len: l,
            x: &xt,
            delta: &sel.delta,
            a: self.a.data(),
            b: &sel.b,
            c: &sel.c,
        };
        let y = match kernel {
            ScanKernel::Sequential => scan_sequential(&inp)?,
            ScanKernel::Parallel => scan_parallel(&inp, SCAN_CHUNK)?,
        };
        let mut out = vec![T::zero(); l * d];
        for t in 0..l {
            for ch in 0..d {
                out[t * d + ch] = y[ch * l + t];
            }
        }
        Ok(Tensor::from_parts(vec![l, d], out))
    }
}

/// Sequential selective scan of `x: [L, D]`.
pub fn selective_scan<T: Real>(x: &Tensor<T>, params: &SsmParams<T>) -> Result<Tensor<T>> {
    params.run(x, ScanKernel::Sequential)
}

/// Associative-scan evaluation of [`selective_scan`].
pub fn parallel_scan<T: Real>(x: &Tensor<T>, params: &SsmParams<T>) -> Result<Tensor<T>> {
    params.run(x, ScanKernel::Parallel)
}

/// Logistic of a scalar; re-exported for block code that gates with it.
pub fn sigmoid<T: Real>(x: T) -> T {
    sigmoid_scalar(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zoh_scalar_case() {
        let ln2 = std::f64::consts::LN_2;
        let d = zoh_discretize(&[-1.0f64], &[1.0], ln2).unwrap();
        assert!((d.a_bar[0] - 0.5).abs() < 1e-12);
        assert!((d.b_bar[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zoh_zero_step_limit() {
        let delta = 1e-12;
        let d = zoh_discretize(&[-1.0f64], &[3.0], delta).unwrap();
        assert!((d.a_bar[0] - 1.0).abs() < 1e-11);
        assert!(d.b_bar[0].abs() < 1e-10);
        assert!((d.b_bar[0] / delta - 3.0).abs() < 1e-9);
    }

    #[test]
    fn zoh_rejects_nonpositive_step() {
        assert!(zoh_discretize(&[-1.0f64], &[1.0], 0.0).is_err());
        assert!(zoh_discretize(&[-1.0f64], &[1.0], -0.5).is_err());
        assert!(zoh_discretize(&[-1.0f64], &[1.0, 2.0], 0.5).is_err());
    }

    #[test]
    fn phi_prime_series_matches_closed_form_near_threshold() {
        for z in [-0.099f64, -0.05, 0.05, 0.099] {
            let series = zoh_phi_prime(z);
            let closed = (z * z.exp() - z.exp_m1()) / (z * z);
            assert!((series - closed).abs() < 1e-10, "z={z}");
        }
        let z = -0.1000001f64;
        let h = 1e-6;
        let fd = (zoh_phi(z + h) - zoh_phi(z - h)) / (2.0 * h);
        assert!((fd - zoh_phi_prime(z)).abs() < 1e-8);
    }

    fn constant_inputs(len: usize, a: f64, delta: f64, b: f64, c: f64, x: Vec<f64>) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        (x, vec![delta; len], vec![a], vec![b; len], vec![c; len])
    }

    #[test]
    fn zero_readout_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = SsmParams::<f64>::init(3, 4, 1, &mut rng);
        let mut p0 = p.clone();
        // C rows of x_proj are the last N rows
        let (r, n, d) = (p.rank(), p.states(), p.channels());
        for row in r + n..r + 2 * n {
            for ch in 0..d {
                p0.x_proj.data_mut()[row * d + ch] = 0.0;
            }
        }
        let x = Tensor::randn(&[9, 3], 1.0, &mut rng);
        let y = selective_scan(&x, &p0).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn impulse_response_is_geometric() {
        let (a, delta, b, c) = (-0.7f64, 0.3f64, 1.3f64, 0.9f64);
        let len = 12;
        let mut x = vec![0.0; len];
        x[0] = 1.0;
        let (x, dl, av, bv, cv) = constant_inputs(len, a, delta, b, c, x);
        let inp = ScanInputs { batch: 1, channels: 1, states: 1, len, x: &x, delta: &dl, a: &av, b: &bv, c: &cv };
        let y = scan_sequential(&inp).unwrap();
        let d = zoh_discretize(&[a], &[b], delta).unwrap();
        for (t, &yt) in y.iter().enumerate() {
            let expect = c * d.b_bar[0] * d.a_bar[0].powi(t as i32);
            assert!((yt - expect).abs() < 1e-14, "t={t}");
        }
    }

    /// Per-step loop that discretizes each token explicitly.
    fn naive(x: &Tensor<f64>, p: &SsmParams<f64>) -> Tensor<f64> {
        let sel = p.select(x).unwrap();
        let (l, d, n) = (x.shape()[0], p.channels(), p.states());
        let mut out = vec![0.0; l * d];
        for ch in 0..d {
            let a: Vec<f64> = (0..n).map(|s| p.a.at(&[ch, s])).collect();
            let mut h = vec![0.0; n];
            for t in 0..l {
                let b: Vec<f64> = (0..n).map(|s| sel.b[s * l + t]).collect();
                let disc = zoh_discretize(&a, &b, sel.delta[ch * l + t]).unwrap();
                let mut y = 0.0;
                for s in 0..n {
                    h[s] = disc.a_bar[s] * h[s] + disc.b_bar[s] * x.at(&[t, ch]);
                    y += sel.c[s * l + t] * h[s];
                }
                out[t * d + ch] = y;
            }
        }
        Tensor::new(&[l, d], out).unwrap()
    }

    #[test]
    fn sequential_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = SsmParams::<f64>::init(3, 2, 1, &mut rng);
        let x = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let y = selective_scan(&x, &p).unwrap();
        assert!(y.max_abs_diff(&naive(&x, &p)) < 1e-6);
    }

    #[test]
    fn parallel_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = SsmParams::<f64>::init(4, 3, 1, &mut rng);
        let x1 = Tensor::randn(&[1, 4], 1.0, &mut rng);
        assert_eq!(parallel_scan(&x1, &p).unwrap(), selective_scan(&x1, &p).unwrap());
        let z = Tensor::zeros(&[17, 4]);
        assert!(parallel_scan(&z, &p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn discretized_decay_in_unit_interval(a in -50.0f64..-1e-3, delta in 1e-4f64..5.0) {
            let d = zoh_discretize(&[a], &[1.0], delta).unwrap();
            prop_assert!(d.a_bar[0] > 0.0 && d.a_bar[0] < 1.0);
        }

        #[test]
        fn state_stays_bounded(a in -5.0f64..-0.05, delta in 0.01f64..1.0, b in -2.0f64..2.0,
                               xs in prop::collection::vec(-3.0f64..3.0, 1..60)) {
            let len = xs.len();
            let d = zoh_discretize(&[a], &[b], delta).unwrap();
            let bound = xs.iter().map(|x| (d.b_bar[0] * x).abs()).fold(0.0, f64::max) / (1.0 - d.a_bar[0]);
            // with C = 1 the output equals the state
            let (x, dl, av, bv, cv) = constant_inputs(len, a, delta, b, 1.0, xs);
            let inp = ScanInputs { batch: 1, channels: 1, states: 1, len, x: &x, delta: &dl, a: &av, b: &bv, c: &cv };
            let h = scan_sequential(&inp).unwrap();
            prop_assert!(h.iter().all(|v| v.abs() <= bound * (1.0 + 1e-12) + 1e-300));
        }
    }
}
