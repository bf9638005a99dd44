use super::{Backprop, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Real, Tensor, Trans};

impl<T: Real> Graph<T> {
    /// `[m, k] @ [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (&[m, k], &[k2, n]) = (sa.as_slice(), sb.as_slice()) else {
            return Err(Error::shape("matmul", format!("expected 2-D operands, got {sa:?} and {sb:?}")));
        };
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dims differ: {sa:?} @ {sb:?}")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(Trans::No, Trans::No, m, k, n, T::one(), self.value(a).data(), self.value(b).data(), T::zero(), &mut out);
        let value = Tensor::from_parts(vec![m, n], out);
        let backward = move |bp: &Backprop<'_, T>| {
            let (ad, bd, g) = (bp.inputs[0].data(), bp.inputs[1].data(), bp.grad);
            let ga = bp.needs(0).then(|| {
                let mut ga = vec![T::zero(); m * k];
                gemm(Trans::No, Trans::Yes, m, n, k, T::one(), g, bd, T::zero(), &mut ga);
                ga
            });
            let gb = bp.needs(1).then(|| {
                let mut gb = vec![T::zero(); k * n];
                gemm(Trans::Yes, Trans::No, k, m, n, T::one(), ad, g, T::zero(), &mut gb);
                gb
            });
            vec![ga, gb]
        };
        Ok(self.push(value, &[a, b], Box::new(backward)))
    }

    /// Applies `w: [out, in]` to the last axis: `x @ w^T`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (Some(&din), &[dout, win]) = (sx.last(), sw.as_slice()) else {
            return Err(Error::shape("linear", format!("bad operands {sx:?}, {sw:?}")));
        };
        if din != win {
            return Err(Error::shape("linear", format!("input width {din} but weight {sw:?}")));
        }
        let rows = self.value(x).numel() / din.max(1);
        let mut out = vec![T::zero(); rows * dout];
        gemm(Trans::No, Trans::Yes, rows, din, dout, T::one(), self.value(x).data(), self.value(w).data(), T::zero(), &mut out);
        let mut out_shape = sx.clone();
        *out_shape.last_mut().unwrap() = dout;
        let value = Tensor::from_parts(out_shape, out);
        let backward = move |bp: &Backprop<'_, T>| {
            let (xd, wd, g) = (bp.inputs[0].data(), bp.inputs[1].data(), bp.grad);
            let gx = bp.needs(0).then(|| {
                let mut gx = vec![T::zero(); rows * din];
                gemm(Trans::No, Trans::No, rows, dout, din, T::one(), g, wd, T::zero(), &mut gx);
                gx
            });
            let gw = bp.needs(1).then(|| {
                let mut gw = vec![T::zero(); dout * din];
                gemm(Trans::Yes, Trans::No, dout, rows, din, T::one(), g, xd, T::zero(), &mut gw);
                gw
            });
            vec![gx, gw]
        };
        Ok(self.push(value, &[x, w], Box::new(backward)))
    }
}
