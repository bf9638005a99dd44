//! Elementwise arithmetic (with broadcasting) and activations.

use super::broadcast::{aligned_strides, broadcast_shape, for_each2};
use super::{Backprop, Graph, Var};
use crate::error::Result;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus_scalar<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Real> Graph<T> {
    fn binary(&mut self, a: Var, b: Var, op: BinOp) -> Result<Var> {
        let sa_shape = self.shape(a).to_vec();
        let sb_shape = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa_shape, &sb_shape)?;
        let sa = aligned_strides(&sa_shape, &out_shape);
        let sb = aligned_strides(&sb_shape, &out_shape);
        let numel: usize = out_shape.iter().product();
        let mut out = vec![T::zero(); numel];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            match op {
                BinOp::Add => for_each2(&out_shape, &sa, &sb, |o, i, j| out[o] = av[i] + bv[j]),
                BinOp::Sub => for_each2(&out_shape, &sa, &sb, |o, i, j| out[o] = av[i] - bv[j]),
                BinOp::Mul => for_each2(&out_shape, &sa, &sb, |o, i, j| out[o] = av[i] * bv[j]),
                BinOp::Div => for_each2(&out_shape, &sa, &sb, |o, i, j| out[o] = av[i] / bv[j]),
            }
        }
        let value = Tensor::from_parts(out_shape.clone(), out);
        let backward = move |bp: &Backprop<'_, T>| {
            let (av, bv) = (bp.inputs[0].data(), bp.inputs[1].data());
            let g = bp.grad;
            let mut ga = bp.needs(0).then(|| vec![T::zero(); av.len()]);
            let mut gb = bp.needs(1).then(|| vec![T::zero(); bv.len()]);
            for_each2(&out_shape, &sa, &sb, |o, i, j| {
                let go = g[o];
                let (da, db) = match op {
                    BinOp::Add => (go, go),
                    BinOp::Sub => (go, -go),
                    BinOp::Mul => (go * bv[j], go * av[i]),
                    BinOp::Div => (go / bv[j], -go * av[i] / (bv[j] * bv[j])),
                };
                if let Some(ga) = ga.as_mut() {
                    ga[i] += da;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[j] += db;
                }
            });
            vec![ga, gb]
        };
        Ok(self.push(value, &[a, b], Box::new(backward)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinOp::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinOp::Sub)
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinOp::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinOp::Div)
    }

    /// Applies `f` elementwise; `df(x, y)` is the derivative at input `x` with output `y`.
    pub fn unary(
        &mut self,
        x: Var,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var {
        let value = self.value(x).map(f);
        let backward = move |bp: &Backprop<'_, T>| {
            let xs = bp.inputs[0].data();
            let ys = bp.output.data();
            let g = xs
                .iter()
                .zip(ys)
                .zip(bp.grad)
                .map(|((&x, &y), &g)| g * df(x, y))
                .collect();
            vec![Some(g)]
        };
        self.push(value, &[x], Box::new(backward))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v + c, |_, _| T::one())
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), |_, y| y)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), |x, _| T::one() / x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid_scalar, |_, y| y * (T::one() - y))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| v * sigmoid_scalar(v),
            |x, _| {
                let s = sigmoid_scalar(x);
                s + x * s * (T::one() - s)
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| v.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.unary(
            x,
            move |v| if v > T::zero() { v } else { v * slope },
            move |x, _| if x > T::zero() { T::one() } else { slope },
        )
    }

    pub fn elu(&mut self, x: Var, alpha: T) -> Var {
        self.unary(
            x,
            move |v| if v > T::zero() { v } else { alpha * v.exp_m1() },
            move |x, y| if x > T::zero() { T::one() } else { y + alpha },
        )
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus_scalar, |x, _| sigmoid_scalar(x))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(
            x,
            move |v| v.max(lo).min(hi),
            move |x, _| if x > lo && x < hi { T::one() } else { T::zero() },
        )
    }
}
