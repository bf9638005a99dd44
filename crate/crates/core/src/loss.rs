//! Training objective: binary cross-entropy plus soft IoU on every head.

use crate::autodiff::{Backprop, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Probabilities are clamped into `[BCE_CLAMP, 1 - BCE_CLAMP]` inside the log.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda: [f64; 4],
    pub eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: [1.0; 4],
            eps: 1.0,
        }
    }
}

impl<T: Real> Graph<T> {
    /// Mean binary cross-entropy over all elements.
    pub fn bce_loss(&mut self, p: Var, g: Var) -> Result<Var> {
        if self.shape(p) != self.shape(g) {
            return Err(Error::shape(
                "bce_loss",
                format!("prediction {:?} vs target {:?}", self.shape(p), self.shape(g)),
            ));
        }
        let lo = T::from_f64_lossy(BCE_CLAMP);
        let hi = T::one() - lo;
        let n = T::from_usize(self.value(p).numel().max(1)).unwrap();
        let total = self
            .value(p)
            .data()
            .iter()
            .zip(self.value(g).data())
            .fold(T::zero(), |acc, (&pv, &gv)| {
                let q = pv.max(lo).min(hi);
                acc - (gv * q.ln() + (T::one() - gv) * (T::one() - q).ln())
            });
        let value = Tensor::scalar(total / n);
        let backward = move |bp: &Backprop<'_, T>| {
            let (pd, gd) = (bp.inputs[0].data(), bp.inputs[1].data());
            let up = bp.grad[0] / n;
            let gp = bp.needs(0).then(|| {
                pd.iter()
                    .zip(gd)
                    .map(|(&pv, &gv)| {
                        if pv <= lo || pv >= hi {
                            T::zero()
                        } else {
                            up * (pv - gv) / (pv * (T::one() - pv))
                        }
                    })
                    .collect()
            });
            let gg = bp.needs(1).then(|| {
                pd.iter()
                    .map(|&pv| {
                        let q = pv.max(lo).min(hi);
                        up * ((T::one() - q).ln() - q.ln())
                    })
                    .collect()
            });
            vec![gp, gg]
        };
        Ok(self.push(value, &[p, g], Box::new(backward)))
    }

    /// `1 - (Σ P⊙G + ε) / (Σ (P + G - P⊙G) + ε)` per sample, averaged over the batch axis.
    pub fn iou_loss(&mut self, p: Var, g: Var, eps: T) -> Result<Var> {
        let s = self.shape(p).to_vec();
        if s != self.shape(g) || s.is_empty() {
            return Err(Error::shape("iou_loss", format!("prediction {s:?} vs target {:?}", self.shape(g))));
        }
        let n = s[0];
        let per = s[1..].iter().product::<usize>();
        let p2 = self.reshape(p, &[n, per])?;
        let g2 = self.reshape(g, &[n, per])?;
        let inter = self.mul(p2, g2)?;
        let inter_s = self.sum_axis(inter, 1)?;
        let sum = self.add(p2, g2)?;
        let union = self.sub(sum, inter)?;
        let union_s = self.sum_axis(union, 1)?;
        let num = self.add_scalar(inter_s, eps);
        let den = self.add_scalar(union_s, eps);
        let ratio = self.div(num, den)?;
        let m = self.mean(ratio);
        let neg = self.neg(m);
        Ok(self.add_scalar(neg, T::one()))
    }

    /// `Σ λ_i (BCE(P_i, G) + IoU(P_i, G))`.
    pub fn total_loss(&mut self, maps: &[Var], g: Var, w: &LossWeights) -> Result<Var> {
        if maps.len() != w.lambda.len() {
            return Err(Error::InvalidArgument(format!("{} heads for {} loss weights", maps.len(), w.lambda.len())));
        }
        let mut total: Option<Var> = None;
        for (&p, &lambda) in maps.iter().zip(&w.lambda) {
            let b = self.bce_loss(p, g)?;
            let i = self.iou_loss(p, g, T::from_f64_lossy(w.eps))?;
            let term = self.add(b, i)?;
            let term = self.scale(term, T::from_f64_lossy(lambda));
            total = Some(match total {
                None => term,
                Some(t) => self.add(t, term)?,
            });
        }
        Ok(total.expect("at least one head"))
    }
}
