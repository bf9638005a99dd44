//! Saliency evaluation measures on a prediction `P ∈ [0,1]` and a binary
//! ground truth `G`, both row-major `h × w`.
//!
//! F and E are swept over 256 thresholds `k / 255`; a pixel is foreground
//! when `P ≥ t`. Adaptive variants binarize at `min(1, 2 · mean(P))`.

use crate::error::{Error, Result};

pub const BETA2: f64 = 0.3;
pub const THRESHOLDS: usize = 256;
pub const S_ALPHA: f64 = 0.5;
/// Denominator guard of the S- and E-measure ratios (machine epsilon, as in the reference definitions).
const EPS: f64 = f64::EPSILON;

pub fn threshold(k: usize) -> f64 {
    k as f64 / (THRESHOLDS - 1) as f64
}

pub fn adaptive_threshold(pred: &[f64]) -> f64 {
    (2.0 * mean(pred)).min(1.0)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn check(pred: &[f64], gt: &[bool]) -> Result<()> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

pub fn mae(pred: &[f64], gt: &[bool]) -> Result<f64> {
    check(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(&p, &g)| (p - if g { 1.0 } else { 0.0 }).abs()).sum::<f64>() / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

fn prf(tp: usize, pred_pos: usize, gt_pos: usize) -> Prf {
    if gt_pos == 0 {
        // Empty ground truth: an empty prediction is a perfect answer.
        let v = if pred_pos == 0 { 1.0 } else { 0.0 };
        return Prf { precision: v, recall: v, f: v };
    }
    let precision = if pred_pos == 0 { 0.0 } else { tp as f64 / pred_pos as f64 };
    let recall = tp as f64 / gt_pos as f64;
    let den = BETA2 * precision + recall;
    let f = if den > 0.0 { (1.0 + BETA2) * precision * recall / den } else { 0.0 };
    Prf { precision, recall, f }
}

/// Precision, recall and `F_β` of the mask `P ≥ t`.
pub fn f_measure(pred: &[f64], gt: &[bool], t: f64) -> Result<Prf> {
    check(pred, gt)?;
    let (mut tp, mut pp, mut gp) = (0, 0, 0);
    for (&p, &g) in pred.iter().zip(gt) {
        let on = p >= t;
        pp += on as usize;
        gp += g as usize;
        tp += (on && g) as usize;
    }
    Ok(prf(tp, pp, gp))
}

/// `F_β` at each of the 256 thresholds, computed with one histogram pass.
pub fn f_curve(pred: &[f64], gt: &[bool]) -> Result<Vec<Prf>> {
    check(pred, gt)?;
    let bins = binned(pred, gt);
    let gt_pos = gt.iter().filter(|&&g| g).count();
    let (mut tp, mut pp) = (0usize, 0usize);
    let mut out = vec![Prf { precision: 0.0, recall: 0.0, f: 0.0 }; THRESHOLDS];
    for k in (0..THRESHOLDS).rev() {
        tp += bins[k].1;
        pp += bins[k].0 + bins[k].1;
        out[k] = prf(tp, pp, gt_pos);
    }
    Ok(out)
}

/// Per threshold bin `k`: pixels with `k/255 ≤ P < (k+1)/255` split into (background, foreground) counts.
fn binned(pred: &[f64], gt: &[bool]) -> Vec<(usize, usize)> {
    let mut bins = vec![(0usize, 0usize); THRESHOLDS];
    for (&p, &g) in pred.iter().zip(gt) {
        // Largest k with threshold(k) <= p, confirmed with the same comparison as f_measure.
        let mut k = ((p.clamp(0.0, 1.0) * (THRESHOLDS - 1) as f64).floor() as usize).min(THRESHOLDS - 1);
        while k + 1 < THRESHOLDS && p >= threshold(k + 1) {
            k += 1;
        }
        while k > 0 && p < threshold(k) {
            k -= 1;
        }
        if p < threshold(0) {
            continue;
        }
        if g {
            bins[k].1 += 1;
        } else {
            bins[k].0 += 1;
        }
    }
    bins
}

#[derive(Debug, Clone, PartialEq)]
pub struct Suite {
    pub max: f64,
    pub mean: f64,
    pub adp: f64,
}

pub fn f_suite(pred: &[f64], gt: &[bool]) -> Result<Suite> {
    let curve = f_curve(pred, gt)?;
    let fs: Vec<f64> = curve.iter().map(|c| c.f).collect();
    Ok(Suite {
        max: fs.iter().cloned().fold(0.0, f64::max),
        mean: mean(&fs),
        adp: f_measure(pred, gt, adaptive_threshold(pred))?.f,
    })
}

/// Enhanced-alignment score of the binary mask `fm` against `gt`.
pub fn e_measure_binary(fm: &[bool], gt: &[bool]) -> f64 {
    let n = fm.len() as f64;
    let gt_pos = gt.iter().filter(|&&g| g).count();
    let fm_pos = fm.iter().filter(|&&f| f).count() as f64;
    let sum = if gt_pos == 0 {
        n - fm_pos
    } else if gt_pos == gt.len() {
        fm_pos
    } else {
        let mu_f = fm_pos / n;
        let mu_g = gt_pos as f64 / n;
        fm.iter()
            .zip(gt)
            .map(|(&f, &g)| {
                let a = f as u8 as f64 - mu_f;
                let b = g as u8 as f64 - mu_g;
                let align = 2.0 * a * b / (a * a + b * b + EPS);
                (align + 1.0).powi(2) / 4.0
            })
            .sum()
    };
    sum / n
}

pub fn e_curve(pred: &[f64], gt: &[bool]) -> Result<Vec<f64>> {
    check(pred, gt)?;
    Ok((0..THRESHOLDS)
        .map(|k| {
            let t = threshold(k);
            let fm: Vec<bool> = pred.iter().map(|&p| p >= t).collect();
            e_measure_binary(&fm, gt)
        })
        .collect())
}

pub fn e_suite(pred: &[f64], gt: &[bool]) -> Result<Suite> {
    let curve = e_curve(pred, gt)?;
    let t = adaptive_threshold(pred);
    let fm: Vec<bool> = pred.iter().map(|&p| p >= t).collect();
    Ok(Suite {
        max: curve.iter().cloned().fold(0.0, f64::max),
        mean: mean(&curve),
        adp: e_measure_binary(&fm, gt),
    })
}

/// Structure measure `α · S_object + (1 - α) · S_region`.
pub fn s_measure(pred: &[f64], gt: &[bool], h: usize, w: usize, alpha: f64) -> Result<f64> {
    check(pred, gt)?;
    if h * w != pred.len() {
        return Err(Error::InvalidArgument(format!("{h}x{w} map with {} pixels", pred.len())));
    }
    let y = gt.iter().filter(|&&g| g).count() as f64 / gt.len() as f64;
    let q = if y == 0.0 {
        1.0 - mean(pred)
    } else if y == 1.0 {
        mean(pred)
    } else {
        alpha * s_object(pred, gt) + (1.0 - alpha) * s_region(pred, gt, h, w)
    };
    Ok(q.clamp(0.0, 1.0))
}

fn object_score(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let x = mean(values);
    let sigma = if values.len() > 1 {
        (values.iter().map(|v| (v - x).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

fn s_object(pred: &[f64], gt: &[bool]) -> f64 {
    let fg: Vec<f64> = pred.iter().zip(gt).filter(|(_, &g)| g).map(|(&p, _)| p).collect();
    let bg: Vec<f64> = pred.iter().zip(gt).filter(|(_, &g)| !g).map(|(&p, _)| 1.0 - p).collect();
    let u = fg.len() as f64 / pred.len() as f64;
    u * object_score(&fg) + (1.0 - u) * object_score(&bg)
}

fn ssim(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len();
    if n == 0 {
        return 0.0;
    }
    let (x, y) = (mean(p), mean(g));
    let d = (n.max(2) - 1) as f64;
    let sx = p.iter().map(|v| (v - x).powi(2)).sum::<f64>() / d;
    let sy = g.iter().map(|v| (v - y).powi(2)).sum::<f64>() / d;
    let sxy = p.iter().zip(g).map(|(a, b)| (a - x) * (b - y)).sum::<f64>() / d;
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn s_region(pred: &[f64], gt: &[bool], h: usize, w: usize) -> f64 {
    let (mut sx, mut sy, mut count) = (0.0, 0.0, 0usize);
    for (i, &g) in gt.iter().enumerate() {
        if g {
            sx += (i % w) as f64;
            sy += (i / w) as f64;
            count += 1;
        }
    }
    // Split at the foreground centroid; the split column/row starts the right/bottom quadrants.
    let cx = ((sx / count as f64).round() as usize + 1).min(w);
    let cy = ((sy / count as f64).round() as usize + 1).min(h);
    let area = (h * w) as f64;
    let quads = [(0, cy, 0, cx), (0, cy, cx, w), (cy, h, 0, cx), (cy, h, cx, w)];
    let mut total = 0.0;
    for (y0, y1, x0, x1) in quads {
        let weight = ((y1 - y0) * (x1 - x0)) as f64 / area;
        if weight == 0.0 {
            continue;
        }
        let mut p = Vec::new();
        let mut g = Vec::new();
        for yy in y0..y1 {
            for xx in x0..x1 {
                p.push(pred[yy * w + xx]);
                g.push(if gt[yy * w + xx] { 1.0 } else { 0.0 });
            }
        }
        total += weight * ssim(&p, &g);
    }
    total
}

/// All measures of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageScores {
    pub mae: f64,
    pub s_alpha: f64,
    pub f: Suite,
    pub e: Suite,
    pub curve: Vec<Prf>,
    pub e_curve: Vec<f64>,
}

pub fn score_image(pred: &[f64], gt: &[bool], h: usize, w: usize) -> Result<ImageScores> {
    let curve = f_curve(pred, gt)?;
    let fs: Vec<f64> = curve.iter().map(|c| c.f).collect();
    let f = Suite {
        max: fs.iter().cloned().fold(0.0, f64::max),
        mean: mean(&fs),
        adp: f_measure(pred, gt, adaptive_threshold(pred))?.f,
    };
    let e_curve = e_curve(pred, gt)?;
    let t = adaptive_threshold(pred);
    let fm: Vec<bool> = pred.iter().map(|&p| p >= t).collect();
    let e = Suite {
        max: e_curve.iter().cloned().fold(0.0, f64::max),
        mean: mean(&e_curve),
        adp: e_measure_binary(&fm, gt),
    };
    Ok(ImageScores {
        mae: mae(pred, gt)?,
        s_alpha: s_measure(pred, gt, h, w, S_ALPHA)?,
        f,
        e,
        curve,
        e_curve,
    })
}

/// Dataset-level aggregate: curve measures take the max/mean of the
/// image-averaged curves; the rest are image averages.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub images: usize,
    pub mae: f64,
    pub s_alpha: f64,
    pub f_max: f64,
    pub f_mean: f64,
    pub f_adp: f64,
    pub e_max: f64,
    pub e_mean: f64,
    pub e_adp: f64,
    pub curve: Vec<Prf>,
}

#[derive(Debug, Clone, Default)]
pub struct Accumulator {
    n: usize,
    mae: f64,
    s: f64,
    f_adp: f64,
    e_adp: f64,
    prec: Vec<f64>,
    rec: Vec<f64>,
    f: Vec<f64>,
    e: Vec<f64>,
}

impl Accumulator {
    pub fn new() -> Self {
        Accumulator {
            prec: vec![0.0; THRESHOLDS],
            rec: vec![0.0; THRESHOLDS],
            f: vec![0.0; THRESHOLDS],
            e: vec![0.0; THRESHOLDS],
            ..Default::default()
        }
    }

    pub fn add(&mut self, pred: &[f64], gt: &[bool], h: usize, w: usize) -> Result<ImageScores> {
        let s = score_image(pred, gt, h, w)?;
        self.push(&s);
        Ok(s)
    }

    /// Folds in scores computed elsewhere; the order of pushes fixes the summation order.
    pub fn push(&mut self, s: &ImageScores) {
        self.n += 1;
        self.mae += s.mae;
        self.s += s.s_alpha;
        self.f_adp += s.f.adp;
        self.e_adp += s.e.adp;
        for k in 0..THRESHOLDS {
            self.prec[k] += s.curve[k].precision;
            self.rec[k] += s.curve[k].recall;
            self.f[k] += s.curve[k].f;
            self.e[k] += s.e_curve[k];
        }
    }

    pub fn finish(&self) -> Result<Aggregate> {
        if self.n == 0 {
            return Err(Error::InvalidArgument("no images scored".into()));
        }
        let n = self.n as f64;
        let avg = |v: &[f64]| v.iter().map(|x| x / n).collect::<Vec<_>>();
        let (f, e) = (avg(&self.f), avg(&self.e));
        let curve = (0..THRESHOLDS)
            .map(|k| Prf {
                precision: self.prec[k] / n,
                recall: self.rec[k] / n,
                f: f[k],
            })
            .collect();
        Ok(Aggregate {
            images: self.n,
            mae: self.mae / n,
            s_alpha: self.s / n,
            f_max: f.iter().cloned().fold(0.0, f64::max),
            f_mean: mean(&f),
            f_adp: self.f_adp / n,
            e_max: e.iter().cloned().fold(0.0, f64::max),
            e_mean: mean(&e),
            e_adp: self.e_adp / n,
            curve,
        })
    }
}
