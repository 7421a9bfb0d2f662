//! Training objectives: image losses, depth L1, feature distillation and the
//! weighted total. Reconstruction losses over lifted scenes live in
//! [`crate::pipeline`]; they are built from [`recon_loss`].

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Mean squared error over all pixels and channels.
pub fn render_l2(pred: &Image, target: &Image) -> Result<f64> {
    pred.check_same_shape(target)?;
    if pred.data.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred.data.iter().zip(&target.data).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / pred.data.len() as f64)
}

/// [`render_l2`] and its gradient with respect to `pred`.
pub fn render_l2_grad(pred: &Image, target: &Image) -> Result<(f64, Image)> {
    let loss = render_l2(pred, target)?;
    let n = pred.data.len().max(1) as f64;
    let data = pred.data.iter().zip(&target.data).map(|(a, b)| 2.0 * (a - b) / n).collect();
    Ok((loss, Image::from_data(pred.width, pred.height, pred.channels, data)?))
}

/// A differentiable image dissimilarity: 0 on identical inputs, ≥ 0.
pub trait PerceptualMetric: Sync {
    /// Smallest accepted width and height.
    fn min_size(&self) -> usize;
    fn loss_grad(&self, pred: &Image, target: &Image) -> Result<(f64, Image)>;

    fn loss(&self, pred: &Image, target: &Image) -> Result<f64> {
        self.loss_grad(pred, target).map(|(l, _)| l)
    }
}

/// `(1 - SSIM) / 2` with a Gaussian window, per channel, averaged.
///
/// The window is truncated at the image border and renormalized over the
/// part that remains. The per-pixel SSIM map is clamped to `[0, 1]`, so the
/// loss lies in `[0, 0.5]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ssim {
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
    pub min_size: usize,
}

impl Default for Ssim {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
            min_size: 8,
        }
    }
}

/// Separable truncated Gaussian filter with per-output normalization.
struct Window {
    taps: Vec<f64>,
    half: isize,
    norm_x: Vec<f64>,
    norm_y: Vec<f64>,
}

impl Window {
    fn new(window: usize, sigma: f64, width: usize, height: usize) -> Self {
        let half = (window / 2) as isize;
        let taps: Vec<f64> = (-half..=half)
            .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let norm = |len: usize| -> Vec<f64> {
            (0..len as isize)
                .map(|q| {
                    (-half..=half)
                        .filter(|d| (0..len as isize).contains(&(q + d)))
                        .map(|d| taps[(d + half) as usize])
                        .sum()
                })
                .collect()
        };
        Self {
            norm_x: norm(width),
            norm_y: norm(height),
            taps,
            half,
        }
    }

    /// Unnormalized truncated convolution of a `w x h` plane.
    fn convolve(&self, src: &[f64], w: usize, h: usize) -> Vec<f64> {
        let mut tmp = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, t) in self.taps.iter().enumerate() {
                    let sx = x as isize + k as isize - self.half;
                    if (0..w as isize).contains(&sx) {
                        acc += t * src[y * w + sx as usize];
                    }
                }
                tmp[y * w + x] = acc;
            }
        }
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, t) in self.taps.iter().enumerate() {
                    let sy = y as isize + k as isize - self.half;
                    if (0..h as isize).contains(&sy) {
                        acc += t * tmp[sy as usize * w + x];
                    }
                }
                out[y * w + x] = acc;
            }
        }
        out
    }

    /// Local weighted mean.
    fn filter(&self, src: &[f64], w: usize, h: usize) -> Vec<f64> {
        let mut out = self.convolve(src, w, h);
        for y in 0..h {
            for x in 0..w {
                out[y * w + x] /= self.norm_x[x] * self.norm_y[y];
            }
        }
        out
    }

    /// Adjoint of [`Self::filter`]; the taps are symmetric.
    fn filter_adjoint(&self, src: &[f64], w: usize, h: usize) -> Vec<f64> {
        let mut scaled = src.to_vec();
        for y in 0..h {
            for x in 0..w {
                scaled[y * w + x] /= self.norm_x[x] * self.norm_y[y];
            }
        }
        self.convolve(&scaled, w, h)
    }
}

impl PerceptualMetric for Ssim {
    fn min_size(&self) -> usize {
        self.min_size
    }

    fn loss_grad(&self, pred: &Image, target: &Image) -> Result<(f64, Image)> {
        pred.check_same_shape(target)?;
        if pred.width < self.min_size || pred.height < self.min_size {
            return Err(Error::Size {
                width: pred.width,
                height: pred.height,
                min: self.min_size,
            });
        }
        let (w, h, ch) = (pred.width, pred.height, pred.channels);
        let n = w * h;
        let win = Window::new(self.window, self.sigma, w, h);
        let mut grad = Image::new(w, h, ch);
        let mut total = 0.0;
        // d loss / d s for every map entry
        let g = -0.5 / (n * ch) as f64;
        for c in 0..ch {
            let x: Vec<f64> = (0..n).map(|p| pred.data[p * ch + c]).collect();
            let y: Vec<f64> = (0..n).map(|p| target.data[p * ch + c]).collect();
            let prod = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(u, v)| u * v).collect() };
            let mu_x = win.filter(&x, w, h);
            let mu_y = win.filter(&y, w, h);
            let e_xx = win.filter(&prod(&x, &x), w, h);
            let e_yy = win.filter(&prod(&y, &y), w, h);
            let e_xy = win.filter(&prod(&x, &y), w, h);
            let mut g_mu = vec![0.0; n];
            let mut g_xx = vec![0.0; n];
            let mut g_xy = vec![0.0; n];
            let mut sum = 0.0;
            for q in 0..n {
                let (mx, my) = (mu_x[q], mu_y[q]);
                let a1 = 2.0 * mx * my + self.c1;
                let a2 = 2.0 * (e_xy[q] - mx * my) + self.c2;
                let b1 = mx * mx + my * my + self.c1;
                let b2 = (e_xx[q] - mx * mx) + (e_yy[q] - my * my) + self.c2;
                let s = a1 * a2 / (b1 * b2);
                if s > 0.0 && s < 1.0 {
                    let bb = b1 * b2;
                    g_mu[q] = g * ((2.0 * my * a2 - 2.0 * my * a1) / bb - s * (2.0 * mx / b1 - 2.0 * mx / b2));
                    g_xx[q] = g * (-s / b2);
                    g_xy[q] = g * (2.0 * a1 / bb);
                }
                sum += s.clamp(0.0, 1.0);
            }
            total += sum / n as f64;
            let d_mu = win.filter_adjoint(&g_mu, w, h);
            let d_xx = win.filter_adjoint(&g_xx, w, h);
            let d_xy = win.filter_adjoint(&g_xy, w, h);
            for p in 0..n {
                grad.data[p * ch + c] = d_mu[p] + 2.0 * x[p] * d_xx[p] + y[p] * d_xy[p];
            }
        }
        let loss = (1.0 - total / ch as f64) / 2.0;
        Ok((loss.max(0.0), grad))
    }
}

pub fn perceptual(pred: &Image, target: &Image, metric: &dyn PerceptualMetric) -> Result<f64> {
    metric.loss(pred, target)
}

/// `render_l2 + λ_p · perceptual`, the per-image reconstruction objective.
pub fn recon_loss(pred: &Image, target: &Image, lambda_p: f64, metric: &dyn PerceptualMetric) -> Result<f64> {
    let l2 = render_l2(pred, target)?;
    if lambda_p == 0.0 {
        return Ok(l2);
    }
    Ok(l2 + lambda_p * metric.loss(pred, target)?)
}

/// [`recon_loss`] and its gradient with respect to `pred`.
pub fn recon_loss_grad(
    pred: &Image,
    target: &Image,
    lambda_p: f64,
    metric: &dyn PerceptualMetric,
) -> Result<(f64, Image)> {
    let (l2, mut grad) = render_l2_grad(pred, target)?;
    if lambda_p == 0.0 {
        return Ok((l2, grad));
    }
    let (p, pg) = metric.loss_grad(pred, target)?;
    for (a, b) in grad.data.iter_mut().zip(&pg.data) {
        *a += lambda_p * b;
    }
    Ok((l2 + lambda_p * p, grad))
}

/// Mean absolute error over the pixels where `mask` is set.
pub fn depth_l1(pred: &[f64], target: &[f64], mask: &[bool]) -> Result<f64> {
    if pred.len() != target.len() || pred.len() != mask.len() {
        return Err(Error::Shape(format!(
            "depth {} / target {} / mask {}",
            pred.len(),
            target.len(),
            mask.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((p, t), m) in pred.iter().zip(target).zip(mask) {
        if *m {
            sum += (p - t).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::DegenerateInput("depth mask selects no pixels".into()));
    }
    Ok(sum / count as f64)
}

/// Result of [`distill_loss`].
#[derive(Debug, Clone, PartialEq)]
pub struct DistillLoss {
    pub value: f64,
    /// Anchors whose confidence exceeds τ.
    pub selected: Vec<usize>,
    /// No anchor passed the threshold; `value` is 0.
    pub empty: bool,
    /// `dL/dS̃`, one row per anchor (zero rows for unselected anchors).
    pub grad_novel: Vec<Vec<f64>>,
}

impl DistillLoss {
    /// `dL/dS`: the original-view branch is detached, so this is always zero.
    pub fn grad_orig(&self) -> Vec<Vec<f64>> {
        self.grad_novel.iter().map(|r| vec![0.0; r.len()]).collect()
    }
}

/// Mean over confident anchors of `‖S̃ᵢ − stopgrad(Sᵢ)‖²`.
pub fn distill_loss(s_novel: &[Vec<f64>], s_orig: &[Vec<f64>], confidence: &[f64], tau: f64) -> Result<DistillLoss> {
    if s_novel.len() != s_orig.len() || s_novel.len() != confidence.len() {
        return Err(Error::Shape(format!(
            "{} novel, {} original features, {} confidences",
            s_novel.len(),
            s_orig.len(),
            confidence.len()
        )));
    }
    for (i, (a, b)) in s_novel.iter().zip(s_orig).enumerate() {
        if a.len() != b.len() {
            return Err(Error::Shape(format!("anchor {i}: feature dims {} vs {}", a.len(), b.len())));
        }
    }
    let selected: Vec<usize> = (0..confidence.len()).filter(|&i| confidence[i] > tau).collect();
    let mut grad_novel: Vec<Vec<f64>> = s_novel.iter().map(|r| vec![0.0; r.len()]).collect();
    if selected.is_empty() {
        return Ok(DistillLoss {
            value: 0.0,
            selected,
            empty: true,
            grad_novel,
        });
    }
    let k = selected.len() as f64;
    let mut sum = 0.0;
    for &i in &selected {
        for (j, (a, b)) in s_novel[i].iter().zip(&s_orig[i]).enumerate() {
            let d = a - b;
            sum += d * d;
            grad_novel[i][j] = 2.0 * d / k;
        }
    }
    Ok(DistillLoss {
        value: sum / k,
        selected,
        empty: false,
        grad_novel,
    })
}

/// Weights of the overall objective. The perception and planning terms are
/// outside this crate; their values are supplied by the caller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub render_l2: f64,
    pub perceptual: f64,
    pub recon_original: f64,
    pub recon_cyclic: f64,
    pub depth_l1: f64,
    pub distill: f64,
    pub det: f64,
    pub map: f64,
    pub motion: f64,
    pub plan: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            render_l2: 1.0,
            perceptual: 1.0,
            recon_original: 1.0,
            recon_cyclic: 1.0,
            depth_l1: 1.0,
            distill: 1.0,
            det: 1.0,
            map: 1.0,
            motion: 1.0,
            plan: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossTerms {
    pub render_l2: f64,
    pub perceptual: f64,
    pub recon_original: f64,
    pub recon_cyclic: f64,
    pub depth_l1: f64,
    pub distill: f64,
    pub det: f64,
    pub map: f64,
    pub motion: f64,
    pub plan: f64,
}

pub const TERM_NAMES: [&str; 10] = [
    "render_l2",
    "perceptual",
    "recon_original",
    "recon_cyclic",
    "depth_l1",
    "distill",
    "det",
    "map",
    "motion",
    "plan",
];

impl LossTerms {
    pub fn values(&self) -> [f64; 10] {
        [
            self.render_l2,
            self.perceptual,
            self.recon_original,
            self.recon_cyclic,
            self.depth_l1,
            self.distill,
            self.det,
            self.map,
            self.motion,
            self.plan,
        ]
    }
}

impl LossWeights {
    pub fn values(&self) -> [f64; 10] {
        [
            self.render_l2,
            self.perceptual,
            self.recon_original,
            self.recon_cyclic,
            self.depth_l1,
            self.distill,
            self.det,
            self.map,
            self.motion,
            self.plan,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in TERM_NAMES.iter().zip(self.values()) {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("loss weight {name} = {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub terms: LossTerms,
    pub weights: LossWeights,
    pub total: f64,
}

/// Weighted sum of all terms.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> Result<LossReport> {
    weights.validate()?;
    for (name, t) in TERM_NAMES.iter().zip(terms.values()) {
        if !(t >= 0.0) {
            return Err(Error::DegenerateInput(format!("loss term {name} = {t} is negative or NaN")));
        }
    }
    let total = terms.values().iter().zip(weights.values()).map(|(t, w)| t * w).sum();
    Ok(LossReport {
        terms: *terms,
        weights: *weights,
        total,
    })
}

/// Appends one CSV row per report: `step`, every term, `total`. Floats use
/// the shortest representation that parses back to the same value.
pub struct LossLog<W: Write> {
    out: W,
}

impl<W: Write> LossLog<W> {
    pub fn new(mut out: W) -> std::io::Result<Self> {
        writeln!(out, "step,{},total", TERM_NAMES.join(","))?;
        Ok(Self { out })
    }

    pub fn append(&mut self, step: usize, report: &LossReport) -> std::io::Result<()> {
        let cells: Vec<String> = report.terms.values().iter().map(|v| v.to_string()).collect();
        writeln!(self.out, "{step},{},{}", cells.join(","), report.total)
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
