//! Feed-forward lift → render loop: novel-view synthesis, the
//! reconstruction losses built on it, and gradient-based head training.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussians::{activate_params_backward, lift_pixels, DepthMap, FeatureMap, GaussianSet, HeadInput, LinearHead, Lifted, ParamHead};
use crate::geometry::{CameraRig, RigDelta};
use crate::image::Image;
use crate::losses::{recon_loss, recon_loss_grad, render_l2_grad, PerceptualMetric};
use crate::rasterizer::{rasterize, rasterize_reference, rasterize_with_cache, GaussianGrads, RasterConfig, RenderTarget};

/// Maps an RGB image to a `C x H x W` feature plane (row-major per channel).
pub trait FeatureExtractor: Sync {
    fn channels(&self) -> usize;
    fn extract(&self, image: &Image) -> Vec<f64>;
}

/// Everything needed to lift images and render them again.
#[derive(Clone, Copy)]
pub struct Pipeline<'a> {
    pub head: &'a dyn ParamHead,
    pub extractor: &'a dyn FeatureExtractor,
    pub metric: &'a dyn PerceptualMetric,
    pub raster: RasterConfig,
    pub background: [f64; 3],
    /// Weight of the perceptual term inside reconstruction losses.
    pub lambda_p: f64,
    /// Render through the brute-force oracle instead of the tile path.
    pub reference: bool,
}

/// Views synthesized at a perturbed rig from the original view's primitives.
#[derive(Debug, Clone)]
pub struct NovelViews {
    pub delta: RigDelta,
    pub rig: CameraRig,
    pub images: Vec<Image>,
    pub depth: DepthMap,
    /// Accumulated opacity per camera; pixels near zero received no
    /// primitives (disocclusions, content outside the original view).
    pub alpha: Vec<Vec<f64>>,
}

/// Expected depth of the splats alone: the far-depth share of the leftover
/// transmittance is removed and the rest renormalized by accumulated alpha.
/// Lifted primitives rarely saturate a pixel (opacity 0.9, sub-pixel
/// footprints), so the raw depth channel would pull re-lifted points toward
/// the far plane by meters.
pub fn surface_depth(r: &RenderTarget, far: f64) -> Vec<f64> {
    r.depth
        .iter()
        .zip(&r.alpha)
        .map(|(d, a)| if *a > 1e-3 { ((d - (1.0 - a) * far) / a).clamp(NEAR_DEPTH, far) } else { far })
        .collect()
}

const NEAR_DEPTH: f64 = 1e-3;

/// Frame at an adjacent timestep, with its rig already placed in the world.
#[derive(Debug, Clone)]
pub struct AdjacentFrame {
    pub rig: CameraRig,
    pub images: Vec<Image>,
}

impl Pipeline<'_> {
    pub fn features(&self, images: &[Image]) -> Result<FeatureMap> {
        let first = images
            .first()
            .ok_or_else(|| Error::Shape("no images to extract features from".into()))?;
        let views = images.iter().map(|im| self.extractor.extract(im)).collect();
        FeatureMap::from_views(views, self.extractor.channels(), first.height, first.width)
    }

    pub fn lift(&self, images: &[Image], depth: &DepthMap, rig: &CameraRig) -> Result<Lifted> {
        lift_pixels(depth, &self.features(images)?, rig, self.head)
    }

    pub fn render_camera(&self, set: &GaussianSet, cam: &crate::geometry::Camera) -> Result<RenderTarget> {
        if self.reference {
            rasterize_reference(set, cam, self.background, &self.raster)
        } else {
            rasterize(set, cam, self.background, &self.raster)
        }
    }

    pub fn render(&self, set: &GaussianSet, rig: &CameraRig) -> Result<Vec<RenderTarget>> {
        rig.cameras.iter().map(|c| self.render_camera(set, c)).collect()
    }

    /// Renders the original view's primitives into the perturbed rig. A zero
    /// delta is the identity: the originals are returned unchanged.
    pub fn synthesize(&self, images: &[Image], depth: &DepthMap, rig: &CameraRig, delta: &RigDelta) -> Result<NovelViews> {
        if delta.is_zero() {
            return Ok(NovelViews {
                delta: *delta,
                rig: rig.clone(),
                images: images.to_vec(),
                depth: depth.clone(),
                alpha: images.iter().map(|im| vec![1.0; im.width * im.height]).collect(),
            });
        }
        let set = self.lift(images, depth, rig)?.set;
        self.synthesize_from(&set, rig, delta)
    }

    /// Renders already-lifted primitives into `rig` perturbed by `delta`.
    pub fn synthesize_from(&self, set: &GaussianSet, rig: &CameraRig, delta: &RigDelta) -> Result<NovelViews> {
        let novel_rig = rig.perturbed(delta)?;
        let renders = self.render(set, &novel_rig)?;
        let first = &renders[0];
        let far = self.raster.far_depth;
        let depth = DepthMap::from_views(
            &renders.iter().map(|r| surface_depth(r, far)).collect::<Vec<_>>(),
            first.height(),
            first.width(),
        )?;
        Ok(NovelViews {
            delta: *delta,
            rig: novel_rig,
            alpha: renders.iter().map(|r| r.alpha.clone()).collect(),
            images: renders.into_iter().map(|r| r.color).collect(),
            depth,
        })
    }

    fn mean_recon(&self, renders: &[RenderTarget], targets: &[Image]) -> Result<f64> {
        if renders.len() != targets.len() {
            return Err(Error::Shape(format!("{} renders for {} targets", renders.len(), targets.len())));
        }
        let mut sum = 0.0;
        for (r, t) in renders.iter().zip(targets) {
            sum += recon_loss(&r.color, t, self.lambda_p, self.metric)?;
        }
        Ok(sum / targets.len() as f64)
    }

    /// Lift the frame and render it back into its own rig.
    pub fn self_recon_loss(&self, images: &[Image], depth: &DepthMap, rig: &CameraRig) -> Result<f64> {
        let set = self.lift(images, depth, rig)?.set;
        self.mean_recon(&self.render(&set, rig)?, images)
    }

    /// Render the primitives of frame t into the adjacent frames' rigs and
    /// compare with their images; averaged over frames.
    pub fn original_recon_loss(&self, set_t: &GaussianSet, adjacent: &[AdjacentFrame]) -> Result<f64> {
        if adjacent.is_empty() {
            return Err(Error::Protocol("original reconstruction needs at least one adjacent frame".into()));
        }
        let mut sum = 0.0;
        for frame in adjacent {
            if frame.images.len() != frame.rig.len() {
                return Err(Error::Protocol(format!(
                    "adjacent frame has {} images for {} cameras",
                    frame.images.len(),
                    frame.rig.len()
                )));
            }
            sum += self.mean_recon(&self.render(set_t, &frame.rig)?, &frame.images)?;
        }
        Ok(sum / adjacent.len() as f64)
    }

    /// Re-lift the novel views (rendered depth, extracted features) and
    /// render them back into the original rig.
    pub fn cyclic_recon_loss(&self, novel: &NovelViews, original_rig: &CameraRig, original_images: &[Image]) -> Result<f64> {
        let set = self.lift(&novel.images, &novel.depth, &novel.rig)?.set;
        self.mean_recon(&self.render(&set, original_rig)?, original_images)
    }
}

/// Adam on a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// One training frame for [`train_linear_head`].
#[derive(Debug, Clone)]
pub struct TrainingFrame {
    pub images: Vec<Image>,
    pub depth: DepthMap,
    pub rig: CameraRig,
    /// Rig delta used to synthesize the novel views of the cyclic term.
    pub delta: RigDelta,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub lambda_p: f64,
    pub raster: RasterConfig,
    pub background: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 0.05,
            lambda_p: 0.2,
            raster: RasterConfig::default(),
            background: [0.0; 3],
        }
    }
}

/// Value and head gradient of `Σ_cams loss(render(lift(head)), target) / N`.
fn lifted_loss_grad(
    head: &LinearHead,
    features: &FeatureMap,
    depth: &DepthMap,
    source_rig: &CameraRig,
    target_rig: &CameraRig,
    targets: &[Image],
    cfg: &TrainConfig,
    loss: &(dyn Fn(&Image, &Image) -> Result<(f64, Image)> + Sync),
) -> Result<(f64, Vec<f64>)> {
    let set = lift_pixels(depth, features, source_rig, head)?.set;
    let per_cam: Vec<(f64, GaussianGrads)> = target_rig
        .cameras
        .par_iter()
        .zip(targets)
        .map(|(cam, target)| {
            let (r, cache) = rasterize_with_cache(&set, cam, cfg.background, &cfg.raster)?;
            let (l, up) = loss(&r.color, target)?;
            Ok((l, crate::rasterizer::rasterize_backward(&set, &cache, &up)?))
        })
        .collect::<Result<_>>()?;
    let n_cams = targets.len() as f64;
    let mut value = 0.0;
    let mut sum = GaussianGrads::zeros(&set);
    for (l, g) in &per_cam {
        value += l / n_cams;
        for i in 0..set.len() {
            sum.scale[i] += g.scale[i] / n_cams;
            for c in 0..4 {
                sum.rotation[i][c] += g.rotation[i][c] / n_cams;
            }
            sum.opacity[i] += g.opacity[i] / n_cams;
            for (a, b) in sum.sh[i].iter_mut().zip(&g.sh[i]) {
                for c in 0..3 {
                    a[c] += b[c] / n_cams;
                }
            }
        }
    }
    let mut grad = vec![0.0; head.n_params()];
    for (i, prov) in set.provenance.iter().enumerate() {
        let feature = features.pixel(prov.camera, prov.u, prov.v);
        let input = HeadInput {
            feature: &feature,
            depth: depth.get(prov.camera, prov.u, prov.v),
            focal: source_rig.cameras[prov.camera].intrinsics.fx,
        };
        let raw = head.predict(&input);
        let d_scale = [sum.scale[i][0], sum.scale[i][1], sum.scale[i][2]];
        let d_raw = activate_params_backward(&raw, &d_scale, &sum.rotation[i], sum.opacity[i], &sum.sh[i]);
        head.accumulate_grad(&input, &d_raw, &mut grad);
    }
    Ok((value, grad))
}

/// Value and head gradient of `render_l2 + cyclic`, where the self term is
/// plain L2 of the re-rendered original view and the cyclic term uses
/// `L2 + λ_p · perceptual`. Novel views are detached.
pub fn training_objective(
    head: &LinearHead,
    frame: &TrainingFrame,
    extractor: &dyn FeatureExtractor,
    metric: &dyn PerceptualMetric,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<f64>)> {
    let pipeline = Pipeline {
        head,
        extractor,
        metric,
        raster: cfg.raster,
        background: cfg.background,
        lambda_p: cfg.lambda_p,
        reference: false,
    };
    let feats = pipeline.features(&frame.images)?;
    let (l_self, g_self) = lifted_loss_grad(
        head,
        &feats,
        &frame.depth,
        &frame.rig,
        &frame.rig,
        &frame.images,
        cfg,
        &|p, t| render_l2_grad(p, t),
    )?;
    let novel = pipeline.synthesize(&frame.images, &frame.depth, &frame.rig, &frame.delta)?;
    let novel_feats = pipeline.features(&novel.images)?;
    let (l_cyc, g_cyc) = lifted_loss_grad(
        head,
        &novel_feats,
        &novel.depth,
        &novel.rig,
        &frame.rig,
        &frame.images,
        cfg,
        &|p, t| recon_loss_grad(p, t, cfg.lambda_p, metric),
    )?;
    let grad = g_self.iter().zip(&g_cyc).map(|(a, b)| a + b).collect();
    Ok((l_self + l_cyc, grad))
}

/// Runs `cfg.steps` Adam steps on [`training_objective`]; returns the
/// objective before each step followed by the final value.
pub fn train_linear_head(
    head: &mut LinearHead,
    frame: &TrainingFrame,
    extractor: &dyn FeatureExtractor,
    metric: &dyn PerceptualMetric,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    let mut params = head.params();
    let mut adam = Adam::new(params.len(), cfg.lr);
    let mut history = Vec::with_capacity(cfg.steps + 1);
    for _ in 0..cfg.steps {
        let (value, grad) = training_objective(head, frame, extractor, metric, cfg)?;
        history.push(value);
        adam.step(&mut params, &grad);
        head.set_params(&params);
    }
    history.push(training_objective(head, frame, extractor, metric, cfg)?.0);
    Ok(history)
}
