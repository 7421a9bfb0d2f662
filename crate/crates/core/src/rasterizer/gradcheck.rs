//! Finite-difference verification of [`super::rasterize_backward`].

use std::fmt;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{rasterize, rasterize_with_cache, RasterConfig};
use crate::error::Result;
use crate::gaussians::{GaussianPrimitive, GaussianSet};
use crate::geometry::{Camera, CameraExtrinsics, CameraIntrinsics};
use crate::image::Image;
use crate::sh::{coeffs_for_degree, rgb_to_dc};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Mean,
    Scale,
    Rotation,
    Opacity,
    Sh,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [Self::Mean, Self::Scale, Self::Rotation, Self::Opacity, Self::Sh];

    pub fn name(self) -> &'static str {
        match self {
            Self::Mean => "mean",
            Self::Scale => "scale",
            Self::Rotation => "rotation",
            Self::Opacity => "opacity",
            Self::Sh => "sh",
        }
    }

    fn len(self, g: &GaussianPrimitive) -> usize {
        match self {
            Self::Mean | Self::Scale => 3,
            Self::Rotation => 4,
            Self::Opacity => 1,
            Self::Sh => 3 * g.sh.len(),
        }
    }

    fn slot(self, g: &mut GaussianPrimitive, j: usize) -> &mut f64 {
        match self {
            Self::Mean => &mut g.mean[j],
            Self::Scale => &mut g.scale[j],
            Self::Rotation => &mut g.rotation[j],
            Self::Opacity => &mut g.opacity,
            Self::Sh => &mut g.sh[j / 3][j % 3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub n_gaussians: usize,
    pub width: usize,
    pub height: usize,
    pub sh_degree: usize,
    pub seed: u64,
    /// Central-difference step relative to `max(|θ|, 1)`.
    pub step: f64,
    pub tolerance: f64,
    /// Multiplies every analytic gradient by `1 + fault`; a working check
    /// must then fail.
    pub fault: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            n_gaussians: 8,
            width: 32,
            height: 32,
            sh_degree: 1,
            seed: 0,
            step: 1e-4,
            tolerance: 1e-3,
            fault: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupResult {
    pub group: ParamGroup,
    pub n_checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<WorstEntry>,
    pub passed: bool,
}

/// The entry with the largest relative error in a group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorstEntry {
    pub primitive: usize,
    pub component: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub groups: Vec<GroupResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    /// Group and entry with the largest relative error overall.
    pub fn worst(&self) -> Option<(&GroupResult, WorstEntry)> {
        self.groups
            .iter()
            .filter_map(|g| g.worst.map(|w| (g, w)))
            .max_by(|a, b| a.0.max_rel_error.total_cmp(&b.0.max_rel_error))
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for g in &self.groups {
            writeln!(
                f,
                "{:<9} n={:<4} max_rel_err={:.3e} {}",
                g.group.name(),
                g.n_checked,
                g.max_rel_error,
                if g.passed { "PASS" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Relative error used throughout: `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Rasterizer settings for gradient checks: the contribution cutoff is tiny
/// so that footprint clipping does not show up as a finite-difference jump.
pub fn gradcheck_raster_config() -> RasterConfig {
    RasterConfig {
        contribution_cutoff: 1e-14,
        ..RasterConfig::default()
    }
}

/// Seeded random scene in front of an identity camera, with SH colors kept
/// strictly inside the clamp range, plus a random upstream gradient.
pub fn random_scene(cfg: &GradcheckConfig) -> Result<(GaussianSet, Camera, Image)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (w, h) = (cfg.width, cfg.height);
    let f = w.max(h) as f64;
    let intr = CameraIntrinsics::new(f, f, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, w, h)?;
    let cam = Camera::new(intr, CameraExtrinsics::identity());
    let n_coeffs = coeffs_for_degree(cfg.sh_degree);
    let prims = (0..cfg.n_gaussians)
        .map(|_| {
            let z = rng.gen_range(2.0..4.0);
            let mean = Vector3::new(rng.gen_range(-0.35..0.35) * z, rng.gen_range(-0.35..0.35) * z, z);
            let scale = Vector3::new(
                rng.gen_range(0.05..0.2),
                rng.gen_range(0.05..0.2),
                rng.gen_range(0.05..0.2),
            );
            let rotation = [
                rng.gen_range(0.5..1.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            ];
            let mut sh = vec![[0.0; 3]; n_coeffs];
            sh[0] = rgb_to_dc([rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)]);
            for c in sh.iter_mut().skip(1) {
                for v in c.iter_mut() {
                    *v = rng.gen_range(-0.05..0.05);
                }
            }
            GaussianPrimitive {
                mean,
                scale,
                rotation,
                opacity: rng.gen_range(0.3..0.8),
                sh,
            }
        })
        .collect();
    let set = GaussianSet::from_primitives(cfg.sh_degree, prims)?;
    let upstream = Image::from_fn(w, h, 3, |_, _, _| rng.gen_range(-1.0..1.0));
    Ok((set, cam, upstream))
}

fn objective(set: &GaussianSet, cam: &Camera, upstream: &Image, rc: &RasterConfig) -> Result<f64> {
    let r = rasterize(set, cam, [0.0; 3], rc)?;
    Ok(r.color.data.iter().zip(&upstream.data).map(|(a, b)| a * b).sum())
}

/// Checks every parameter of `set` against central differences of
/// `Σ ⟨upstream, color⟩`.
pub fn check_gradients(
    set: &GaussianSet,
    cam: &Camera,
    upstream: &Image,
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport> {
    let rc = gradcheck_raster_config();
    let (_, cache) = rasterize_with_cache(set, cam, [0.0; 3], &rc)?;
    let grads = super::rasterize_backward(set, &cache, upstream)?;
    let scale = 1.0 + cfg.fault;

    let mut groups = Vec::new();
    for group in ParamGroup::ALL {
        let mut max_rel: f64 = 0.0;
        let mut worst = None;
        let mut n_checked = 0;
        for (i, prim) in set.primitives.iter().enumerate() {
            for j in 0..group.len(prim) {
                let analytic = scale
                    * match group {
                        ParamGroup::Mean => grads.mean[i][j],
                        ParamGroup::Scale => grads.scale[i][j],
                        ParamGroup::Rotation => grads.rotation[i][j],
                        ParamGroup::Opacity => grads.opacity[i],
                        ParamGroup::Sh => grads.sh[i][j / 3][j % 3],
                    };
                let mut probe = set.clone();
                let theta = *group.slot(&mut probe.primitives[i], j);
                let h = cfg.step * theta.abs().max(1.0);
                *group.slot(&mut probe.primitives[i], j) = theta + h;
                let plus = objective(&probe, cam, upstream, &rc)?;
                *group.slot(&mut probe.primitives[i], j) = theta - h;
                let minus = objective(&probe, cam, upstream, &rc)?;
                let numeric = (plus - minus) / (2.0 * h);
                let rel = rel_error(analytic, numeric);
                if worst.is_none() || rel > max_rel {
                    max_rel = rel;
                    worst = Some(WorstEntry {
                        primitive: i,
                        component: j,
                        analytic,
                        numeric,
                    });
                }
                n_checked += 1;
            }
        }
        groups.push(GroupResult {
            group,
            n_checked,
            max_rel_error: max_rel,
            worst,
            passed: max_rel <= cfg.tolerance,
        });
    }
    Ok(GradcheckReport { groups })
}

/// Builds the seeded scene described by `cfg` and checks it.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let (set, cam, upstream) = random_scene(cfg)?;
    check_gradients(&set, &cam, &upstream, cfg)
}
