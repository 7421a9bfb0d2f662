//! Alpha-composited splat rendering.
//!
//! [`rasterize`] is the tiled fast path, [`rasterize_reference`] the
//! brute-force oracle it must agree with, and [`rasterize_backward`] the
//! analytic gradient of `Σ ⟨upstream, color⟩` with respect to every primitive
//! parameter.

mod backward;
pub mod gradcheck;
mod reference;
mod tile;

use nalgebra::{Matrix2, Matrix2x3, Vector2, Vector3};

use crate::gaussians::{covariance_from, quat_normalize, GaussianPrimitive, GaussianSet, IDENTITY_QUAT};
use crate::geometry::{Camera, NEAR_PLANE};
use crate::image::Image;
use crate::sh;

pub use backward::{rasterize_backward, GaussianGrads};
pub use reference::rasterize_reference;
pub use tile::{rasterize, rasterize_with_cache, ForwardCache, Rasterizer};

/// Below this exponent `exp` underflows to exactly zero, so skipping the
/// evaluation is bitwise neutral.
const EXP_UNDERFLOW: f64 = -746.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterConfig {
    /// Added to every 2D covariance, pixel².
    pub low_pass: f64,
    pub tile_size: usize,
    /// A pixel stops compositing once its transmittance drops below this.
    /// Together with the cutoff, bounds the deviation from the exhaustive
    /// renderer by `threshold + n * cutoff` for colors in `[0, 1]`.
    pub transmittance_threshold: f64,
    /// Depth assigned to the transmittance left after compositing.
    pub far_depth: f64,
    /// A splat's footprint is the ellipse outside of which `opacity * G`
    /// stays below this value.
    pub contribution_cutoff: f64,
    /// Primitives whose projected mean lies further from the principal
    /// point than this many image half-extents are dropped. The linearized
    /// footprint of such primitives (typically just in front of the camera
    /// and far outside the view) is unreliable and can smear across the
    /// whole image.
    pub guard_band: f64,
    /// Parallelize over tiles.
    pub parallel: bool,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            low_pass: 0.3,
            tile_size: 16,
            transmittance_threshold: 5e-6,
            far_depth: 100.0,
            contribution_cutoff: 1e-8,
            guard_band: 2.0,
            parallel: false,
        }
    }
}

/// A primitive projected onto the image plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat2D {
    /// Index of the source primitive in its set.
    pub index: usize,
    pub mean: Vector2<f64>,
    /// Includes the low-pass floor.
    pub cov: Matrix2<f64>,
    /// Inverse covariance `(a, b, c)` for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub rgb: [f64; 3],
    /// Half-extents of the axis-aligned footprint box, pixels.
    pub radius: [f64; 2],
    /// Exponent at the footprint boundary, `-½ k²`.
    pub min_power: f64,
    /// `exp(-a)`: second-order step of the falloff along a pixel row.
    pub row_decay: f64,
}

impl Splat2D {
    #[inline]
    pub(crate) fn power(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.mean.x;
        let dy = y - self.mean.y;
        let [a, b, c] = self.conic;
        -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
    }

    fn misses_image(&self, width: usize, height: usize) -> bool {
        self.mean.x + self.radius[0] < 0.0
            || self.mean.x - self.radius[0] > (width - 1) as f64
            || self.mean.y + self.radius[1] < 0.0
            || self.mean.y - self.radius[1] > (height - 1) as f64
    }
}

/// Perspective Jacobian of the pinhole map at camera-frame point `t`.
pub(crate) fn perspective_jacobian(t: &Vector3<f64>, fx: f64, fy: f64) -> Matrix2x3<f64> {
    let z2 = t.z * t.z;
    Matrix2x3::new(fx / t.z, 0.0, -fx * t.x / z2, 0.0, fy / t.z, -fy * t.y / z2)
}

/// Projection without image-bounds culling; `None` only for primitives at
/// or behind the near plane or outside the guard band.
pub(crate) fn project_unculled(
    g: &GaussianPrimitive,
    index: usize,
    cam: &Camera,
    cfg: &RasterConfig,
) -> Option<Splat2D> {
    let e = &cam.extrinsics;
    let k = &cam.intrinsics;
    let t = e.rotation * g.mean + e.translation;
    if !(t.z > NEAR_PLANE) {
        return None;
    }
    let (du, dv) = (k.fx * t.x / t.z, k.fy * t.y / t.z);
    if du.abs() > cfg.guard_band * 0.5 * k.width as f64 || dv.abs() > cfg.guard_band * 0.5 * k.height as f64 {
        return None;
    }
    let rot = quat_normalize(&g.rotation).unwrap_or(IDENTITY_QUAT);
    let sigma3 = covariance_from(&g.scale, &rot).ok()?;
    let jw = perspective_jacobian(&t, k.fx, k.fy) * e.rotation;
    let cov = jw * sigma3 * jw.transpose() + Matrix2::identity() * cfg.low_pass;
    let cov = (cov + cov.transpose()) * 0.5;
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(0, 1)];
    assert!(det > 0.0, "2D covariance singular after low-pass floor");
    let conic = [cov[(1, 1)] / det, -cov[(0, 1)] / det, cov[(0, 0)] / det];

    let view = g.mean - e.center();
    let dir = view.try_normalize(0.0).unwrap_or_else(Vector3::z);
    let rgb = sh::eval_sh(&g.sh, &dir).ok()?;

    let extent = if g.opacity > cfg.contribution_cutoff {
        (2.0 * (g.opacity / cfg.contribution_cutoff).ln()).sqrt()
    } else {
        0.0
    };
    Some(Splat2D {
        index,
        mean: Vector2::new(du + k.cx, dv + k.cy),
        cov,
        conic,
        depth: t.z,
        opacity: g.opacity,
        rgb,
        radius: [extent * cov[(0, 0)].sqrt(), extent * cov[(1, 1)].sqrt()],
        min_power: -0.5 * extent * extent,
        row_decay: (-conic[0]).exp(),
    })
}

/// EWA projection of one primitive. Culled (`None`) when behind the near
/// plane, when its opacity is below the contribution cutoff, or when its
/// footprint misses the image.
pub fn project_gaussian(g: &GaussianPrimitive, cam: &Camera, cfg: &RasterConfig) -> Option<Splat2D> {
    project_indexed(g, 0, cam, cfg)
}

pub(crate) fn project_indexed(g: &GaussianPrimitive, index: usize, cam: &Camera, cfg: &RasterConfig) -> Option<Splat2D> {
    let s = project_unculled(g, index, cam, cfg)?;
    if s.radius[0] == 0.0 || s.misses_image(cam.width(), cam.height()) {
        return None;
    }
    Some(s)
}

/// Sorts splats front to back; equal depths keep primitive-index order.
pub(crate) fn depth_sort(splats: &mut Vec<Splat2D>) {
    // sort compact keys, then gather; (depth, index) is unique so an
    // unstable sort is deterministic
    let mut keys: Vec<(f64, usize, u32)> = splats.iter().enumerate().map(|(i, s)| (s.depth, s.index, i as u32)).collect();
    keys.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    *splats = keys.iter().map(|k| splats[k.2 as usize]).collect();
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderTarget {
    pub color: Image,
    /// Accumulated compositing weight per pixel.
    pub alpha: Vec<f64>,
    /// Alpha-weighted depth plus leftover transmittance times the far depth.
    pub depth: Vec<f64>,
    pub background: [f64; 3],
}

impl RenderTarget {
    pub fn width(&self) -> usize {
        self.color.width
    }

    pub fn height(&self) -> usize {
        self.color.height
    }

    pub fn alpha_image(&self) -> Image {
        Image::from_data(self.width(), self.height(), 1, self.alpha.clone()).expect("alpha sized to image")
    }

    pub fn depth_image(&self) -> Image {
        Image::from_data(self.width(), self.height(), 1, self.depth.clone()).expect("depth sized to image")
    }

    /// Largest absolute difference over color and alpha.
    pub fn max_abs_diff(&self, other: &RenderTarget) -> f64 {
        let alpha = self
            .alpha
            .iter()
            .zip(&other.alpha)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        self.color.max_abs_diff(&other.color).max(alpha)
    }
}

/// Per-pixel compositing state shared by both renderers so that they run
/// the same floating-point operations in the same order.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PixelAccum {
    pub transmittance: f64,
    pub color: [f64; 3],
    pub alpha: f64,
    pub depth: f64,
}

impl PixelAccum {
    pub const START: PixelAccum = PixelAccum {
        transmittance: 1.0,
        color: [0.0; 3],
        alpha: 0.0,
        depth: 0.0,
    };

    /// Composites one splat evaluated at exponent `power`.
    #[inline]
    pub fn blend(&mut self, s: &Splat2D, power: f64) {
        if power < EXP_UNDERFLOW {
            return;
        }
        self.blend_gauss(s, power.exp());
    }

    /// Composites one splat whose Gaussian falloff at this pixel is `gauss`.
    #[inline]
    pub fn blend_gauss(&mut self, s: &Splat2D, gauss: f64) {
        let a = s.opacity * gauss;
        let w = a * self.transmittance;
        self.color[0] += w * s.rgb[0];
        self.color[1] += w * s.rgb[1];
        self.color[2] += w * s.rgb[2];
        self.alpha += w;
        self.depth += w * s.depth;
        self.transmittance *= 1.0 - a;
    }

    #[inline]
    pub fn finish(&self, background: &[f64; 3], far: f64) -> ([f64; 3], f64, f64) {
        let t = self.transmittance;
        (
            [
                self.color[0] + t * background[0],
                self.color[1] + t * background[1],
                self.color[2] + t * background[2],
            ],
            self.alpha,
            self.depth + t * far,
        )
    }
}

pub(crate) fn check_set(set: &GaussianSet, cam: &Camera) -> crate::Result<()> {
    if cam.width() == 0 || cam.height() == 0 {
        return Err(crate::Error::Shape("empty image dimensions".into()));
    }
    set.validate()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraExtrinsics, CameraIntrinsics};

    fn camera() -> Camera {
        Camera::new(
            CameraIntrinsics::new(50.0, 50.0, 15.5, 15.5, 32, 32).unwrap(),
            CameraExtrinsics::identity(),
        )
    }

    #[test]
    fn isotropic_on_axis_matches_analytic_jacobian() {
        let (f, sigma, z) = (50.0, 0.2, 4.0);
        let g = GaussianPrimitive::isotropic(Vector3::new(0.0, 0.0, z), sigma, 0.8, [0.5; 3], 0);
        let cfg = RasterConfig::default();
        let s = project_gaussian(&g, &camera(), &cfg).unwrap();
        // J = diag(f/z, f/z) on the optical axis
        let v = (f * sigma / z).powi(2) + cfg.low_pass;
        assert!((s.cov - Matrix2::new(v, 0.0, 0.0, v)).abs().max() < 1e-12);
        assert!((s.mean - Vector2::new(15.5, 15.5)).norm() < 1e-12);
        assert_eq!(s.depth, z);
    }

    #[test]
    fn behind_camera_is_culled() {
        let g = GaussianPrimitive::isotropic(Vector3::new(0.0, 0.0, -1.0), 0.2, 0.8, [0.5; 3], 0);
        assert!(project_gaussian(&g, &camera(), &RasterConfig::default()).is_none());
        let g = GaussianPrimitive::isotropic(Vector3::new(100.0, 0.0, 1.0), 0.01, 0.8, [0.5; 3], 0);
        assert!(project_gaussian(&g, &camera(), &RasterConfig::default()).is_none());
    }

    #[test]
    fn rigid_translation_leaves_splat_unchanged() {
        let g = GaussianPrimitive {
            mean: Vector3::new(0.3, -0.2, 5.0),
            scale: Vector3::new(0.1, 0.3, 0.2),
            rotation: [0.9, 0.1, -0.3, 0.2],
            opacity: 0.7,
            sh: vec![[1.0, 1.5, 0.5], [0.1, 0.0, 0.2], [0.0, 0.3, 0.1], [0.2, 0.1, 0.0]],
        };
        let cam = Camera::new(
            CameraIntrinsics::new(50.0, 50.0, 15.5, 15.5, 32, 32).unwrap(),
            CameraExtrinsics::look_along(Vector3::new(0.1, 0.2, -0.3), Vector3::new(0.05, 0.0, 1.0), -Vector3::y())
                .unwrap(),
        );
        let offset = Vector3::new(12.0, -7.0, 3.5);
        let moved_cam = Camera::new(
            cam.intrinsics,
            CameraExtrinsics::look_along(cam.center() + offset, cam.extrinsics.optical_axis(), -Vector3::y())
                .unwrap(),
        );
        let moved = GaussianPrimitive {
            mean: g.mean + offset,
            ..g.clone()
        };
        let cfg = RasterConfig::default();
        let a = project_gaussian(&g, &cam, &cfg).unwrap();
        let b = project_gaussian(&moved, &moved_cam, &cfg).unwrap();
        assert!((a.mean - b.mean).norm() < 1e-9);
        assert!((a.cov - b.cov).abs().max() < 1e-9);
        assert!((a.depth - b.depth).abs() < 1e-9);
        for c in 0..3 {
            assert!((a.rgb[c] - b.rgb[c]).abs() < 1e-9);
        }
    }

    fn scene(seed: u64, n: usize, opaque: bool) -> (GaussianSet, Camera) {
        let cfg = gradcheck::GradcheckConfig {
            n_gaussians: n,
            seed,
            ..Default::default()
        };
        let (mut set, cam, _) = gradcheck::random_scene(&cfg).unwrap();
        if opaque {
            for (i, g) in set.primitives.iter_mut().enumerate() {
                g.opacity = 0.9 + 0.09 * ((i * 7919) % 13) as f64 / 13.0;
                g.scale *= 2.0;
            }
        }
        (set, cam)
    }

    #[test]
    fn tiled_render_matches_reference() {
        let cfg = RasterConfig::default();
        let mut worst: f64 = 0.0;
        for seed in 0..10 {
            for opaque in [false, true] {
                let (set, cam) = scene(seed, 64, opaque);
                let fast = rasterize(&set, &cam, [0.2, 0.4, 0.6], &cfg).unwrap();
                let slow = rasterize_reference(&set, &cam, [0.2, 0.4, 0.6], &cfg).unwrap();
                worst = worst.max(fast.max_abs_diff(&slow));
            }
        }
        assert!(worst <= 1e-5, "max deviation {worst:e}");
    }

    #[test]
    fn parallel_render_is_bitwise_identical() {
        let (set, cam) = scene(3, 64, true);
        let serial = RasterConfig::default();
        let parallel = RasterConfig {
            parallel: true,
            ..serial
        };
        let a = rasterize(&set, &cam, [0.0; 3], &serial).unwrap();
        let b = rasterize(&set, &cam, [0.0; 3], &parallel).unwrap();
        assert_eq!(a, b);
        let a = rasterize_reference(&set, &cam, [0.0; 3], &serial).unwrap();
        let b = rasterize_reference(&set, &cam, [0.0; 3], &parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn input_order_does_not_matter() {
        let (set, cam) = scene(5, 40, false);
        let mut shuffled = set.clone();
        shuffled.primitives.reverse();
        shuffled.primitives.swap(3, 17);
        let cfg = RasterConfig::default();
        let a = rasterize(&set, &cam, [0.1; 3], &cfg).unwrap();
        let b = rasterize(&shuffled, &cam, [0.1; 3], &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn weights_and_transmittance_sum_to_one() {
        let (set, cam) = scene(1, 64, true);
        let bg = [0.25, 0.5, 0.75];
        let r = rasterize_reference(&set, &cam, bg, &RasterConfig::default()).unwrap();
        let white = GaussianSet {
            primitives: set
                .primitives
                .iter()
                .map(|g| GaussianPrimitive::isotropic(g.mean, 1.0, g.opacity, [1.0; 3], set.sh_degree))
                .collect(),
            ..set.clone()
        };
        assert!(r.alpha.iter().all(|a| (0.0..=1.0).contains(a)));
        // with white splats on a black background the color equals alpha
        let w = rasterize_reference(&white, &cam, [0.0; 3], &RasterConfig::default()).unwrap();
        for (p, a) in w.alpha.iter().enumerate() {
            assert!((w.color.data[3 * p] - a).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_set_renders_background() {
        let cam = camera();
        let set = GaussianSet::new(0);
        let r = rasterize(&set, &cam, [0.3, 0.2, 0.1], &RasterConfig::default()).unwrap();
        assert!(r.color.data.chunks(3).all(|c| c == [0.3, 0.2, 0.1]));
        assert!(r.alpha.iter().all(|a| *a == 0.0));
        assert!(r.depth.iter().all(|d| *d == 100.0));
    }

    #[test]
    fn backward_requires_forward() {
        let (set, cam) = scene(0, 4, false);
        let mut r = Rasterizer::default();
        let up = Image::new(cam.width(), cam.height(), 3);
        assert!(matches!(r.backward(&set, &up), Err(crate::Error::Usage(_))));
        r.forward(&set, &cam, [0.0; 3]).unwrap();
        assert!(r.backward(&set, &up).unwrap().is_zero());
        // the cache is single use
        assert!(r.backward(&set, &up).is_err());
        r.forward(&set, &cam, [0.0; 3]).unwrap();
        let fewer = GaussianSet::from_primitives(set.sh_degree, set.primitives[..2].to_vec()).unwrap();
        assert!(r.backward(&fewer, &up).is_err());
    }
}
