use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use super::tile::{footprint_span, row_span, ForwardCache};
use super::{perspective_jacobian, EXP_UNDERFLOW};
use crate::error::{Error, Result};
use crate::gaussians::{
    covariance_from, quat_normalize, quat_normalize_backward, quat_to_matrix, quat_to_matrix_backward, GaussianSet,
    Quat,
};
use crate::image::Image;
use crate::sh;

/// Gradients with respect to every primitive parameter, indexed like the set.
/// Rotation gradients are with respect to the stored (possibly unnormalized)
/// quaternion.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGrads {
    pub mean: Vec<Vector3<f64>>,
    pub scale: Vec<Vector3<f64>>,
    pub rotation: Vec<Quat>,
    pub opacity: Vec<f64>,
    pub sh: Vec<Vec<[f64; 3]>>,
}

impl GaussianGrads {
    pub fn zeros(set: &GaussianSet) -> Self {
        let n = set.len();
        Self {
            mean: vec![Vector3::zeros(); n],
            scale: vec![Vector3::zeros(); n],
            rotation: vec![[0.0; 4]; n],
            opacity: vec![0.0; n],
            sh: set.primitives.iter().map(|g| vec![[0.0; 3]; g.sh.len()]).collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.mean.iter().all(|v| v.iter().all(|x| *x == 0.0))
            && self.scale.iter().all(|v| v.iter().all(|x| *x == 0.0))
            && self.rotation.iter().flatten().all(|x| *x == 0.0)
            && self.opacity.iter().all(|x| *x == 0.0)
            && self.sh.iter().flatten().flatten().all(|x| *x == 0.0)
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct SplatGrad {
    mean2d: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    rgb: [f64; 3],
}

struct Contribution {
    splat: usize,
    dx: f64,
    dy: f64,
    gauss: f64,
    alpha: f64,
    transmittance: f64,
}

/// Gradient of `Σ_pixels ⟨upstream, color⟩` for the render described by
/// `cache`. The depth sort is treated as locally constant.
pub fn rasterize_backward(set: &GaussianSet, cache: &ForwardCache, upstream: &Image) -> Result<GaussianGrads> {
    let cam = &cache.camera;
    if set.len() != cache.n_primitives {
        return Err(Error::Usage(format!(
            "forward cache was built for {} primitives, got {}",
            cache.n_primitives,
            set.len()
        )));
    }
    if upstream.width != cam.width() || upstream.height != cam.height() || upstream.channels != 3 {
        return Err(Error::Shape(format!(
            "upstream gradient is {}x{}x{}, render is {}x{}x3",
            upstream.width,
            upstream.height,
            upstream.channels,
            cam.width(),
            cam.height()
        )));
    }

    let mut sg = vec![SplatGrad::default(); cache.splats.len()];
    let threshold = cache.config.transmittance_threshold;
    let mut contribs: Vec<Contribution> = Vec::new();
    for tile in 0..cache.tiles.len() {
        let (x0, x1, y0, y1) = cache.tile_bounds(tile);
        for y in y0..y1 {
            for x in x0..x1 {
                let up = upstream.pixel(x, y);
                if up.iter().all(|v| *v == 0.0) {
                    continue;
                }
                // replay the forward pass for this pixel
                contribs.clear();
                let mut t = 1.0;
                for &si in &cache.tiles[tile] {
                    let s = &cache.splats[si as usize];
                    let (py0, py1) = footprint_span(s.mean.y, s.radius[1], y0, y1);
                    let (xi, yi) = (x as isize, y as isize);
                    if yi < py0 || yi > py1 {
                        continue;
                    }
                    let (px0, px1) = row_span(s, y as f64, x0, x1);
                    if xi < px0 || xi > px1 || yi < py0 || yi > py1 {
                        continue;
                    }
                    let power = s.power(x as f64, y as f64);
                    if power < EXP_UNDERFLOW {
                        continue;
                    }
                    let gauss = power.exp();
                    let a = s.opacity * gauss;
                    contribs.push(Contribution {
                        splat: si as usize,
                        dx: x as f64 - s.mean.x,
                        dy: y as f64 - s.mean.y,
                        gauss,
                        alpha: a,
                        transmittance: t,
                    });
                    t *= 1.0 - a;
                    if t < threshold {
                        break;
                    }
                }
                let mut after = cache.background;
                for c in contribs.iter().rev() {
                    let s = &cache.splats[c.splat];
                    let g = &mut sg[c.splat];
                    let w = c.alpha * c.transmittance;
                    let mut d_alpha = 0.0;
                    for ch in 0..3 {
                        g.rgb[ch] += w * up[ch];
                        d_alpha += up[ch] * (s.rgb[ch] - after[ch]);
                        after[ch] = c.alpha * s.rgb[ch] + (1.0 - c.alpha) * after[ch];
                    }
                    d_alpha *= c.transmittance;
                    g.opacity += d_alpha * c.gauss;
                    let d_power = d_alpha * s.opacity * c.gauss;
                    let [ca, cb, cc] = s.conic;
                    g.mean2d[0] += d_power * (ca * c.dx + cb * c.dy);
                    g.mean2d[1] += d_power * (cc * c.dy + cb * c.dx);
                    g.conic[0] += d_power * (-0.5 * c.dx * c.dx);
                    g.conic[1] += d_power * (-c.dx * c.dy);
                    g.conic[2] += d_power * (-0.5 * c.dy * c.dy);
                }
            }
        }
    }

    let mut grads = GaussianGrads::zeros(set);
    let (e, k) = (&cam.extrinsics, &cam.intrinsics);
    let w = e.rotation;
    for (s, g) in cache.splats.iter().zip(&sg) {
        let i = s.index;
        let prim = &set.primitives[i];
        grads.opacity[i] += g.opacity;

        // color: SH evaluation along the view direction, clamped to [0, 1]
        let view = prim.mean - e.center();
        let dist = view.norm();
        let dir = view / dist;
        let basis = sh::basis(&dir, set.sh_degree);
        let basis_grad = sh::basis_grad(&dir, set.sh_degree);
        let raw = sh::eval_sh_unclamped(&prim.sh, &dir)?;
        let mut d_dir = Vector3::zeros();
        for ch in 0..3 {
            if !(raw[ch] > 0.0 && raw[ch] < 1.0) {
                continue;
            }
            let d = g.rgb[ch];
            for (l, coeff) in prim.sh.iter().enumerate() {
                grads.sh[i][l][ch] += d * basis[l];
                d_dir += Vector3::from(basis_grad[l]) * (d * coeff[ch]);
            }
        }
        let mut d_mean = (d_dir - dir * dir.dot(&d_dir)) / dist;

        // conic -> 2D covariance
        let conic = Matrix2::new(s.conic[0], s.conic[1], s.conic[1], s.conic[2]);
        let g_conic = Matrix2::new(g.conic[0], 0.5 * g.conic[1], 0.5 * g.conic[1], g.conic[2]);
        let g_cov2 = -(conic * g_conic * conic);

        // 2D covariance -> 3D covariance and Jacobian
        let t = w * prim.mean + e.translation;
        let jac = perspective_jacobian(&t, k.fx, k.fy);
        let jw: Matrix2x3<f64> = jac * w;
        let q = quat_normalize(&prim.rotation)?;
        let sigma = covariance_from(&prim.scale, &q)?;
        let g_sigma: Matrix3<f64> = jw.transpose() * g_cov2 * jw;
        let g_jw: Matrix2x3<f64> = 2.0 * g_cov2 * jw * sigma;
        let g_jac: Matrix2x3<f64> = g_jw * w.transpose();

        // Jacobian and projected mean -> camera-frame position
        let (fx, fy) = (k.fx, k.fy);
        let (x, y, z) = (t.x, t.y, t.z);
        let (z2, z3) = (z * z, z * z * z);
        let dm = Vector2::new(g.mean2d[0], g.mean2d[1]);
        let d_t = Vector3::new(
            g_jac[(0, 2)] * (-fx / z2) + dm.x * (fx / z),
            g_jac[(1, 2)] * (-fy / z2) + dm.y * (fy / z),
            g_jac[(0, 0)] * (-fx / z2)
                + g_jac[(0, 2)] * (2.0 * fx * x / z3)
                + g_jac[(1, 1)] * (-fy / z2)
                + g_jac[(1, 2)] * (2.0 * fy * y / z3)
                + dm.x * (-fx * x / z2)
                + dm.y * (-fy * y / z2),
        );
        d_mean += w.transpose() * d_t;
        grads.mean[i] += d_mean;

        // 3D covariance -> scale and rotation
        let r = quat_to_matrix(&q);
        let m = r * Matrix3::from_diagonal(&prim.scale);
        let g_m = 2.0 * g_sigma * m;
        let mut g_r = Matrix3::zeros();
        for col in 0..3 {
            let mut acc = 0.0;
            for row in 0..3 {
                acc += g_m[(row, col)] * r[(row, col)];
                g_r[(row, col)] = g_m[(row, col)] * prim.scale[col];
            }
            grads.scale[i][col] += acc;
        }
        let g_q = quat_to_matrix_backward(&q, &g_r);
        let g_raw = quat_normalize_backward(&prim.rotation, &g_q);
        for c in 0..4 {
            grads.rotation[i][c] += g_raw[c];
        }
    }
    Ok(grads)
}
