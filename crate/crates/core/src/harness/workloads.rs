//! Seeded rendering workloads shared by the benchmarks and the performance
//! acceptance check.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gaussians::{lift_pixels, AnalyticHead, DepthMap, FeatureMap, GaussianPrimitive, GaussianSet};
use crate::geometry::{Camera, CameraExtrinsics, CameraIntrinsics, CameraRig, RigDelta};
use crate::pipeline::TrainingFrame;
use crate::rasterizer::{rasterize_reference, RasterConfig};

/// Camera at the origin looking down +z.
pub fn square_camera(size: usize, hfov_deg: f64) -> Result<Camera> {
    Ok(Camera::new(CameraIntrinsics::from_hfov(hfov_deg, size, size)?, CameraExtrinsics::identity()))
}

/// About `n` primitives lifted pixel-for-pixel from a synthetic view of a
/// rolling textured surface, as the feed-forward pipeline produces them,
/// plus a `size x size` camera with the same field of view to render them.
pub fn lifted_workload(n: usize, size: usize) -> Result<(GaussianSet, Camera)> {
    let side = (n as f64).sqrt().ceil() as usize;
    let source = square_camera(side, 60.0)?;
    let (mut depth, mut feats) = (Vec::with_capacity(side * side), vec![0.0; 3 * side * side]);
    for v in 0..side {
        for u in 0..side {
            let (x, y) = (u as f64 / side as f64, v as f64 / side as f64);
            depth.push(10.0 + 3.0 * (6.0 * x).sin() * (4.0 * y).cos() + 4.0 * y);
            let i = v * side + u;
            feats[i] = 0.5 + 0.4 * (23.0 * x).sin();
            feats[side * side + i] = 0.5 + 0.4 * (17.0 * y).cos();
            feats[2 * side * side + i] = 0.5 + 0.4 * (11.0 * (x + y)).sin();
        }
    }
    let depth = DepthMap::from_views(&[depth], side, side)?;
    let feats = FeatureMap::from_views(vec![feats], 3, side, side)?;
    let rig = CameraRig::new(vec!["source".into()], vec![source]);
    let set = lift_pixels(&depth, &feats, &rig, &AnalyticHead::default())?.set;
    Ok((set, square_camera(size, 60.0)?))
}

/// `n` random primitives filling the view frustum with heavy overlap:
/// 0.05–0.4 m scales at 4–40 m, so many splats cover tens of pixels.
pub fn dense_workload(n: usize, size: usize, seed: u64) -> Result<(GaussianSet, Camera)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prims = (0..n)
        .map(|_| {
            let z: f64 = rng.gen_range(4.0..40.0);
            let mean = Vector3::new(rng.gen_range(-0.6..0.6) * z, rng.gen_range(-0.6..0.6) * z, z);
            let rgb = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            let mut g = GaussianPrimitive::isotropic(mean, 0.1, rng.gen_range(0.2..0.9), rgb, 0);
            g.scale = Vector3::new(rng.gen_range(0.05..0.4), rng.gen_range(0.05..0.4), rng.gen_range(0.05..0.4));
            let q = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0f64)];
            let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-6);
            g.rotation = q.map(|v| v / norm);
            g
        })
        .collect();
    Ok((GaussianSet::from_primitives(0, prims)?, square_camera(size, 60.0)?))
}

/// Forward-looking single camera 1.5 m above the ground, vehicle frame.
pub fn front_rig(width: usize, height: usize, hfov_deg: f64) -> Result<CameraRig> {
    let k = CameraIntrinsics::from_hfov(hfov_deg, width, height)?;
    let e = CameraExtrinsics::look_along(Vector3::new(0.0, 0.0, 1.5), Vector3::x(), Vector3::z())?;
    Ok(CameraRig::new(vec!["front".into()], vec![Camera::new(k, e)]))
}

/// Opaque textured wall facing the vehicle at `distance` meters, centered
/// on the camera height, `2 * half` meters on a side.
pub fn textured_wall(distance: f64, half: f64, spacing: f64) -> Result<GaussianSet> {
    let n = (2.0 * half / spacing).round() as usize;
    let mut prims = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let y = -half + (i as f64 + 0.5) * spacing;
            let z = 1.5 - half + (j as f64 + 0.5) * spacing;
            let rgb = [0.5 + 0.3 * (0.7 * y).sin(), 0.5 + 0.3 * (0.9 * z).cos(), 0.4 + 0.2 * (0.5 * (y + z)).sin()];
            let mut g = GaussianPrimitive::isotropic(Vector3::new(distance, y, z), spacing * 0.6, 0.98, rgb, 0);
            g.scale.x = 0.02;
            prims.push(g);
        }
    }
    GaussianSet::from_primitives(0, prims)
}

/// Ground-truth color and depth of `set` through every camera of `rig`.
pub fn render_truth(set: &GaussianSet, rig: &CameraRig, background: [f64; 3]) -> Result<(Vec<crate::image::Image>, DepthMap)> {
    let renders = rig
        .cameras
        .iter()
        .map(|c| rasterize_reference(set, c, background, &RasterConfig::default()))
        .collect::<Result<Vec<_>>>()?;
    let (h, w) = (renders[0].height(), renders[0].width());
    let depth = DepthMap::from_views(&renders.iter().map(|r| r.depth.clone()).collect::<Vec<_>>(), h, w)?;
    Ok((renders.into_iter().map(|r| r.color).collect(), depth))
}

/// Fixed toy scene for head training: a textured wall in front of one
/// 16x12 camera, with a +2° pitch novel view for the cyclic term.
pub fn toy_training_frame() -> Result<TrainingFrame> {
    let rig = front_rig(16, 12, 60.0)?;
    let (images, depth) = render_truth(&textured_wall(5.0, 6.0, 0.25)?, &rig, [0.0; 3])?;
    Ok(TrainingFrame {
        images,
        depth,
        rig,
        delta: RigDelta::pitch(2.0),
    })
}
