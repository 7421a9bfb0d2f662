//! Seeded driving scenes: a textured ground plane, box-shaped agents built
//! from Gaussian clusters, and a smooth ego trajectory sampled at 2 Hz.

use nalgebra::{Isometry3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussians::{GaussianPrimitive, GaussianSet, IDENTITY_QUAT};
use crate::geometry::{Camera, CameraExtrinsics, CameraIntrinsics, CameraRig, RigDelta};
use crate::image::Image;
use crate::rasterizer::{rasterize_reference, RasterConfig};

/// Seconds between timesteps.
pub const DT: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub n_objects: usize,
    pub n_timesteps: usize,
    /// Side of the square arena centered on the ego start, meters.
    pub arena: f64,
    /// Ground patch: `[behind, ahead]` of the start and half its width.
    pub ground_behind: f64,
    pub ground_ahead: f64,
    pub ground_half_width: f64,
    pub ground_spacing: f64,
    pub checker_size: f64,
    /// Spacing of the Gaussians on box faces.
    pub box_spacing: f64,
    pub ego_speed: f64,
    pub max_yaw_rate: f64,
    pub max_agent_speed: f64,
    /// Longitudinal and lateral placement window of agents at t = 0.
    pub agent_ahead: [f64; 2],
    pub agent_lateral: f64,
    /// Agents start at least this far from the ego lane center.
    pub agent_min_lateral: f64,
    /// Heading jitter around lane direction, radians.
    pub agent_heading_jitter: f64,
    pub sky: [f64; 3],
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_objects: 5,
            n_timesteps: 10,
            arena: 100.0,
            ground_behind: 10.0,
            ground_ahead: 60.0,
            ground_half_width: 14.0,
            ground_spacing: 0.7,
            checker_size: 2.0,
            box_spacing: 0.4,
            ego_speed: 5.0,
            max_yaw_rate: 0.05,
            max_agent_speed: 4.0,
            agent_ahead: [8.0, 30.0],
            agent_lateral: 7.0,
            agent_min_lateral: 3.0,
            agent_heading_jitter: 0.08,
            sky: [0.55, 0.7, 0.9],
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("arena", self.arena),
            ("ground_spacing", self.ground_spacing),
            ("checker_size", self.checker_size),
            ("box_spacing", self.box_spacing),
        ];
        for (k, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("scene.{k} must be positive, got {v}")));
            }
        }
        if self.n_timesteps == 0 {
            return Err(Error::Config("scene.n_timesteps must be at least 1".into()));
        }
        if !(0.0 <= self.agent_min_lateral && self.agent_min_lateral <= self.agent_lateral) {
            return Err(Error::Config(format!(
                "scene.agent_min_lateral ({}) must lie in [0, agent_lateral = {}]",
                self.agent_min_lateral, self.agent_lateral
            )));
        }
        if !(self.ego_speed * DT < 5.0) {
            return Err(Error::Config("scene.ego_speed moves the ego 5 m or more per step".into()));
        }
        Ok(())
    }
}

/// Oriented box state at one timestep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxState {
    /// Box center, world frame (the bottom face rests on the ground).
    pub center: Vector3<f64>,
    pub yaw: f64,
    pub velocity: Vector2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTrack {
    /// Length, width, height.
    pub size: Vector3<f64>,
    pub color: [f64; 3],
    pub states: Vec<BoxState>,
}

/// 2D oriented box for the planning metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox {
    pub center: Vector2<f64>,
    pub length: f64,
    pub width: f64,
    pub yaw: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    pub config: SceneConfig,
    pub ground: GaussianSet,
    pub objects: Vec<ObjectTrack>,
    /// World-from-ego, one per timestep.
    pub ego: Vec<Isometry3<f64>>,
}

fn ground_color(x: f64, y: f64, checker: f64) -> [f64; 3] {
    let cell = ((x / checker).floor() + (y / checker).floor()) as i64;
    let base = if cell.rem_euclid(2) == 0 { 0.32 } else { 0.5 };
    let ripple = 0.06 * (0.9 * x).sin() * (1.3 * y).cos();
    [base + ripple, base + 0.04 + ripple, base - 0.03 + ripple]
}

/// Symmetric sample positions across `[-len/2, len/2]`.
fn symmetric_grid(len: f64, spacing: f64) -> Vec<f64> {
    let n = (len / spacing).ceil().max(1.0) as usize;
    (0..n).map(|i| -len / 2.0 + (i as f64 + 0.5) * len / n as f64).collect()
}

/// Points on the six faces of a box centered at the origin. The set is
/// symmetric under negation, so its centroid is the box center.
pub fn box_surface_points(size: &Vector3<f64>, spacing: f64) -> Vec<Vector3<f64>> {
    let mut pts = Vec::new();
    for axis in 0..3 {
        let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
        let (ga, gb) = (symmetric_grid(size[a], spacing), symmetric_grid(size[b], spacing));
        for sign in [-1.0, 1.0] {
            for &u in &ga {
                for &v in &gb {
                    let mut p = Vector3::zeros();
                    p[axis] = sign * size[axis] / 2.0;
                    p[a] = u;
                    p[b] = v;
                    pts.push(p);
                }
            }
        }
    }
    pts
}

fn yaw_pose(center: Vector3<f64>, yaw: f64) -> Isometry3<f64> {
    Isometry3::new(center, Vector3::z() * yaw)
}

impl ObjectTrack {
    pub fn footprint(&self, t: usize) -> OrientedBox {
        let s = &self.states[t];
        OrientedBox {
            center: s.center.xy(),
            length: self.size.x,
            width: self.size.y,
            yaw: s.yaw,
        }
    }

    /// The cluster at timestep `t`, world frame.
    pub fn cluster(&self, t: usize, spacing: f64) -> Vec<GaussianPrimitive> {
        let s = &self.states[t];
        let pose = yaw_pose(s.center, s.yaw);
        box_surface_points(&self.size, spacing)
            .into_iter()
            .map(|p| {
                // faces facing the sky are a touch brighter
                let shade = if (p.z - self.size.z / 2.0).abs() < 1e-12 { 1.15 } else { 1.0 };
                let rgb = self.color.map(|c| (c * shade).min(1.0));
                let mut g = GaussianPrimitive::isotropic((pose * nalgebra::Point3::from(p)).coords, 0.0, 0.95, rgb, 0);
                g.scale = Vector3::repeat(spacing * 0.55);
                g
            })
            .collect()
    }
}

impl SyntheticScene {
    pub fn n_timesteps(&self) -> usize {
        self.ego.len()
    }

    /// Ground plus every agent at timestep `t`.
    pub fn gaussians_at(&self, t: usize) -> Result<GaussianSet> {
        if t >= self.n_timesteps() {
            return Err(Error::Config(format!("timestep {t} outside 0..{}", self.n_timesteps())));
        }
        let mut prims = self.ground.primitives.clone();
        for obj in &self.objects {
            prims.extend(obj.cluster(t, self.config.box_spacing));
        }
        GaussianSet::from_primitives(0, prims)
    }

    /// Footprints of every agent at timestep `t`, in the ego frame of `frame_t`.
    pub fn obstacles(&self, t: usize, frame_t: usize) -> Vec<OrientedBox> {
        let inv = self.ego[frame_t].inverse();
        let (_, _, ego_yaw) = inv.rotation.euler_angles();
        self.objects
            .iter()
            .map(|o| {
                let b = o.footprint(t);
                let c = inv * nalgebra::Point3::new(b.center.x, b.center.y, 0.0);
                OrientedBox {
                    center: c.coords.xy(),
                    yaw: b.yaw + ego_yaw,
                    ..b
                }
            })
            .collect()
    }

    /// Stable byte encoding, used to compare scenes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.ground.to_bytes();
        let mut push = |v: f64| out.extend_from_slice(&v.to_le_bytes());
        for o in &self.objects {
            o.size.iter().for_each(|v| push(*v));
            o.color.iter().for_each(|v| push(*v));
            for s in &o.states {
                s.center.iter().for_each(|v| push(*v));
                push(s.yaw);
                s.velocity.iter().for_each(|v| push(*v));
            }
        }
        for p in &self.ego {
            p.translation.vector.iter().for_each(|v| push(*v));
            p.rotation.coords.iter().for_each(|v| push(*v));
        }
        out
    }
}

/// Deterministic scene for `seed`; `n_objects` and `n_timesteps` override the config.
pub fn build_scene(seed: u64, n_objects: usize, n_timesteps: usize, config: &SceneConfig) -> Result<SyntheticScene> {
    let config = SceneConfig {
        n_objects,
        n_timesteps,
        ..config.clone()
    };
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // ego: constant speed, constant yaw rate, exact arcs
    let yaw_rate = rng.gen_range(-config.max_yaw_rate..=config.max_yaw_rate);
    let mut ego = Vec::with_capacity(n_timesteps);
    let (mut pos, mut yaw) = (Vector2::zeros(), 0.0f64);
    for _ in 0..n_timesteps {
        ego.push(yaw_pose(Vector3::new(pos.x, pos.y, 0.0), yaw));
        let next = yaw + yaw_rate * DT;
        let mid = 0.5 * (yaw + next);
        pos += Vector2::new(mid.cos(), mid.sin()) * config.ego_speed * DT;
        yaw = next;
    }

    let mut ground = Vec::new();
    let s = config.ground_spacing;
    let nx = ((config.ground_behind + config.ground_ahead) / s).round() as usize;
    let ny = (2.0 * config.ground_half_width / s).round() as usize;
    for i in 0..nx {
        for j in 0..ny {
            let x = -config.ground_behind + (i as f64 + 0.5) * s;
            let y = -config.ground_half_width + (j as f64 + 0.5) * s;
            let mut g = GaussianPrimitive::isotropic(Vector3::new(x, y, 0.0), 0.0, 0.95, ground_color(x, y, config.checker_size), 0);
            g.scale = Vector3::new(0.6 * s, 0.6 * s, 0.02);
            g.rotation = IDENTITY_QUAT;
            ground.push(g);
        }
    }
    let ground = GaussianSet::from_primitives(0, ground)?;

    let half = config.arena / 2.0;
    let objects = (0..n_objects)
        .map(|_| {
            let size = Vector3::new(rng.gen_range(3.5..5.0), rng.gen_range(1.7..2.2), rng.gen_range(1.4..2.0));
            let color = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
            // lane-aligned traffic on either side of the ego lane, either direction
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let start = Vector2::new(
                rng.gen_range(config.agent_ahead[0]..=config.agent_ahead[1]),
                side * rng.gen_range(config.agent_min_lateral..=config.agent_lateral),
            );
            let heading = if rng.gen_bool(0.5) { 0.0 } else { std::f64::consts::PI };
            let yaw = heading + rng.gen_range(-config.agent_heading_jitter..=config.agent_heading_jitter);
            let moving = rng.gen_bool(0.7);
            let speeds = [0, 1].map(|_| if moving { rng.gen_range(0.0..=config.max_agent_speed) } else { 0.0 });
            let switch = n_timesteps / 2;
            let mut p = start;
            let states = (0..n_timesteps)
                .map(|t| {
                    let v = Vector2::new(yaw.cos(), yaw.sin()) * speeds[usize::from(t >= switch)];
                    let st = BoxState {
                        center: Vector3::new(p.x.clamp(-half, half), p.y.clamp(-half, half), size.z / 2.0),
                        yaw,
                        velocity: v,
                    };
                    p += v * DT;
                    st
                })
                .collect();
            ObjectTrack { size, color, states }
        })
        .collect();

    Ok(SyntheticScene {
        seed,
        config,
        ground,
        objects,
        ego,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigConfig {
    pub width: usize,
    pub height: usize,
    pub hfov_deg: f64,
    pub mount_height: f64,
    pub mount_forward: f64,
    /// One camera per entry, yaw about the vehicle up axis.
    pub yaws_deg: Vec<f64>,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            width: 48,
            height: 32,
            hfov_deg: 70.0,
            mount_height: 1.6,
            mount_forward: 1.0,
            yaws_deg: vec![30.0, -30.0],
        }
    }
}

impl RigConfig {
    /// Rig in the vehicle frame (x forward, y left, z up).
    pub fn build(&self) -> Result<CameraRig> {
        if self.yaws_deg.is_empty() {
            return Err(Error::Config("rig.yaws_deg must list at least one camera".into()));
        }
        let k = CameraIntrinsics::from_hfov(self.hfov_deg, self.width, self.height)?;
        let mut names = Vec::new();
        let mut cams = Vec::new();
        for (i, yaw) in self.yaws_deg.iter().enumerate() {
            let y = yaw.to_radians();
            let center = Vector3::new(self.mount_forward, 0.0, self.mount_height);
            let ext = CameraExtrinsics::look_along(center, Vector3::new(y.cos(), y.sin(), 0.0), Vector3::z())?;
            names.push(format!("cam{i}"));
            cams.push(Camera::new(k, ext));
        }
        Ok(CameraRig::new(names, cams))
    }
}

/// Ground-truth color and depth for one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthView {
    pub color: Image,
    pub depth: Vec<f64>,
    pub alpha: Vec<f64>,
}

/// Renders for each `(delta, timestep)`, cameras in rig order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub deltas: Vec<RigDelta>,
    pub timesteps: Vec<usize>,
    /// Indexed `[delta][timestep][camera]`.
    pub views: Vec<Vec<Vec<GroundTruthView>>>,
}

impl Dataset {
    pub fn get(&self, delta: usize, t: usize) -> &[GroundTruthView] {
        let ti = self.timesteps.iter().position(|x| *x == t).expect("timestep not rendered");
        &self.views[delta][ti]
    }
}

/// Ground-truth renders through the brute-force reference rasterizer.
pub fn render_dataset(
    scene: &SyntheticScene,
    rig: &CameraRig,
    deltas: &[RigDelta],
    timesteps: &[usize],
    raster: &RasterConfig,
) -> Result<Dataset> {
    let sets = timesteps.iter().map(|&t| scene.gaussians_at(t)).collect::<Result<Vec<_>>>()?;
    let mut views = Vec::with_capacity(deltas.len());
    for d in deltas {
        let local = rig.perturbed(d)?;
        let mut per_t = Vec::with_capacity(timesteps.len());
        for (set, &t) in sets.iter().zip(timesteps) {
            let world = local.in_world(&scene.ego[t]);
            let cams = world
                .cameras
                .iter()
                .map(|c| {
                    let r = rasterize_reference(set, c, scene.config.sky, raster)?;
                    Ok(GroundTruthView {
                        color: r.color,
                        depth: r.depth,
                        alpha: r.alpha,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            per_t.push(cams);
        }
        views.push(per_t);
    }
    Ok(Dataset {
        deltas: deltas.to_vec(),
        timesteps: timesteps.to_vec(),
        views,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let c = SceneConfig::default();
        let a = build_scene(3, 4, 6, &c).unwrap();
        let b = build_scene(3, 4, 6, &c).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_ne!(a.to_bytes(), build_scene(4, 4, 6, &c).unwrap().to_bytes());
    }

    #[test]
    fn cluster_centroids_match_box_centers() {
        let c = SceneConfig::default();
        let scene = build_scene(11, 5, 4, &c).unwrap();
        assert_eq!(scene.objects.len(), 5);
        for t in 0..4 {
            for o in &scene.objects {
                let pts = o.cluster(t, c.box_spacing);
                let centroid = pts.iter().map(|g| g.mean).sum::<Vector3<f64>>() / pts.len() as f64;
                assert!((centroid - o.states[t].center).norm() < 1e-6);
            }
        }
        let total = scene.gaussians_at(0).unwrap().len();
        let clusters: usize = scene.objects.iter().map(|o| o.cluster(0, c.box_spacing).len()).sum();
        assert_eq!(total, scene.ground.len() + clusters);
    }

    #[test]
    fn scene_invariants() {
        let c = SceneConfig::default();
        for seed in 0..10 {
            let s = build_scene(seed, 6, 12, &c).unwrap();
            for w in s.ego.windows(2) {
                assert!((w[1].translation.vector - w[0].translation.vector).norm() < 5.0);
            }
            for o in &s.objects {
                for st in &o.states {
                    assert!(st.center.x.abs() <= 50.0 && st.center.y.abs() <= 50.0);
                }
            }
        }
    }

    #[test]
    fn empty_scene_stays_below_the_horizon() {
        let c = SceneConfig::default();
        let scene = build_scene(2, 0, 2, &c).unwrap();
        let rig = RigConfig::default().build().unwrap();
        let data = render_dataset(&scene, &rig, &[RigDelta::ZERO], &[0, 1], &RasterConfig::default()).unwrap();
        for t in [0, 1] {
            for (view, cam) in data.get(0, t).iter().zip(&rig.cameras) {
                let (w, cy) = (view.color.width, cam.intrinsics.cy);
                let mut below = 0;
                for (i, a) in view.alpha.iter().enumerate() {
                    let v = (i / w) as f64;
                    // one pixel of slack for the anti-aliasing low-pass
                    if *a >= 1.0 / 255.0 {
                        assert!(v > cy - 1.0, "visible ground at row {v}, horizon {cy}");
                        below += 1;
                    }
                }
                assert!(below > 0);
            }
        }
    }

    #[test]
    fn deltas_change_renders() {
        let c = SceneConfig::default();
        let scene = build_scene(5, 3, 1, &c).unwrap();
        let rig = RigConfig::default().build().unwrap();
        let deltas = [RigDelta::ZERO, RigDelta::ZERO, RigDelta::height(1.0)];
        let data = render_dataset(&scene, &rig, &deltas, &[0], &RasterConfig::default()).unwrap();
        assert_eq!(data.get(0, 0), data.get(1, 0));
        for (a, b) in data.get(0, 0).iter().zip(data.get(2, 0)) {
            assert!(crate::image::psnr(&a.color, &b.color).unwrap().is_finite());
        }
    }
}
