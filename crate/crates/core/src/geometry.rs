//! Pinhole cameras, multi-camera rigs and the rig-perturbation protocol.
//!
//! Conventions: right-handed frames, the camera looks along +z with image x
//! pointing right and image y pointing down. Pixel centers sit on integer
//! coordinates. Extrinsics map world (or vehicle) points into the camera
//! frame: `p_cam = R * p_world + t`.

use std::path::Path;

use nalgebra::{Isometry3, Matrix3, Matrix4, Rotation3, Unit, Vector2, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points closer than this to the image plane are rejected, not clamped.
pub const NEAR_PLANE: f64 = 1e-4;

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Square pixels, principal point at the image center, horizontal field of view in degrees.
    pub fn from_hfov(hfov_deg: f64, width: usize, height: usize) -> Result<Self> {
        let f = (width as f64 / 2.0) / (hfov_deg.to_radians() / 2.0).tan();
        Self::new(
            f,
            f,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidCamera(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraExtrinsics {
    /// camera-from-world rotation
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl CameraExtrinsics {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        check_rotation(&rotation)?;
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidPose("non-finite translation".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Camera placed at `center` whose optical axis points along `forward`;
    /// image-up is aligned with `up` as far as orthogonality allows.
    pub fn look_along(center: Vector3<f64>, forward: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let z = forward
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidPose("zero forward direction".into()))?;
        let x = z
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidPose("forward parallel to up".into()))?;
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Ok(Self {
            rotation,
            translation: -(rotation * center),
        })
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Optical axis (+z of the camera) expressed in world coordinates.
    pub fn optical_axis(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Row-major 4x4 homogeneous matrix.
    pub fn to_matrix_row_major(&self) -> [f64; 16] {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = m[(r, c)];
            }
        }
        out
    }

    pub fn from_matrix_row_major(m: &[f64; 16]) -> Result<Self> {
        let bottom = [m[12], m[13], m[14], m[15]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidPose(format!(
                "bottom row of extrinsic must be [0, 0, 0, 1], got {bottom:?}"
            )));
        }
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        Self::new(rotation, Vector3::new(m[3], m[7], m[11]))
    }

    /// Re-express a camera-from-vehicle extrinsic as camera-from-world given the
    /// vehicle pose in the world.
    pub fn compose_world(&self, world_from_vehicle: &Isometry3<f64>) -> Self {
        let vehicle_from_world = world_from_vehicle.inverse();
        let r_vw = vehicle_from_world.rotation.to_rotation_matrix().into_inner();
        let t_vw = vehicle_from_world.translation.vector;
        Self {
            rotation: self.rotation * r_vw,
            translation: self.rotation * t_vw + self.translation,
        }
    }
}

fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    if !r.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidPose("non-finite rotation".into()));
    }
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    if err > ORTHONORMAL_TOL {
        return Err(Error::InvalidPose(format!(
            "rotation is not orthonormal (max |R^T R - I| = {err:e})"
        )));
    }
    if r.determinant() <= 0.0 {
        return Err(Error::InvalidPose("rotation has negative determinant".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: CameraExtrinsics,
}

impl Camera {
    pub fn new(intrinsics: CameraIntrinsics, extrinsics: CameraExtrinsics) -> Self {
        Self {
            intrinsics,
            extrinsics,
        }
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn center(&self) -> Vector3<f64> {
        self.extrinsics.center()
    }

    pub fn project(&self, point: &Vector3<f64>) -> Result<(Vector2<f64>, f64)> {
        project(point, self)
    }

    pub fn unproject(&self, pixel: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>> {
        unproject(pixel, depth, self)
    }
}

/// Pinhole projection. Returns the pixel and the camera-frame depth.
pub fn project(point: &Vector3<f64>, cam: &Camera) -> Result<(Vector2<f64>, f64)> {
    let p = cam.extrinsics.transform(point);
    if !(p.z > NEAR_PLANE) {
        return Err(Error::BehindCamera {
            depth: p.z,
            near: NEAR_PLANE,
        });
    }
    let k = &cam.intrinsics;
    let pixel = Vector2::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy);
    Ok((pixel, p.z))
}

pub fn unproject(pixel: &Vector2<f64>, depth: f64, cam: &Camera) -> Result<Vector3<f64>> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(Error::InvalidDepth {
            camera: 0,
            u: pixel.x.max(0.0) as usize,
            v: pixel.y.max(0.0) as usize,
            depth,
        });
    }
    let k = &cam.intrinsics;
    let p_cam = Vector3::new(
        (pixel.x - k.cx) / k.fx * depth,
        (pixel.y - k.cy) / k.fy * depth,
        depth,
    );
    let e = &cam.extrinsics;
    Ok(e.rotation.transpose() * (p_cam - e.translation))
}

/// Vehicle-level change of sensor mount applied jointly to every camera of a rig.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RigDelta {
    pub pitch_deg: f64,
    pub height_m: f64,
    pub depth_m: f64,
}

impl RigDelta {
    pub const ZERO: RigDelta = RigDelta {
        pitch_deg: 0.0,
        height_m: 0.0,
        depth_m: 0.0,
    };

    pub fn new(pitch_deg: f64, height_m: f64, depth_m: f64) -> Self {
        Self {
            pitch_deg,
            height_m,
            depth_m,
        }
    }

    pub fn pitch(deg: f64) -> Self {
        Self::new(deg, 0.0, 0.0)
    }

    pub fn height(m: f64) -> Self {
        Self::new(0.0, m, 0.0)
    }

    pub fn depth(m: f64) -> Self {
        Self::new(0.0, 0.0, m)
    }

    pub fn is_zero(&self) -> bool {
        self.pitch_deg == 0.0 && self.height_m == 0.0 && self.depth_m == 0.0
    }

    pub fn is_finite(&self) -> bool {
        self.pitch_deg.is_finite() && self.height_m.is_finite() && self.depth_m.is_finite()
    }

    pub fn negated(&self) -> Self {
        Self::new(-self.pitch_deg, -self.height_m, -self.depth_m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub low: f64,
    pub high: f64,
}

impl Interval {
    pub const fn new(low: f64, high: f64) -> Self {
        Self { low, high }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.low <= v && v <= self.high
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.low + self.high)
    }

    pub fn width(&self) -> f64 {
        self.high - self.low
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigDeltaRange {
    pub pitch: Interval,
    pub height: Interval,
    pub depth: Interval,
}

impl RigDeltaRange {
    /// Training range used for the headline experiments.
    pub const DEFAULT: RigDeltaRange = RigDeltaRange {
        pitch: Interval::new(-10.0, 5.0),
        height: Interval::new(-0.7, 1.0),
        depth: Interval::new(-0.2, 1.0),
    };

    /// Wider than every test-time setting.
    pub const SUPERSET: RigDeltaRange = RigDeltaRange {
        pitch: Interval::new(-15.0, 10.0),
        height: Interval::new(-1.0, 1.5),
        depth: Interval::new(-0.5, 1.5),
    };

    /// Narrower than, and disjoint from, every test-time setting.
    pub const SUBSET: RigDeltaRange = RigDeltaRange {
        pitch: Interval::new(-5.0, 2.0),
        height: Interval::new(-0.3, 0.5),
        depth: Interval::new(-0.1, 0.5),
    };

    pub const ZERO: RigDeltaRange = RigDeltaRange {
        pitch: Interval::new(0.0, 0.0),
        height: Interval::new(0.0, 0.0),
        depth: Interval::new(0.0, 0.0),
    };

    pub fn new(pitch: Interval, height: Interval, depth: Interval) -> Result<Self> {
        let r = Self {
            pitch,
            height,
            depth,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, iv) in [("pitch", self.pitch), ("height", self.height), ("depth", self.depth)] {
            if !(iv.low.is_finite() && iv.high.is_finite() && iv.low <= iv.high) {
                return Err(Error::Config(format!(
                    "{name} interval [{}, {}] is invalid",
                    iv.low, iv.high
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, d: &RigDelta) -> bool {
        self.pitch.contains(d.pitch_deg) && self.height.contains(d.height_m) && self.depth.contains(d.depth_m)
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "default" => Some(Self::DEFAULT),
            "superset" => Some(Self::SUPERSET),
            "subset" => Some(Self::SUBSET),
            _ => None,
        }
    }
}

/// Draws each component uniformly from its interval.
pub fn sample_rig_delta<R: Rng + ?Sized>(rng: &mut R, range: &RigDeltaRange) -> RigDelta {
    let mut draw = |iv: Interval| {
        if iv.low == iv.high {
            iv.low
        } else {
            rng.gen_range(iv.low..=iv.high)
        }
    };
    RigDelta {
        pitch_deg: draw(range.pitch),
        height_m: draw(range.height),
        depth_m: draw(range.depth),
    }
}

fn check_axes(forward: &Vector3<f64>, up: &Vector3<f64>) -> Result<()> {
    let unit = |v: &Vector3<f64>| (v.norm() - 1.0).abs() <= ORTHONORMAL_TOL;
    if !unit(forward) || !unit(up) {
        return Err(Error::InvalidAxes("forward and up axes must be unit length".into()));
    }
    if forward.dot(up).abs() > ORTHONORMAL_TOL {
        return Err(Error::InvalidAxes("forward and up axes must be orthogonal".into()));
    }
    Ok(())
}

/// Applies a rig delta to one camera: the camera center is translated by
/// `height_m * up + depth_m * forward`, then the camera is pitched about the
/// vehicle lateral axis (`forward x up`) through its own center. Positive pitch
/// tilts the optical axis toward `up`.
///
/// The two steps commute (pitching about the center leaves the center fixed),
/// so applying `delta.negated()` undoes `delta`.
pub fn perturb_extrinsic(
    ext: &CameraExtrinsics,
    delta: &RigDelta,
    forward_axis: &Vector3<f64>,
    up_axis: &Vector3<f64>,
) -> Result<CameraExtrinsics> {
    check_axes(forward_axis, up_axis)?;
    check_rotation(&ext.rotation)?;
    if !delta.is_finite() {
        return Err(Error::InvalidPose("non-finite rig delta".into()));
    }
    if delta.is_zero() {
        return Ok(*ext);
    }
    let center = ext.center() + up_axis * delta.height_m + forward_axis * delta.depth_m;
    let lateral = Unit::new_normalize(forward_axis.cross(up_axis));
    let tilt = Rotation3::from_axis_angle(&lateral, delta.pitch_deg.to_radians());
    // camera-to-world rotation Rᵀ is pre-multiplied by the world-frame tilt
    let rotation = ext.rotation * tilt.matrix().transpose();
    Ok(CameraExtrinsics {
        rotation,
        translation: -(rotation * center),
    })
}

/// N cameras sharing one vehicle frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    pub names: Vec<String>,
    pub cameras: Vec<Camera>,
    pub forward_axis: Vector3<f64>,
    pub up_axis: Vector3<f64>,
}

impl CameraRig {
    pub fn new(names: Vec<String>, cameras: Vec<Camera>) -> Self {
        assert_eq!(names.len(), cameras.len());
        Self {
            names,
            cameras,
            forward_axis: Vector3::x(),
            up_axis: Vector3::z(),
        }
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    /// The same delta applies to every camera.
    pub fn perturbed(&self, delta: &RigDelta) -> Result<Self> {
        let cameras = self
            .cameras
            .iter()
            .map(|c| {
                Ok(Camera::new(
                    c.intrinsics,
                    perturb_extrinsic(&c.extrinsics, delta, &self.forward_axis, &self.up_axis)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cameras,
            ..self.clone()
        })
    }

    /// Cameras re-expressed in the world frame for a vehicle at `world_from_vehicle`.
    pub fn in_world(&self, world_from_vehicle: &Isometry3<f64>) -> Self {
        let cameras = self
            .cameras
            .iter()
            .map(|c| Camera::new(c.intrinsics, c.extrinsics.compose_world(world_from_vehicle)))
            .collect();
        Self {
            cameras,
            forward_axis: world_from_vehicle.rotation * self.forward_axis,
            up_axis: world_from_vehicle.rotation * self.up_axis,
            names: self.names.clone(),
        }
    }

    pub fn to_file(&self) -> RigFile {
        RigFile {
            forward_axis: self.forward_axis.into(),
            up_axis: self.up_axis.into(),
            cameras: self
                .names
                .iter()
                .zip(&self.cameras)
                .map(|(name, c)| CameraEntry {
                    name: name.clone(),
                    fx: c.intrinsics.fx,
                    fy: c.intrinsics.fy,
                    cx: c.intrinsics.cx,
                    cy: c.intrinsics.cy,
                    width: c.intrinsics.width,
                    height: c.intrinsics.height,
                    extrinsic: c.extrinsics.to_matrix_row_major(),
                })
                .collect(),
        }
    }

    pub fn from_file(file: &RigFile) -> Result<Self> {
        let forward = Vector3::from(file.forward_axis);
        let up = Vector3::from(file.up_axis);
        check_axes(&forward, &up)?;
        if file.cameras.is_empty() {
            return Err(Error::Format("rig has no cameras".into()));
        }
        let mut names = Vec::new();
        let mut cameras = Vec::new();
        for entry in &file.cameras {
            let k = CameraIntrinsics::new(entry.fx, entry.fy, entry.cx, entry.cy, entry.width, entry.height)?;
            let e = CameraExtrinsics::from_matrix_row_major(&entry.extrinsic)?;
            names.push(entry.name.clone());
            cameras.push(Camera::new(k, e));
        }
        Ok(Self {
            names,
            cameras,
            forward_axis: forward,
            up_axis: up,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_file()).expect("rig serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: RigFile = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        Self::from_file(&file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}

/// On-disk rig description. Extrinsics are camera-from-vehicle, 4x4, row-major,
/// translations in meters; intrinsics in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigFile {
    pub forward_axis: [f64; 3],
    pub up_axis: [f64; 3],
    #[serde(rename = "camera")]
    pub cameras: Vec<CameraEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraEntry {
    pub name: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub extrinsic: [f64; 16],
}
