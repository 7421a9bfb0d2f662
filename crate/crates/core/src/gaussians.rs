//! Gaussian primitives and feed-forward, pixel-wise lifting.
//!
//! Every pixel of every camera becomes one primitive: its position comes
//! from unprojecting the pixel at its depth, the remaining parameters come
//! from a [`ParamHead`] applied to the pixel's feature vector, followed by
//! the activations in [`activate_params`].

use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{unproject, CameraRig};
use crate::sh::{coeffs_for_degree, rgb_to_dc, MAX_SH_DEGREE};

pub const GAUSSIAN_SET_MAGIC: [u8; 4] = *b"GSPL";
pub const GAUSSIAN_SET_VERSION: u32 = 1;

/// Quaternions are stored `[w, x, y, z]`.
pub type Quat = [f64; 4];

pub const IDENTITY_QUAT: Quat = [1.0, 0.0, 0.0, 0.0];

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrimitive {
    pub mean: Vector3<f64>,
    pub scale: Vector3<f64>,
    pub rotation: Quat,
    pub opacity: f64,
    /// `(k+1)^2` entries of (r, g, b) coefficients.
    pub sh: Vec<[f64; 3]>,
}

impl GaussianPrimitive {
    /// Isotropic, view-independent primitive with the given display color.
    pub fn isotropic(mean: Vector3<f64>, sigma: f64, opacity: f64, rgb: [f64; 3], sh_degree: usize) -> Self {
        let mut sh = vec![[0.0; 3]; coeffs_for_degree(sh_degree)];
        sh[0] = rgb_to_dc(rgb);
        Self {
            mean,
            scale: Vector3::repeat(sigma),
            rotation: IDENTITY_QUAT,
            opacity,
            sh,
        }
    }

    pub fn covariance(&self) -> Result<Matrix3<f64>> {
        covariance_from(&self.scale, &self.rotation)
    }
}

/// Source pixel of a lifted primitive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub camera: usize,
    pub u: usize,
    pub v: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSet {
    pub sh_degree: usize,
    pub primitives: Vec<GaussianPrimitive>,
    /// Empty unless produced by [`lift_pixels`].
    pub provenance: Vec<Provenance>,
}

impl GaussianSet {
    pub fn new(sh_degree: usize) -> Self {
        Self {
            sh_degree,
            primitives: Vec::new(),
            provenance: Vec::new(),
        }
    }

    pub fn from_primitives(sh_degree: usize, primitives: Vec<GaussianPrimitive>) -> Result<Self> {
        let set = Self {
            sh_degree,
            primitives,
            provenance: Vec::new(),
        };
        set.validate()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sh_degree > MAX_SH_DEGREE {
            return Err(Error::Shape(format!("SH degree {} > {MAX_SH_DEGREE}", self.sh_degree)));
        }
        let n_coeffs = coeffs_for_degree(self.sh_degree);
        for (i, g) in self.primitives.iter().enumerate() {
            if g.sh.len() != n_coeffs {
                return Err(Error::Shape(format!(
                    "primitive {i} has {} SH coefficients, expected {n_coeffs}",
                    g.sh.len()
                )));
            }
            if !(0.0..=1.0).contains(&g.opacity) || g.scale.iter().any(|s| !(*s > 0.0)) {
                return Err(Error::Shape(format!("primitive {i} has invalid opacity or scale")));
            }
        }
        Ok(())
    }

    /// Little-endian f32 records behind a 16-byte header
    /// `[magic "GSPL", version u32, count u32, k u32]`. Each record is
    /// `mean(3) scale(3) rotation(4, w x y z) opacity(1) sh(3 (k+1)^2)` with
    /// SH coefficients ordered basis-major, channel-minor.
    pub fn to_bytes(&self) -> Vec<u8> {
        let width = 11 + 3 * coeffs_for_degree(self.sh_degree);
        let mut out = Vec::with_capacity(16 + 4 * width * self.len());
        out.extend_from_slice(&GAUSSIAN_SET_MAGIC);
        out.extend_from_slice(&GAUSSIAN_SET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.sh_degree as u32).to_le_bytes());
        let mut put = |v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
        for g in &self.primitives {
            g.mean.iter().for_each(|v| put(*v));
            g.scale.iter().for_each(|v| put(*v));
            g.rotation.iter().for_each(|v| put(*v));
            put(g.opacity);
            g.sh.iter().flatten().for_each(|v| put(*v));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || bytes[..4] != GAUSSIAN_SET_MAGIC {
            return Err(Error::Format("not a Gaussian set file".into()));
        }
        let u = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let (version, count, k) = (u(4), u(8) as usize, u(12) as usize);
        if version != GAUSSIAN_SET_VERSION {
            return Err(Error::Format(format!("unsupported Gaussian set version {version}")));
        }
        if k > MAX_SH_DEGREE {
            return Err(Error::Format(format!("SH degree {k} > {MAX_SH_DEGREE}")));
        }
        let n_coeffs = coeffs_for_degree(k);
        let width = 11 + 3 * n_coeffs;
        if bytes.len() != 16 + 4 * width * count {
            return Err(Error::Format(format!(
                "expected {} bytes for {count} primitives, found {}",
                16 + 4 * width * count,
                bytes.len()
            )));
        }
        let floats: Vec<f64> = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let primitives = floats
            .chunks_exact(width)
            .map(|r| GaussianPrimitive {
                mean: Vector3::new(r[0], r[1], r[2]),
                scale: Vector3::new(r[3], r[4], r[5]),
                rotation: [r[6], r[7], r[8], r[9]],
                opacity: r[10],
                sh: r[11..].chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            })
            .collect();
        Ok(Self {
            sh_degree: k,
            primitives,
            provenance: Vec::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// Per-camera depth, `N x H x W`, meters.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn filled(n: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            n,
            height,
            width,
            data: vec![value; n * height * width],
        }
    }

    pub fn from_views(views: &[Vec<f64>], height: usize, width: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(views.len() * height * width);
        for v in views {
            if v.len() != height * width {
                return Err(Error::Shape(format!("depth view has {} entries, expected {}", v.len(), height * width)));
            }
            data.extend_from_slice(v);
        }
        Ok(Self {
            n: views.len(),
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn get(&self, n: usize, u: usize, v: usize) -> f64 {
        self.data[(n * self.height + v) * self.width + u]
    }

    pub fn view(&self, n: usize) -> &[f64] {
        let s = self.height * self.width;
        &self.data[n * s..(n + 1) * s]
    }
}

/// Per-camera features, `N x C x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub n: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(n: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            n,
            channels,
            height,
            width,
            data: vec![0.0; n * channels * height * width],
        }
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, u: usize, v: usize) -> usize {
        ((n * self.channels + c) * self.height + v) * self.width + u
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, u: usize, v: usize) -> f64 {
        self.data[self.index(n, c, u, v)]
    }

    /// The `C`-vector at one pixel.
    pub fn pixel(&self, n: usize, u: usize, v: usize) -> Vec<f64> {
        (0..self.channels).map(|c| self.get(n, c, u, v)).collect()
    }

    /// One camera's `C x H x W` slab.
    pub fn view(&self, n: usize) -> &[f64] {
        let s = self.channels * self.height * self.width;
        &self.data[n * s..(n + 1) * s]
    }

    pub fn from_views(views: Vec<Vec<f64>>, channels: usize, height: usize, width: usize) -> Result<Self> {
        let n = views.len();
        let mut data = Vec::with_capacity(n * channels * height * width);
        for v in views {
            if v.len() != channels * height * width {
                return Err(Error::Shape(format!(
                    "feature view has {} entries, expected {}",
                    v.len(),
                    channels * height * width
                )));
            }
            data.extend(v);
        }
        Ok(Self {
            n,
            channels,
            height,
            width,
            data,
        })
    }
}

pub fn quat_normalize(q: &Quat) -> Result<Quat> {
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::InvalidRotation);
    }
    Ok(q.map(|v| v / norm))
}

/// Rotation matrix of a unit quaternion `[w, x, y, z]`.
pub fn quat_to_matrix(q: &Quat) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// `dL/dq` for a unit quaternion given `dL/dR`.
pub fn quat_to_matrix_backward(q: &Quat, d_r: &Matrix3<f64>) -> Quat {
    let [w, x, y, z] = *q;
    let g = |r: usize, c: usize| d_r[(r, c)];
    let dw = 2.0
        * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    [dw, dx, dy, dz]
}

/// Backpropagates through `q = r / |r|`.
pub fn quat_normalize_backward(raw: &Quat, d_unit: &Quat) -> Quat {
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    let q = raw.map(|v| v / norm);
    let dot: f64 = q.iter().zip(d_unit).map(|(a, b)| a * b).sum();
    [0, 1, 2, 3].map(|i| (d_unit[i] - q[i] * dot) / norm)
}

/// `Σ = R diag(s²) Rᵀ`. The quaternion is normalized first.
pub fn covariance_from(scale: &Vector3<f64>, rot: &Quat) -> Result<Matrix3<f64>> {
    let q = quat_normalize(rot)?;
    let m = quat_to_matrix(&q) * Matrix3::from_diagonal(scale);
    Ok(m * m.transpose())
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Raw per-pixel head outputs before activation.
#[derive(Debug, Clone, PartialEq)]
pub struct RawParams {
    pub scale: [f64; 3],
    pub rotation: Quat,
    pub opacity: f64,
    pub sh: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivatedParams {
    pub scale: Vector3<f64>,
    pub rotation: Quat,
    pub opacity: f64,
    pub sh: Vec<[f64; 3]>,
    /// The raw quaternion was all zeros and the identity was substituted.
    pub rotation_fallback: bool,
}

/// `s = softplus(H_s)`, `r = H_r / |H_r|`, `α = sigmoid(H_α)`, SH passed through.
pub fn activate_params(raw: &RawParams) -> ActivatedParams {
    let (rotation, rotation_fallback) = match quat_normalize(&raw.rotation) {
        Ok(q) => (q, false),
        Err(_) => (IDENTITY_QUAT, true),
    };
    ActivatedParams {
        scale: Vector3::from(raw.scale.map(softplus)),
        rotation,
        opacity: sigmoid(raw.opacity),
        sh: raw.sh.clone(),
        rotation_fallback,
    }
}

/// Chains gradients on activated parameters back onto the raw head outputs.
pub fn activate_params_backward(
    raw: &RawParams,
    d_scale: &[f64; 3],
    d_rotation: &Quat,
    d_opacity: f64,
    d_sh: &[[f64; 3]],
) -> RawParams {
    let a = sigmoid(raw.opacity);
    let rotation = if quat_normalize(&raw.rotation).is_ok() {
        quat_normalize_backward(&raw.rotation, d_rotation)
    } else {
        [0.0; 4]
    };
    RawParams {
        scale: [0, 1, 2].map(|i| d_scale[i] * sigmoid(raw.scale[i])),
        rotation,
        opacity: d_opacity * a * (1.0 - a),
        sh: d_sh.to_vec(),
    }
}

/// What a head sees at one pixel.
#[derive(Debug, Clone, Copy)]
pub struct HeadInput<'a> {
    pub feature: &'a [f64],
    pub depth: f64,
    /// Focal length of the source camera in pixels.
    pub focal: f64,
}

pub trait ParamHead: Sync {
    fn sh_degree(&self) -> usize;
    fn predict(&self, input: &HeadInput<'_>) -> RawParams;
}

/// Closed-form head: isotropic scale covering `footprint_px` pixels at the
/// pixel's depth, fixed opacity, and degree-0 color copied from the first
/// three feature channels.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticHead {
    pub sh_degree: usize,
    pub footprint_px: f64,
    pub opacity: f64,
}

impl Default for AnalyticHead {
    fn default() -> Self {
        Self {
            sh_degree: 1,
            footprint_px: 0.3,
            opacity: 0.9,
        }
    }
}

impl ParamHead for AnalyticHead {
    fn sh_degree(&self) -> usize {
        self.sh_degree
    }

    fn predict(&self, input: &HeadInput<'_>) -> RawParams {
        let sigma = self.footprint_px * input.depth / input.focal;
        let mut sh = vec![[0.0; 3]; coeffs_for_degree(self.sh_degree)];
        let rgb = [0, 1, 2].map(|c| input.feature.get(c).copied().unwrap_or(0.0));
        sh[0] = rgb_to_dc(rgb);
        RawParams {
            scale: [inverse_softplus(sigma); 3],
            rotation: IDENTITY_QUAT,
            opacity: logit(self.opacity),
            sh,
        }
    }
}

/// One affine map per parameter group over the input `[feature..., depth]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub sh_degree: usize,
    pub input_dim: usize,
    /// Rows: 3 scale, 4 rotation, 1 opacity, `3 (k+1)^2` SH; each row holds
    /// `input_dim` weights followed by a bias.
    pub rows: Vec<Vec<f64>>,
}

impl LinearHead {
    pub fn output_dim(sh_degree: usize) -> usize {
        8 + 3 * coeffs_for_degree(sh_degree)
    }

    /// `feature_dim` channels plus depth.
    pub fn zeros(feature_dim: usize, sh_degree: usize) -> Self {
        let input_dim = feature_dim + 1;
        Self {
            sh_degree,
            input_dim,
            rows: vec![vec![0.0; input_dim + 1]; Self::output_dim(sh_degree)],
        }
    }

    /// Zero weights; biases give the identity rotation, mid-gray color and
    /// `scale` meters. An all-zero head sits on the color clamp with zero
    /// gradient, so training starts here instead.
    pub fn neutral(feature_dim: usize, sh_degree: usize, scale: f64) -> Self {
        let mut head = Self::zeros(feature_dim, sh_degree);
        let bias = head.input_dim;
        for r in 0..3 {
            head.rows[r][bias] = inverse_softplus(scale);
        }
        head.rows[3][bias] = 1.0;
        for (c, v) in rgb_to_dc([0.5; 3]).iter().enumerate() {
            head.rows[8 + c][bias] = *v;
        }
        head
    }

    pub fn n_params(&self) -> usize {
        self.rows.len() * (self.input_dim + 1)
    }

    pub fn params(&self) -> Vec<f64> {
        self.rows.iter().flatten().copied().collect()
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params());
        for (row, chunk) in self.rows.iter_mut().zip(flat.chunks_exact(self.input_dim + 1)) {
            row.copy_from_slice(chunk);
        }
    }

    fn input_vector(&self, input: &HeadInput<'_>) -> Vec<f64> {
        let mut x: Vec<f64> = input.feature.iter().copied().take(self.input_dim - 1).collect();
        x.resize(self.input_dim - 1, 0.0);
        x.push(input.depth);
        x
    }

    fn raw_from_outputs(&self, out: &[f64]) -> RawParams {
        RawParams {
            scale: [out[0], out[1], out[2]],
            rotation: [out[3], out[4], out[5], out[6]],
            opacity: out[7],
            sh: out[8..].chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        }
    }

    /// Accumulates `dL/dparams` (flat, same order as [`Self::params`]) for one
    /// pixel given `dL/draw`.
    pub fn accumulate_grad(&self, input: &HeadInput<'_>, d_raw: &RawParams, grad: &mut [f64]) {
        let x = self.input_vector(input);
        let mut d_out = Vec::with_capacity(self.rows.len());
        d_out.extend_from_slice(&d_raw.scale);
        d_out.extend_from_slice(&d_raw.rotation);
        d_out.push(d_raw.opacity);
        d_out.extend(d_raw.sh.iter().flatten());
        let stride = self.input_dim + 1;
        for (r, g) in d_out.iter().enumerate() {
            if *g == 0.0 {
                continue;
            }
            let row = &mut grad[r * stride..(r + 1) * stride];
            for (w, xi) in row.iter_mut().zip(&x) {
                *w += g * xi;
            }
            row[self.input_dim] += g;
        }
    }
}

impl ParamHead for LinearHead {
    fn sh_degree(&self) -> usize {
        self.sh_degree
    }

    fn predict(&self, input: &HeadInput<'_>) -> RawParams {
        let x = self.input_vector(input);
        let out: Vec<f64> = self
            .rows
            .iter()
            .map(|row| row[..self.input_dim].iter().zip(&x).map(|(w, v)| w * v).sum::<f64>() + row[self.input_dim])
            .collect();
        self.raw_from_outputs(&out)
    }
}

/// Lifting output plus diagnostics.
#[derive(Debug, Clone)]
pub struct Lifted {
    pub set: GaussianSet,
    /// Pixels whose raw quaternion was all zeros.
    pub rotation_fallbacks: usize,
}

/// Lifts every pixel of every camera into one primitive, in
/// (camera, row, column) raster order.
pub fn lift_pixels(depth: &DepthMap, feats: &FeatureMap, rig: &CameraRig, head: &dyn ParamHead) -> Result<Lifted> {
    if depth.n != feats.n || depth.height != feats.height || depth.width != feats.width {
        return Err(Error::Shape(format!(
            "depth {}x{}x{} vs features {}x{}x{}",
            depth.n, depth.height, depth.width, feats.n, feats.height, feats.width
        )));
    }
    if rig.len() != depth.n {
        return Err(Error::Shape(format!("{} cameras for {} depth views", rig.len(), depth.n)));
    }
    for (n, cam) in rig.cameras.iter().enumerate() {
        if cam.width() != depth.width || cam.height() != depth.height {
            return Err(Error::Shape(format!(
                "camera {n} is {}x{}, maps are {}x{}",
                cam.width(),
                cam.height(),
                depth.width,
                depth.height
            )));
        }
    }
    if let Some(i) = depth.data.iter().position(|d| !(*d > 0.0) || !d.is_finite()) {
        let (n, rem) = (i / (depth.height * depth.width), i % (depth.height * depth.width));
        return Err(Error::InvalidDepth {
            camera: n,
            u: rem % depth.width,
            v: rem / depth.width,
            depth: depth.data[i],
        });
    }

    let rows: Vec<(usize, usize)> = (0..depth.n)
        .flat_map(|n| (0..depth.height).map(move |v| (n, v)))
        .collect();
    let per_row: Vec<Vec<(GaussianPrimitive, Provenance, bool)>> = rows
        .par_iter()
        .map(|&(n, v)| {
            let cam = &rig.cameras[n];
            (0..depth.width)
                .map(|u| {
                    let d = depth.get(n, u, v);
                    let feature = feats.pixel(n, u, v);
                    let raw = head.predict(&HeadInput {
                        feature: &feature,
                        depth: d,
                        focal: cam.intrinsics.fx,
                    });
                    let act = activate_params(&raw);
                    let mean = unproject(&Vector2::new(u as f64, v as f64), d, cam)
                        .expect("depth validated positive");
                    (
                        GaussianPrimitive {
                            mean,
                            scale: act.scale,
                            rotation: act.rotation,
                            opacity: act.opacity,
                            sh: act.sh,
                        },
                        Provenance { camera: n, u, v },
                        act.rotation_fallback,
                    )
                })
                .collect()
        })
        .collect();

    let mut set = GaussianSet::new(head.sh_degree());
    set.primitives.reserve(depth.data.len());
    set.provenance.reserve(depth.data.len());
    let mut rotation_fallbacks = 0;
    for (g, p, fb) in per_row.into_iter().flatten() {
        set.primitives.push(g);
        set.provenance.push(p);
        rotation_fallbacks += fb as usize;
    }
    Ok(Lifted { set, rotation_fallbacks })
}
