//! Temporal instance memory: top-K admission, FIFO eviction, ego-motion
//! alignment, and attention fusion of current instances with the bank.

use std::path::Path;

use nalgebra::{DMatrix, Isometry3, Translation3, UnitQuaternion, Vector2, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BANK_MAGIC: [u8; 4] = *b"MBNK";
pub const BANK_VERSION: u32 = 1;
/// Values per anchor: center (3), size (3), yaw, velocity (2).
pub const ANCHOR_DIM: usize = 9;

/// Oriented box with planar velocity, expressed in an ego frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub center: Vector3<f64>,
    /// Length, width, height in meters.
    pub size: Vector3<f64>,
    pub yaw: f64,
    pub velocity: Vector2<f64>,
}

impl Anchor {
    pub fn to_array(&self) -> [f64; ANCHOR_DIM] {
        [
            self.center.x,
            self.center.y,
            self.center.z,
            self.size.x,
            self.size.y,
            self.size.z,
            self.yaw,
            self.velocity.x,
            self.velocity.y,
        ]
    }

    pub fn from_array(a: &[f64; ANCHOR_DIM]) -> Self {
        Self {
            center: Vector3::new(a[0], a[1], a[2]),
            size: Vector3::new(a[3], a[4], a[5]),
            yaw: a[6],
            velocity: Vector2::new(a[7], a[8]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ViewTag {
    Original,
    Novel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRecord {
    pub feature: Vec<f64>,
    /// In the ego frame at capture time.
    pub anchor: Anchor,
    pub confidence: f64,
    pub timestamp: f64,
    /// World-from-ego at capture time.
    pub ego_pose: Isometry3<f64>,
    /// Diagnostic only; the bank mixes views on purpose.
    pub view: ViewTag,
}

impl InstanceRecord {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::Shape(format!("confidence {} outside [0, 1]", self.confidence)));
        }
        if !self.anchor.size.iter().all(|s| *s > 0.0) {
            return Err(Error::Shape("anchor size must be positive".into()));
        }
        if !self.feature.iter().all(|v| v.is_finite()) {
            return Err(Error::Shape("non-finite instance feature".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankConfig {
    pub capacity: usize,
    /// Instances admitted per update.
    pub top_k: usize,
    pub heads: usize,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            capacity: 600,
            top_k: 32,
            heads: 1,
        }
    }
}

/// Indices of the `k` highest confidences, ties to the lower index,
/// returned in ascending index order.
pub fn select_top_k(confidence: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..confidence.len()).collect();
    order.sort_by(|&a, &b| confidence[b].total_cmp(&confidence[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// FIFO store, oldest record first.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    pub capacity: usize,
    records: Vec<InstanceRecord>,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            records: Vec::new(),
        }
    }

    pub fn records(&self) -> &[InstanceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Immutable copy for concurrent readers.
    pub fn snapshot(&self) -> Vec<InstanceRecord> {
        self.records.clone()
    }

    /// Appends the top-`k` instances by confidence and evicts the oldest
    /// records beyond capacity. Returns the admitted indices and the number
    /// of evicted records.
    pub fn update(&mut self, instances: &[InstanceRecord], k: usize) -> (Vec<usize>, usize) {
        let conf: Vec<f64> = instances.iter().map(|r| r.confidence).collect();
        let picked = select_top_k(&conf, k);
        self.records.extend(picked.iter().map(|&i| instances[i].clone()));
        let excess = self.records.len().saturating_sub(self.capacity);
        self.records.drain(..excess);
        (picked, excess)
    }

    /// Feature matrix, one row per record.
    pub fn features(&self) -> DMatrix<f64> {
        rows_to_matrix(self.records.iter().map(|r| r.feature.as_slice()), self.feature_dim())
    }

    fn feature_dim(&self) -> usize {
        self.records.first().map_or(0, |r| r.feature.len())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let dim = self.feature_dim();
        if self.records.iter().any(|r| r.feature.len() != dim) {
            return Err(Error::Shape("records have differing feature dimensions".into()));
        }
        let mut out = Vec::with_capacity(16 + self.records.len() * 4 * (dim + ANCHOR_DIM + 10));
        out.extend_from_slice(&BANK_MAGIC);
        out.extend_from_slice(&BANK_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        out.extend_from_slice(&(dim as u32).to_le_bytes());
        for r in &self.records {
            let q = r.ego_pose.rotation.quaternion();
            let t = r.ego_pose.translation.vector;
            let view = match r.view {
                ViewTag::Original => 0.0,
                ViewTag::Novel => 1.0,
            };
            let fields = r
                .feature
                .iter()
                .copied()
                .chain(r.anchor.to_array())
                .chain([r.confidence, r.timestamp, t.x, t.y, t.z, q.w, q.i, q.j, q.k, view]);
            for v in fields {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], capacity: usize) -> Result<Self> {
        if bytes.len() < 16 || bytes[..4] != BANK_MAGIC {
            return Err(Error::Format("not a memory bank checkpoint".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        if word(4) != BANK_VERSION {
            return Err(Error::Format(format!("unsupported bank version {}", word(4))));
        }
        let (count, dim) = (word(8) as usize, word(12) as usize);
        let width = dim + ANCHOR_DIM + 10;
        if bytes.len() != 16 + count * width * 4 {
            return Err(Error::Format(format!(
                "{} bytes for {count} records of dimension {dim}",
                bytes.len()
            )));
        }
        let vals: Vec<f64> = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let mut bank = MemoryBank::new(capacity);
        for rec in vals.chunks_exact(width) {
            let (feature, rest) = rec.split_at(dim);
            let anchor = Anchor::from_array(rest[..ANCHOR_DIM].try_into().unwrap());
            let m = &rest[ANCHOR_DIM..];
            let rotation = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(m[5], m[6], m[7], m[8]));
            bank.records.push(InstanceRecord {
                feature: feature.to_vec(),
                anchor,
                confidence: m[0],
                timestamp: m[1],
                ego_pose: Isometry3::from_parts(Translation3::new(m[2], m[3], m[4]), rotation),
                view: if m[9] == 0.0 { ViewTag::Original } else { ViewTag::Novel },
            });
        }
        if bank.records.len() > capacity {
            return Err(Error::Format(format!("{} records exceed capacity {capacity}", bank.len())));
        }
        Ok(bank)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, capacity: usize) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, capacity)
    }
}

/// Advances each anchor by its velocity over `current_time - timestamp`
/// and re-expresses it in the current ego frame. Features are untouched.
pub fn align_to_current(
    records: &[InstanceRecord],
    current_pose: &Isometry3<f64>,
    current_time: f64,
) -> Result<Vec<InstanceRecord>> {
    let inv = current_pose.inverse();
    records
        .iter()
        .map(|r| {
            let dt = current_time - r.timestamp;
            if dt < 0.0 {
                return Err(Error::TemporalOrder {
                    record: r.timestamp,
                    current: current_time,
                });
            }
            let rel = inv * r.ego_pose;
            let moved = r.anchor.center + Vector3::new(r.anchor.velocity.x, r.anchor.velocity.y, 0.0) * dt;
            let rot = rel.rotation;
            let v = rot * Vector3::new(r.anchor.velocity.x, r.anchor.velocity.y, 0.0);
            let (_, _, yaw) = rot.euler_angles();
            Ok(InstanceRecord {
                anchor: Anchor {
                    center: rel.transform_point(&moved.into()).coords,
                    size: r.anchor.size,
                    yaw: wrap_angle(r.anchor.yaw + yaw),
                    velocity: Vector2::new(v.x, v.y),
                },
                timestamp: current_time,
                ego_pose: *current_pose,
                ..r.clone()
            })
        })
        .collect()
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let w = (a + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if w == -std::f64::consts::PI && a > 0.0 {
        std::f64::consts::PI
    } else {
        w
    }
}

/// `y = x Wᵀ + b` applied to row vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub weight: DMatrix<f64>,
    pub bias: Vec<f64>,
}

impl Affine {
    pub fn identity(dim: usize) -> Self {
        Self {
            weight: DMatrix::identity(dim, dim),
            bias: vec![0.0; dim],
        }
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: DMatrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    /// Uniform in `±scale`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, out_dim: usize, in_dim: usize, scale: f64) -> Self {
        Self {
            weight: DMatrix::from_fn(out_dim, in_dim, |_, _| rng.gen_range(-scale..=scale)),
            bias: (0..out_dim).map(|_| rng.gen_range(-scale..=scale)).collect(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn apply_rows(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.in_dim() {
            return Err(Error::Shape(format!("input dimension {} vs {}", x.ncols(), self.in_dim())));
        }
        let mut y = x * self.weight.transpose();
        for mut row in y.row_iter_mut() {
            for (v, b) in row.iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(y)
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::Shape(format!("input dimension {} vs {}", x.len(), self.in_dim())));
        }
        Ok((0..self.out_dim())
            .map(|r| self.weight.row(r).iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias[r])
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub query: Affine,
    pub key: Affine,
    pub value: Affine,
    pub output: Affine,
    pub heads: usize,
    pub scale: f64,
}

impl AttentionParams {
    fn with(dim: usize, heads: usize, make: impl Fn() -> Affine) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide dimension {dim}")));
        }
        Ok(Self {
            query: make(),
            key: make(),
            value: make(),
            output: make(),
            heads,
            scale: 1.0 / ((dim / heads) as f64).sqrt(),
        })
    }

    pub fn identity(dim: usize, heads: usize) -> Result<Self> {
        Self::with(dim, heads, || Affine::identity(dim))
    }

    pub fn zeros(dim: usize, heads: usize) -> Result<Self> {
        Self::with(dim, heads, || Affine::zeros(dim, dim))
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R, dim: usize, heads: usize, scale: f64) -> Result<Self> {
        let mut p = Self::identity(dim, heads)?;
        p.query = Affine::random(rng, dim, dim, scale);
        p.key = Affine::random(rng, dim, dim, scale);
        p.value = Affine::random(rng, dim, dim, scale);
        p.output = Affine::random(rng, dim, dim, scale);
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.query.in_dim()
    }
}

/// Stacks rows into an `n x dim` matrix.
pub fn rows_to_matrix<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> DMatrix<f64> {
    let rows: Vec<&[f64]> = rows.collect();
    DMatrix::from_fn(rows.len(), dim, |r, c| rows[r][c])
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// `F + W_o · softmax(Q Kᵀ · scale) V`, per head, queries from `f` and
/// keys/values from `bank`. An empty bank returns `f` unchanged.
pub fn cross_attend(f: &DMatrix<f64>, bank: &DMatrix<f64>, params: &AttentionParams) -> Result<DMatrix<f64>> {
    let dim = params.dim();
    if f.ncols() != dim {
        return Err(Error::Shape(format!("query dimension {} vs {}", f.ncols(), dim)));
    }
    if bank.nrows() == 0 {
        return Ok(f.clone());
    }
    if bank.ncols() != dim {
        return Err(Error::Shape(format!("bank dimension {} vs {}", bank.ncols(), dim)));
    }
    let q = params.query.apply_rows(f)?;
    let k = params.key.apply_rows(bank)?;
    let v = params.value.apply_rows(bank)?;
    let hd = dim / params.heads;
    let mut mixed = DMatrix::zeros(f.nrows(), dim);
    let mut logits = vec![0.0; bank.nrows()];
    for h in 0..params.heads {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..f.nrows() {
            for (j, l) in logits.iter_mut().enumerate() {
                *l = cols.clone().map(|c| q[(i, c)] * k[(j, c)]).sum::<f64>() * params.scale;
            }
            softmax_in_place(&mut logits);
            for c in cols.clone() {
                mixed[(i, c)] = logits.iter().enumerate().map(|(j, w)| w * v[(j, c)]).sum();
            }
        }
    }
    Ok(f + params.output.apply_rows(&mixed)?)
}

/// Attention of the instances over themselves, plus the residual.
pub fn self_attend(f: &DMatrix<f64>, params: &AttentionParams) -> Result<DMatrix<f64>> {
    if f.nrows() == 0 {
        return Ok(f.clone());
    }
    cross_attend(f, f, params)
}
