//! Open-loop planning metrics at waypoint granularity: L2 displacement and
//! cumulative collision rate at the 1 s, 2 s and 3 s horizons.

use nalgebra::Vector2;

use super::scene::{OrientedBox, DT};
use crate::error::{Error, Result};

pub const N_WAYPOINTS: usize = 6;
pub const HORIZONS_S: [f64; 3] = [1.0, 2.0, 3.0];

/// Waypoints at 0.5 s intervals over 3 s, ego frame at the current step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trajectory {
    pub points: [Vector2<f64>; N_WAYPOINTS],
}

impl Trajectory {
    pub fn new(points: [Vector2<f64>; N_WAYPOINTS]) -> Result<Self> {
        if points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::DegenerateInput("non-finite waypoint".into()));
        }
        Ok(Self { points })
    }

    pub fn from_fn(f: impl Fn(usize) -> Vector2<f64>) -> Result<Self> {
        Self::new(std::array::from_fn(f))
    }

    /// Heading at each waypoint from the segment arriving at it; the first
    /// segment starts at the origin, and a zero-length segment keeps the
    /// previous heading (0 before any motion).
    pub fn headings(&self) -> [f64; N_WAYPOINTS] {
        let mut prev = Vector2::zeros();
        let mut heading = 0.0;
        std::array::from_fn(|i| {
            let d = self.points[i] - prev;
            prev = self.points[i];
            if d.norm() > 0.0 {
                heading = d.y.atan2(d.x);
            }
            heading
        })
    }
}

/// Waypoint index for a horizon in seconds.
pub fn horizon_index(h: f64) -> usize {
    ((h / DT).round() as usize).clamp(1, N_WAYPOINTS) - 1
}

/// Per-horizon values and their mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HorizonMetric {
    pub at: [f64; 3],
    pub avg: f64,
}

impl HorizonMetric {
    fn from_values(at: [f64; 3]) -> Self {
        Self {
            at,
            avg: at.iter().sum::<f64>() / 3.0,
        }
    }

    /// Elementwise mean over samples.
    pub fn mean(items: &[HorizonMetric]) -> Self {
        if items.is_empty() {
            return Self::from_values([0.0; 3]);
        }
        let n = items.len() as f64;
        Self::from_values(std::array::from_fn(|i| items.iter().map(|m| m.at[i]).sum::<f64>() / n))
    }
}

pub fn l2_displacement(pred: &Trajectory, gt: &Trajectory) -> HorizonMetric {
    HorizonMetric::from_values(HORIZONS_S.map(|h| {
        let i = horizon_index(h);
        (pred.points[i] - gt.points[i]).norm()
    }))
}

fn corners_axes(b: &OrientedBox) -> ([Vector2<f64>; 4], [Vector2<f64>; 2]) {
    let (c, s) = (b.yaw.cos(), b.yaw.sin());
    let ax = Vector2::new(c, s);
    let ay = Vector2::new(-s, c);
    let (hl, hw) = (b.length / 2.0, b.width / 2.0);
    (
        [
            b.center + ax * hl + ay * hw,
            b.center + ax * hl - ay * hw,
            b.center - ax * hl - ay * hw,
            b.center - ax * hl + ay * hw,
        ],
        [ax, ay],
    )
}

/// Separating-axis test with strict inequality: touching boxes do not overlap.
pub fn boxes_overlap(a: &OrientedBox, b: &OrientedBox) -> bool {
    let (ca, axa) = corners_axes(a);
    let (cb, axb) = corners_axes(b);
    for axis in axa.iter().chain(&axb) {
        let proj = |cs: &[Vector2<f64>; 4]| {
            cs.iter()
                .map(|p| p.dot(axis))
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        };
        let (alo, ahi) = proj(&ca);
        let (blo, bhi) = proj(&cb);
        // tolerance absorbs rounding in the corner construction
        let eps = 1e-9;
        if ahi <= blo + eps || bhi <= alo + eps {
            return false;
        }
    }
    true
}

/// Collision indicator of one trajectory: for each horizon, 1 if the ego box
/// overlaps any obstacle at any waypoint up to that horizon.
/// `obstacles[i]` holds the obstacle boxes at waypoint `i`.
pub fn collision_rate(pred: &Trajectory, ego_size: (f64, f64), obstacles: &[Vec<OrientedBox>]) -> Result<HorizonMetric> {
    if obstacles.len() < N_WAYPOINTS {
        return Err(Error::Shape(format!(
            "obstacles given for {} waypoints, need {N_WAYPOINTS}",
            obstacles.len()
        )));
    }
    let headings = pred.headings();
    let hits: Vec<bool> = (0..N_WAYPOINTS)
        .map(|i| {
            let ego = OrientedBox {
                center: pred.points[i],
                length: ego_size.0,
                width: ego_size.1,
                yaw: headings[i],
            };
            obstacles[i].iter().any(|o| boxes_overlap(&ego, o))
        })
        .collect();
    Ok(HorizonMetric::from_values(HORIZONS_S.map(|h| {
        let any = hits[..=horizon_index(h)].iter().any(|x| *x);
        f64::from(u8::from(any))
    })))
}

/// Mean collision indicator over a batch of samples.
pub fn collision_rate_batch(samples: &[(Trajectory, Vec<Vec<OrientedBox>>)], ego_size: (f64, f64)) -> Result<HorizonMetric> {
    let per = samples
        .iter()
        .map(|(t, o)| collision_rate(t, ego_size, o))
        .collect::<Result<Vec<_>>>()?;
    Ok(HorizonMetric::mean(&per))
}
