//! Real spherical-harmonics color, degrees 0 to 3.
//!
//! Basis ordering and signs follow the convention used by Gaussian-splatting
//! renderers: band 1 is `(-C1 y, C1 z, -C1 x)`.

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub const MAX_SH_DEGREE: usize = 3;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
pub const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Coefficients per color channel for a given degree.
pub const fn coeffs_for_degree(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

pub fn degree_for_coeffs(n: usize) -> Option<usize> {
    (0..=MAX_SH_DEGREE).find(|&d| coeffs_for_degree(d) == n)
}

/// Basis values at `dir`; entries past the requested degree are zero.
pub fn basis(dir: &Vector3<f64>, degree: usize) -> [f64; 16] {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let mut b = [0.0; 16];
    b[0] = SH_C0;
    if degree >= 1 {
        b[1] = -SH_C1 * y;
        b[2] = SH_C1 * z;
        b[3] = -SH_C1 * x;
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b[4] = SH_C2[0] * x * y;
        b[5] = SH_C2[1] * y * z;
        b[6] = SH_C2[2] * (2.0 * zz - xx - yy);
        b[7] = SH_C2[3] * x * z;
        b[8] = SH_C2[4] * (xx - yy);
        if degree >= 3 {
            b[9] = SH_C3[0] * y * (3.0 * xx - yy);
            b[10] = SH_C3[1] * x * y * z;
            b[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
            b[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
            b[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
            b[14] = SH_C3[5] * z * (xx - yy);
            b[15] = SH_C3[6] * x * (xx - 3.0 * yy);
        }
    }
    b
}

/// Partial derivatives of each basis polynomial with respect to (x, y, z),
/// treating the direction components as free variables.
pub fn basis_grad(dir: &Vector3<f64>, degree: usize) -> [[f64; 3]; 16] {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let mut g = [[0.0; 3]; 16];
    if degree >= 1 {
        g[1] = [0.0, -SH_C1, 0.0];
        g[2] = [0.0, 0.0, SH_C1];
        g[3] = [-SH_C1, 0.0, 0.0];
    }
    if degree >= 2 {
        let s = |c: f64, v: [f64; 3]| [c * v[0], c * v[1], c * v[2]];
        g[4] = s(SH_C2[0], [y, x, 0.0]);
        g[5] = s(SH_C2[1], [0.0, z, y]);
        g[6] = s(SH_C2[2], [-2.0 * x, -2.0 * y, 4.0 * z]);
        g[7] = s(SH_C2[3], [z, 0.0, x]);
        g[8] = s(SH_C2[4], [2.0 * x, -2.0 * y, 0.0]);
        if degree >= 3 {
            let (xx, yy, zz) = (x * x, y * y, z * z);
            g[9] = s(SH_C3[0], [6.0 * x * y, 3.0 * xx - 3.0 * yy, 0.0]);
            g[10] = s(SH_C3[1], [y * z, x * z, x * y]);
            g[11] = s(SH_C3[2], [-2.0 * x * y, 4.0 * zz - xx - 3.0 * yy, 8.0 * y * z]);
            g[12] = s(SH_C3[3], [-6.0 * x * z, -6.0 * y * z, 6.0 * zz - 3.0 * xx - 3.0 * yy]);
            g[13] = s(SH_C3[4], [4.0 * zz - 3.0 * xx - yy, -2.0 * x * y, 8.0 * x * z]);
            g[14] = s(SH_C3[5], [2.0 * x * z, -2.0 * y * z, xx - yy]);
            g[15] = s(SH_C3[6], [3.0 * xx - 3.0 * yy, -6.0 * x * y, 0.0]);
        }
    }
    g
}

/// Evaluates the color before clamping. `coeffs[l]` holds the (r, g, b)
/// coefficients of basis function `l`.
pub fn eval_sh_unclamped(coeffs: &[[f64; 3]], dir: &Vector3<f64>) -> Result<[f64; 3]> {
    let degree = degree_for_coeffs(coeffs.len()).ok_or_else(|| {
        Error::Shape(format!(
            "{} SH coefficients per channel is not (k+1)^2 for k <= {MAX_SH_DEGREE}",
            coeffs.len()
        ))
    })?;
    let b = basis(dir, degree);
    let mut rgb = [0.0; 3];
    for (l, c) in coeffs.iter().enumerate() {
        for ch in 0..3 {
            rgb[ch] += c[ch] * b[l];
        }
    }
    Ok(rgb)
}

/// Evaluates the color and clamps each channel to `[0, 1]`.
pub fn eval_sh(coeffs: &[[f64; 3]], dir: &Vector3<f64>) -> Result<[f64; 3]> {
    let rgb = eval_sh_unclamped(coeffs, dir)?;
    Ok(rgb.map(|v| v.clamp(0.0, 1.0)))
}

/// Degree-0 coefficient reproducing `rgb` in every direction.
pub fn rgb_to_dc(rgb: [f64; 3]) -> [f64; 3] {
    rgb.map(|v| v / SH_C0)
}
