//! Frozen convolutional feature bank standing in for a learned encoder.

use crate::image::Image;
use crate::pipeline::FeatureExtractor;

pub const FEATURE_CHANNELS: usize = 8;

/// Eight channels: RGB, then on luminance a 3x3 blur, horizontal and
/// vertical Sobel, a 4-neighbour Laplacian and a 5x5 blur. Borders
/// replicate the edge pixel.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SyntheticExtractor;

pub const EDGE_CHANNELS: [usize; 3] = [4, 5, 6];

fn separable(src: &[f64], w: usize, h: usize, kx: &[f64], ky: &[f64]) -> Vec<f64> {
    let (rx, ry) = (kx.len() as isize / 2, ky.len() as isize / 2);
    let at = |x: isize, y: isize, buf: &[f64]| {
        let x = x.clamp(0, w as isize - 1) as usize;
        let y = y.clamp(0, h as isize - 1) as usize;
        buf[y * w + x]
    };
    let mut tmp = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            tmp[y as usize * w + x as usize] = kx.iter().enumerate().map(|(i, k)| k * at(x + i as isize - rx, y, src)).sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            out[y as usize * w + x as usize] = ky.iter().enumerate().map(|(i, k)| k * at(x, y + i as isize - ry, &tmp)).sum();
        }
    }
    out
}

impl SyntheticExtractor {
    pub fn luminance(image: &Image) -> Vec<f64> {
        (0..image.width * image.height)
            .map(|i| {
                let p = &image.data[i * image.channels..(i + 1) * image.channels];
                if image.channels >= 3 {
                    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
                } else {
                    p[0]
                }
            })
            .collect()
    }
}

impl FeatureExtractor for SyntheticExtractor {
    fn channels(&self) -> usize {
        FEATURE_CHANNELS
    }

    fn extract(&self, image: &Image) -> Vec<f64> {
        let (w, h) = (image.width, image.height);
        let plane = w * h;
        let mut out = vec![0.0; FEATURE_CHANNELS * plane];
        for c in 0..3 {
            let src = c.min(image.channels - 1);
            for i in 0..plane {
                out[c * plane + i] = image.data[i * image.channels + src];
            }
        }
        let lum = Self::luminance(image);
        let b3 = [0.25, 0.5, 0.25];
        let b5 = [0.0625, 0.25, 0.375, 0.25, 0.0625];
        let d = [-0.5, 0.0, 0.5];
        let lap_x = separable(&lum, w, h, &[1.0, -2.0, 1.0], &[1.0]);
        let lap_y = separable(&lum, w, h, &[1.0], &[1.0, -2.0, 1.0]);
        let channels = [
            separable(&lum, w, h, &b3, &b3),
            separable(&lum, w, h, &d, &b3),
            separable(&lum, w, h, &b3, &d),
            lap_x.iter().zip(&lap_y).map(|(a, b)| a + b).collect(),
            separable(&lum, w, h, &b5, &b5),
        ];
        for (k, ch) in channels.iter().enumerate() {
            out[(3 + k) * plane..(4 + k) * plane].copy_from_slice(ch);
        }
        out
    }
}

/// Deterministic 24x16 test pattern used by the golden feature file.
pub fn golden_test_image() -> Image {
    Image::from_fn(24, 16, 3, |x, y, c| {
        let (xf, yf) = (x as f64, y as f64);
        let checker = if (x / 4 + y / 4) % 2 == 0 { 0.2 } else { 0.0 };
        (0.5 + 0.3 * (0.37 * xf + 0.21 * yf + c as f64).sin() + checker).clamp(0.0, 1.0)
    })
}

/// Little-endian f64 bytes of the features, the golden-file encoding.
pub fn features_to_bytes(features: &[f64]) -> Vec<u8> {
    features.iter().flat_map(|v| v.to_le_bytes()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_has_no_edges() {
        let f = SyntheticExtractor.extract(&Image::filled(9, 7, 3, 0.4));
        let plane = 63;
        for c in EDGE_CHANNELS {
            assert!(f[c * plane..(c + 1) * plane].iter().all(|v| v.abs() < 1e-15));
        }
        assert!(f[..plane].iter().all(|v| *v == 0.4));
    }

    #[test]
    fn translation_equivariance_away_from_borders() {
        let base = golden_test_image();
        let shifted = Image::from_fn(24, 16, 3, |x, y, c| base.get(x.saturating_sub(2), y.saturating_sub(1), c));
        let (fa, fb) = (SyntheticExtractor.extract(&base), SyntheticExtractor.extract(&shifted));
        let plane = 24 * 16;
        for c in 0..FEATURE_CHANNELS {
            for y in 4..12 {
                for x in 5..19 {
                    let a = fa[c * plane + (y - 1) * 24 + (x - 2)];
                    let b = fb[c * plane + y * 24 + x];
                    assert!((a - b).abs() < 1e-15, "channel {c} at ({x},{y})");
                }
            }
        }
    }

    #[test]
    fn identical_images_identical_features() {
        let im = golden_test_image();
        assert_eq!(SyntheticExtractor.extract(&im), SyntheticExtractor.extract(&im.clone()));
    }
}
