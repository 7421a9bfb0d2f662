//! Keypoint sampling around anchors, multi-camera bilinear feature lookup
//! and weighted aggregation, feeding [`crate::losses::distill_loss`].

use nalgebra::{DMatrix, Vector2, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussians::FeatureMap;
use crate::geometry::CameraRig;
use crate::losses::{distill_loss, DistillLoss};
use crate::membank::{Affine, InstanceRecord, ViewTag};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub n_samples: usize,
    /// Confidence threshold for the distilled anchor set.
    pub tau: f64,
    /// Uniform init range of the keypoint heads.
    pub init_scale: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            n_samples: 8,
            tau: 0.5,
            init_scale: 0.1,
        }
    }
}

/// Offset head (`feature → n_samples × 3` meters) and weight head
/// (`feature → N × n_samples` logits, softmax over all entries).
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointHeads {
    pub offset: Affine,
    pub weight: Affine,
    pub n_samples: usize,
    pub n_cameras: usize,
}

impl KeypointHeads {
    pub fn zeros(feature_dim: usize, n_cameras: usize, n_samples: usize) -> Self {
        Self {
            offset: Affine::zeros(n_samples * 3, feature_dim),
            weight: Affine::zeros(n_cameras * n_samples, feature_dim),
            n_samples,
            n_cameras,
        }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R, feature_dim: usize, n_cameras: usize, n_samples: usize, scale: f64) -> Self {
        Self {
            offset: Affine::random(rng, n_samples * 3, feature_dim, scale),
            weight: Affine::random(rng, n_cameras * n_samples, feature_dim, scale),
            n_samples,
            n_cameras,
        }
    }

    /// Normalized weights, `N x n_samples`, summing to one.
    pub fn weights(&self, feature: &[f64]) -> Result<DMatrix<f64>> {
        let logits = self.weight.apply(feature)?;
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let sum: f64 = e.iter().sum();
        Ok(DMatrix::from_row_iterator(self.n_cameras, self.n_samples, e.iter().map(|v| v / sum)))
    }
}

pub fn gen_keypoints(feature: &[f64], heads: &KeypointHeads) -> Result<Vec<Vector3<f64>>> {
    let flat = heads.offset.apply(feature)?;
    Ok(flat.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect())
}

/// Offsets are added to the anchor center as-is (not rotated into the box frame).
pub fn sample_points(offsets: &[Vector3<f64>], anchor: &InstanceRecord) -> Vec<Vector3<f64>> {
    offsets.iter().map(|o| o + anchor.anchor.center).collect()
}

/// Bilinear tap: flat texel index within a view and its weight.
pub type Tap = (usize, f64);

fn bilinear_taps(height: usize, width: usize, pixel: &Vector2<f64>) -> Option<[Tap; 4]> {
    let (x, y) = (pixel.x, pixel.y);
    let (wmax, hmax) = ((width - 1) as f64, (height - 1) as f64);
    if !(x >= 0.0 && x <= wmax && y >= 0.0 && y <= hmax) {
        return None;
    }
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(width - 1), (y0 + 1).min(height - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    Some([
        (y0 * width + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * width + x1, fx * (1.0 - fy)),
        (y1 * width + x0, (1.0 - fx) * fy),
        (y1 * width + x1, fx * fy),
    ])
}

/// Samples a `C x H x W` plane. Outside `[0, W−1] × [0, H−1]` the result is
/// zero and the flag is false.
pub fn bilinear_sample(view: &[f64], channels: usize, height: usize, width: usize, pixel: &Vector2<f64>) -> (Vec<f64>, bool) {
    let mut out = vec![0.0; channels];
    let Some(taps) = bilinear_taps(height, width, pixel) else {
        return (out, false);
    };
    let plane = height * width;
    for (c, o) in out.iter_mut().enumerate() {
        *o = taps.iter().map(|(i, w)| w * view[c * plane + i]).sum();
    }
    (out, true)
}

/// `N x n_samples x C` sampled features with their visibility mask and
/// the bilinear taps used, for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSamples {
    pub n_cameras: usize,
    pub n_samples: usize,
    pub channels: usize,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
    pub taps: Vec<Option<[Tap; 4]>>,
}

impl ViewSamples {
    pub fn feature(&self, n: usize, j: usize) -> &[f64] {
        let k = (n * self.n_samples + j) * self.channels;
        &self.values[k..k + self.channels]
    }

    pub fn visible(&self, n: usize, j: usize) -> bool {
        self.mask[n * self.n_samples + j]
    }
}

pub fn sample_view_features(points: &[Vector3<f64>], feats: &FeatureMap, rig: &CameraRig) -> Result<ViewSamples> {
    if feats.n != rig.len() {
        return Err(Error::Shape(format!("{} feature views for {} cameras", feats.n, rig.len())));
    }
    let (c, h, w) = (feats.channels, feats.height, feats.width);
    let mut out = ViewSamples {
        n_cameras: rig.len(),
        n_samples: points.len(),
        channels: c,
        values: vec![0.0; rig.len() * points.len() * c],
        mask: vec![false; rig.len() * points.len()],
        taps: vec![None; rig.len() * points.len()],
    };
    for (n, cam) in rig.cameras.iter().enumerate() {
        let view = feats.view(n);
        for (j, p) in points.iter().enumerate() {
            let Ok((pixel, _)) = cam.project(p) else {
                continue;
            };
            let k = n * points.len() + j;
            let (v, inside) = bilinear_sample(view, c, h, w, &pixel);
            if inside {
                out.values[k * c..(k + 1) * c].copy_from_slice(&v);
                out.mask[k] = true;
                out.taps[k] = bilinear_taps(h, w, &pixel);
            }
        }
    }
    Ok(out)
}

/// `Σₙ Σⱼ wₙⱼ fₙⱼ` over visible samples.
pub fn aggregate(w: &DMatrix<f64>, f: &ViewSamples) -> Result<Vec<f64>> {
    if w.shape() != (f.n_cameras, f.n_samples) {
        return Err(Error::Shape(format!(
            "weights are {:?}, samples are {}x{}",
            w.shape(),
            f.n_cameras,
            f.n_samples
        )));
    }
    let mut s = vec![0.0; f.channels];
    for n in 0..f.n_cameras {
        for j in 0..f.n_samples {
            if !f.visible(n, j) {
                continue;
            }
            for (o, v) in s.iter_mut().zip(f.feature(n, j)) {
                *o += w[(n, j)] * v;
            }
        }
    }
    Ok(s)
}

/// Scatters `dL/dS` back onto the sampled feature map.
pub fn aggregate_backward(w: &DMatrix<f64>, f: &ViewSamples, d_s: &[f64], grad: &mut FeatureMap) {
    let plane = grad.height * grad.width;
    for n in 0..f.n_cameras {
        for j in 0..f.n_samples {
            let Some(taps) = f.taps[n * f.n_samples + j] else {
                continue;
            };
            for (c, d) in d_s.iter().enumerate() {
                let base = (n * grad.channels + c) * plane;
                for (i, tw) in taps {
                    grad.data[base + i] += w[(n, j)] * tw * d;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledFeature {
    pub value: Vec<f64>,
    pub anchor: usize,
    pub view: ViewTag,
}

/// Keypoints → points → per-camera samples → aggregate, for one anchor.
pub fn anchor_feature(
    index: usize,
    feature: &[f64],
    anchor: &InstanceRecord,
    heads: &KeypointHeads,
    feats: &FeatureMap,
    rig: &CameraRig,
    view: ViewTag,
) -> Result<(SampledFeature, DMatrix<f64>, ViewSamples)> {
    if heads.n_cameras != rig.len() {
        return Err(Error::Shape(format!("heads built for {} cameras, rig has {}", heads.n_cameras, rig.len())));
    }
    let points = sample_points(&gen_keypoints(feature, heads)?, anchor);
    let samples = sample_view_features(&points, feats, rig)?;
    let w = heads.weights(feature)?;
    let value = aggregate(&w, &samples)?;
    Ok((SampledFeature { value, anchor: index, view }, w, samples))
}

/// Distillation output with the gradient on the novel feature map.
#[derive(Debug, Clone)]
pub struct DistillOutput {
    pub loss: DistillLoss,
    pub original: Vec<SampledFeature>,
    pub novel: Vec<SampledFeature>,
    pub grad_novel_features: FeatureMap,
}

/// Aligns novel-view anchor features to detached original-view ones.
/// Only valid on a novel-view pass: `pass` must be [`ViewTag::Novel`].
#[allow(clippy::too_many_arguments)]
pub fn viewpoint_distill(
    pass: ViewTag,
    features: &[Vec<f64>],
    anchors: &[InstanceRecord],
    heads: &KeypointHeads,
    original: (&FeatureMap, &CameraRig),
    novel: (&FeatureMap, &CameraRig),
    tau: f64,
) -> Result<DistillOutput> {
    if pass != ViewTag::Novel {
        return Err(Error::Protocol("distillation runs only on novel-view passes".into()));
    }
    if features.len() != anchors.len() {
        return Err(Error::Shape(format!("{} features for {} anchors", features.len(), anchors.len())));
    }
    let mut s_orig = Vec::with_capacity(anchors.len());
    let mut s_novel = Vec::with_capacity(anchors.len());
    let mut novel_parts = Vec::with_capacity(anchors.len());
    for (i, (f, a)) in features.iter().zip(anchors).enumerate() {
        s_orig.push(anchor_feature(i, f, a, heads, original.0, original.1, ViewTag::Original)?.0);
        let (s, w, samples) = anchor_feature(i, f, a, heads, novel.0, novel.1, ViewTag::Novel)?;
        s_novel.push(s);
        novel_parts.push((w, samples));
    }
    let conf: Vec<f64> = anchors.iter().map(|a| a.confidence).collect();
    let loss = distill_loss(
        &s_novel.iter().map(|s| s.value.clone()).collect::<Vec<_>>(),
        &s_orig.iter().map(|s| s.value.clone()).collect::<Vec<_>>(),
        &conf,
        tau,
    )?;
    let nf = novel.0;
    let mut grad = FeatureMap::zeros(nf.n, nf.channels, nf.height, nf.width);
    for ((w, samples), d) in novel_parts.iter().zip(&loss.grad_novel) {
        aggregate_backward(w, samples, d, &mut grad);
    }
    Ok(DistillOutput {
        loss,
        original: s_orig,
        novel: s_novel,
        grad_novel_features: grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Camera, CameraExtrinsics, CameraIntrinsics};
    use crate::membank::Anchor;
    use nalgebra::{Isometry3, Vector2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn record(center: Vector3<f64>, confidence: f64) -> InstanceRecord {
        InstanceRecord {
            feature: vec![],
            anchor: Anchor {
                center,
                size: Vector3::new(4.0, 2.0, 1.5),
                yaw: 0.0,
                velocity: Vector2::zeros(),
            },
            confidence,
            timestamp: 0.0,
            ego_pose: Isometry3::identity(),
            view: ViewTag::Original,
        }
    }

    fn rig() -> CameraRig {
        let k = CameraIntrinsics::new(20.0, 20.0, 15.5, 11.5, 32, 24).unwrap();
        let front = CameraExtrinsics::look_along(Vector3::new(0.0, 0.0, 1.6), Vector3::x(), Vector3::z()).unwrap();
        let left = CameraExtrinsics::look_along(Vector3::new(0.0, 0.0, 1.6), Vector3::new(1.0, 1.0, 0.0), Vector3::z()).unwrap();
        CameraRig::new(
            vec!["front".into(), "left".into()],
            vec![Camera::new(k, front), Camera::new(k, left)],
        )
    }

    fn random_map(rng: &mut ChaCha8Rng, n: usize, c: usize) -> FeatureMap {
        let mut m = FeatureMap::zeros(n, c, 24, 32);
        m.data.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        m
    }

    #[test]
    fn keypoint_examples() {
        let heads = KeypointHeads::zeros(4, 2, 3);
        assert!(gen_keypoints(&[0.0; 4], &heads).unwrap().iter().all(|p| *p == Vector3::zeros()));
        let mut biased = heads.clone();
        biased.offset.bias = (0..9).map(|i| i as f64).collect();
        let p = gen_keypoints(&[0.0; 4], &biased).unwrap();
        assert_eq!(p[1], Vector3::new(3.0, 4.0, 5.0));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let heads = KeypointHeads::random(&mut rng, 4, 2, 3, 0.5);
        let f = [0.3, -0.2, 0.7, 1.1];
        let p = gen_keypoints(&f, &heads).unwrap();
        for j in 0..3 {
            for a in 0..3 {
                let r = j * 3 + a;
                let mut want = heads.offset.bias[r];
                for (k, fk) in f.iter().enumerate() {
                    want += heads.offset.weight[(r, k)] * fk;
                }
                assert!((p[j][a] - want).abs() < 1e-14);
            }
        }
        let w = heads.weights(&f).unwrap();
        assert_eq!(w.shape(), (2, 3));
        assert!((w.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sample_point_examples() {
        let r = record(Vector3::new(1.0, 2.0, 3.0), 1.0);
        assert_eq!(sample_points(&[Vector3::zeros(); 2], &r), vec![Vector3::new(1.0, 2.0, 3.0); 2]);
        let pts = sample_points(&[Vector3::x(), Vector3::y(), Vector3::z()], &r);
        assert_eq!(
            pts,
            vec![Vector3::new(2.0, 2.0, 3.0), Vector3::new(1.0, 3.0, 3.0), Vector3::new(1.0, 2.0, 4.0)]
        );
    }

    #[test]
    fn bilinear_examples() {
        // 1 channel, 2x2: values 0 1 / 2 3
        let view = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(bilinear_sample(&view, 1, 2, 2, &Vector2::new(1.0, 1.0)), (vec![3.0], true));
        assert_eq!(bilinear_sample(&view, 1, 2, 2, &Vector2::new(0.5, 0.5)), (vec![1.5], true));
        assert_eq!(bilinear_sample(&view, 1, 2, 2, &Vector2::new(-5.0, 2.0)), (vec![0.0], false));
        assert_eq!(bilinear_sample(&view, 1, 2, 2, &Vector2::new(1.0001, 0.0)).1, false);
    }

    #[test]
    fn view_sampling_examples() {
        let rig = rig();
        let mut m = FeatureMap::zeros(2, 3, 24, 32);
        m.data.iter_mut().for_each(|v| *v = 0.25);
        let on_axis = [Vector3::new(10.0, 0.0, 1.6)];
        let s = sample_view_features(&on_axis, &m, &rig).unwrap();
        assert!(s.visible(0, 0));
        assert!(s.feature(0, 0).iter().all(|v| (*v - 0.25).abs() < 1e-15));

        let behind = [Vector3::new(-10.0, -10.0, 1.6)];
        let s = sample_view_features(&behind, &m, &rig).unwrap();
        assert!(s.mask.iter().all(|v| !v));
        assert!(s.values.iter().all(|v| *v == 0.0));

        // composition oracle: project, then sample the camera's plane
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_map(&mut rng, 2, 3);
        let p = Vector3::new(8.0, 3.1, 1.2);
        let s = sample_view_features(&[p], &m, &rig).unwrap();
        for n in 0..2 {
            let (px, _) = rig.cameras[n].project(&p).unwrap();
            let (want, inside) = bilinear_sample(m.view(n), 3, 24, 32, &px);
            assert_eq!(s.visible(n, 0), inside);
            assert_eq!(s.feature(n, 0), want.as_slice());
        }
    }

    #[test]
    fn aggregate_examples() {
        let mut samples = ViewSamples {
            n_cameras: 1,
            n_samples: 4,
            channels: 4,
            values: vec![0.0; 16],
            mask: vec![true; 4],
            taps: vec![None; 4],
        };
        for j in 0..4 {
            samples.values[j * 4 + j] = 1.0;
        }
        let one_hot = DMatrix::from_row_slice(1, 4, &[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(aggregate(&one_hot, &samples).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
        let uniform = DMatrix::from_element(1, 4, 0.25);
        assert_eq!(aggregate(&uniform, &samples).unwrap(), vec![0.25; 4]);
        samples.mask[0] = false;
        assert_eq!(aggregate(&uniform, &samples).unwrap(), vec![0.0, 0.25, 0.25, 0.25]);
        assert!(aggregate(&DMatrix::zeros(2, 4), &samples).is_err());
    }

    #[test]
    fn aggregate_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (n, s, c) = (3, 5, 4);
        let f = ViewSamples {
            n_cameras: n,
            n_samples: s,
            channels: c,
            values: (0..n * s * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            mask: (0..n * s).map(|_| rng.gen_bool(0.7)).collect(),
            taps: vec![None; n * s],
        };
        let w = DMatrix::from_fn(n, s, |_, _| rng.gen_range(0.0..1.0));
        let got = aggregate(&w, &f).unwrap();
        for ch in 0..c {
            let mut want = 0.0;
            for a in 0..n {
                for b in 0..s {
                    if f.mask[a * s + b] {
                        want += w[(a, b)] * f.values[(a * s + b) * c + ch];
                    }
                }
            }
            assert!((got[ch] - want).abs() < 1e-12);
        }
    }

    fn setup(seed: u64) -> (Vec<Vec<f64>>, Vec<InstanceRecord>, KeypointHeads, CameraRig) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats: Vec<Vec<f64>> = (0..3).map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let anchors = vec![
            record(Vector3::new(9.0, 0.5, 1.0), 0.9),
            record(Vector3::new(7.0, 4.0, 0.8), 0.7),
            record(Vector3::new(12.0, -2.0, 1.2), 0.2),
        ];
        (feats, anchors, KeypointHeads::random(&mut rng, 6, 2, 8, 0.3), rig())
    }

    #[test]
    fn shared_features_distill_to_zero() {
        let (f, anchors, heads, rig) = setup(3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_map(&mut rng, 2, 8);
        let out = viewpoint_distill(ViewTag::Novel, &f, &anchors, &heads, (&m, &rig), (&m, &rig), 0.5).unwrap();
        assert_eq!(out.loss.value, 0.0);
        for (a, b) in out.original.iter().zip(&out.novel) {
            assert_eq!(a.value, b.value);
        }
        assert!(out.loss.grad_orig().iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn original_pass_is_rejected() {
        let (f, anchors, heads, rig) = setup(3);
        let m = FeatureMap::zeros(2, 8, 24, 32);
        assert!(matches!(
            viewpoint_distill(ViewTag::Original, &f, &anchors, &heads, (&m, &rig), (&m, &rig), 0.5),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn novel_feature_gradient_matches_finite_differences() {
        let (f, anchors, heads, rig) = setup(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let orig = random_map(&mut rng, 2, 8);
        let novel = random_map(&mut rng, 2, 8);
        let run = |m: &FeatureMap| {
            viewpoint_distill(ViewTag::Novel, &f, &anchors, &heads, (&orig, &rig), (m, &rig), 0.5).unwrap()
        };
        let base = run(&novel);
        assert!(base.loss.value > 0.0);
        let g = &base.grad_novel_features;
        let mut checked = 0;
        for idx in (0..novel.data.len()).step_by(7) {
            let h = 1e-5;
            let mut p = novel.clone();
            p.data[idx] += h;
            let mut m = novel.clone();
            m.data[idx] -= h;
            let numeric = (run(&p).loss.value - run(&m).loss.value) / (2.0 * h);
            let a = g.data[idx];
            assert!(
                (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6) < 1e-3,
                "texel {idx}: {a} vs {numeric}"
            );
            checked += usize::from(a != 0.0);
        }
        assert!(checked > 0);
    }

    proptest! {
        #[test]
        fn weights_are_a_distribution(seed in any::<u64>(), scale in 0.0f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let heads = KeypointHeads::random(&mut rng, 5, 3, 4, scale);
            let f: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let w = heads.weights(&f).unwrap();
            prop_assert!(w.iter().all(|v| *v >= 0.0));
            prop_assert!((w.sum() - 1.0).abs() <= 1e-9);
        }

        #[test]
        fn aggregation_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mk = |rng: &mut ChaCha8Rng| ViewSamples {
                n_cameras: 2, n_samples: 3, channels: 2,
                values: (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                mask: vec![true, false, true, true, true, false],
                taps: vec![None; 6],
            };
            let f1 = mk(&mut rng);
            let f2 = mk(&mut rng);
            let w = DMatrix::from_fn(2, 3, |_, _| rng.gen_range(0.0..1.0));
            let mut mix = f1.clone();
            mix.values = f1.values.iter().zip(&f2.values).map(|(x, y)| a * x + b * y).collect();
            let lhs = aggregate(&w, &mix).unwrap();
            let r1 = aggregate(&w, &f1).unwrap();
            let r2 = aggregate(&w, &f2).unwrap();
            for c in 0..2 {
                prop_assert!((lhs[c] - (a * r1[c] + b * r2[c])).abs() <= 1e-12);
            }
        }
    }
}
