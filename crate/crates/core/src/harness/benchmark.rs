//! Unseen-rig protocol: for each scene and rig setting, synthesize views
//! from the original rig, score them against ground truth, and run the
//! memory bank and distillation on top.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Point3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::HarnessConfig;
use super::features::SyntheticExtractor;
use super::metrics::{collision_rate, l2_displacement, HorizonMetric, Trajectory, N_WAYPOINTS};
use super::scene::{build_scene, render_dataset, Dataset, SyntheticScene, DT};
use crate::distill::{viewpoint_distill, KeypointHeads};
use crate::error::{Error, Result};
use crate::gaussians::{AnalyticHead, DepthMap, FeatureMap};
use crate::geometry::{sample_rig_delta, CameraRig, RigDelta};
use crate::image::{mse, Image};
use crate::losses::{total_loss, LossTerms, Ssim};
use crate::membank::{align_to_current, cross_attend, self_attend, Anchor, AttentionParams, InstanceRecord, MemoryBank, ViewTag};
use crate::pipeline::{FeatureExtractor, Pipeline};
use crate::rasterizer::RasterConfig;

/// Bumped whenever the CSV columns change.
pub const REPORT_CSV_VERSION: u32 = 1;

pub const REPORT_COLUMNS: [&str; 21] = [
    "scene_seed",
    "setting",
    "pitch_deg",
    "height_m",
    "depth_m",
    "psnr_db",
    "psnr_covered_db",
    "coverage",
    "cyclic_loss",
    "distill_loss",
    "distill_anchors",
    "feature_error",
    "weighted_loss",
    "l2_1s",
    "l2_2s",
    "l2_3s",
    "l2_avg",
    "collision_1s",
    "collision_2s",
    "collision_3s",
    "collision_avg",
];

/// The evaluated rig settings, in protocol order.
pub const RIG_SETTINGS: [(&str, RigDelta); 6] = [
    ("original", RigDelta::ZERO),
    ("pitch_+5deg", RigDelta { pitch_deg: 5.0, height_m: 0.0, depth_m: 0.0 }),
    ("pitch_-10deg", RigDelta { pitch_deg: -10.0, height_m: 0.0, depth_m: 0.0 }),
    ("height_+1.0m", RigDelta { pitch_deg: 0.0, height_m: 1.0, depth_m: 0.0 }),
    ("height_-0.7m", RigDelta { pitch_deg: 0.0, height_m: -0.7, depth_m: 0.0 }),
    ("depth_+1.0m", RigDelta { pitch_deg: 0.0, height_m: 0.0, depth_m: 1.0 }),
];

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRow {
    pub seed: u64,
    pub setting: &'static str,
    pub delta: RigDelta,
    /// Infinite when the synthesized views match ground truth exactly.
    pub psnr_db: f64,
    /// PSNR over pixels the synthesized views actually cover.
    pub psnr_covered_db: f64,
    /// Fraction of pixels with accumulated opacity of at least one half.
    pub coverage: f64,
    pub cyclic_loss: f64,
    pub distill_loss: f64,
    pub distill_anchors: usize,
    pub feature_error: f64,
    pub weighted_loss: f64,
    pub l2: HorizonMetric,
    pub collision: HorizonMetric,
}

/// Synthesis quality over deltas sampled from the training range.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationRow {
    pub seed: u64,
    pub deltas: Vec<RigDelta>,
    pub psnr_db: Vec<f64>,
    pub psnr_covered_db: Vec<f64>,
    pub cyclic_loss: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkReport {
    pub range_preset: String,
    pub rows: Vec<BenchmarkRow>,
    pub augmentation: Vec<AugmentationRow>,
}

fn fmt_num(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.9e}")
    }
}

impl BenchmarkReport {
    pub fn to_csv(&self) -> String {
        let mut out = REPORT_COLUMNS.join(",");
        out.push('\n');
        for r in &self.rows {
            let nums = [
                r.delta.pitch_deg,
                r.delta.height_m,
                r.delta.depth_m,
                r.psnr_db,
                r.psnr_covered_db,
                r.coverage,
                r.cyclic_loss,
                r.distill_loss,
            ]
            .map(fmt_num);
            let tail = [
                r.feature_error,
                r.weighted_loss,
                r.l2.at[0],
                r.l2.at[1],
                r.l2.at[2],
                r.l2.avg,
                r.collision.at[0],
                r.collision.at[1],
                r.collision.at[2],
                r.collision.avg,
            ]
            .map(fmt_num);
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.seed,
                r.setting,
                nums.join(","),
                r.distill_anchors,
                tail.join(",")
            );
        }
        out
    }

    /// Per-setting means over scenes, plus the augmentation summary.
    pub fn summary(&self) -> String {
        let mut s = format!("report.csv version {REPORT_CSV_VERSION}\n");
        let n_scenes = self.augmentation.len().max(1);
        let _ = writeln!(s, "scenes: {n_scenes}\n");
        let _ = writeln!(
            s,
            "{:<14} {:>10} {:>10} {:>8} {:>12} {:>12} {:>12} {:>8} {:>8}",
            "setting", "psnr_db", "covered", "coverage", "cyclic", "distill", "feat_err", "l2_avg", "col_avg"
        );
        for (name, _) in RIG_SETTINGS {
            let rows: Vec<&BenchmarkRow> = self.rows.iter().filter(|r| r.setting == name).collect();
            let k = rows.len().max(1) as f64;
            let mean = |f: &dyn Fn(&BenchmarkRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / k;
            let _ = writeln!(
                s,
                "{:<14} {:>10} {:>10} {:>8.3} {:>12.4e} {:>12.4e} {:>12.4e} {:>8.3} {:>8.3}",
                name,
                fmt_psnr(mean(&|r| r.psnr_db)),
                fmt_psnr(mean(&|r| r.psnr_covered_db)),
                mean(&|r| r.coverage),
                mean(&|r| r.cyclic_loss),
                mean(&|r| r.distill_loss),
                mean(&|r| r.feature_error),
                mean(&|r| r.l2.avg),
                mean(&|r| r.collision.avg),
            );
        }
        let all_psnr: Vec<f64> = self.augmentation.iter().flat_map(|a| a.psnr_db.clone()).collect();
        let all_cov: Vec<f64> = self.augmentation.iter().flat_map(|a| a.psnr_covered_db.clone()).collect();
        let all_cyc: Vec<f64> = self.augmentation.iter().flat_map(|a| a.cyclic_loss.clone()).collect();
        if !all_psnr.is_empty() {
            let n = all_psnr.len() as f64;
            let _ = writeln!(
                s,
                "\naugmentation ({} range, {} deltas): mean psnr {} dB (covered pixels {} dB), mean cyclic {:.4e}",
                self.range_preset,
                all_psnr.len(),
                fmt_psnr(all_psnr.iter().sum::<f64>() / n),
                fmt_psnr(all_cov.iter().sum::<f64>() / n),
                all_cyc.iter().sum::<f64>() / n
            );
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("report.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let summary = dir.join("summary.txt");
        std::fs::write(&summary, self.summary()).map_err(|e| Error::io(&summary, e))
    }
}

fn fmt_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.3}")
    }
}

/// PSNR of the pooled squared error over all cameras.
pub fn pooled_psnr(a: &[Image], b: &[Image]) -> Result<f64> {
    let mut sum = 0.0;
    for (x, y) in a.iter().zip(b) {
        sum += mse(x, y)?;
    }
    Ok(psnr_of(sum / a.len() as f64))
}

fn psnr_of(m: f64) -> f64 {
    if m == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * m.log10()
    }
}

/// PSNR restricted to pixels with `alpha >= 0.5`, and the covered fraction.
pub fn covered_psnr(a: &[Image], b: &[Image], alpha: &[Vec<f64>]) -> Result<(f64, f64)> {
    let (mut sum, mut n, mut total) = (0.0, 0usize, 0usize);
    for ((x, y), al) in a.iter().zip(b).zip(alpha) {
        x.check_same_shape(y)?;
        for (i, w) in al.iter().enumerate() {
            total += 1;
            if *w < 0.5 {
                continue;
            }
            n += 1;
            for c in 0..x.channels {
                let e = x.data[i * x.channels + c] - y.data[i * y.channels + c];
                sum += e * e;
            }
        }
    }
    if n == 0 {
        return Err(Error::DegenerateInput("synthesized views cover no pixels".into()));
    }
    Ok((psnr_of(sum / (n * a[0].channels) as f64), n as f64 / total as f64))
}

/// Everything shared by the rig settings of one scene.
struct SceneRun {
    scene: SyntheticScene,
    rig: CameraRig,
    /// Original-rig ground truth at the history steps and the current step.
    original: Dataset,
    /// Ground truth at every non-zero setting for the current step.
    perturbed: Dataset,
}

struct Frame {
    images: Vec<Image>,
    depth: DepthMap,
}

/// Ground-truth renders of a scene's current step with the rig placed in
/// the world, ready to lift.
#[derive(Debug, Clone)]
pub struct GroundTruthFrame {
    pub scene: SyntheticScene,
    pub rig: CameraRig,
    pub images: Vec<Image>,
    pub depth: DepthMap,
}

fn frame_of(data: &Dataset, delta: usize, t: usize) -> Result<Frame> {
    let views = data.get(delta, t);
    let h = views[0].color.height;
    let w = views[0].color.width;
    Ok(Frame {
        images: views.iter().map(|v| v.color.clone()).collect(),
        depth: DepthMap::from_views(&views.iter().map(|v| v.depth.clone()).collect::<Vec<_>>(), h, w)?,
    })
}

pub struct Harness<'a> {
    pub config: &'a HarnessConfig,
    pub head: AnalyticHead,
    pub extractor: SyntheticExtractor,
    pub metric: Ssim,
    pub raster: RasterConfig,
}

impl<'a> Harness<'a> {
    pub fn new(config: &'a HarnessConfig) -> Self {
        Self {
            config,
            head: AnalyticHead::default(),
            extractor: SyntheticExtractor,
            metric: Ssim::default(),
            raster: RasterConfig::default(),
        }
    }

    pub fn pipeline(&self, sky: [f64; 3]) -> Pipeline<'_> {
        Pipeline {
            head: &self.head,
            extractor: &self.extractor,
            metric: &self.metric,
            raster: self.raster,
            background: sky,
            lambda_p: self.config.losses.lambda_p,
            reference: false,
        }
    }

    fn prepare(&self, seed: u64) -> Result<SceneRun> {
        let c = self.config;
        let scene = build_scene(seed, c.scene.n_objects, c.scene.n_timesteps, &c.scene)?;
        let rig = c.rig.build()?;
        let t0 = c.benchmark.current_step;
        let steps: Vec<usize> = (t0 - c.benchmark.history..=t0).collect();
        let original = render_dataset(&scene, &rig, &[RigDelta::ZERO], &steps, &self.raster)?;
        let deltas: Vec<RigDelta> = RIG_SETTINGS.iter().skip(1).map(|(_, d)| *d).collect();
        let perturbed = render_dataset(&scene, &rig, &deltas, &[t0], &self.raster)?;
        Ok(SceneRun {
            scene,
            rig,
            original,
            perturbed,
        })
    }

    /// Anchor of object `i` in the ego frame at `t`.
    fn anchor(&self, scene: &SyntheticScene, i: usize, t: usize) -> Anchor {
        let inv = scene.ego[t].inverse();
        let obj = &scene.objects[i];
        let s = &obj.states[t];
        let (_, _, yaw) = inv.rotation.euler_angles();
        let v = inv.rotation * Vector3::new(s.velocity.x, s.velocity.y, 0.0);
        Anchor {
            center: (inv * Point3::from(s.center)).coords,
            size: obj.size,
            yaw: s.yaw + yaw,
            velocity: Vector2::new(v.x, v.y),
        }
    }

    /// Features sampled at the anchor center (mean over cameras that see
    /// it) followed by a box encoding; the confidence is visibility times
    /// a distance falloff.
    fn instance(&self, feats: &FeatureMap, rig: &CameraRig, anchor: Anchor, t: usize, scene: &SyntheticScene, view: ViewTag) -> InstanceRecord {
        let mut sampled = vec![0.0; feats.channels];
        let mut seen = 0usize;
        for (n, cam) in rig.cameras.iter().enumerate() {
            let Ok((px, _)) = cam.project(&anchor.center) else {
                continue;
            };
            let (v, inside) = crate::distill::bilinear_sample(feats.view(n), feats.channels, feats.height, feats.width, &px);
            if inside {
                seen += 1;
                sampled.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
            }
        }
        if seen > 0 {
            sampled.iter_mut().for_each(|a| *a /= seen as f64);
        }
        let c = anchor.center;
        sampled.extend([
            c.x / 50.0,
            c.y / 50.0,
            c.z / 5.0,
            anchor.size.x / 5.0,
            anchor.size.y / 5.0,
            anchor.size.z / 5.0,
            anchor.yaw.sin(),
            anchor.yaw.cos(),
        ]);
        let visible = f64::from(u8::from(seen > 0));
        let confidence = (visible * (1.0 - c.xy().norm() / 60.0)).clamp(0.0, 1.0);
        InstanceRecord {
            feature: sampled,
            anchor,
            confidence,
            timestamp: t as f64 * DT,
            ego_pose: scene.ego[t],
            view,
        }
    }

    fn instances(&self, run: &SceneRun, feats: &FeatureMap, rig: &CameraRig, t: usize, view: ViewTag) -> Vec<InstanceRecord> {
        (0..run.scene.objects.len())
            .map(|i| self.instance(feats, rig, self.anchor(&run.scene, i, t), t, &run.scene, view))
            .collect()
    }

    fn evaluate(&self, run: &SceneRun, setting: usize) -> Result<BenchmarkRow> {
        let c = self.config;
        let (name, delta) = RIG_SETTINGS[setting];
        let t0 = c.benchmark.current_step;
        let pipe = self.pipeline(run.scene.config.sky);
        let novel_rig = run.rig.perturbed(&delta)?;

        // memory bank over the history, mixing original and novel views
        let mut bank = MemoryBank::new(c.bank.capacity);
        for t in t0 - c.benchmark.history..t0 {
            let world = run.rig.in_world(&run.scene.ego[t]);
            let orig = frame_of(&run.original, 0, t)?;
            let novel = pipe.synthesize(&orig.images, &orig.depth, &world, &delta)?;
            let f_orig = pipe.features(&orig.images)?;
            let f_novel = pipe.features(&novel.images)?;
            bank.update(&self.instances(run, &f_orig, &run.rig, t, ViewTag::Original), c.bank.top_k);
            bank.update(&self.instances(run, &f_novel, &novel_rig, t, ViewTag::Novel), c.bank.top_k);
        }

        // current step: synthesis, photometric and cyclic scores
        let world = run.rig.in_world(&run.scene.ego[t0]);
        let orig = frame_of(&run.original, 0, t0)?;
        let novel = pipe.synthesize(&orig.images, &orig.depth, &world, &delta)?;
        let truth = if setting == 0 {
            orig.images.clone()
        } else {
            frame_of(&run.perturbed, setting - 1, t0)?.images
        };
        let psnr_db = pooled_psnr(&novel.images, &truth)?;
        let (psnr_covered_db, coverage) = covered_psnr(&novel.images, &truth, &novel.alpha)?;
        let cyclic_loss = pipe.cyclic_recon_loss(&novel, &world, &orig.images)?;
        let f_orig = pipe.features(&orig.images)?;
        let f_novel = pipe.features(&novel.images)?;
        let f_truth = pipe.features(&truth)?;
        let feature_error = f_novel.data.iter().zip(&f_truth.data).map(|(a, b)| (a - b).abs()).sum::<f64>()
            / f_novel.data.len() as f64;

        // instance fusion and distillation
        let current = self.instances(run, &f_orig, &run.rig, t0, ViewTag::Original);
        let dim = self.extractor.channels() + 8;
        let mut rng = ChaCha8Rng::seed_from_u64(c.benchmark.head_seed);
        let attn = AttentionParams::random(&mut rng, dim, c.bank.heads, 0.2)?;
        let heads = KeypointHeads::random(&mut rng, dim, run.rig.len(), c.distill.n_samples, c.distill.init_scale);
        let aligned = align_to_current(bank.records(), &run.scene.ego[t0], t0 as f64 * DT)?;
        let bank_feats = crate::membank::rows_to_matrix(aligned.iter().map(|r| r.feature.as_slice()), dim);
        let queries = crate::membank::rows_to_matrix(current.iter().map(|r| r.feature.as_slice()), dim);
        let mixed = self_attend(&cross_attend(&queries, &bank_feats, &attn)?, &attn)?;
        let mixed_rows: Vec<Vec<f64>> = mixed.row_iter().map(|r| r.iter().copied().collect()).collect();
        let distill = viewpoint_distill(
            ViewTag::Novel,
            &mixed_rows,
            &current,
            &heads,
            (&f_orig, &run.rig),
            (&f_novel, &novel_rig),
            c.distill.tau,
        )?;
        let weighted_loss = total_loss(
            &LossTerms {
                recon_cyclic: cyclic_loss,
                distill: distill.loss.value,
                ..LossTerms::default()
            },
            &c.losses.weights,
        )?
        .total;

        let (l2, collision) = self.planning(&run.scene)?;
        Ok(BenchmarkRow {
            seed: run.scene.seed,
            setting: name,
            delta,
            psnr_db,
            psnr_covered_db,
            coverage,
            cyclic_loss,
            distill_loss: distill.loss.value,
            distill_anchors: distill.loss.selected.len(),
            feature_error,
            weighted_loss,
            l2,
            collision,
        })
    }

    /// Constant-velocity planner against the ego's true future.
    fn planning(&self, scene: &SyntheticScene) -> Result<(HorizonMetric, HorizonMetric)> {
        let t0 = self.config.benchmark.current_step;
        let inv = scene.ego[t0].inverse();
        let local = |t: usize| (inv * Point3::from(scene.ego[t].translation.vector)).coords.xy();
        let step = if t0 > 0 { -local(t0 - 1) } else { Vector2::new(scene.config.ego_speed * DT, 0.0) };
        let pred = Trajectory::from_fn(|i| step * (i + 1) as f64)?;
        let gt = Trajectory::from_fn(|i| local(t0 + i + 1))?;
        let obstacles: Vec<_> = (0..N_WAYPOINTS).map(|i| scene.obstacles(t0 + i + 1, t0)).collect();
        let b = &self.config.benchmark;
        Ok((l2_displacement(&pred, &gt), collision_rate(&pred, (b.ego_length, b.ego_width), &obstacles)?))
    }

    fn augment(&self, run: &SceneRun) -> Result<AugmentationRow> {
        let c = self.config;
        let range = c.ranges.range()?;
        let mut rng = ChaCha8Rng::seed_from_u64(c.ranges.seed ^ run.scene.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let deltas: Vec<RigDelta> = (0..c.ranges.augment_samples).map(|_| sample_rig_delta(&mut rng, &range)).collect();
        let t0 = c.benchmark.current_step;
        let truth = render_dataset(&run.scene, &run.rig, &deltas, &[t0], &self.raster)?;
        let pipe = self.pipeline(run.scene.config.sky);
        let world = run.rig.in_world(&run.scene.ego[t0]);
        let orig = frame_of(&run.original, 0, t0)?;
        let mut psnr_db = Vec::new();
        let mut psnr_covered_db = Vec::new();
        let mut cyclic_loss = Vec::new();
        for (i, d) in deltas.iter().enumerate() {
            let novel = pipe.synthesize(&orig.images, &orig.depth, &world, d)?;
            let truth = frame_of(&truth, i, t0)?.images;
            psnr_db.push(pooled_psnr(&novel.images, &truth)?);
            psnr_covered_db.push(covered_psnr(&novel.images, &truth, &novel.alpha)?.0);
            cyclic_loss.push(pipe.cyclic_recon_loss(&novel, &world, &orig.images)?);
        }
        Ok(AugmentationRow {
            seed: run.scene.seed,
            deltas,
            psnr_db,
            psnr_covered_db,
            cyclic_loss,
        })
    }

    fn run_scene(&self, seed: u64) -> Result<(Vec<BenchmarkRow>, AugmentationRow)> {
        let run = self.prepare(seed)?;
        let eval = |s: usize| self.evaluate(&run, s);
        let rows = if self.config.benchmark.parallel {
            (0..RIG_SETTINGS.len()).into_par_iter().map(eval).collect::<Result<Vec<_>>>()?
        } else {
            (0..RIG_SETTINGS.len()).map(eval).collect::<Result<Vec<_>>>()?
        };
        Ok((rows, self.augment(&run)?))
    }

    pub fn current_frame(&self, seed: u64) -> Result<GroundTruthFrame> {
        let c = self.config;
        let scene = build_scene(seed, c.scene.n_objects, c.scene.n_timesteps, &c.scene)?;
        let rig = c.rig.build()?;
        let t0 = c.benchmark.current_step;
        let data = render_dataset(&scene, &rig, &[RigDelta::ZERO], &[t0], &self.raster)?;
        let Frame { images, depth } = frame_of(&data, 0, t0)?;
        Ok(GroundTruthFrame {
            rig: rig.in_world(&scene.ego[t0]),
            scene,
            images,
            depth,
        })
    }

    /// Synthesized current-step views for one scene and setting, for inspection.
    pub fn novel_views(&self, seed: u64, delta: &RigDelta) -> Result<Vec<Image>> {
        let run = self.prepare(seed)?;
        let t0 = self.config.benchmark.current_step;
        let world = run.rig.in_world(&run.scene.ego[t0]);
        let orig = frame_of(&run.original, 0, t0)?;
        Ok(self.pipeline(run.scene.config.sky).synthesize(&orig.images, &orig.depth, &world, delta)?.images)
    }
}

pub fn run_benchmark(config: &HarnessConfig) -> Result<BenchmarkReport> {
    config.validate()?;
    let h = Harness::new(config);
    let seeds = &config.benchmark.seeds;
    let per_scene: Vec<(Vec<BenchmarkRow>, AugmentationRow)> = if config.benchmark.parallel {
        seeds.par_iter().map(|s| h.run_scene(*s)).collect::<Result<_>>()?
    } else {
        seeds.iter().map(|s| h.run_scene(*s)).collect::<Result<_>>()?
    };
    let mut rows = Vec::new();
    let mut augmentation = Vec::new();
    for (r, a) in per_scene {
        rows.extend(r);
        augmentation.push(a);
    }
    Ok(BenchmarkReport {
        range_preset: config.ranges.preset.clone(),
        rows,
        augmentation,
    })
}

/// Runs the benchmark and writes `report.csv`, `summary.txt` and, when
/// enabled, PNGs of the synthesized views.
pub fn run_benchmark_to(config: &HarnessConfig, out_dir: &Path) -> Result<BenchmarkReport> {
    let report = run_benchmark(config)?;
    report.write(out_dir)?;
    if config.benchmark.write_pngs {
        let h = Harness::new(config);
        let dir = out_dir.join("renders");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for seed in &config.benchmark.seeds {
            for (name, d) in RIG_SETTINGS {
                for (i, im) in h.novel_views(*seed, &d)?.iter().enumerate() {
                    im.save_png(&dir.join(format!("scene{seed}_{name}_cam{i}.png")))?;
                }
            }
        }
    }
    Ok(report)
}
