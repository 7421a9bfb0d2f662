//! `rigsplat`: render scenes under rig perturbations, check rasterizer
//! gradients and run the unseen-rig benchmark.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or config error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rigsplat::gaussians::GaussianSet;
use rigsplat::geometry::{sample_rig_delta, CameraRig, RigDelta, RigDeltaRange};
use rigsplat::harness::{build_scene, run_benchmark_to, HarnessConfig};
use rigsplat::image::{psnr, Image};
use rigsplat::rasterizer::gradcheck::{run_gradcheck, GradcheckConfig};
use rigsplat::rasterizer::{rasterize, rasterize_reference, RasterConfig};
use rigsplat::Error;

#[derive(Parser)]
#[command(name = "rigsplat", version, about = "Gaussian-splat rig perturbation toolkit")]
struct Cli {
    /// Print progress to stderr (repeat for more).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a scene through a (perturbed) rig to PNG and raw float files.
    Render(RenderArgs),
    /// Apply a rig delta to a rig file, or sample deltas from a range preset.
    Perturb(PerturbArgs),
    /// Compare analytic rasterizer gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Run the unseen-rig benchmark and write report.csv and summary.txt.
    Bench(BenchArgs),
}

#[derive(Args, Clone, Copy)]
struct DeltaArgs {
    /// Pitch change, degrees (positive looks up).
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    delta_pitch: f64,
    /// Mount height change, meters.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    delta_height: f64,
    /// Mount change along the forward axis, meters.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    delta_depth: f64,
}

impl DeltaArgs {
    fn delta(&self) -> RigDelta {
        RigDelta::new(self.delta_pitch, self.delta_height, self.delta_depth)
    }
}

#[derive(Args)]
struct RenderArgs {
    /// Seed of a synthetic harness scene.
    #[arg(long, conflicts_with = "scene")]
    seed: Option<u64>,
    /// Gaussian set file (binary) to render instead of a synthetic scene.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Rig file (TOML); defaults to the harness rig.
    #[arg(long)]
    rig: Option<PathBuf>,
    /// Harness config supplying scene and rig defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Timestep of a synthetic scene; defaults to `benchmark.current_step`.
    #[arg(long)]
    timestep: Option<usize>,
    #[command(flatten)]
    delta: DeltaArgs,
    /// Render through the brute-force reference rasterizer.
    #[arg(long)]
    reference: bool,
    /// Directory of `<camera>.rgbf` renders to report PSNR against.
    #[arg(long)]
    compare: Option<PathBuf>,
    #[arg(long, default_value = "render_out")]
    out: PathBuf,
}

#[derive(Args)]
struct PerturbArgs {
    /// Rig file (TOML); defaults to the harness rig.
    #[arg(long)]
    rig: Option<PathBuf>,
    #[command(flatten)]
    delta: DeltaArgs,
    /// Output rig file.
    #[arg(long, default_value = "rig_perturbed.toml")]
    out: PathBuf,
    /// Instead of applying a delta, print this many deltas sampled from `--rigs`.
    #[arg(long)]
    sample: Option<usize>,
    /// Range preset for `--sample`: default, superset or subset.
    #[arg(long, default_value = "default")]
    rigs: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Number of Gaussians in the random scene.
    #[arg(long, default_value_t = 8)]
    scene_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Image width and height in pixels.
    #[arg(long, default_value_t = 32)]
    resolution: usize,
    #[arg(long, default_value_t = 1)]
    sh_degree: usize,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
    /// Fault injection: scale analytic gradients by (1 + x); must fail.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    perturb_analytic: f64,
}

#[derive(Args)]
struct BenchArgs {
    /// Harness config (TOML); every section is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training range preset for the augmentation summary (`ranges.preset`).
    #[arg(long)]
    rigs: Option<String>,
    /// Evaluate this single scene seed (`benchmark.seeds`).
    #[arg(long)]
    seed: Option<u64>,
    /// In-range deltas per scene (`ranges.augment_samples`).
    #[arg(long)]
    augment_samples: Option<usize>,
    /// Also write PNGs of the synthesized views (`benchmark.write_pngs`).
    #[arg(long)]
    pngs: bool,
    #[arg(long, default_value = "bench_out")]
    out: PathBuf,
}

enum Failure {
    Verification(String),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Usage(_) | Error::Format(_) | Error::Io { .. } | Error::Image(_) => Failure::Usage(e.to_string()),
            other => Failure::Verification(other.to_string()),
        }
    }
}

type CliResult = Result<(), Failure>;

fn load_config(path: Option<&Path>) -> Result<HarnessConfig, Error> {
    match path {
        Some(p) => HarnessConfig::load(p),
        None => Ok(HarnessConfig::default()),
    }
}

fn cmd_render(args: &RenderArgs, verbose: u8) -> CliResult {
    let cfg = load_config(args.config.as_deref())?;
    let (set, rig, background) = match (&args.scene, args.seed) {
        (Some(path), _) => {
            let set = GaussianSet::load(path)?;
            let rig = match &args.rig {
                Some(p) => CameraRig::load(p)?,
                None => cfg.rig.build()?,
            };
            (set, rig, [0.0; 3])
        }
        (None, Some(seed)) => {
            let scene = build_scene(seed, cfg.scene.n_objects, cfg.scene.n_timesteps, &cfg.scene)?;
            let t = args.timestep.unwrap_or(cfg.benchmark.current_step);
            let set = scene.gaussians_at(t)?;
            let rig = match &args.rig {
                Some(p) => CameraRig::load(p)?,
                None => cfg.rig.build()?,
            };
            (set, rig.in_world(&scene.ego[t]), cfg.scene.sky)
        }
        (None, None) => return Err(Failure::Usage("render needs --seed or --scene".into())),
    };
    let rig = rig.perturbed(&args.delta.delta())?;
    std::fs::create_dir_all(&args.out).map_err(|e| Failure::Usage(format!("{}: {e}", args.out.display())))?;
    let raster = RasterConfig::default();
    for (name, cam) in rig.names.iter().zip(&rig.cameras) {
        let r = if args.reference {
            rasterize_reference(&set, cam, background, &raster)?
        } else {
            rasterize(&set, cam, background, &raster)?
        };
        r.color.save_png(&args.out.join(format!("{name}.png")))?;
        r.color.save_raw(&args.out.join(format!("{name}.rgbf")))?;
        if verbose > 0 {
            eprintln!("rendered {name} ({}x{}, {} gaussians)", cam.width(), cam.height(), set.len());
        }
        if let Some(dir) = &args.compare {
            let other = Image::load_raw(&dir.join(format!("{name}.rgbf")))?;
            let p = psnr(&r.color, &other)?;
            println!("{name}: psnr {}", if p.is_infinite() { "inf".to_string() } else { format!("{p:.3} dB") });
        }
    }
    println!("wrote {} camera(s) to {}", rig.len(), args.out.display());
    Ok(())
}

fn cmd_perturb(args: &PerturbArgs) -> CliResult {
    if let Some(n) = args.sample {
        let range = RigDeltaRange::preset(&args.rigs).ok_or_else(|| Failure::Usage(format!("unknown range preset '{}'", args.rigs)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        println!("pitch_deg,height_m,depth_m");
        for _ in 0..n {
            let d = sample_rig_delta(&mut rng, &range);
            println!("{:.9e},{:.9e},{:.9e}", d.pitch_deg, d.height_m, d.depth_m);
        }
        return Ok(());
    }
    let rig = match &args.rig {
        Some(p) => CameraRig::load(p)?,
        None => HarnessConfig::default().rig.build()?,
    };
    rig.perturbed(&args.delta.delta())?.save(&args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> CliResult {
    let cfg = GradcheckConfig {
        n_gaussians: args.scene_size,
        width: args.resolution,
        height: args.resolution,
        sh_degree: args.sh_degree,
        seed: args.seed,
        tolerance: args.tolerance,
        fault: args.perturb_analytic,
        ..GradcheckConfig::default()
    };
    if cfg.n_gaussians == 0 || cfg.width == 0 {
        return Err(Failure::Usage("--scene-size and --resolution must be positive".into()));
    }
    let report = run_gradcheck(&cfg)?;
    print!("{report}");
    if report.passed() {
        return Ok(());
    }
    let msg = match report.worst() {
        Some((g, w)) => format!(
            "gradient check failed; worst: parameter {}[{}][{}] analytic {:.6e} numeric {:.6e} rel_err {:.3e}",
            g.group.name(),
            w.primitive,
            w.component,
            w.analytic,
            w.numeric,
            g.max_rel_error
        ),
        None => "gradient check failed".into(),
    };
    Err(Failure::Verification(msg))
}

fn cmd_bench(args: &BenchArgs, verbose: u8) -> CliResult {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(p) = &args.rigs {
        cfg.ranges.preset = p.clone();
    }
    if let Some(s) = args.seed {
        cfg.benchmark.seeds = vec![s];
    }
    if let Some(n) = args.augment_samples {
        cfg.ranges.augment_samples = n;
    }
    cfg.benchmark.write_pngs |= args.pngs;
    cfg.validate().map_err(|e| match (&args.config, e) {
        (Some(p), Error::Config(m)) => Failure::Usage(format!("{}: {m}", p.display())),
        (_, e) => e.into(),
    })?;
    if verbose > 0 {
        eprintln!("benchmarking {} scene(s), range preset {}", cfg.benchmark.seeds.len(), cfg.ranges.preset);
    }
    let report = run_benchmark_to(&cfg, &args.out)?;
    print!("{}", report.summary());
    println!("wrote {}", args.out.join("report.csv").display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Render(a) => cmd_render(a, cli.verbose),
        Command::Perturb(a) => cmd_perturb(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Bench(a) => cmd_bench(a, cli.verbose),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
