use rayon::prelude::*;

use super::{check_set, depth_sort, project_indexed, PixelAccum, RasterConfig, RenderTarget, Splat2D};
use crate::error::{Error, Result};
use crate::gaussians::GaussianSet;
use crate::geometry::Camera;
use crate::image::Image;

/// State saved by the forward pass for [`super::rasterize_backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub(crate) camera: Camera,
    pub(crate) config: RasterConfig,
    pub(crate) background: [f64; 3],
    pub(crate) n_primitives: usize,
    /// Visible splats in front-to-back order.
    pub(crate) splats: Vec<Splat2D>,
    /// Per tile, indices into `splats`, ascending (hence front to back).
    pub(crate) tiles: Vec<Vec<u32>>,
    pub(crate) tiles_x: usize,
}

impl ForwardCache {
    pub fn n_visible(&self) -> usize {
        self.splats.len()
    }

    pub(crate) fn tile_bounds(&self, tile: usize) -> (usize, usize, usize, usize) {
        tile_bounds(tile, self.tiles_x, self.config.tile_size, self.camera.width(), self.camera.height())
    }
}

fn tile_bounds(tile: usize, tiles_x: usize, ts: usize, width: usize, height: usize) -> (usize, usize, usize, usize) {
    let (tx, ty) = (tile % tiles_x, tile / tiles_x);
    let x0 = tx * ts;
    let y0 = ty * ts;
    (x0, (x0 + ts).min(width), y0, (y0 + ts).min(height))
}

/// Inclusive pixel span `[lo, hi]` of a footprint along one axis, clipped
/// to `[lo_bound, hi_bound)`. Empty when `lo > hi`.
#[inline]
pub(crate) fn footprint_span(center: f64, radius: f64, lo_bound: usize, hi_bound: usize) -> (isize, isize) {
    let lo = ((center - radius).ceil() as isize).max(lo_bound as isize);
    let hi = ((center + radius).floor() as isize).min(hi_bound as isize - 1);
    (lo, hi)
}

/// Inclusive pixel span of row `y` inside the footprint ellipse, clipped to
/// `[lo_bound, hi_bound)`. Forward and backward must agree on it exactly.
#[inline]
pub(crate) fn row_span(s: &Splat2D, y: f64, lo_bound: usize, hi_bound: usize) -> (isize, isize) {
    let dy = y - s.mean.y;
    let [a, b, c] = s.conic;
    let disc = b * b * dy * dy - a * (c * dy * dy + 2.0 * s.min_power);
    if !(disc >= 0.0) {
        return (1, 0);
    }
    let root = disc.sqrt();
    let lo = s.mean.x + (-b * dy - root) / a;
    let hi = s.mean.x + (-b * dy + root) / a;
    let lo = (lo.ceil() as isize).max(lo_bound as isize);
    let hi = (hi.floor() as isize).min(hi_bound as isize - 1);
    (lo, hi)
}

fn bin_splats(splats: &[Splat2D], cfg: &RasterConfig, width: usize, height: usize) -> (Vec<Vec<u32>>, usize) {
    let ts = cfg.tile_size;
    let tiles_x = width.div_ceil(ts);
    let tiles_y = height.div_ceil(ts);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (i, s) in splats.iter().enumerate() {
        let (x0, x1) = footprint_span(s.mean.x, s.radius[0], 0, width);
        let (y0, y1) = footprint_span(s.mean.y, s.radius[1], 0, height);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for ty in (y0 as usize / ts)..=(y1 as usize / ts) {
            for tx in (x0 as usize / ts)..=(x1 as usize / ts) {
                tiles[ty * tiles_x + tx].push(i as u32);
            }
        }
    }
    (tiles, tiles_x)
}

struct TileOutput {
    color: Vec<[f64; 3]>,
    alpha: Vec<f64>,
    depth: Vec<f64>,
}

fn render_tile(cache: &ForwardCache, tile: usize) -> TileOutput {
    let (x0, x1, y0, y1) = cache.tile_bounds(tile);
    let tw = x1 - x0;
    let n = tw * (y1 - y0);
    let mut acc = vec![PixelAccum::START; n];
    let mut done = vec![false; n];
    let mut row_active = vec![tw; y1 - y0];
    let mut active = n;
    let threshold = cache.config.transmittance_threshold;
    for &si in &cache.tiles[tile] {
        let s = &cache.splats[si as usize];
        let (py0, py1) = footprint_span(s.mean.y, s.radius[1], y0, y1);
        for y in py0..=py1 {
            let ry = y as usize - y0;
            if row_active[ry] == 0 {
                continue;
            }
            let (px0, px1) = row_span(s, y as f64, x0, x1);
            if px0 > px1 {
                continue;
            }
            // exp of a quadratic along the row: G(x+1) = G(x)·r(x), r(x+1) = r(x)·q
            let dx = px0 as f64 - s.mean.x;
            let dy = y as f64 - s.mean.y;
            let [a, b, _] = s.conic;
            let mut gauss = s.power(px0 as f64, y as f64).exp();
            let mut ratio = (-0.5 * a * (2.0 * dx + 1.0) - b * dy).exp();
            let row = ry * tw;
            for x in px0..=px1 {
                let i = row + (x as usize - x0);
                if !done[i] {
                    let p = &mut acc[i];
                    p.blend_gauss(s, gauss);
                    if p.transmittance < threshold {
                        done[i] = true;
                        row_active[ry] -= 1;
                        active -= 1;
                    }
                }
                gauss *= ratio;
                ratio *= s.row_decay;
            }
        }
        if active == 0 {
            break;
        }
    }
    let mut out = TileOutput {
        color: Vec::with_capacity(n),
        alpha: Vec::with_capacity(n),
        depth: Vec::with_capacity(n),
    };
    for p in &acc {
        let (c, a, d) = p.finish(&cache.background, cache.config.far_depth);
        out.color.push(c);
        out.alpha.push(a);
        out.depth.push(d);
    }
    out
}

/// Tiled forward pass that also returns the cache needed for gradients.
pub fn rasterize_with_cache(
    set: &GaussianSet,
    cam: &Camera,
    background: [f64; 3],
    cfg: &RasterConfig,
) -> Result<(RenderTarget, ForwardCache)> {
    check_set(set, cam)?;
    let (width, height) = (cam.width(), cam.height());
    let project = |(i, g)| project_indexed(g, i, cam, cfg);
    let mut splats: Vec<Splat2D> = if cfg.parallel {
        set.primitives.par_iter().enumerate().filter_map(project).collect()
    } else {
        set.primitives.iter().enumerate().filter_map(project).collect()
    };
    depth_sort(&mut splats);
    let (tiles, tiles_x) = bin_splats(&splats, cfg, width, height);
    let cache = ForwardCache {
        camera: *cam,
        config: *cfg,
        background,
        n_primitives: set.len(),
        splats,
        tiles,
        tiles_x,
    };

    let n_tiles = cache.tiles.len();
    let outputs: Vec<TileOutput> = if cfg.parallel {
        (0..n_tiles).into_par_iter().map(|t| render_tile(&cache, t)).collect()
    } else {
        (0..n_tiles).map(|t| render_tile(&cache, t)).collect()
    };

    let mut color = Image::new(width, height, 3);
    let mut alpha = vec![0.0; width * height];
    let mut depth = vec![0.0; width * height];
    for (t, out) in outputs.into_iter().enumerate() {
        let (x0, x1, y0, y1) = cache.tile_bounds(t);
        let tw = x1 - x0;
        for y in y0..y1 {
            for x in x0..x1 {
                let i = (y - y0) * tw + (x - x0);
                let p = y * width + x;
                color.data[3 * p..3 * p + 3].copy_from_slice(&out.color[i]);
                alpha[p] = out.alpha[i];
                depth[p] = out.depth[i];
            }
        }
    }
    Ok((
        RenderTarget {
            color,
            alpha,
            depth,
            background,
        },
        cache,
    ))
}

/// Tiled, early-terminating forward pass.
pub fn rasterize(set: &GaussianSet, cam: &Camera, background: [f64; 3], cfg: &RasterConfig) -> Result<RenderTarget> {
    rasterize_with_cache(set, cam, background, cfg).map(|(r, _)| r)
}

/// Stateful front end holding the single-use forward cache between a
/// forward and a backward call.
#[derive(Debug, Default)]
pub struct Rasterizer {
    pub config: RasterConfig,
    cache: Option<ForwardCache>,
}

impl Rasterizer {
    pub fn new(config: RasterConfig) -> Self {
        Self { config, cache: None }
    }

    pub fn forward(&mut self, set: &GaussianSet, cam: &Camera, background: [f64; 3]) -> Result<RenderTarget> {
        let (target, cache) = rasterize_with_cache(set, cam, background, &self.config)?;
        self.cache = Some(cache);
        Ok(target)
    }

    /// Consumes the cache left by the last [`Self::forward`].
    pub fn backward(&mut self, set: &GaussianSet, upstream: &Image) -> Result<super::GaussianGrads> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Usage("backward called without a preceding forward pass".into()))?;
        super::rasterize_backward(set, &cache, upstream)
    }
}
