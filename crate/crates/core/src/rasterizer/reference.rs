use rayon::prelude::*;

use super::{check_set, depth_sort, project_unculled, PixelAccum, RasterConfig, RenderTarget, Splat2D};
use crate::error::Result;
use crate::gaussians::GaussianSet;
use crate::geometry::Camera;
use crate::image::Image;

/// Brute-force oracle: every pixel composites every splat in front of the
/// near plane, in one global depth order, with no tiling, no footprint
/// culling and no early termination.
pub fn rasterize_reference(
    set: &GaussianSet,
    cam: &Camera,
    background: [f64; 3],
    cfg: &RasterConfig,
) -> Result<RenderTarget> {
    check_set(set, cam)?;
    let (width, height) = (cam.width(), cam.height());
    let mut splats: Vec<Splat2D> = set
        .primitives
        .iter()
        .enumerate()
        .filter_map(|(i, g)| project_unculled(g, i, cam, cfg))
        .collect();
    depth_sort(&mut splats);

    let render_row = |y: usize| -> Vec<([f64; 3], f64, f64)> {
        (0..width)
            .map(|x| {
                let mut p = PixelAccum::START;
                for s in &splats {
                    p.blend(s, s.power(x as f64, y as f64));
                }
                p.finish(&background, cfg.far_depth)
            })
            .collect()
    };
    let rows: Vec<_> = if cfg.parallel {
        (0..height).into_par_iter().map(render_row).collect()
    } else {
        (0..height).map(render_row).collect()
    };

    let mut color = Image::new(width, height, 3);
    let mut alpha = Vec::with_capacity(width * height);
    let mut depth = Vec::with_capacity(width * height);
    for (y, row) in rows.into_iter().enumerate() {
        for (x, (c, a, d)) in row.into_iter().enumerate() {
            let p = y * width + x;
            color.data[3 * p..3 * p + 3].copy_from_slice(&c);
            alpha.push(a);
            depth.push(d);
        }
    }
    Ok(RenderTarget {
        color,
        alpha,
        depth,
        background,
    })
}
