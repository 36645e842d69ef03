//! Multi-scale feature pyramid shared by every proposal in an image.
//!
//! Level 0 is the (possibly 2x-upsampled) input; each following level
//! rescales by `2^(-1/scales_per_octave)` with bilinear resampling. The
//! ladder stops once the short side would drop below `min_dim` or the
//! interior grid could no longer hold a 6x6 template.
//!
//! Scale factors are absolute with respect to the original input, so a
//! box in input pixel coordinates maps to level pixels by plain
//! multiplication — including when the 2x upsampling rule (inputs smaller
//! than 80x80) fired.

use crate::error::{Error, Result};
use crate::featgrid::{compute_feature_grid, DescriptorConfig, FeatureGrid, TEMPLATE_CELLS};
use crate::geometry::BBox;
use crate::raster::RasterImage;
use crate::scalar::Real;

/// Inputs with both sides under this threshold are upsampled 2x first
/// (when enabled).
pub const UPSAMPLE_THRESHOLD: u32 = 80;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PyramidConfig {
    pub scales_per_octave: u32,
    /// Stop once the scaled short side would fall below this (>= 48).
    pub min_dim: u32,
    /// Apply the 2x rule for small inputs.
    pub upsample_small: bool,
    pub descriptor: DescriptorConfig,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig {
            scales_per_octave: 4,
            min_dim: 48,
            upsample_small: true,
            descriptor: DescriptorConfig::default(),
        }
    }
}

impl PyramidConfig {
    pub fn with_scales(scales_per_octave: u32) -> Self {
        PyramidConfig {
            scales_per_octave,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct PyramidLevel<T> {
    /// Absolute scale: level pixels per original-input pixel.
    pub scale: f64,
    pub grid: FeatureGrid<T>,
}

#[derive(Debug, Clone)]
pub struct FeaturePyramid<T> {
    pub levels: Vec<PyramidLevel<T>>,
    /// Whether the 2x upsampling rule fired for this input.
    pub upsampled: bool,
    /// Original input dimensions (before any upsampling).
    pub input_width: u32,
    pub input_height: u32,
    pub config: PyramidConfig,
}

/// Predicted shape of one pyramid level, derivable from the input
/// dimensions alone (no pixels needed).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelGeometry {
    /// Absolute scale: level pixels per original-input pixel.
    pub scale: f64,
    /// Resized source dimensions at this level.
    pub width: u32,
    pub height: u32,
    /// Interior feature-grid dimensions.
    pub rows: usize,
    pub cols: usize,
}

/// Level ladder a `width`x`height` input would produce: `(upsampled,
/// levels)`. This is the single source of truth for pyramid sizing;
/// [`build_pyramid`] follows it exactly, so callers can plan work (e.g.
/// enumerate scoring windows) without touching pixels.
pub fn plan_levels(cfg: &PyramidConfig, width: u32, height: u32) -> (bool, Vec<LevelGeometry>) {
    assert!(cfg.min_dim >= 48, "min_dim must be at least 48 px");
    assert!(cfg.scales_per_octave >= 1);

    let upsample =
        cfg.upsample_small && width < UPSAMPLE_THRESHOLD && height < UPSAMPLE_THRESHOLD;
    let (sw, sh, base_scale) = if upsample {
        (width * 2, height * 2, 2.0)
    } else {
        (width, height, 1.0)
    };

    let cell = cfg.descriptor.cell_size;
    let short = sw.min(sh) as f64;
    // A level supports a 6x6 template when floor(dim/cell) - 2 >= 6.
    let template_px = (TEMPLATE_CELLS + 2) as f64 * cell as f64;

    let mut levels = Vec::new();
    for i in 0.. {
        let rel = 2f64.powf(-(i as f64) / cfg.scales_per_octave as f64);
        if short * rel < cfg.min_dim as f64 {
            break;
        }
        let w = (sw as f64 * rel).round() as u32;
        let h = (sh as f64 * rel).round() as u32;
        if (w.min(h) as f64) < template_px {
            break;
        }
        levels.push(LevelGeometry {
            scale: base_scale * rel,
            width: w,
            height: h,
            rows: (h / cell) as usize - 2,
            cols: (w / cell) as usize - 2,
        });
    }
    (upsample, levels)
}

pub fn build_pyramid<T: Real>(
    img: &RasterImage<T>,
    cfg: &PyramidConfig,
) -> Result<FeaturePyramid<T>> {
    let (upsample, geometry) = plan_levels(cfg, img.width(), img.height());
    let source = if upsample {
        img.resize(img.width() * 2, img.height() * 2)
    } else {
        img.clone()
    };

    let mut levels = Vec::new();
    for (i, g) in geometry.iter().enumerate() {
        let resized = if i == 0 {
            source.clone()
        } else {
            source.resize(g.width, g.height)
        };
        let grid = compute_feature_grid(&resized, &cfg.descriptor)?;
        debug_assert_eq!((grid.rows(), grid.cols()), (g.rows, g.cols));
        levels.push(PyramidLevel {
            scale: g.scale,
            grid,
        });
    }

    if levels.is_empty() {
        let template_px = (TEMPLATE_CELLS as u32 + 2) * cfg.descriptor.cell_size;
        return Err(Error::ImageTooSmall {
            width: img.width(),
            height: img.height(),
            min: cfg.min_dim.max(template_px),
        });
    }

    Ok(FeaturePyramid {
        levels,
        upsampled: upsample,
        input_width: img.width(),
        input_height: img.height(),
        config: *cfg,
    })
}

/// One level's cell-aligned sub-grid covering a box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionView {
    pub level: usize,
    /// Absolute scale of that level.
    pub scale: f64,
    /// Top-left interior cell of the view.
    pub r0: usize,
    pub c0: usize,
    pub rows: usize,
    pub cols: usize,
}

/// Compute the per-level views of box `b` (input pixel coordinates).
///
/// The view is the outward-rounded cell coverage of the box shrunk by the
/// one-cell normalization margin, so a pixel-aligned 64x64 box at scale 1
/// yields exactly one 6x6 view whose response equals the descriptor of
/// that window. Levels whose view would be smaller than 6x6 cells are
/// omitted; if none remain the region cannot be featurized.
pub fn extract_region_views<T: Real>(
    pyr: &FeaturePyramid<T>,
    b: &BBox<f64>,
) -> Result<Vec<RegionView>> {
    if b.is_empty() {
        return Err(region_too_small(b));
    }
    let cell = pyr.config.descriptor.cell_size as f64;
    let mut views = Vec::new();
    for (li, level) in pyr.levels.iter().enumerate() {
        let px1 = b.x1 * level.scale / cell;
        let px2 = b.x2() * level.scale / cell;
        let py1 = b.y1 * level.scale / cell;
        let py2 = b.y2() * level.scale / cell;
        // Outward lattice coverage [floor(p1), ceil(p2)-1], minus the
        // margin ring, expressed in interior-cell indices.
        let c0 = px1.floor() as i64;
        let c1 = px2.ceil() as i64 - 3;
        let r0 = py1.floor() as i64;
        let r1 = py2.ceil() as i64 - 3;
        let grid = &level.grid;
        let c0 = c0.clamp(0, grid.cols() as i64 - 1);
        let c1 = c1.clamp(-1, grid.cols() as i64 - 1);
        let r0 = r0.clamp(0, grid.rows() as i64 - 1);
        let r1 = r1.clamp(-1, grid.rows() as i64 - 1);
        let cols = c1 - c0 + 1;
        let rows = r1 - r0 + 1;
        if rows < TEMPLATE_CELLS as i64 || cols < TEMPLATE_CELLS as i64 {
            continue;
        }
        views.push(RegionView {
            level: li,
            scale: level.scale,
            r0: r0 as usize,
            c0: c0 as usize,
            rows: rows as usize,
            cols: cols as usize,
        });
    }
    if views.is_empty() {
        return Err(region_too_small(b));
    }
    Ok(views)
}

fn region_too_small(b: &BBox<f64>) -> Error {
    Error::RegionTooSmall {
        x1: b.x1,
        y1: b.y1,
        w: b.w,
        h: b.h,
    }
}

/// Image-space pixel footprint of the 6x6 template window at view
/// position (r, c) of a level with absolute scale `scale`: the window
/// spans 8 lattice cells (64 px at the level) starting one cell before the
/// interior index.
pub fn window_footprint(r: usize, c: usize, cell_size: u32, scale: f64) -> BBox<f64> {
    let cell = cell_size as f64;
    let side = (TEMPLATE_CELLS + 2) as f64 * cell / scale;
    BBox::new(c as f64 * cell / scale, r as f64 * cell / scale, side, side)
}
